"""Triangle-mesh representation, validation, and area-based normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import InvalidMeshError

# A face whose area falls below this fraction of the total surface is
# considered degenerate and rejected at construction time.
DEGENERATE_AREA_FRACTION = 1e-12


class TriMesh:
    """An immutable triangle mesh.

    Parameters
    ----------
    vertices : array_like
        (n, 3) float coordinates.
    faces : array_like
        (f, 3) integer indices into ``vertices``. Every face must have three
        distinct, in-range indices and non-negligible area.

    Notes
    -----
    Vertex and face arrays are copied and marked read-only; derived
    quantities (areas, normals) are computed lazily and cached. Instances
    are therefore safe to share across threads.
    """

    def __init__(self, vertices, faces):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        f = np.ascontiguousarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidMeshError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise InvalidMeshError(f"faces must be (f, 3), got {f.shape}")
        if v.shape[0] == 0 or f.shape[0] == 0:
            raise InvalidMeshError("empty mesh (no vertices or no faces)")
        if not np.isfinite(v).all():
            raise InvalidMeshError("non-finite vertex coordinate")
        n = v.shape[0]
        if f.min() < 0 or f.max() >= n:
            bad = int(np.flatnonzero((f < 0) | (f >= n)).flat[0] // 3)
            raise InvalidMeshError(
                f"face {bad} references vertex index outside [0, {n})"
            )
        same = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if same.any():
            raise InvalidMeshError(
                f"face {int(np.flatnonzero(same)[0])} has repeated vertex indices"
            )
        self._v = v
        self._f = f
        self._v.flags.writeable = False
        self._f.flags.writeable = False
        areas = self.face_areas
        total = float(areas.sum())
        if total <= 0.0 or (areas <= DEGENERATE_AREA_FRACTION * total).any():
            bad = int(np.argmin(areas))
            raise InvalidMeshError(f"face {bad} is geometrically degenerate")

    @property
    def vertices(self) -> np.ndarray:
        """(n, 3) read-only vertex coordinates."""
        return self._v

    @property
    def faces(self) -> np.ndarray:
        """(f, 3) read-only vertex indices."""
        return self._f

    @property
    def n_vertices(self) -> int:
        return self._v.shape[0]

    @property
    def n_faces(self) -> int:
        return self._f.shape[0]

    @property
    def face_areas(self) -> np.ndarray:
        """(f,) triangle areas."""
        try:
            return self._face_areas
        except AttributeError:
            cross = self._face_cross()
            self._face_areas = 0.5 * np.linalg.norm(cross, axis=1)
            self._face_areas.flags.writeable = False
            return self._face_areas

    @property
    def face_normals(self) -> np.ndarray:
        """(f, 3) unit face normals (right-hand rule on vertex order)."""
        try:
            return self._face_normals
        except AttributeError:
            cross = self._face_cross()
            norms = np.linalg.norm(cross, axis=1, keepdims=True)
            self._face_normals = cross / norms
            self._face_normals.flags.writeable = False
            return self._face_normals

    @property
    def vertex_areas(self) -> np.ndarray:
        """(n,) barycentric vertex masses: one third of incident face areas.

        Strictly positive for every referenced vertex and summing exactly to
        the total surface area. Unreferenced vertices would get zero mass,
        but construction already requires faces, and meshes produced by this
        package reference every vertex.
        """
        try:
            return self._vertex_areas
        except AttributeError:
            va = np.zeros(self.n_vertices)
            third = self.face_areas / 3.0
            for c in range(3):
                np.add.at(va, self._f[:, c], third)
            self._vertex_areas = va
            self._vertex_areas.flags.writeable = False
            return self._vertex_areas

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    @property
    def edges(self) -> np.ndarray:
        """(e, 2) unique undirected edges, each sorted, lexicographic order."""
        try:
            return self._edges
        except AttributeError:
            he = np.vstack([self._f[:, [0, 1]], self._f[:, [1, 2]], self._f[:, [2, 0]]])
            he.sort(axis=1)
            self._edges = np.unique(he, axis=0)
            self._edges.flags.writeable = False
            return self._edges

    @property
    def centroid(self) -> np.ndarray:
        """Area-weighted centroid of the surface."""
        fc = self._v[self._f].mean(axis=1)
        w = self.face_areas
        return (fc * w[:, None]).sum(axis=0) / w.sum()

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self._v.max(axis=0) - self._v.min(axis=0)))

    def scaled(self, factor: float, about=None) -> "TriMesh":
        """Uniformly scaled copy. ``about`` defaults to the origin."""
        if about is None:
            return TriMesh(self._v * factor, self._f)
        about = np.asarray(about, dtype=np.float64)
        return TriMesh(about + factor * (self._v - about), self._f)

    def _face_cross(self) -> np.ndarray:
        p = self._v[self._f]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def __repr__(self):
        return f"TriMesh(n_vertices={self.n_vertices}, n_faces={self.n_faces})"


@dataclass(frozen=True)
class MeshReport:
    """Structural summary produced by :func:`validate`."""

    n_vertices: int
    n_faces: int
    n_boundary_edges: int
    n_nonmanifold_edges: int
    n_connected_components: int
    is_watertight: bool


def validate(mesh: TriMesh) -> MeshReport:
    """Report boundary/non-manifold edges and connected components.

    This never rejects a mesh; it only counts. An edge with exactly one
    incident face is a boundary edge, one with three or more is
    non-manifold. Components are counted over the vertex adjacency graph,
    so an isolated (unreferenced) vertex counts as its own component.
    """
    he = np.vstack([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    he.sort(axis=1)
    edges, counts = np.unique(he, axis=0, return_counts=True)
    n_boundary = int((counts == 1).sum())
    n_nonmanifold = int((counts >= 3).sum())
    n = mesh.n_vertices
    adj = sparse.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)
    )
    n_comp, _ = connected_components(adj, directed=False)
    return MeshReport(
        n_vertices=n,
        n_faces=mesh.n_faces,
        n_boundary_edges=n_boundary,
        n_nonmanifold_edges=n_nonmanifold,
        n_connected_components=int(n_comp),
        is_watertight=(n_boundary == 0 and n_nonmanifold == 0),
    )


def normalize_unit_area(mesh: TriMesh) -> TriMesh:
    """Rescale a mesh about its centroid so the total surface area is 1.

    Returns
    -------
    TriMesh
        A uniformly scaled copy with ``total_area`` equal to 1 within 1e-9.
    """
    area = mesh.total_area
    if area <= 0.0:
        raise InvalidMeshError("cannot normalize a zero-area mesh")
    return mesh.scaled(1.0 / np.sqrt(area), about=mesh.centroid)
