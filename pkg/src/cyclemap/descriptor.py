"""Per-vertex local shape descriptors and the multi-scale stack fed to the network.

The descriptor is a histogram-of-normal-angles signature: around each vertex
a local reference frame is built from the weighted covariance of its
Euclidean neighborhood, the support sphere is cut into 32 spatial sectors
(8 azimuth x 2 elevation x 2 radial), and each sector holds a histogram of
the cosine of the angle between neighbor normals and the frame's z axis.
Contributions are soft-binned quadrilinearly across all four coordinates so
the signature varies smoothly with the geometry.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .geodesy import geodesic_diameter
from .mesh import TriMesh

DEFAULT_BINS = 11
DEFAULT_WIDTH = 352
MIN_SUPPORT = 5

AZIMUTH_SECTORS = 8
ELEVATION_SECTORS = 2
RADIAL_SECTORS = 2


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """(n, 3) unit vertex normals, the area-weighted mean of incident face
    normals. Vertices belonging to no face get a zero row."""
    weighted = mesh.face_normals * mesh.face_areas[:, None]
    out = np.zeros((mesh.n_vertices, 3))
    np.add.at(out, mesh.faces.ravel(), np.repeat(weighted, 3, axis=0))
    norms = np.linalg.norm(out, axis=1)
    ok = norms > 0
    out[ok] /= norms[ok, None]
    return out


@dataclass(frozen=True)
class DescriptorStack:
    """Raw multi-scale descriptors for one mesh.

    Attributes
    ----------
    raw : ndarray of shape (n, m, s), float32
        Descriptor of length s per vertex per scale. float32 matches the
        on-disk cache encoding, so a run fed from cache sees the same bits
        as the run that produced it.
    scales : ndarray of shape (m,)
        Mesh scale factor of each slice.
    radius_fraction : float
        Support radius used, as a fraction of the geodesic diameter of the
        unscaled mesh.
    """

    raw: np.ndarray
    scales: np.ndarray
    radius_fraction: float

    @property
    def n(self) -> int:
        return self.raw.shape[0]

    @property
    def m(self) -> int:
        return self.raw.shape[1]

    @property
    def s(self) -> int:
        return self.raw.shape[2]


def _reference_frame(rel, dist, radius):
    """Local frame from the (radius - d)-weighted covariance of the offsets.

    Eigenvector signs are ambiguous, so x and z each point toward the side
    holding the majority of neighbors; an exact tie falls back to the sign
    of the summed projection, and a zero sum keeps the solver's sign.
    """
    w = radius - dist
    cov = (rel * w[:, None]).T @ rel / w.sum()
    _, vecs = np.linalg.eigh(cov)
    x = vecs[:, 2]
    z = vecs[:, 0]
    for axis in (x, z):
        proj = rel @ axis
        n_pos = int(np.count_nonzero(proj >= 0.0))
        n_neg = proj.size - n_pos
        if n_pos < n_neg or (n_pos == n_neg and proj.sum() < 0.0):
            axis *= -1.0
    y = np.cross(z, x)
    return x, y, z


def _axis_coords(u, nseg, circular):
    """Hat-function weights of the two nearest bin centers along one axis.

    Centers sit at i + 0.5 for i in [0, nseg). Outside bins clamp to the
    edge on ordinary axes and wrap on circular ones.
    """
    f = u - 0.5
    i0 = np.floor(f)
    t = f - i0
    i0 = i0.astype(np.int64)
    i1 = i0 + 1
    if circular:
        i0 %= nseg
        i1 %= nseg
    else:
        i0 = np.clip(i0, 0, nseg - 1)
        i1 = np.clip(i1, 0, nseg - 1)
    return (i0, i1), (1.0 - t, t)


def shot(mesh: TriMesh, radius: float, bins: int = DEFAULT_BINS, *,
         width: int = DEFAULT_WIDTH, normals=None) -> np.ndarray:
    """Histogram-of-normal-angles descriptor for every vertex.

    Parameters
    ----------
    mesh : TriMesh
        Surface to describe.
    radius : float
        Support radius; neighbors are gathered by Euclidean distance.
    bins : int
        Cosine divisions per spatial sector. The used descriptor length is
        ``32 * bins``.
    width : int
        Output row length; the descriptor is zero-padded up to it. Must be
        at least ``32 * bins``.
    normals : ndarray of shape (n, 3), optional
        Precomputed unit vertex normals (they are scale invariant, so
        multi-scale evaluation reuses one set).

    Returns
    -------
    desc : ndarray of shape (n, width), float64
        One descriptor per vertex, each L2-normalized or all-zero.

    Notes
    -----
    A vertex with fewer than 5 neighbors inside the support keeps a zero
    descriptor; one warning reports how many vertices were starved.
    """
    if radius <= 0:
        raise ConfigError(f"support radius must be positive, got {radius}")
    if bins < 2:
        raise ConfigError(f"need at least 2 cosine bins, got {bins}")
    used = 32 * bins
    if width < used:
        raise ConfigError(f"width {width} cannot hold 32*{bins} = {used} values")
    if normals is None:
        normals = vertex_normals(mesh)

    pts = mesh.vertices
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, radius)

    desc = np.zeros((mesh.n_vertices, width))
    starved = 0
    for v in range(mesh.n_vertices):
        idx = np.sort(np.asarray(neighborhoods[v], dtype=np.int64))
        rel = pts[idx] - pts[v]
        dist = np.linalg.norm(rel, axis=1)
        keep = dist > 1e-12 * radius
        idx, rel, dist = idx[keep], rel[keep], dist[keep]
        if idx.size < MIN_SUPPORT:
            starved += 1
            continue

        x, y, z = _reference_frame(rel, dist, radius)
        lx, ly, lz = rel @ x, rel @ y, rel @ z
        cosang = np.clip(normals[idx] @ z, -1.0, 1.0)

        az_i, az_w = _axis_coords(
            (np.arctan2(ly, lx) + np.pi) / (2.0 * np.pi) * AZIMUTH_SECTORS,
            AZIMUTH_SECTORS, circular=True)
        el_i, el_w = _axis_coords(lz / dist + 1.0, ELEVATION_SECTORS,
                                  circular=False)
        rad_i, rad_w = _axis_coords(dist / radius * RADIAL_SECTORS,
                                    RADIAL_SECTORS, circular=False)
        cos_i, cos_w = _axis_coords((cosang + 1.0) * 0.5 * bins, bins,
                                    circular=False)

        slots = []
        weights = []
        for ka in range(2):
            for ke in range(2):
                for kr in range(2):
                    sector = (az_i[ka] * ELEVATION_SECTORS + el_i[ke]) \
                        * RADIAL_SECTORS + rad_i[kr]
                    w_spatial = az_w[ka] * el_w[ke] * rad_w[kr]
                    for kc in range(2):
                        slots.append(sector * bins + cos_i[kc])
                        weights.append(w_spatial * cos_w[kc])
        acc = np.bincount(np.concatenate(slots),
                          weights=np.concatenate(weights), minlength=used)
        norm = np.linalg.norm(acc)
        if norm > 0:
            desc[v, :used] = acc / norm

    if starved:
        warnings.warn(f"{starved} of {mesh.n_vertices} vertices had fewer "
                      f"than {MIN_SUPPORT} neighbors within the descriptor "
                      "support and keep zero descriptors")
    return desc


def multiscale_shot(mesh: TriMesh, m: int = 5, lo: float = 0.2,
                    hi: float = 2.0, radius_fraction: float = 0.05,
                    bins: int = DEFAULT_BINS, *, width: int = DEFAULT_WIDTH,
                    diameter: float = None) -> DescriptorStack:
    """Descriptor stack over m geometrically spaced copies of the mesh.

    The support radius is fixed in absolute terms (``radius_fraction`` times
    the geodesic diameter of the unscaled mesh) while the mesh itself is
    scaled, so every slice sees a different fraction of the shape: small
    scale factors widen the effective support, large ones narrow it.

    Parameters
    ----------
    mesh : TriMesh
        Surface to describe.
    m : int
        Number of scales.
    lo, hi : float
        Scale range, spaced geometrically. Equal values are allowed when
        m == 1.
    radius_fraction : float
        Support radius as a fraction of the geodesic diameter.
    bins, width : int
        Forwarded to :func:`shot`.
    diameter : float, optional
        Precomputed geodesic diameter of ``mesh``, to skip the estimate.

    Returns
    -------
    DescriptorStack
        raw has shape (n, m, 32*bins zero-padded to width), float32.
    """
    if m < 1:
        raise ConfigError(f"need at least one scale, got m={m}")
    if not 0 < lo <= hi:
        raise ConfigError(f"scale range must satisfy 0 < lo <= hi, got "
                          f"[{lo}, {hi}]")
    if lo < hi and m == 1:
        raise ConfigError("a single scale needs lo == hi")
    scales = np.geomspace(lo, hi, m)
    if diameter is None:
        diameter = geodesic_diameter(mesh)
    radius = radius_fraction * diameter
    normals = vertex_normals(mesh)

    raw = np.empty((mesh.n_vertices, m, width), dtype=np.float32)
    for j, c in enumerate(scales):
        raw[:, j, :] = shot(mesh.scaled(float(c)), radius, bins,
                            width=width, normals=normals)
    return DescriptorStack(raw=raw, scales=scales,
                           radius_fraction=radius_fraction)
