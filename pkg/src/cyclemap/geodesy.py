"""Geodesic distances on triangle meshes and the map-evaluation metric.

Distances come from first-order fast marching: the front expands vertex by
vertex, and each triangle update places a planar virtual source behind the
opposite edge reproducing the two known distances, accepting the update
only when the straight source-to-vertex segment crosses that edge. Obtuse
corners are handled by unfolding the adjacent fan of triangles into the
plane until a virtual support splits the angle into acute parts. Plain
edge relaxations run alongside, so the result never exceeds the edge-graph
(Dijkstra) distance.
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from .errors import ConfigError, InvalidMeshError
from .mesh import TriMesh

# Meshes where more than this fraction of triangles is obtuse with a failing
# unfold walk get plain edge-graph distances instead; marching accuracy is
# not trustworthy on such tessellations.
OBTUSE_FALLBACK_FRACTION = 0.20
_UNFOLD_DEPTH = 16


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric geodesic distances over a vertex sample.

    ``values[i, j]`` is the distance between ``sample_indices[i]`` and
    ``sample_indices[j]``. The dense case has ``sample_indices == arange(n)``.
    """

    values: np.ndarray
    sample_indices: np.ndarray

    @property
    def p(self) -> int:
        return len(self.sample_indices)


@dataclass
class PointMap:
    """A vertex-to-vertex assignment X -> Y with optional confidences."""

    assignments: np.ndarray
    confidences: np.ndarray | None = None

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.confidences is not None:
            self.confidences = np.asarray(self.confidences, dtype=np.float64)
            if self.confidences.shape != self.assignments.shape:
                raise ConfigError("confidences length mismatch")

    def __len__(self) -> int:
        return len(self.assignments)


class Marcher:
    """Reusable fast-marching context for one mesh.

    Precomputes, per (face, corner), the 2D chart of the triangle with the
    opposite edge on the x-axis, plus adjacency for unfolding. Building
    this once and sweeping many sources is what distance_matrix does.
    """

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        v = mesh.vertices
        f = mesh.faces
        self.n = mesh.n_vertices
        self._v = v

        # Neighbor lists with edge lengths.
        nbrs: list[list] = [[] for _ in range(self.n)]
        seen = set()
        for a, b in mesh.edges:
            a, b = int(a), int(b)
            if (a, b) in seen:
                continue
            seen.add((a, b))
            length = float(np.linalg.norm(v[a] - v[b]))
            nbrs[a].append((b, length))
            nbrs[b].append((a, length))
        self.nbrs = nbrs

        # Edge -> incident faces, for unfolding.
        edge_faces: dict = {}
        for fid, (a, b, c) in enumerate(f):
            for u, w in ((a, b), (b, c), (c, a)):
                key = (u, w) if u < w else (w, u)
                edge_faces.setdefault(key, []).append(fid)
        self.edge_faces = edge_faces
        self.face_verts = [tuple(int(x) for x in row) for row in f]

        # Per (face, corner) chart records: corner c is the update target,
        # supports are the other two corners placed at (0,0) and (L,0).
        # Obtuse corners get their unfolded split precomputed (it depends
        # only on geometry), or None when the walk fails.
        self.faces_of: list[list] = [[] for _ in range(self.n)]
        recs = []
        n_obtuse_faces = 0
        n_failed_faces = 0
        for fid in range(len(f)):
            tri = []
            face_obtuse = False
            face_failed = False
            for c in range(3):
                ia = int(f[fid][(c + 1) % 3])
                ib = int(f[fid][(c + 2) % 3])
                ic = int(f[fid][c])
                A, B, C = v[ia], v[ib], v[ic]
                ab = B - A
                L = float(np.linalg.norm(ab))
                ac = C - A
                cx = float(ac @ ab) / L
                cy2 = float(ac @ ac) - cx * cx
                cy = math.sqrt(cy2) if cy2 > 0 else 0.0
                if cy <= 0:
                    raise InvalidMeshError(f"face {fid} is flat to precision")
                obtuse = float((A - C) @ (B - C)) < 0.0
                split = None
                if obtuse:
                    face_obtuse = True
                    split = self._find_split(ia, ib, L, cx, cy, fid)
                    face_failed = face_failed or split is None
                tri.append((ia, ib, L, cx, cy, split))
                self.faces_of[ic].append((fid, c))
            recs.append(tri)
            n_obtuse_faces += face_obtuse
            n_failed_faces += face_failed
        self.recs = recs
        self.obtuse_fraction = n_obtuse_faces / len(f)
        self.unfold_failure_fraction = n_failed_faces / len(f)

        # Strict-improvement threshold. Kept far below the 1e-9 slack the
        # Dijkstra-dominance property allows, even accumulated over long
        # relaxation chains.
        self._tol = 1e-13 * mesh.bbox_diagonal

    # -- geometry helpers ---------------------------------------------------

    @staticmethod
    def _pair_update(px, py, dp, qx, qy, dq, cx, cy):
        """Distance at C from a planar source reproducing dp at P, dq at Q.

        All points in chart coordinates. Returns +inf when the two circles
        do not meet or the source-to-C segment misses the open edge PQ.
        """
        ex, ey = qx - px, qy - py
        L2 = ex * ex + ey * ey
        if L2 <= 0.0:
            return math.inf
        L = math.sqrt(L2)
        ux, uy = ex / L, ey / L
        # C in the frame with P at the origin and Q on the +x axis.
        rx, ry = cx - px, cy - py
        fx = rx * ux + ry * uy
        fy = -rx * uy + ry * ux
        if fy == 0.0:
            return math.inf
        xs = (dp * dp - dq * dq + L2) / (2.0 * L)
        h2 = dp * dp - xs * xs
        if h2 < 0.0:
            return math.inf
        ys = -math.sqrt(h2) if fy > 0.0 else math.sqrt(h2)
        denom = fy - ys
        t = -ys / denom if denom != 0.0 else 0.0
        xcross = xs + t * (fx - xs)
        slack = 1e-9 * L
        if xcross < -slack or xcross > L + slack:
            return math.inf
        return math.hypot(fx - xs, fy - ys)

    def _face_across(self, a: int, b: int, not_fid: int):
        key = (a, b) if a < b else (b, a)
        for fid in self.edge_faces.get(key, ()):
            if fid != not_fid:
                return fid
        return None

    def _find_split(self, ia, ib, L, cx, cy, fid):
        """Unfold the fan opposite an obtuse corner until a vertex splits it.

        Walks triangle by triangle across the chart edge (a, b), flattening
        each new vertex into the plane, until one lands in the admissible
        cone and splits the obtuse angle at C into two acute supports. The
        walk descends into the sub-edge on the side where the cone still
        lies, visiting at most _UNFOLD_DEPTH faces. Purely geometric, so
        the result is cached per (face, corner).

        Returns (ia, ax, ay, im, mx, my, ib, bx, by) or None on failure.
        """
        ax, ay = 0.0, 0.0
        bx, by = L, 0.0
        px, py = cx, cy  # previous triangle's third point, for side choice
        cur = fid
        v = self._v
        for _ in range(_UNFOLD_DEPTH):
            nxt = self._face_across(ia, ib, cur)
            if nxt is None:
                return None
            fa, fb, fc = self.face_verts[nxt]
            im = fa + fb + fc - ia - ib
            ra = float(np.linalg.norm(v[im] - v[ia]))
            rb = float(np.linalg.norm(v[im] - v[ib]))
            ex, ey = bx - ax, by - ay
            L2 = ex * ex + ey * ey
            if L2 <= 0.0:
                return None
            Lab = math.sqrt(L2)
            x = (ra * ra - rb * rb + L2) / (2.0 * Lab)
            h2 = ra * ra - x * x
            h = math.sqrt(h2) if h2 > 0.0 else 0.0
            ux, uy = ex / Lab, ey / Lab
            side_prev = (px - ax) * (-uy) + (py - ay) * ux
            s = -1.0 if side_prev > 0.0 else 1.0
            mx = ax + x * ux + s * h * (-uy)
            my = ay + x * uy + s * h * ux
            # Directions from C to the three chart points.
            uax, uay = ax - cx, ay - cy
            ubx, uby = bx - cx, by - cy
            umx, umy = mx - cx, my - cy
            orient = uax * uby - uay * ubx
            in_a = (uax * umy - uay * umx) * orient >= 0.0
            in_b = (umx * uby - umy * ubx) * orient >= 0.0
            acute_a = uax * umx + uay * umy > 0.0
            acute_b = umx * ubx + umy * uby > 0.0
            if in_a and in_b and acute_a and acute_b:
                return (ia, ax, ay, im, mx, my, ib, bx, by)
            # Descend toward the side that still contains the cone.
            if (in_a and not acute_a) or not in_b:
                # Wedge (A, m) holds the cone: replace B by m.
                px, py = bx, by
                ib, bx, by = im, mx, my
            else:
                px, py = ax, ay
                ia, ax, ay = im, mx, my
            cur = nxt
        return None

    def _split_update(self, d, split, cx, cy):
        """Apply the two virtual-triangle updates of a precomputed split."""
        ia, ax, ay, im, mx, my, ib, bx, by = split
        dm = d[im]
        if not math.isfinite(dm):
            return math.inf
        best = math.inf
        da = d[ia]
        if math.isfinite(da):
            best = self._pair_update(ax, ay, da, mx, my, dm, cx, cy)
        db = d[ib]
        if math.isfinite(db):
            cand = self._pair_update(mx, my, dm, bx, by, db, cx, cy)
            if cand < best:
                best = cand
        return best

    # -- sweeps ---------------------------------------------------------------

    def distances(self, source: int) -> np.ndarray:
        """Geodesic distances from one source vertex to every vertex."""
        n = self.n
        if not 0 <= source < n:
            raise ConfigError(f"source index {source} out of range")
        d = [math.inf] * n
        d[source] = 0.0
        heap = [(0.0, source)]
        pop = heapq.heappop
        push = heapq.heappush
        nbrs = self.nbrs
        faces_of = self.faces_of
        recs = self.recs
        pair_update = self._pair_update
        tol = self._tol
        while heap:
            dv, vtx = pop(heap)
            if dv > d[vtx]:
                continue
            for u, length in nbrs[vtx]:
                nd = dv + length
                if nd < d[u] - tol:
                    d[u] = nd
                    push(heap, (nd, u))
            for fid, corner in faces_of[vtx]:
                # vtx is the corner here; it supports the other two corners.
                tri = recs[fid]
                for cc in range(3):
                    if cc == corner:
                        continue
                    ia, ib, L, cx, cy, split = tri[cc]
                    target = self.face_verts[fid][cc]
                    da, db = d[ia], d[ib]
                    cand = math.inf
                    if math.isfinite(da) and math.isfinite(db):
                        cand = pair_update(0.0, 0.0, da, L, 0.0, db, cx, cy)
                    if split is not None:
                        alt = self._split_update(d, split, cx, cy)
                        if alt < cand:
                            cand = alt
                    if cand < d[target] - tol:
                        d[target] = cand
                        push(heap, (cand, target))
        return np.asarray(d)


def fast_marching(mesh: TriMesh, source: int) -> np.ndarray:
    """One fast-marching sweep; see :class:`Marcher` for the method.

    Unreachable vertices keep +inf and trigger a warning.
    """
    out = Marcher(mesh).distances(source)
    n_inf = int(np.isinf(out).sum())
    if n_inf:
        warnings.warn(f"{n_inf} vertices unreachable from source {source}",
                      stacklevel=2)
    return out


def dijkstra_distances(mesh: TriMesh, sources) -> np.ndarray:
    """Edge-graph shortest paths (the upper-bound oracle for fast marching)."""
    e = mesh.edges
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    g = sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    return _csgraph_dijkstra(g, directed=False, indices=sources)


def distance_matrix(mesh: TriMesh, sample=None) -> DistanceMatrix:
    """Pairwise geodesic distances over ``sample`` (default: all vertices).

    One marching sweep per sample vertex, then symmetrized by averaging.
    Falls back to edge-graph distances, with a warning, when the mesh is
    dominated by obtuse triangles.
    """
    n = mesh.n_vertices
    if sample is None:
        sample = np.arange(n, dtype=np.int64)
    else:
        sample = np.asarray(sample, dtype=np.int64)
        if len(sample) == 0 or sample.min() < 0 or sample.max() >= n:
            raise ConfigError("sample indices out of range")
    marcher = Marcher(mesh)
    p = len(sample)
    D = np.empty((p, p))
    if marcher.unfold_failure_fraction > OBTUSE_FALLBACK_FRACTION:
        warnings.warn(
            f"{marcher.unfold_failure_fraction:.0%} of triangles are obtuse "
            "with no unfoldable support; using edge-graph distances",
            stacklevel=2)
        rows = dijkstra_distances(mesh, sample)
        D = rows[:, sample]
    else:
        for i, s in enumerate(sample):
            D[i] = marcher.distances(int(s))[sample]
    if np.isinf(D).any():
        warnings.warn("distance matrix contains unreachable pairs (+inf)",
                      stacklevel=2)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(values=D, sample_indices=sample)


def fps_sample(mesh: TriMesh, p: int, seed: int = 0) -> np.ndarray:
    """Farthest-point sampling under marching distance, in selection order."""
    n = mesh.n_vertices
    if not 1 <= p <= n:
        raise ConfigError(f"sample size {p} out of range [1, {n}]")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    marcher = Marcher(mesh)
    chosen = [first]
    mind = marcher.distances(first)
    for _ in range(p - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, marcher.distances(nxt))
    return np.asarray(chosen, dtype=np.int64)


def geodesic_diameter(mesh: TriMesh, n_samples: int = 8, seed: int = 0) -> float:
    """Estimated largest geodesic distance, from a farthest-point sample."""
    n_samples = min(n_samples, mesh.n_vertices)
    marcher = Marcher(mesh)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(mesh.n_vertices))
    mind = marcher.distances(first)
    diam = float(mind[np.isfinite(mind)].max())
    current = first
    for _ in range(n_samples - 1):
        nxt = int(np.argmax(np.where(np.isfinite(mind), mind, -1.0)))
        if nxt == current:
            break
        row = marcher.distances(nxt)
        diam = max(diam, float(row[np.isfinite(row)].max()))
        mind = np.minimum(mind, row)
        current = nxt
    return diam


@dataclass(frozen=True)
class GeodesicError:
    """Per-point map error, its mean, and its plain sum."""

    per_point: np.ndarray
    mean: float
    total: float


def geodesic_error(point_map: PointMap, gt: PointMap,
                   d_target: DistanceMatrix, area: float) -> GeodesicError:
    """Distance on the target between mapped and true matches, per point.

    Each error is D_Y(map(x), gt(x)) / sqrt(area); the normalization makes
    the number comparable across differently sized targets.
    """
    if len(point_map) != len(gt):
        raise ConfigError(
            f"map covers {len(point_map)} points, ground truth {len(gt)}")
    if area <= 0:
        raise ConfigError("target area must be positive")
    pos = -np.ones(int(d_target.sample_indices.max()) + 1, dtype=np.int64)
    pos[d_target.sample_indices] = np.arange(d_target.p)

    def locate(idx, name):
        if idx.min() < 0 or idx.max() >= len(pos) or (pos[idx] < 0).any():
            raise ConfigError(f"{name} references vertices outside the "
                              "distance-matrix sample")
        return pos[idx]

    a = locate(point_map.assignments, "map")
    b = locate(gt.assignments, "ground truth")
    per_point = d_target.values[a, b] / math.sqrt(area)
    return GeodesicError(per_point=per_point, mean=float(per_point.mean()),
                         total=float(per_point.sum()))


def cumulative_curve(errors, thresholds) -> np.ndarray:
    """Fraction of points with error at most t, for each threshold t."""
    errors = np.asarray(errors, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(thresholds) == 0:
        return np.zeros(0)
    if np.any(np.diff(thresholds) < 0):
        raise ConfigError("thresholds must be ascending")
    return (errors[:, None] <= thresholds[None, :]).mean(axis=0)
