"""Mesh simplification by quadric-error edge collapse.

Each vertex accumulates a 4x4 quadric summing squared distances to the
planes of its incident triangles (area-weighted). Collapsing edge (a, b)
to position p costs p'(Qa+Qb)p; candidates live in a lazy heap with
per-vertex version counters so stale entries are skipped rather than
updated in place. Boundary edges contribute a heavily weighted
perpendicular plane so open borders keep their shape.
"""

from __future__ import annotations

import heapq

import numpy as np

from .errors import DecimationError
from .mesh import TriMesh

BOUNDARY_PENALTY = 100.0


def decimate(mesh: TriMesh, target_n: int):
    """Collapse edges until at most ``target_n`` vertices remain.

    Parameters
    ----------
    mesh : TriMesh
    target_n : int
        Desired vertex count, at least 4 and at most n.

    Returns
    -------
    (TriMesh, ndarray)
        The simplified mesh and a length-n index map sending each original
        vertex to its surviving representative in the result.

    Raises
    ------
    DecimationError
        If ``target_n`` is out of range, or no legal collapse remains
        before the target is reached (legality: link condition, no face
        flips, no degenerate or duplicate faces).
    """
    n = mesh.n_vertices
    if target_n < 4:
        raise DecimationError(f"target_n must be at least 4, got {target_n}")
    if target_n > n:
        raise DecimationError(f"target_n {target_n} exceeds vertex count {n}")
    if target_n == n:
        return mesh, np.arange(n, dtype=np.int64)

    verts = mesh.vertices.copy()
    # Face connectivity as a mutable list; dead faces become None.
    faces: list = [tuple(f) for f in mesh.faces]
    vert_faces: list[set] = [set() for _ in range(n)]
    for fi, f in enumerate(faces):
        for v in f:
            vert_faces[v].add(fi)

    quadrics = _initial_quadrics(verts, mesh)

    # Union-find over collapsed vertices; parent[v] = v while v is alive.
    parent = np.arange(n, dtype=np.int64)

    def find(v: int) -> int:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    version = np.zeros(n, dtype=np.int64)
    alive = n
    heap: list = []
    ticket = 0  # tie-breaker so heap comparisons never reach the ndarray

    def neighbors(v: int) -> set:
        out = set()
        for fi in vert_faces[v]:
            out.update(faces[fi])
        out.discard(v)
        return out

    def push_edge(a: int, b: int) -> None:
        nonlocal ticket
        cost, p = _collapse_cost(quadrics[a] + quadrics[b], verts[a], verts[b])
        heapq.heappush(
            heap, (cost, ticket, a, b, int(version[a]), int(version[b]), p))
        ticket += 1

    def push_edges_of(v: int) -> None:
        for u in neighbors(v):
            push_edge(*((v, u) if v < u else (u, v)))

    for v in range(n):
        for u in neighbors(v):
            if v < u:
                push_edge(v, u)

    while alive > target_n:
        while heap:
            cost, _, a, b, va, vb, p = heapq.heappop(heap)
            if version[a] != va or version[b] != vb:
                continue
            if find(a) != a or find(b) != b:
                continue
            if _collapse_ok(a, b, p, verts, faces, vert_faces):
                break
        else:
            raise DecimationError(
                f"no legal collapse left at {alive} vertices (target {target_n})")

        # Collapse b into a at position p.
        verts[a] = p
        quadrics[a] = quadrics[a] + quadrics[b]
        parent[b] = a
        shared = vert_faces[a] & vert_faces[b]
        for fi in vert_faces[b]:
            if fi in shared:
                continue
            f = faces[fi]
            faces[fi] = tuple(a if v == b else v for v in f)
            vert_faces[a].add(fi)
        for fi in shared:
            for v in faces[fi]:
                if v != b:
                    vert_faces[v].discard(fi)
            faces[fi] = None
        vert_faces[b] = set()
        alive -= 1
        version[a] += 1
        version[b] += 1
        push_edges_of(a)

    # Compact the surviving vertices and faces.
    vertex_map = np.array([find(v) for v in range(n)], dtype=np.int64)
    survivors = np.unique(vertex_map)
    remap = np.full(n, -1, dtype=np.int64)
    remap[survivors] = np.arange(len(survivors))
    new_faces = []
    seen = set()
    for f in faces:
        if f is None:
            continue
        g = (remap[f[0]], remap[f[1]], remap[f[2]])
        key = tuple(sorted(g))
        if key in seen:
            continue
        seen.add(key)
        new_faces.append(g)
    out = TriMesh(verts[survivors], np.asarray(new_faces, dtype=np.int64))
    return out, remap[vertex_map]


def _initial_quadrics(verts: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Per-vertex 4x4 quadrics: area-weighted face planes + boundary planes."""
    n = len(verts)
    q = np.zeros((n, 4, 4))
    normals = mesh.face_normals
    areas = mesh.face_areas
    for fi, f in enumerate(mesh.faces):
        nrm = normals[fi]
        d = -float(nrm @ verts[f[0]])
        plane = np.array([nrm[0], nrm[1], nrm[2], d])
        kp = areas[fi] * np.outer(plane, plane)
        for v in f:
            q[v] += kp

    # Boundary edges get a perpendicular constraint plane on both endpoints.
    he: dict = {}
    for fi, f in enumerate(mesh.faces):
        for i in range(3):
            a, b = f[i], f[(i + 1) % 3]
            key = (a, b) if a < b else (b, a)
            cnt, _ = he.get(key, (0, fi))
            he[key] = (cnt + 1, fi)
    for (a, b), (count, fi) in he.items():
        if count != 1:
            continue
        edge = verts[b] - verts[a]
        elen = np.linalg.norm(edge)
        # Constraint plane: through the edge, perpendicular to its face.
        pn = np.cross(edge, normals[fi])
        norm = np.linalg.norm(pn)
        if norm < 1e-30:
            continue
        pn = pn / norm
        d = -float(pn @ verts[a])
        plane = np.array([pn[0], pn[1], pn[2], d])
        kp = BOUNDARY_PENALTY * elen * elen * np.outer(plane, plane)
        q[a] += kp
        q[b] += kp
    return q


def _collapse_cost(Q: np.ndarray, pa: np.ndarray, pb: np.ndarray):
    """Optimal collapse position for quadric Q, with midpoint fallback."""
    A = Q[:3, :3]
    rhs = -Q[:3, 3]
    try:
        p = np.linalg.solve(A, rhs)
        if not np.isfinite(p).all() or np.linalg.norm(p - pa) > 10 * (
                np.linalg.norm(pb - pa) + 1e-30):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        candidates = [0.5 * (pa + pb), pa, pb]
        costs = [_eval_quadric(Q, c) for c in candidates]
        i = int(np.argmin(costs))
        return costs[i], candidates[i]
    return _eval_quadric(Q, p), p


def _eval_quadric(Q: np.ndarray, p: np.ndarray) -> float:
    h = np.array([p[0], p[1], p[2], 1.0])
    return float(h @ Q @ h)


def _collapse_ok(a: int, b: int, p: np.ndarray, verts, faces, vert_faces) -> bool:
    """Link condition plus geometric guards for collapsing b into a at p."""
    ring_a = set()
    for fi in vert_faces[a]:
        ring_a.update(faces[fi])
    ring_b = set()
    for fi in vert_faces[b]:
        ring_b.update(faces[fi])
    ring_a.discard(a), ring_a.discard(b)
    ring_b.discard(a), ring_b.discard(b)
    shared_faces = vert_faces[a] & vert_faces[b]
    if not shared_faces:
        return False  # only collapse actual mesh edges
    # Link condition: common neighbors must be exactly the shared faces'
    # third vertices, otherwise the collapse pinches the surface.
    third = set()
    for fi in shared_faces:
        for v in faces[fi]:
            if v != a and v != b:
                third.add(v)
    if ring_a & ring_b != third:
        return False
    # Geometric guards on every surviving face around a and b.
    for fi in (vert_faces[a] | vert_faces[b]) - shared_faces:
        f = faces[fi]
        g = [p if v in (a, b) else verts[v] for v in f]
        e1 = g[1] - g[0]
        e2 = g[2] - g[0]
        new_n = np.cross(e1, e2)
        new_area = np.linalg.norm(new_n)
        if new_area < 1e-14:
            return False
        o = [verts[v] for v in f]
        old_n = np.cross(o[1] - o[0], o[2] - o[0])
        old_area = np.linalg.norm(old_n)
        if old_area > 1e-30 and (new_n @ old_n) / (new_area * old_area) < 0.0:
            return False  # normal flip
    return True
