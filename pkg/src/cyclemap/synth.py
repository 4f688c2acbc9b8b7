"""Procedural test shapes: icospheres, grids, and smooth deformations.

These generators stand in for scanned datasets at desk scale. Deformations
come in two flavors: near-isometric bends (cylindrical rolling, exactly
isometric for flat grids) and non-isometric local stretches (sinusoidal
radial scaling). Every function is deterministic given its arguments.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh

__all__ = [
    "icosphere",
    "grid",
    "bump_field",
    "bend",
    "stretch",
    "rotate",
    "sphere_pair",
    "grid_pair",
]


def icosphere(subdivisions: int, radius: float = 1.0) -> TriMesh:
    """Icosahedron subdivided ``subdivisions`` times, projected to a sphere.

    Vertex counts by level: 12, 42, 162, 642, 2562. Face counts quadruple
    from 20. Vertex order is deterministic: original icosahedron vertices
    first, then edge midpoints in creation order.
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be nonnegative")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    verts = [np.asarray(v, dtype=np.float64) for v in verts]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    # Normalize per level: midpoints must land on the sphere before the
    # next round splits them, or repeated subdivision skews the triangles.
    verts = [v / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            j = midpoint.get(key)
            if j is None:
                j = len(verts)
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                midpoint[key] = j
            return j

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.asarray(verts) * radius
    return TriMesh(v, np.asarray(faces, dtype=np.int64))


def grid(nx: int, ny: int, width: float = 1.0) -> TriMesh:
    """Flat triangulated grid of nx*ny vertices in the z=0 plane.

    Cell diagonals alternate direction in a checkerboard pattern, so every
    interior vertex sees diagonal edges in all four quadrants. This keeps
    the edge-graph shortest path within about 8% of the true planar
    distance in the worst direction, and triangle marching much closer.
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 vertices per side")
    hx = width / (nx - 1)
    hy = width / (ny - 1)
    xs = np.arange(nx) * hx
    ys = np.arange(ny) * hy
    v = np.zeros((nx * ny, 3))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    v[:, 0] = gx.ravel()
    v[:, 1] = gy.ravel()

    def vid(i, j):
        return i * ny + j

    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                faces += [(a, b, c), (a, c, d)]
            else:
                faces += [(a, b, d), (b, c, d)]
    return TriMesh(v, np.asarray(faces, dtype=np.int64))


def bump_field(mesh: TriMesh, amplitude: float, n_bumps: int = 6,
               sharpness: float = 4.0, seed: int = 0) -> TriMesh:
    """Displace vertices radially by a smooth random sum of Gaussian bumps.

    Each vertex p moves to c + (p-c)*(1 + amplitude*f(p̂)) where c is the
    centroid, p̂ the unit direction from c, and f a fixed-seed mixture of
    ``n_bumps`` spherical Gaussians with weights in [-1, 1].

    A perfectly regular icosphere has a large discrete symmetry group, and
    any descriptor built from local geometry alone is constant on its
    symmetry orbits, which makes self-correspondence ill-posed. A mild bump
    field breaks the symmetry while keeping the shape near-spherical, the
    same role asymmetry plays in articulated scan data.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    weights = rng.uniform(-1.0, 1.0, size=n_bumps)
    c = mesh.centroid
    d = mesh.vertices - c
    r = np.linalg.norm(d, axis=1, keepdims=True)
    u = d / r
    # f(u) in [-n_bumps, n_bumps] in principle, but effectively O(1).
    dots = u @ centers.T
    f = (weights * np.exp(sharpness * (dots - 1.0))).sum(axis=1)
    scale = 1.0 + amplitude * f
    return TriMesh(c + d * scale[:, None], mesh.faces)


def bend(mesh: TriMesh, bend_radius: float) -> TriMesh:
    """Roll the mesh around a cylinder of radius R along the x axis.

    (x, y, z) maps to ((z+R)·sin(x/R), y, (z+R)·cos(x/R) − R). Lengths
    along x scale by (z+R)/R, so the map is exactly isometric on the z=0
    plane and near-isometric when the shape is thin relative to R.
    """
    if bend_radius <= 0:
        raise ValueError("bend_radius must be positive")
    R = bend_radius
    x, y, z = mesh.vertices.T
    t = x / R
    v = np.column_stack([(z + R) * np.sin(t), y, (z + R) * np.cos(t) - R])
    return TriMesh(v, mesh.faces)


def stretch(mesh: TriMesh, amplitude: float, band=(1.0 / 3.0, 2.0 / 3.0),
            axis: int = 2) -> TriMesh:
    """Non-isometric local stretch: band elongation with a sinusoidal rate.

    The ``axis`` coordinate is remapped so the local stretch rate
    d(new)/d(old) equals 1 + amplitude·sin(π·s) inside ``band`` (s ∈ [0, 1]
    spans the band; t below keeps rate 1, t above is rigidly shifted),
    where t ∈ [0, 1] is the normalized position along the axis. Tangent
    directions aligned with the axis are stretched by up to ``amplitude``
    (30% metric distortion for 0.3) inside the band, the way a limb
    elongates without thickening; the rest of the surface moves rigidly
    or not at all.
    """
    coord = mesh.vertices[:, axis]
    lo, hi = coord.min(), coord.max()
    if hi <= lo:
        return TriMesh(mesh.vertices.copy(), mesh.faces)
    t = (coord - lo) / (hi - lo)
    b0, b1 = band
    if not 0.0 <= b0 < b1 <= 1.0:
        raise ValueError(f"band must satisfy 0 <= lo < hi <= 1, got {band}")
    s = np.clip((t - b0) / (b1 - b0), 0.0, 1.0)
    # antiderivative of the rate: t plus the accumulated extra length
    warped = t + amplitude * (b1 - b0) * (1.0 - np.cos(np.pi * s)) / np.pi
    out = mesh.vertices.copy()
    out[:, axis] = lo + warped * (hi - lo)
    return TriMesh(out, mesh.faces)


def rotate(mesh: TriMesh, axis, angle: float, translation=None) -> TriMesh:
    """Rigidly rotate about the origin (Rodrigues), then translate."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    v = mesh.vertices @ R.T
    if translation is not None:
        v = v + np.asarray(translation, dtype=np.float64)
    return TriMesh(v, mesh.faces)


def sphere_pair(subdivisions: int = 3, bump_amplitude: float = 0.15,
                bend_radius: float = 30.0, stretch_amplitude: float = 0.0,
                seed: int = 0):
    """A symmetry-broken icosphere and a deformed copy, identity-matched.

    The source is an icosphere with a bump field (see :func:`bump_field`
    for why the bumps are necessary). The target is the same shape bent
    around a wide cylinder (near-isometric) and optionally stretched
    (non-isometric), then rotated rigidly so the pair is not axis-aligned.

    Returns
    -------
    (TriMesh, TriMesh, ndarray)
        Source, target, and the ground-truth map (the identity, since the
        deformation preserves vertex order).
    """
    src = bump_field(icosphere(subdivisions), bump_amplitude, seed=seed)
    tgt = bend(src, bend_radius)
    if stretch_amplitude != 0.0:
        tgt = stretch(tgt, stretch_amplitude)
    tgt = rotate(tgt, axis=(1.0, 0.3, 0.2), angle=0.7)
    gt = np.arange(src.n_vertices, dtype=np.int64)
    return src, tgt, gt


def grid_pair(nx: int = 30, ny: int = 30, bend_radius: float = 0.8):
    """A flat grid and its exactly isometric bent copy, identity-matched."""
    src = grid(nx, ny)
    tgt = bend(src, bend_radius)
    gt = np.arange(src.n_vertices, dtype=np.int64)
    return src, tgt, gt
