"""Local descriptor construction and the multi-scale stack."""

import warnings

import numpy as np
import pytest

from cyclemap import ConfigError, TriMesh
from cyclemap import synth
from cyclemap.descriptor import multiscale_shot, shot, vertex_normals
from cyclemap.geodesy import geodesic_diameter


def quiet_shot(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return shot(*args, **kwargs)


def brute_shot_row(mesh, v, radius, bins):
    """Reference descriptor for one vertex: explicit loops, scalar branches."""
    pts = mesh.vertices
    normals = np.zeros_like(pts)
    for a, b, c in mesh.faces:
        cross = np.cross(pts[b] - pts[a], pts[c] - pts[a])
        for corner in (a, b, c):
            normals[corner] += 0.5 * cross
    for i in range(len(normals)):
        nrm = np.linalg.norm(normals[i])
        if nrm > 0:
            normals[i] /= nrm

    nbrs = []
    for j in range(len(pts)):
        d = np.linalg.norm(pts[j] - pts[v])
        if 1e-12 * radius < d <= radius:
            nbrs.append(j)
    assert len(nbrs) >= 5

    cov = np.zeros((3, 3))
    wsum = 0.0
    for j in nbrs:
        r = pts[j] - pts[v]
        w = radius - np.linalg.norm(r)
        cov += w * np.outer(r, r)
        wsum += w
    vals, vecs = np.linalg.eigh(cov / wsum)
    x, z = vecs[:, 2], vecs[:, 0]
    for axis in (x, z):
        pos = neg = 0
        total = 0.0
        for j in nbrs:
            p = (pts[j] - pts[v]) @ axis
            total += p
            if p >= 0:
                pos += 1
            else:
                neg += 1
        if pos < neg or (pos == neg and total < 0):
            axis *= -1.0
    y = np.cross(z, x)

    def hat(u, nseg, circular):
        f = u - 0.5
        i0 = int(np.floor(f))
        t = f - i0
        i1 = i0 + 1
        if circular:
            i0, i1 = i0 % nseg, i1 % nseg
        else:
            i0 = min(max(i0, 0), nseg - 1)
            i1 = min(max(i1, 0), nseg - 1)
        return [(i0, 1.0 - t), (i1, t)]

    histo = [0.0] * (32 * bins)
    for j in nbrs:
        r = pts[j] - pts[v]
        d = np.linalg.norm(r)
        lx, ly, lz = r @ x, r @ y, r @ z
        cosang = min(1.0, max(-1.0, normals[j] @ z))
        az = hat((np.arctan2(ly, lx) + np.pi) / (2 * np.pi) * 8, 8, True)
        el = hat(lz / d + 1.0, 2, False)
        rad = hat(d / radius * 2.0, 2, False)
        cb = hat((cosang + 1.0) / 2.0 * bins, bins, False)
        for ia, wa in az:
            for ie, we in el:
                for ir, wr in rad:
                    for ic, wc in cb:
                        sector = (ia * 2 + ie) * 2 + ir
                        histo[sector * bins + ic] += wa * we * wr * wc
    out = np.array(histo)
    return out / np.linalg.norm(out)


class TestVertexNormals:
    def test_sphere_normals_are_radial(self):
        m = synth.icosphere(2)
        vn = vertex_normals(m)
        radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
        cos = np.sum(vn * radial, axis=1)
        assert np.all(cos > np.cos(np.radians(2)))

    def test_flat_grid_points_up(self):
        vn = vertex_normals(synth.grid(8, 8))
        assert np.allclose(vn, [0.0, 0.0, 1.0], atol=1e-9)

    def test_rotation_equivariance(self):
        from scipy.spatial.transform import Rotation

        m = synth.bump_field(synth.icosphere(2), 0.2, seed=5)
        axis = np.array([0.2, 0.9, -0.4])
        axis /= np.linalg.norm(axis)
        rotated = synth.rotate(m, axis, 1.3, translation=(1.0, 2.0, 3.0))
        R = Rotation.from_rotvec(1.3 * axis).as_matrix()
        got = vertex_normals(m) @ R.T
        assert np.allclose(got, vertex_normals(rotated), atol=1e-9)

    def test_unit_rows(self):
        vn = vertex_normals(synth.icosphere(1))
        assert np.allclose(np.linalg.norm(vn, axis=1), 1.0, atol=1e-12)


class TestShot:
    def test_shape_and_norms(self):
        m = synth.bump_field(synth.icosphere(2), 0.2, seed=1)
        d = shot(m, 0.5, bins=11)
        assert d.shape == (m.n_vertices, 352)
        norms = np.linalg.norm(d, axis=1)
        assert np.all((norms == 0) | (np.abs(norms - 1.0) < 1e-6))
        assert d.min() >= 0.0
        assert np.isfinite(d).all()

    def test_padding_region_is_zero(self):
        m = synth.icosphere(1)
        d = quiet_shot(m, 1.0, bins=4, width=200)
        assert d.shape[1] == 200
        assert np.all(d[:, 32 * 4:] == 0)

    def test_matches_brute_force_oracle(self):
        m = synth.bump_field(synth.icosphere(2), 0.25, seed=2)
        d = shot(m, 0.6, bins=7, width=7 * 32)
        for v in (17, 101):
            ref = brute_shot_row(m, v, 0.6, bins=7)
            assert np.abs(d[v] - ref).max() < 1e-10

    def test_oracle_on_flat_grid(self):
        g = synth.grid(9, 9)
        d = quiet_shot(g, 0.3, bins=5, width=160)
        ref = brute_shot_row(g, 40, 0.3, bins=5)
        assert np.abs(d[40] - ref).max() < 1e-10

    def test_rigid_invariance(self):
        m = synth.bump_field(synth.icosphere(2), 0.2, seed=3)
        d = shot(m, 0.5)
        moved = synth.rotate(m, (0.3, 1.0, 0.2), 1.1,
                             translation=(0.5, -2.0, 1.0))
        assert np.abs(shot(moved, 0.5) - d).max() < 1e-5

    def test_sphere_orbit_vertices_share_marginals(self):
        # The 12 five-valence vertices of a subdivided icosphere have
        # exactly congruent neighborhoods. Their caps are 5-fold symmetric,
        # which leaves the tangent frame degenerate, so only the
        # azimuth-summed marginal is pinned down; it must agree tightly.
        s = synth.icosphere(3)
        bins = 11
        d = quiet_shot(s, 0.15 * np.pi, bins)
        counts = np.bincount(s.faces.ravel(), minlength=s.n_vertices)
        pent = np.flatnonzero(counts == 5)
        assert len(pent) == 12
        marg = d[pent, :32 * bins].reshape(12, 8, 2, 2, bins).sum(axis=1)
        assert np.abs(marg - marg[0]).max() < 1e-12

    def test_starved_vertices_warn_and_zero(self):
        g = synth.grid(5, 5)
        with pytest.warns(UserWarning, match="fewer than 5 neighbors"):
            d = shot(g, 1e-3)
        assert np.all(d == 0)

    def test_determinism(self):
        m = synth.bump_field(synth.icosphere(1), 0.3, seed=7)
        assert np.array_equal(shot(m, 0.8), shot(m, 0.8))

    def test_bad_arguments(self):
        m = synth.icosphere(1)
        with pytest.raises(ConfigError):
            shot(m, 0.0)
        with pytest.raises(ConfigError):
            shot(m, 1.0, bins=1)
        with pytest.raises(ConfigError):
            shot(m, 1.0, bins=11, width=300)


class TestMultiscale:
    def test_default_scales_are_geometric(self):
        m = synth.icosphere(1)
        st = multiscale_shot(m, radius_fraction=0.5)
        assert np.allclose(st.scales, [0.2, 0.355, 0.632, 1.125, 2.0],
                           atol=1e-3)
        ratios = st.scales[1:] / st.scales[:-1]
        assert np.allclose(ratios, ratios[0], rtol=1e-12)

    def test_single_scale_equals_plain_shot(self):
        m = synth.bump_field(synth.icosphere(1), 0.2, seed=4)
        diam = geodesic_diameter(m)
        st = multiscale_shot(m, m=1, lo=1.0, hi=1.0, radius_fraction=0.3)
        plain = shot(m, 0.3 * diam)
        assert np.array_equal(st.raw[:, 0, :], plain.astype(np.float32))

    def test_slice_equals_shot_of_scaled_mesh(self):
        m = synth.bump_field(synth.icosphere(1), 0.2, seed=6)
        diam = geodesic_diameter(m)
        st = multiscale_shot(m, m=3, lo=0.5, hi=2.0, radius_fraction=0.5)
        c = float(st.scales[1])
        ref = shot(m.scaled(c), 0.5 * diam, normals=vertex_normals(m))
        assert np.array_equal(st.raw[:, 1, :], ref.astype(np.float32))

    def test_stack_shape_and_dtype(self):
        m = synth.icosphere(1)
        st = multiscale_shot(m, m=2, lo=0.4, hi=1.0, radius_fraction=0.5,
                             bins=4, width=130)
        assert st.raw.shape == (42, 2, 130)
        assert st.raw.dtype == np.float32
        assert st.n == 42 and st.m == 2 and st.s == 130

    def test_rigid_invariance_of_stack(self):
        m = synth.bump_field(synth.icosphere(1), 0.25, seed=8)
        diam = geodesic_diameter(m)
        moved = synth.rotate(m, (1.0, 0.1, 0.5), 0.8, translation=(3.0, 0, 0))
        a = multiscale_shot(m, radius_fraction=0.5, diameter=diam)
        b = multiscale_shot(moved, radius_fraction=0.5, diameter=diam)
        assert np.abs(a.raw - b.raw).max() < 1e-5

    def test_determinism(self):
        m = synth.bump_field(synth.icosphere(1), 0.2, seed=9)
        a = multiscale_shot(m, radius_fraction=0.5)
        b = multiscale_shot(m, radius_fraction=0.5)
        assert np.array_equal(a.raw, b.raw)

    def test_bad_arguments(self):
        m = synth.icosphere(1)
        with pytest.raises(ConfigError):
            multiscale_shot(m, m=0)
        with pytest.raises(ConfigError):
            multiscale_shot(m, lo=0.0)
        with pytest.raises(ConfigError):
            multiscale_shot(m, lo=2.0, hi=1.0)
        with pytest.raises(ConfigError):
            multiscale_shot(m, m=1, lo=0.5, hi=2.0)
