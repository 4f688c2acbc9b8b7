"""Shape-cache round trips, determinism, and corruption detection."""

import struct

import numpy as np
import pytest

from cyclemap.cache import (
    SECTION_ORDER,
    ShapeCache,
    _encode_array,
    encode_sections,
    load_cache,
    read_sections,
    save_cache,
    save_sections,
)
from cyclemap.errors import CacheError
from cyclemap.descriptor import multiscale_shot
from cyclemap.geodesy import distance_matrix, fps_sample
from cyclemap.spectral import cotan_laplacian, eigenbasis
from cyclemap import synth

SHA = "ab" * 32

FINGERPRINTS = {
    "mesh": {"source_sha": SHA, "target_n": 0},
    "spectral": {"k": 6},
    "descriptor": {"scales": 2, "lo": 0.5, "hi": 1.0, "bins": 2,
                   "width": 64, "radius_fraction": 0.3},
    "distance": {"samples": 0},
}


@pytest.fixture(scope="module")
def cache():
    mesh = synth.icosphere(1)
    basis = eigenbasis(cotan_laplacian(mesh), 6)
    stack = multiscale_shot(mesh, m=2, lo=0.5, hi=1.0, radius_fraction=0.3,
                            bins=2, width=64)
    dist = distance_matrix(mesh)
    return ShapeCache(source_sha=SHA, mesh=mesh,
                      vertex_map=np.arange(mesh.n_vertices),
                      basis=basis, stack=stack, dist=dist,
                      fingerprints=FINGERPRINTS)


@pytest.fixture()
def saved(cache, tmp_path):
    path = tmp_path / "shape.cysh"
    save_cache(cache, path)
    return path


def section_offsets(path):
    """Byte offset of each section payload in the written file."""
    sections = read_sections(path)
    head = 12
    table = head + sum(2 + len(n) + 20 for n in SECTION_ORDER)
    offsets = {}
    pos = table
    for name in SECTION_ORDER:
        offsets[name] = (pos, len(sections[name]))
        pos += len(sections[name])
    return offsets


class TestRoundTrip:
    def test_everything_comes_back(self, cache, saved):
        loaded = load_cache(saved)
        assert loaded.source_sha == SHA
        assert loaded.fingerprints == FINGERPRINTS
        assert np.array_equal(loaded.mesh.vertices, cache.mesh.vertices)
        assert np.array_equal(loaded.mesh.faces, cache.mesh.faces)
        assert np.array_equal(loaded.vertex_map, cache.vertex_map)
        assert np.array_equal(loaded.basis.eigenvalues,
                              cache.basis.eigenvalues)
        assert np.array_equal(loaded.basis.eigenfunctions,
                              cache.basis.eigenfunctions)
        assert np.array_equal(loaded.basis.mass, cache.basis.mass)
        assert np.array_equal(loaded.stack.raw, cache.stack.raw)
        assert loaded.stack.raw.dtype == np.float32
        assert np.array_equal(loaded.stack.scales, cache.stack.scales)
        assert loaded.stack.radius_fraction == 0.3
        assert np.array_equal(loaded.dist.sample_indices,
                              cache.dist.sample_indices)

    def test_distances_stored_f32_widened_f64(self, cache, saved):
        loaded = load_cache(saved)
        assert loaded.dist.values.dtype == np.float64
        expected = cache.dist.values.astype(np.float32).astype(np.float64)
        assert np.array_equal(loaded.dist.values, expected)

    def test_bases_keep_full_precision(self, cache, saved):
        loaded = load_cache(saved)
        assert loaded.basis.eigenfunctions.dtype == np.float64
        assert np.array_equal(loaded.basis.eigenfunctions,
                              cache.basis.eigenfunctions)

    def test_sampled_distance_matrix(self, cache, tmp_path):
        sample = fps_sample(cache.mesh, 10)
        dist = distance_matrix(cache.mesh, sample=sample)
        partial = ShapeCache(source_sha=SHA, mesh=cache.mesh,
                             vertex_map=cache.vertex_map, basis=cache.basis,
                             stack=cache.stack, dist=dist,
                             fingerprints=FINGERPRINTS)
        path = tmp_path / "partial.cysh"
        save_cache(partial, path)
        loaded = load_cache(path)
        assert np.array_equal(loaded.dist.sample_indices, sample)
        assert loaded.dist.values.shape == (10, 10)

    def test_context_view(self, cache, saved):
        ctx = load_cache(saved).context()
        assert ctx.mesh.n_vertices == cache.mesh.n_vertices
        assert ctx.basis.eigenfunctions.shape == (42, 6)
        assert ctx.stack.m == 2 and ctx.stack.s == 64
        assert ctx.dist.values.shape == (42, 42)


class TestDeterminism:
    def test_same_contents_same_bytes(self, cache, tmp_path):
        a, b = tmp_path / "a.cysh", tmp_path / "b.cysh"
        save_cache(cache, a)
        save_cache(cache, b)
        assert a.read_bytes() == b.read_bytes()

    def test_save_load_save_identical(self, cache, saved, tmp_path):
        again = tmp_path / "again.cysh"
        save_cache(load_cache(saved), again)
        assert again.read_bytes() == saved.read_bytes()

    def test_decode_encode_preserves_section_bytes(self, cache, saved):
        # reuse of still-valid sections depends on this round trip
        first = encode_sections(cache)
        second = encode_sections(load_cache(saved))
        assert set(first) == set(second) == set(SECTION_ORDER)
        for name in SECTION_ORDER:
            assert first[name] == second[name], name


class TestCorruption:
    def test_flipped_payload_byte_names_section(self, cache, saved):
        offsets = section_offsets(saved)
        data = bytearray(saved.read_bytes())
        off, length = offsets["eigenfunctions"]
        data[off + length // 2] ^= 0xFF
        saved.write_bytes(bytes(data))
        with pytest.raises(CacheError, match="eigenfunctions"):
            load_cache(saved)

    def test_truncated_file(self, cache, saved):
        data = saved.read_bytes()
        saved.write_bytes(data[:40])
        with pytest.raises(CacheError):
            load_cache(saved)

    def test_truncated_payload(self, cache, saved):
        data = saved.read_bytes()
        saved.write_bytes(data[:-10])
        with pytest.raises(CacheError, match="dist_idx"):
            load_cache(saved)

    def test_bad_magic(self, cache, saved):
        data = bytearray(saved.read_bytes())
        data[:4] = b"JUNK"
        saved.write_bytes(bytes(data))
        with pytest.raises(CacheError, match="magic"):
            load_cache(saved)

    def test_unsupported_version(self, cache, saved):
        data = bytearray(saved.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        saved.write_bytes(bytes(data))
        with pytest.raises(CacheError, match="version 99"):
            load_cache(saved)

    def test_missing_section_in_table(self, cache, saved):
        # drop the last table entry by shrinking the section count
        data = bytearray(saved.read_bytes())
        data[8:12] = struct.pack("<I", len(SECTION_ORDER) - 1)
        saved.write_bytes(bytes(data))
        with pytest.raises(CacheError, match="missing"):
            load_cache(saved)

    def test_save_requires_all_sections(self, cache, tmp_path):
        sections = encode_sections(cache)
        del sections["mass"]
        with pytest.raises(CacheError, match="mass"):
            save_sections(sections, tmp_path / "broken.cysh")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.cysh"
        path.write_bytes(b"")
        with pytest.raises(CacheError, match="too short"):
            load_cache(path)


class TestBadContents:
    def test_meta_not_json(self, cache, tmp_path):
        sections = encode_sections(cache)
        sections["meta"] = b"definitely not json"
        path = tmp_path / "meta.cysh"
        save_sections(sections, path)
        with pytest.raises(CacheError, match="unreadable"):
            load_cache(path)

    def test_meta_missing_keys(self, cache, tmp_path):
        sections = encode_sections(cache)
        sections["meta"] = b"{}"
        path = tmp_path / "meta.cysh"
        save_sections(sections, path)
        with pytest.raises(CacheError, match="incomplete"):
            load_cache(path)

    def test_invalid_mesh_rejected(self, cache, tmp_path):
        sections = encode_sections(cache)
        bad = np.array([[0, 1, 999]], dtype=np.int64)
        sections["faces"] = _encode_array(bad, "<i8")
        path = tmp_path / "mesh.cysh"
        save_sections(sections, path)
        with pytest.raises(CacheError, match="mesh"):
            load_cache(path)

    def test_array_header_garbage(self, cache, tmp_path):
        sections = encode_sections(cache)
        sections["eigenvalues"] = struct.pack("<I", 9) + b"\x00" * 80
        path = tmp_path / "header.cysh"
        save_sections(sections, path)
        with pytest.raises(CacheError, match="eigenvalues"):
            load_cache(path)

    def test_array_length_mismatch(self, cache, tmp_path):
        sections = encode_sections(cache)
        # claims 5 values but carries 4
        blob = struct.pack("<IQ", 1, 5) + np.zeros(4).tobytes()
        sections["eigenvalues"] = blob
        path = tmp_path / "length.cysh"
        save_sections(sections, path)
        with pytest.raises(CacheError, match="eigenvalues"):
            load_cache(path)

    def test_vertex_count_disagreement(self, cache, tmp_path):
        sections = encode_sections(cache)
        short = cache.stack.raw[:10]
        sections["desc_raw"] = _encode_array(short, "<f4")
        path = tmp_path / "count.cysh"
        save_sections(sections, path)
        with pytest.raises(CacheError, match="vertex count"):
            load_cache(path)
