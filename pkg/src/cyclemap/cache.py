"""Per-shape preprocessing cache.

One file per shape holds everything training needs: the (possibly
decimated) mesh, the spectral basis, the descriptor stack, and the
distance matrix, each in its own checksummed section. A metadata section
records the source-file hash and one fingerprint per section group, so a
config change invalidates exactly the sections it influences and the
rest are carried over byte-for-byte.

Layout: magic ``CYSH``, u32 version, u32 section count, a table of
(name, offset, length, crc32) entries, then the payloads. Array payloads
start with explicit dimensions (u32 ndim, u64 dims). Bases and mesh
coordinates are stored as little-endian float64; descriptors and
distances as float32, widened back to float64 on load.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .descriptor import DescriptorStack
from .errors import CacheError, InvalidMeshError
from .geodesy import DistanceMatrix
from .mesh import TriMesh
from .model import ShapeContext
from .spectral import SpectralBasis

CACHE_MAGIC = b"CYSH"
CACHE_VERSION = 1

SECTION_ORDER = ("meta", "vertices", "faces", "vertex_map", "eigenvalues",
                 "eigenfunctions", "mass", "desc_raw", "desc_scales",
                 "dist", "dist_idx")

# sections rebuilt together when their fingerprint changes
GROUP_SECTIONS = {
    "mesh": ("vertices", "faces", "vertex_map"),
    "spectral": ("eigenvalues", "eigenfunctions", "mass"),
    "descriptor": ("desc_raw", "desc_scales"),
    "distance": ("dist", "dist_idx"),
}

_HEAD = struct.Struct("<4sII")
_ENTRY_FIXED = struct.Struct("<QQI")
_NAME_LEN = struct.Struct("<H")
_NDIM = struct.Struct("<I")
_DIM = struct.Struct("<Q")


@dataclass
class ShapeCache:
    """Decoded cache contents for one shape."""

    source_sha: str
    mesh: TriMesh
    vertex_map: np.ndarray
    basis: SpectralBasis
    stack: DescriptorStack
    dist: DistanceMatrix
    fingerprints: dict

    def context(self) -> ShapeContext:
        return ShapeContext(mesh=self.mesh, basis=self.basis,
                            stack=self.stack, dist=self.dist)


def _encode_array(arr, dtype) -> bytes:
    data = np.ascontiguousarray(arr, dtype=dtype)
    head = _NDIM.pack(data.ndim)
    head += b"".join(_DIM.pack(d) for d in data.shape)
    return head + data.tobytes()


def _decode_array(blob, dtype, name, path):
    if len(blob) < _NDIM.size:
        raise CacheError(f"{path}: section {name} is too short")
    (ndim,) = _NDIM.unpack_from(blob, 0)
    pos = _NDIM.size
    if ndim > 8 or len(blob) < pos + ndim * _DIM.size:
        raise CacheError(f"{path}: section {name} has a corrupt header")
    shape = []
    for _ in range(ndim):
        (d,) = _DIM.unpack_from(blob, pos)
        shape.append(d)
        pos += _DIM.size
    want = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
    if len(blob) - pos != want:
        raise CacheError(f"{path}: section {name} holds {len(blob) - pos} "
                         f"payload bytes, dimensions imply {want}")
    return np.frombuffer(blob, dtype=dtype, offset=pos).reshape(shape)


def encode_sections(cache: ShapeCache) -> dict:
    """Serialize every section; deterministic for identical contents."""
    meta = {"source_sha": cache.source_sha,
            "fingerprints": cache.fingerprints}
    return {
        "meta": json.dumps(meta, sort_keys=True,
                           separators=(",", ":")).encode("utf-8"),
        "vertices": _encode_array(cache.mesh.vertices, "<f8"),
        "faces": _encode_array(cache.mesh.faces, "<i8"),
        "vertex_map": _encode_array(cache.vertex_map, "<i8"),
        "eigenvalues": _encode_array(cache.basis.eigenvalues, "<f8"),
        "eigenfunctions": _encode_array(cache.basis.eigenfunctions, "<f8"),
        "mass": _encode_array(cache.basis.mass, "<f8"),
        "desc_raw": _encode_array(cache.stack.raw, "<f4"),
        "desc_scales": _encode_array(cache.stack.scales, "<f8"),
        "dist": _encode_array(cache.dist.values, "<f4"),
        "dist_idx": _encode_array(cache.dist.sample_indices, "<i8"),
    }


def save_sections(sections: dict, path) -> None:
    """Write raw section payloads in canonical order, atomically."""
    missing = [n for n in SECTION_ORDER if n not in sections]
    if missing:
        raise CacheError(f"cannot write cache without sections {missing}")
    table_size = _HEAD.size
    for name in SECTION_ORDER:
        table_size += _NAME_LEN.size + len(name) + _ENTRY_FIXED.size
    chunks = [_HEAD.pack(CACHE_MAGIC, CACHE_VERSION, len(SECTION_ORDER))]
    offset = table_size
    for name in SECTION_ORDER:
        blob = sections[name]
        chunks.append(_NAME_LEN.pack(len(name)))
        chunks.append(name.encode("ascii"))
        chunks.append(_ENTRY_FIXED.pack(offset, len(blob),
                                        zlib.crc32(blob)))
        offset += len(blob)
    chunks.extend(sections[name] for name in SECTION_ORDER)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def save_cache(cache: ShapeCache, path) -> None:
    save_sections(encode_sections(cache), path)


def read_sections(path) -> dict:
    """Read and checksum-verify all section payloads."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size:
        raise CacheError(f"{path}: file is too short to be a cache")
    magic, version, count = _HEAD.unpack_from(data, 0)
    if magic != CACHE_MAGIC:
        raise CacheError(f"{path}: not a shape cache (bad magic {magic!r})")
    if version != CACHE_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    pos = _HEAD.size
    entries = []
    for _ in range(count):
        if pos + _NAME_LEN.size > len(data):
            raise CacheError(f"{path}: truncated section table")
        (name_len,) = _NAME_LEN.unpack_from(data, pos)
        pos += _NAME_LEN.size
        if pos + name_len + _ENTRY_FIXED.size > len(data):
            raise CacheError(f"{path}: truncated section table")
        name = data[pos:pos + name_len].decode("ascii", "replace")
        pos += name_len
        offset, length, crc = _ENTRY_FIXED.unpack_from(data, pos)
        pos += _ENTRY_FIXED.size
        entries.append((name, offset, length, crc))
    sections = {}
    for name, offset, length, crc in entries:
        if name in sections:
            raise CacheError(f"{path}: duplicate section {name}")
        if offset + length > len(data):
            raise CacheError(f"{path}: section {name} extends past the "
                             f"end of the file")
        blob = data[offset:offset + length]
        if zlib.crc32(blob) != crc:
            raise CacheError(f"{path}: section {name} fails its checksum; "
                             f"the cache is corrupt")
        sections[name] = blob
    missing = [n for n in SECTION_ORDER if n not in sections]
    if missing:
        raise CacheError(f"{path}: cache is missing sections {missing}")
    return sections


def decode_meta(sections, path) -> dict:
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CacheError(f"{path}: meta section is unreadable: {exc}")
    if "source_sha" not in meta or "fingerprints" not in meta:
        raise CacheError(f"{path}: meta section is incomplete")
    return meta


def load_cache(path) -> ShapeCache:
    sections = read_sections(path)
    meta = decode_meta(sections, path)

    def arr(name, dtype):
        return _decode_array(sections[name], dtype, name, path)

    vertices = arr("vertices", "<f8").astype(np.float64)
    faces = arr("faces", "<i8").astype(np.int64)
    try:
        mesh = TriMesh(vertices, faces)
    except InvalidMeshError as exc:
        raise CacheError(f"{path}: cached mesh is invalid: {exc}")
    fingerprints = meta["fingerprints"]
    desc_fp = fingerprints.get("descriptor", {})
    stack = DescriptorStack(
        raw=arr("desc_raw", "<f4").astype(np.float32),
        scales=arr("desc_scales", "<f8").astype(np.float64),
        radius_fraction=float(desc_fp.get("radius_fraction", 0.0)))
    basis = SpectralBasis(
        eigenvalues=arr("eigenvalues", "<f8").astype(np.float64),
        eigenfunctions=arr("eigenfunctions", "<f8").astype(np.float64),
        mass=arr("mass", "<f8").astype(np.float64))
    dist = DistanceMatrix(
        values=arr("dist", "<f4").astype(np.float64),
        sample_indices=arr("dist_idx", "<i8").astype(np.int64))
    cache = ShapeCache(source_sha=meta["source_sha"], mesh=mesh,
                       vertex_map=arr("vertex_map", "<i8").astype(np.int64),
                       basis=basis, stack=stack, dist=dist,
                       fingerprints=fingerprints)
    n = mesh.n_vertices
    if basis.eigenfunctions.shape[0] != n or stack.raw.shape[0] != n:
        raise CacheError(f"{path}: section dimensions disagree about the "
                         f"vertex count")
    return cache
