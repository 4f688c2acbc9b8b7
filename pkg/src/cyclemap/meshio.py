"""Reading and writing triangle meshes in OFF, OBJ, and PLY formats.

Polygonal faces with more than three sides are fan-triangulated on load.
PLY is supported in ASCII and binary little-endian flavors; an optional
per-vertex uchar red/green/blue triple survives a round trip. Parse errors
carry the file path and the 1-based line number where the problem was found.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import MeshLoadError
from .mesh import TriMesh

__all__ = ["load_mesh", "save_mesh"]

_EXT_FORMATS = {".off": "off", ".obj": "obj", ".ply": "ply"}


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        f = fmt.lower()
        if f not in ("off", "obj", "ply"):
            raise MeshLoadError(f"unknown mesh format {fmt!r}", path=path)
        return f
    ext = path.suffix.lower()
    if ext not in _EXT_FORMATS:
        raise MeshLoadError(
            f"cannot infer format from extension {ext!r} (use off/obj/ply)",
            path=path,
        )
    return _EXT_FORMATS[ext]


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    """Load a triangle mesh, inferring the format from the extension.

    Parameters
    ----------
    path : str or Path
        File to read.
    fmt : str, optional
        One of ``"off"``, ``"obj"``, ``"ply"``. Overrides the extension.

    Returns
    -------
    TriMesh

    Raises
    ------
    MeshLoadError
        On any syntactic problem, with path and line number.
    InvalidMeshError
        If the parsed data violates mesh invariants.
    """
    path = Path(path)
    f = _format_for(path, fmt)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise MeshLoadError(f"cannot read file: {exc}", path=path) from exc
    if f == "off":
        v, fc = _parse_off(raw, path)
    elif f == "obj":
        v, fc = _parse_obj(raw, path)
    else:
        v, fc, _ = _parse_ply(raw, path)
    return TriMesh(v, fc)


def save_mesh(mesh: TriMesh, path, fmt: str | None = None, *,
              colors=None, binary: bool = False) -> None:
    """Write a mesh to disk.

    Parameters
    ----------
    mesh : TriMesh
    path : str or Path
    fmt : str, optional
        Overrides the extension-derived format.
    colors : array_like, optional
        (n, 3) uint8 per-vertex colors. PLY only.
    binary : bool
        Write binary little-endian PLY instead of ASCII. PLY only.
    """
    path = Path(path)
    f = _format_for(path, fmt)
    if colors is not None:
        colors = np.asarray(colors)
        if f != "ply":
            raise MeshLoadError("per-vertex colors are only supported for PLY",
                                path=path)
        if colors.shape != (mesh.n_vertices, 3):
            raise MeshLoadError(
                f"colors must be ({mesh.n_vertices}, 3), got {colors.shape}",
                path=path,
            )
        colors = colors.astype(np.uint8)
    if binary and f != "ply":
        raise MeshLoadError("binary output is only supported for PLY", path=path)
    if f == "off":
        data = _emit_off(mesh)
    elif f == "obj":
        data = _emit_obj(mesh)
    else:
        data = _emit_ply(mesh, colors, binary)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# OFF

def _off_lines(raw: bytes, path: Path):
    """Yield (lineno, tokens) for non-empty, non-comment OFF lines."""
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MeshLoadError(f"not valid UTF-8 text: {exc}", path=path) from exc
    for i, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield i, body.split()


def _parse_off(raw: bytes, path: Path):
    lines = _off_lines(raw, path)
    try:
        lineno, tok = next(lines)
    except StopIteration:
        raise MeshLoadError("empty OFF file", path=path) from None
    # Header keyword may share a line with the counts ("OFF 8 6 0").
    if tok[0].upper() != "OFF":
        raise MeshLoadError("missing OFF header", path=path, line=lineno)
    counts = tok[1:]
    if not counts:
        try:
            lineno, counts = next(lines)
        except StopIteration:
            raise MeshLoadError("missing vertex/face counts", path=path,
                                line=lineno) from None
    if len(counts) < 2:
        raise MeshLoadError("expected vertex and face counts", path=path,
                            line=lineno)
    try:
        nv, nf = int(counts[0]), int(counts[1])
    except ValueError:
        raise MeshLoadError("counts are not integers", path=path,
                            line=lineno) from None
    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshLoadError(f"expected {nv} vertices, file ended after {i}",
                                path=path) from None
        if len(tok) < 3:
            raise MeshLoadError("vertex line needs 3 coordinates", path=path,
                                line=lineno)
        try:
            verts[i] = [float(tok[0]), float(tok[1]), float(tok[2])]
        except ValueError:
            raise MeshLoadError("bad vertex coordinate", path=path,
                                line=lineno) from None
    faces = []
    for i in range(nf):
        try:
            lineno, tok = next(lines)
        except StopIteration:
            raise MeshLoadError(f"expected {nf} faces, file ended after {i}",
                                path=path) from None
        try:
            k = int(tok[0])
            idx = [int(t) for t in tok[1:1 + k]]
        except ValueError:
            raise MeshLoadError("bad face index", path=path, line=lineno) from None
        if k < 3 or len(idx) != k:
            raise MeshLoadError(f"face declares {k} vertices but lists {len(tok) - 1}",
                                path=path, line=lineno)
        _fan(faces, idx)
    return verts, np.asarray(faces, dtype=np.int64)


def _emit_off(mesh: TriMesh) -> bytes:
    out = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    out.extend("%.9g %.9g %.9g" % tuple(p) for p in mesh.vertices)
    out.extend("3 %d %d %d" % tuple(f) for f in mesh.faces)
    return ("\n".join(out) + "\n").encode()


# ---------------------------------------------------------------------------
# OBJ

def _parse_obj(raw: bytes, path: Path):
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MeshLoadError(f"not valid UTF-8 text: {exc}", path=path) from exc
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        tok = body.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshLoadError("vertex line needs 3 coordinates",
                                    path=path, line=lineno)
            try:
                verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
            except ValueError:
                raise MeshLoadError("bad vertex coordinate", path=path,
                                    line=lineno) from None
        elif tok[0] == "f":
            idx = []
            for ref in tok[1:]:
                # "a", "a/b", "a/b/c", "a//c" all reference vertex a.
                head = ref.split("/", 1)[0]
                try:
                    j = int(head)
                except ValueError:
                    raise MeshLoadError(f"bad face reference {ref!r}",
                                        path=path, line=lineno) from None
                if j < 1:
                    raise MeshLoadError(
                        "face indices must be positive 1-based",
                        path=path, line=lineno)
                idx.append(j - 1)
            if len(idx) < 3:
                raise MeshLoadError("face needs at least 3 vertices",
                                    path=path, line=lineno)
            _fan(faces, idx)
        # Any other record type (vn, vt, usemtl, ...) is ignored.
    if not verts:
        raise MeshLoadError("no vertices in OBJ file", path=path)
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def _emit_obj(mesh: TriMesh) -> bytes:
    out = ["v %.9g %.9g %.9g" % tuple(p) for p in mesh.vertices]
    out.extend("f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.faces)
    return ("\n".join(out) + "\n").encode()


# ---------------------------------------------------------------------------
# PLY

_PLY_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
_PLY_STRUCT = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _parse_ply(raw: bytes, path: Path):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise MeshLoadError("missing ply header", path=path, line=1)
    end = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii", errors="replace")
    body = raw[end:]

    fmt = None
    elements = []  # (name, count, [(proptype, name) or ("list", counttype, itemtype, name)])
    lineno = 0
    for lineno, line in enumerate(header.splitlines(), start=1):
        tok = line.strip().split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise MeshLoadError(
                    f"unsupported ply format {' '.join(tok[1:])!r}",
                    path=path, line=lineno)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MeshLoadError("malformed element line", path=path, line=lineno)
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError:
                raise MeshLoadError("bad element count", path=path,
                                    line=lineno) from None
        elif tok[0] == "property":
            if not elements:
                raise MeshLoadError("property before any element", path=path,
                                    line=lineno)
            if tok[1] == "list":
                if len(tok) != 5:
                    raise MeshLoadError("malformed list property", path=path,
                                        line=lineno)
                elements[-1][2].append(("list", tok[2], tok[3], tok[4]))
            else:
                if len(tok) != 3:
                    raise MeshLoadError("malformed property", path=path,
                                        line=lineno)
                if tok[1] not in _PLY_SIZES:
                    raise MeshLoadError(f"unknown property type {tok[1]!r}",
                                        path=path, line=lineno)
                elements[-1][2].append((tok[1], tok[2]))
        else:
            raise MeshLoadError(f"unknown header keyword {tok[0]!r}",
                                path=path, line=lineno)
    if fmt is None:
        raise MeshLoadError("ply header missing format line", path=path)

    vert_el = next((e for e in elements if e[0] == "vertex"), None)
    face_el = next((e for e in elements if e[0] == "face"), None)
    if vert_el is None or face_el is None:
        raise MeshLoadError("ply needs vertex and face elements", path=path)

    if fmt == "ascii":
        verts, colors, faces = _ply_ascii_body(body, elements, path, lineno)
    else:
        verts, colors, faces = _ply_binary_body(body, elements, path)
    return verts, faces, colors


def _vertex_layout(props, path):
    """Map property names to column positions; ensure x, y, z exist."""
    names = []
    for p in props:
        if p[0] == "list":
            raise MeshLoadError("list property on vertex element unsupported",
                                path=path)
        names.append(p[1])
    for need in ("x", "y", "z"):
        if need not in names:
            raise MeshLoadError(f"vertex element missing property {need!r}",
                                path=path)
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    return names, has_rgb


def _ply_ascii_body(body: bytes, elements, path, header_lines):
    text = body.decode("ascii", errors="replace")
    rows = text.splitlines()
    pos = 0

    def take(lineno_base):
        nonlocal pos
        while pos < len(rows):
            line = rows[pos]
            pos += 1
            tok = line.split()
            if tok:
                return lineno_base + pos, tok
        raise MeshLoadError("unexpected end of ply body", path=path)

    verts = colors = faces = None
    for name, count, props in elements:
        if name == "vertex":
            names, has_rgb = _vertex_layout(props, path)
            verts = np.empty((count, 3))
            colors = np.empty((count, 3), dtype=np.uint8) if has_rgb else None
            cix = [names.index(c) for c in ("x", "y", "z")]
            rix = [names.index(c) for c in ("red", "green", "blue")] if has_rgb else None
            for i in range(count):
                lineno, tok = take(header_lines)
                if len(tok) != len(names):
                    raise MeshLoadError(
                        f"expected {len(names)} values, got {len(tok)}",
                        path=path, line=lineno)
                try:
                    verts[i] = [float(tok[j]) for j in cix]
                    if has_rgb:
                        colors[i] = [int(tok[j]) for j in rix]
                except ValueError:
                    raise MeshLoadError("bad vertex value", path=path,
                                        line=lineno) from None
        elif name == "face":
            fl = []
            for _ in range(count):
                lineno, tok = take(header_lines)
                try:
                    k = int(tok[0])
                    idx = [int(t) for t in tok[1:1 + k]]
                except ValueError:
                    raise MeshLoadError("bad face index", path=path,
                                        line=lineno) from None
                if k < 3 or len(idx) != k:
                    raise MeshLoadError("face count mismatch", path=path,
                                        line=lineno)
                _fan(fl, idx)
            faces = np.asarray(fl, dtype=np.int64)
        else:
            for _ in range(count):
                take(header_lines)
    return verts, colors, faces


def _ply_binary_body(body: bytes, elements, path):
    off = 0
    verts = colors = faces = None
    for name, count, props in elements:
        if name == "vertex":
            names, has_rgb = _vertex_layout(props, path)
            fmt = "<" + "".join(_PLY_STRUCT[p[0]] for p in props)
            size = struct.calcsize(fmt)
            need = size * count
            if off + need > len(body):
                raise MeshLoadError("truncated vertex data", path=path)
            rows = list(struct.iter_unpack(fmt, body[off:off + need]))
            off += need
            arr = np.asarray(rows, dtype=np.float64)
            cix = [names.index(c) for c in ("x", "y", "z")]
            verts = arr[:, cix]
            if has_rgb:
                rix = [names.index(c) for c in ("red", "green", "blue")]
                colors = arr[:, rix].astype(np.uint8)
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshLoadError("face element must be a single list property",
                                    path=path)
            _, ctype, itype, _ = props[0]
            cfmt = "<" + _PLY_STRUCT[ctype]
            csz = _PLY_SIZES[ctype]
            ifmt = _PLY_STRUCT[itype]
            isz = _PLY_SIZES[itype]
            fl = []
            for _ in range(count):
                if off + csz > len(body):
                    raise MeshLoadError("truncated face data", path=path)
                (k,) = struct.unpack_from(cfmt, body, off)
                off += csz
                if k < 3:
                    raise MeshLoadError("face with fewer than 3 vertices",
                                        path=path)
                if off + k * isz > len(body):
                    raise MeshLoadError("truncated face data", path=path)
                idx = struct.unpack_from(f"<{k}{ifmt}", body, off)
                off += k * isz
                _fan(fl, list(idx))
            faces = np.asarray(fl, dtype=np.int64)
        else:
            fmt = "<" + "".join(
                _PLY_STRUCT[p[0]] for p in props if p[0] != "list")
            if any(p[0] == "list" for p in props):
                raise MeshLoadError(
                    f"cannot skip binary element {name!r} with list property",
                    path=path)
            off += struct.calcsize(fmt) * count
    return verts, colors, faces


def _emit_ply(mesh: TriMesh, colors, binary: bool) -> bytes:
    n, f = mesh.n_vertices, mesh.n_faces
    coord_type = "double" if binary else "float"
    head = ["ply",
            "format binary_little_endian 1.0" if binary else "format ascii 1.0",
            f"element vertex {n}",
            f"property {coord_type} x",
            f"property {coord_type} y",
            f"property {coord_type} z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green",
                 "property uchar blue"]
    head += [f"element face {f}",
             "property list uchar int vertex_indices",
             "end_header"]
    header = ("\n".join(head) + "\n").encode()
    if not binary:
        rows = []
        for i, p in enumerate(mesh.vertices):
            line = "%.9g %.9g %.9g" % tuple(p)
            if colors is not None:
                line += " %d %d %d" % tuple(colors[i])
            rows.append(line)
        rows.extend("3 %d %d %d" % tuple(fc) for fc in mesh.faces)
        return header + ("\n".join(rows) + "\n").encode()
    parts = [header]
    if colors is not None:
        for i, p in enumerate(mesh.vertices):
            parts.append(struct.pack("<3d3B", *p, *colors[i]))
    else:
        parts.append(mesh.vertices.astype("<f8").tobytes())
    for fc in mesh.faces:
        parts.append(struct.pack("<B3i", 3, *fc))
    return b"".join(parts)


def _fan(out: list, idx: list) -> None:
    """Append fan triangulation of polygon ``idx`` to ``out``."""
    for i in range(1, len(idx) - 1):
        out.append([idx[0], idx[i], idx[i + 1]])
