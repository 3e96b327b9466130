"""File formats: ``.svt`` tensors, PFM depth maps and PLY meshes / point clouds.

``.svt`` layout (all little-endian)::

    16 bytes  magic  b"SVOLTNSR" + 8 NUL bytes
    u32       dtype tag (1=f32, 2=f64, 3=u8, 4=i32)
    u32       rank
    u64*rank  dims
    payload   row-major, prod(dims) * itemsize bytes
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# ---------------------------------------------------------------------------
# .svt tensors

MAGIC = b"SVOLTNSR" + b"\0" * 8
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
_TAG_OF = {np.dtype(v).str: k for k, v in DTYPE_TAGS.items()}
_MAX_ELEMENTS = 1 << 40


def _dtype_tag(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    try:
        return _TAG_OF[dt.str]
    except KeyError:
        raise FormatError(f"unsupported tensor dtype {np.dtype(dtype)}; use f32, f64, u8 or i32") from None


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    tag = _dtype_tag(arr.dtype)
    arr = arr.astype(DTYPE_TAGS[tag], order="C", copy=False)  # keeps rank 0, unlike ascontiguousarray
    header = MAGIC + struct.pack("<II", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 24 or buf[:16] != MAGIC:
        raise FormatError("bad magic: not an .svt tensor")
    tag, rank = struct.unpack_from("<II", buf, 16)
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    if rank > 32:
        raise FormatError(f"implausible rank {rank}")
    off = 24 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 24)
    count = 1
    for d in shape:
        count *= d
        if count > _MAX_ELEMENTS:
            raise FormatError(f"shape {shape} overflows the element limit")
    dtype = DTYPE_TAGS[tag]
    expected = count * dtype.itemsize
    if len(buf) - off != expected:
        raise FormatError(
            f"payload is {len(buf) - off} bytes, header promises {expected} ({shape}, {dtype.name})"
        )
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# depth maps / PFM


@dataclass(eq=False)
class DepthMap:
    """Per-pixel depth, shape ``(height, width)``. Zero or non-finite marks an invalid pixel."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("depth map must be 2-D (height, width)")
        v = np.where(np.isfinite(v), v, 0.0).astype(np.float32)
        if np.any(v < 0):
            raise ValueError("depth values must be positive or 0 (invalid)")
        self.values = v

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def encode_pfm(image, scale: float = 1.0) -> bytes:
    """Grayscale PFM, little-endian (negative scale), rows stored bottom-to-top."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise FormatError("only single-channel PFM is supported")
    h, w = img.shape
    header = f"Pf\n{w} {h}\n{-abs(scale):f}\n".encode("ascii")
    return header + np.flipud(img).astype("<f4").tobytes()


_PFM_HEADER = re.compile(rb"^(P[fF])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s")


def decode_pfm(buf: bytes) -> np.ndarray:
    m = _PFM_HEADER.match(buf)
    if not m:
        raise FormatError("bad PFM header")
    if m.group(1) == b"PF":
        raise FormatError("color PFM is unsupported; expected grayscale 'Pf'")
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    if scale == 0:
        raise FormatError("PFM scale must be non-zero")
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    body = buf[m.end():]
    if len(body) != w * h * 4:
        raise FormatError(f"PFM payload is {len(body)} bytes, expected {w * h * 4}")
    data = np.frombuffer(body, dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def write_pfm(path, depth) -> None:
    values = depth.values if isinstance(depth, DepthMap) else DepthMap(depth).values
    Path(path).write_bytes(encode_pfm(values))


def read_pfm(path) -> DepthMap:
    return DepthMap(decode_pfm(Path(path).read_bytes()))


def write_ppm(path, rgb) -> None:
    """Binary PPM (P6) from an ``(H, W, 3)`` float image in [0, 1]."""
    img = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape[:2]
    data = np.round(img * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAME = {"f4": "float", "f8": "double"}


@dataclass(eq=False)
class TriangleMesh:
    """Vertices ``(V, 3)``, faces ``(F, 3)`` int, optional unit normals ``(V, 3)``.

    A mesh with zero faces doubles as a point cloud.
    """

    vertices: np.ndarray
    faces: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        v = v.reshape(-1, 3)
        f = np.zeros((0, 3), dtype=np.int64) if self.faces is None else np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        self.vertices, self.faces = v, f
        if self.normals is not None:
            n = np.asarray(self.normals)
            if n.dtype not in (np.float32, np.float64):
                n = n.astype(np.float64)
            self.normals = n.reshape(-1, 3)
            if len(self.normals) != len(v):
                raise ValueError("normals must be per-vertex")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def write_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    v = mesh.vertices
    vt = "f8" if v.dtype == np.float64 else "f4"
    props = [("x", vt), ("y", vt), ("z", vt)]
    cols = [v]
    if mesh.normals is not None:
        nt = "f8" if mesh.normals.dtype == np.float64 else "f4"
        props += [("nx", nt), ("ny", nt), ("nz", nt)]
        cols.append(mesh.normals)
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(v)}"]
    lines += [f"property {_PLY_NAME[t]} {n}" for n, t in props]
    lines += [f"element face {mesh.n_faces}", "property list uchar int vertex_indices", "end_header"]
    header = ("\n".join(lines) + "\n").encode("ascii")

    if binary:
        vdtype = np.dtype([(n, "<" + t) for n, t in props])
        vrec = np.empty(len(v), dtype=vdtype)
        for i, (n, _) in enumerate(props):
            src = cols[0] if i < 3 else cols[1]
            vrec[n] = src[:, i % 3]
        frec = np.empty(mesh.n_faces, dtype=[("n", "u1"), ("i", "<i4", (3,))])
        frec["n"] = 3
        frec["i"] = mesh.faces
        body = vrec.tobytes() + frec.tobytes()
    else:
        rows = np.hstack(cols) if len(cols) > 1 else cols[0]
        out = [" ".join(repr(float(x)) for x in row) for row in rows]
        out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
        body = ("\n".join(out) + ("\n" if out else "")).encode("ascii")
    Path(path).write_bytes(header + body)


def _parse_ply_header(buf: bytes):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    nl = buf.index(b"\n", end)
    lines = buf[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before element")
            if tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY list type in '{line}'")
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY property type '{tok[1]}'")
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format '{fmt}'")
    return fmt, elements, nl + 1


def _all_triangles(buf, off, count, prop) -> bool:
    if prop[1] != "list":
        return False
    dt = np.dtype([("n", "<" + prop[2]), ("i", "<" + prop[3], (3,))])
    if off + dt.itemsize * count > len(buf):
        return False
    rec = np.frombuffer(buf, dtype=dt, count=count, offset=off)
    return bool(np.all(rec["n"] == 3))


def read_ply(path) -> TriangleMesh:
    buf = Path(path).read_bytes()
    fmt, elements, off = _parse_ply_header(buf)
    verts = normals = None
    faces = np.zeros((0, 3), dtype=np.int64)
    tokens = buf[off:].split() if fmt == "ascii" else None
    tpos = 0

    for el in elements:
        name, count, props = el["name"], el["count"], el["props"]
        has_list = any(p[1] == "list" for p in props)
        if fmt == "binary_little_endian" and not has_list:
            dt = np.dtype([(p[0], "<" + p[1]) for p in props])
            size = dt.itemsize * count
            if off + size > len(buf):
                raise FormatError(f"truncated PLY element '{name}'")
            rec = np.frombuffer(buf, dtype=dt, count=count, offset=off)
            off += size
            cols = {p[0]: rec[p[0]] for p in props}
        elif fmt == "binary_little_endian" and len(props) == 1 and _all_triangles(buf, off, count, props[0]):
            p = props[0]
            dt = np.dtype([("n", "<" + p[2]), ("i", "<" + p[3], (3,))])
            rec = np.frombuffer(buf, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            cols = {p[0]: rec["i"]}
        elif fmt == "binary_little_endian":
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                for p in props:
                    if p[1] == "list":
                        cdt, idt = np.dtype("<" + p[2]), np.dtype("<" + p[3])
                        n = int(np.frombuffer(buf, cdt, 1, off)[0])
                        off += cdt.itemsize
                        cols[p[0]].append(np.frombuffer(buf, idt, n, off))
                        off += idt.itemsize * n
                    else:
                        dt = np.dtype("<" + p[1])
                        cols[p[0]].append(np.frombuffer(buf, dt, 1, off)[0])
                        off += dt.itemsize
            if off > len(buf):
                raise FormatError(f"truncated PLY element '{name}'")
        else:
            cols = {p[0]: [] for p in props}
            try:
                for _ in range(count):
                    for p in props:
                        if p[1] == "list":
                            n = int(tokens[tpos])
                            cols[p[0]].append(np.array(tokens[tpos + 1: tpos + 1 + n], dtype=p[3]))
                            tpos += 1 + n
                        else:
                            cols[p[0]].append(np.dtype(p[1]).type(tokens[tpos].decode()))
                            tpos += 1
            except (IndexError, ValueError) as exc:
                raise FormatError(f"malformed ASCII PLY element '{name}': {exc}") from None
            cols = {p[0]: cols[p[0]] if p[1] == "list" else np.array(cols[p[0]], dtype=p[1]) for p in props}

        if name == "vertex":
            if not all(k in cols for k in "xyz"):
                raise FormatError("PLY vertex element lacks x, y, z")
            verts = np.stack([np.asarray(cols[k]) for k in "xyz"], axis=1)
            if all(k in cols for k in ("nx", "ny", "nz")):
                normals = np.stack([np.asarray(cols[k]) for k in ("nx", "ny", "nz")], axis=1)
        elif name == "face":
            key = "vertex_indices" if "vertex_indices" in cols else "vertex_index" if "vertex_index" in cols else None
            if key is None:
                raise FormatError("PLY face element lacks vertex_indices")
            polys = cols[key]
            if isinstance(polys, np.ndarray):
                faces = polys.astype(np.int64).reshape(-1, 3)
            else:
                tris = []
                for poly in polys:
                    poly = np.asarray(poly, dtype=np.int64)
                    tris.extend((poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1))
                faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    if verts is None:
        raise FormatError("PLY has no vertex element")
    return TriangleMesh(verts, faces, normals)
