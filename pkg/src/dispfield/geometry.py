"""Triangle meshes, oriented point clouds, and their file formats.

Everything geometric is numpy float64 in memory. Files holding float32
data round-trip exactly; text output uses %.17g so doubles survive a
write/read cycle unchanged.

Supported formats: OBJ (v/vn/f records, polygon faces fan-triangulated)
and PLY (ascii or binary little-endian). Point clouds are stored as PLY
vertex elements with x y z nx ny nz and no faces.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .errors import (
    ConfigError,
    DegenerateGeometryError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)

UNIT_NORMAL_TOL = 1e-6
BOUNDS_TOL = 1e-9


@dataclasses.dataclass
class TriangleMesh:
    """Vertices (n, 3) float64 and faces (m, 3) int64 vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def validate(self):
        if not np.all(np.isfinite(self.vertices)):
            raise ValidationError("mesh has non-finite vertex coordinates")
        if len(self.faces) and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValidationError("face indices out of vertex range")

    def face_corners(self):
        v = self.vertices
        f = self.faces
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    def face_cross(self):
        a, b, c = self.face_corners()
        return np.cross(b - a, c - a)

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def surface_area(self):
        return float(self.face_areas().sum())

    def face_normals(self):
        """Unit normals per face; zero-area faces raise."""
        cross = self.face_cross()
        norms = np.linalg.norm(cross, axis=1)
        if np.any(norms < 1e-14):
            raise DegenerateGeometryError("zero-area face has no normal")
        return cross / norms[:, None]

    def vertex_normals(self):
        """Area-weighted average of incident face normals, unit length."""
        cross = self.face_cross()  # length is 2*area, the weighting we want
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], cross)
        norms = np.linalg.norm(acc, axis=1)
        used = np.zeros(len(self.vertices), dtype=bool)
        used[self.faces.reshape(-1)] = True
        if np.any(norms[used] < 1e-14):
            raise DegenerateGeometryError(
                "a referenced vertex has a vanishing accumulated normal")
        norms[~used] = 1.0
        return acc / norms[:, None]

    def bounds(self):
        if len(self.vertices) == 0:
            raise DegenerateGeometryError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclasses.dataclass
class OrientedPointCloud:
    """Sample points (n, 3) with unit outward normals (n, 3), float64."""

    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    def validate(self, require_unit=True, require_bounds=True):
        if len(self.points) != len(self.normals):
            raise ValidationError(
                f"{len(self.points)} points but {len(self.normals)} normals")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.normals))):
            raise ValidationError("cloud has non-finite values")
        if require_unit and len(self.normals):
            err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max()
            if err > UNIT_NORMAL_TOL:
                raise ValidationError(
                    f"normals deviate from unit length by {err:.3e} "
                    f"(tolerance {UNIT_NORMAL_TOL:g})")
        if require_bounds and len(self.points):
            m = np.abs(self.points).max()
            if m > 1.0 + BOUNDS_TOL:
                raise ValidationError(
                    f"points reach |coord| = {m:.6g}, outside the unit cube")

    def subset(self, indices):
        return OrientedPointCloud(self.points[indices], self.normals[indices])


@dataclasses.dataclass(frozen=True)
class NormalizeTransform:
    """Maps original coordinates into the working cube: y = (x - center) * scale."""

    center: tuple
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) * self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.center)

    def to_dict(self):
        return {"center": list(self.center), "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(center=tuple(float(c) for c in d["center"]), scale=float(d["scale"]))


def normalize_mesh(mesh, margin=0.9):
    """Center the bounding box at the origin and scale uniformly so the
    mesh fits inside [-margin, margin]^3.

    Returns (normalized mesh, transform). Normalizing an already
    normalized mesh reproduces it to within 1e-9.
    """
    if not 0 < margin <= 1:
        raise ConfigError(f"margin must be in (0, 1], got {margin}")
    lo, hi = mesh.bounds()
    center = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max())
    if half <= 0:
        raise DegenerateGeometryError("mesh bounding box has zero extent")
    transform = NormalizeTransform(center=tuple(center), scale=margin / half)
    return TriangleMesh(transform.apply(mesh.vertices), mesh.faces.copy()), transform


def sample_surface(mesh, count, seed=0, use_vertex_normals=False):
    """Draw `count` area-weighted surface samples with outward normals.

    Faces are chosen proportionally to area and positions uniformly
    within each face. Normals come from the sampled face, or, when
    use_vertex_normals is set, from barycentric interpolation of
    area-weighted vertex normals (renormalized). Deterministic per seed.
    """
    if count < 1:
        raise ConfigError(f"sample count must be >= 1, got {count}")
    mesh.validate()
    if len(mesh.faces) == 0:
        raise DegenerateGeometryError("mesh has no faces to sample")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise DegenerateGeometryError("mesh surface area is zero")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(areas), size=count, p=areas / total)
    r1, r2 = rng.random((2, count))
    s = np.sqrt(r1)
    corners = mesh.vertices[mesh.faces[chosen]]
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    w0, w1, w2 = 1.0 - s, s * (1.0 - r2), s * r2
    points = w0[:, None] * a + w1[:, None] * b + w2[:, None] * c
    if use_vertex_normals:
        vn = mesh.vertex_normals()[mesh.faces[chosen]]
        normals = (w0[:, None] * vn[:, 0] + w1[:, None] * vn[:, 1]
                   + w2[:, None] * vn[:, 2])
        lens = np.linalg.norm(normals, axis=1)
        if np.any(lens < 1e-12):
            raise DegenerateGeometryError(
                "interpolated normal vanished; mesh orientation is inconsistent")
        normals = normals / lens[:, None]
    else:
        cross = np.cross(b - a, c - a)
        lens = np.linalg.norm(cross, axis=1)
        # area-weighted choice cannot pick a zero-area face
        normals = cross / lens[:, None]
    return OrientedPointCloud(points, normals)


# ---------------------------------------------------------------------------
# OBJ

def load_obj(path):
    """Read vertices and faces from a Wavefront OBJ file.

    Handles v and f records, 1-based and negative indices, and
    fan-triangulates polygons. Normals and texture records are ignored;
    normals are recomputed from geometry where needed.
    """
    vertices = []
    faces = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex needs 3 coordinates",
                                     path=str(path), line=lineno)
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ParseError(f"bad vertex coordinate: {exc}",
                                     path=str(path), line=lineno) from exc
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face needs at least 3 vertices",
                                     path=str(path), line=lineno)
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise ParseError(f"bad face index {token!r}",
                                         path=str(path), line=lineno) from exc
                    if i == 0:
                        raise ParseError("face index 0 is invalid (OBJ is 1-based)",
                                         path=str(path), line=lineno)
                    i = i - 1 if i > 0 else len(vertices) + i
                    if not 0 <= i < len(vertices):
                        raise ParseError(f"face index {token} out of range",
                                         path=str(path), line=lineno)
                    idx.append(i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # vn/vt/o/g/s/usemtl/mtllib carry no geometry we keep
    mesh = TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
    mesh.validate()
    return mesh


def write_obj(mesh, path):
    """Write an OBJ file; %.17g keeps float64 coordinates exact."""
    mesh.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# PLY

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh, path):
    def next_line():
        raw = fh.readline()
        if not raw:
            raise ParseError("unexpected end of PLY header", path=str(path))
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise ParseError("missing 'ply' magic", path=str(path))
    fmt = None
    elements = []  # (name, count, [props]); prop = ("scalar", name, np_code) or ("list", name, count_code, item_code)
    while True:
        line = next_line()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment" or parts[0] == "obj_info":
            continue
        if parts[0] == "format":
            if parts[1] == "ascii":
                fmt = "ascii"
            elif parts[1] == "binary_little_endian":
                fmt = "binary"
            elif parts[1] == "binary_big_endian":
                raise UnsupportedFormatError(
                    f"{path}: big-endian PLY is not supported")
            else:
                raise ParseError(f"unknown PLY format {parts[1]!r}", path=str(path))
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before any element", path=str(path))
            props = elements[-1][2]
            if parts[1] == "list":
                for t in (parts[2], parts[3]):
                    if t not in _PLY_SCALARS:
                        raise UnsupportedFormatError(
                            f"{path}: list property type {t!r} not supported")
                props.append(("list", parts[4], _PLY_SCALARS[parts[2]],
                              _PLY_SCALARS[parts[3]]))
            else:
                if parts[1] not in _PLY_SCALARS:
                    raise UnsupportedFormatError(
                        f"{path}: property type {parts[1]!r} not supported")
                props.append(("scalar", parts[2], _PLY_SCALARS[parts[1]]))
    if fmt is None:
        raise ParseError("PLY header has no format line", path=str(path))
    return fmt, elements


def _read_ply(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        data = {}
        if fmt == "ascii":
            tokens = fh.read().decode("ascii", errors="replace").split()
            pos = 0

            def take(n):
                nonlocal pos
                if pos + n > len(tokens):
                    raise ParseError("PLY data ended early", path=str(path))
                out = tokens[pos:pos + n]
                pos += n
                return out

            for name, count, props in elements:
                rows = {p[1]: [] for p in props}
                lists = {p[1]: [] for p in props if p[0] == "list"}
                for _ in range(count):
                    for p in props:
                        if p[0] == "scalar":
                            rows[p[1]].append(float(take(1)[0]))
                        else:
                            n_items = int(take(1)[0])
                            lists[p[1]].append([float(t) for t in take(n_items)])
                scalars = {k: np.array(v) for k, v in rows.items() if k not in lists}
                data[name] = {"scalars": scalars, "lists": lists, "count": count}
        else:
            buf = fh.read()
            offset = 0
            for name, count, props in elements:
                if all(p[0] == "scalar" for p in props):
                    dtype = np.dtype([(p[1], "<" + p[2]) for p in props])
                    need = count * dtype.itemsize
                    if offset + need > len(buf):
                        raise ParseError("PLY data ended early", path=str(path))
                    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
                    offset += need
                    scalars = {p[1]: rec[p[1]].astype(np.float64) for p in props}
                    data[name] = {"scalars": scalars, "lists": {}, "count": count}
                else:
                    scalars = {p[1]: [] for p in props if p[0] == "scalar"}
                    lists = {p[1]: [] for p in props if p[0] == "list"}

                    def read_items(dt, n, pos):
                        if pos + n * dt.itemsize > len(buf):
                            raise ParseError("PLY data ended early", path=str(path))
                        return np.frombuffer(buf, dt, n, pos), pos + n * dt.itemsize

                    for _ in range(count):
                        for p in props:
                            if p[0] == "scalar":
                                vals, offset = read_items(np.dtype("<" + p[2]), 1, offset)
                                scalars[p[1]].append(float(vals[0]))
                            else:
                                cnt_vals, offset = read_items(np.dtype("<" + p[2]), 1, offset)
                                n_items = int(cnt_vals[0])
                                vals, offset = read_items(np.dtype("<" + p[3]), n_items, offset)
                                lists[p[1]].append(vals.tolist())
                    data[name] = {
                        "scalars": {k: np.array(v) for k, v in scalars.items()},
                        "lists": lists, "count": count,
                    }
    return data


def _vertex_positions(vdata, path):
    sc = vdata["scalars"]
    for axis in ("x", "y", "z"):
        if axis not in sc:
            raise ParseError(f"vertex element lacks property {axis!r}", path=str(path))
    return np.stack([sc["x"], sc["y"], sc["z"]], axis=1).astype(np.float64)


def load_ply(path):
    """Read a triangle mesh from an ascii or binary little-endian PLY."""
    data = _read_ply(path)
    if "vertex" not in data:
        raise ParseError("PLY has no vertex element", path=str(path))
    vertices = _vertex_positions(data["vertex"], path)
    faces = []
    if "face" in data:
        lists = data["face"]["lists"]
        key = "vertex_indices" if "vertex_indices" in lists else "vertex_index"
        if key not in lists:
            raise ParseError("face element lacks a vertex index list", path=str(path))
        for poly in lists[key]:
            idx = [int(i) for i in poly]
            if len(idx) < 3:
                raise ParseError("face with fewer than 3 vertices", path=str(path))
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    mesh = TriangleMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))
    mesh.validate()
    return mesh


def write_ply(mesh, path, binary=True):
    """Write a mesh as PLY (float32 positions, int32 indices)."""
    mesh.validate()
    v = mesh.vertices.astype("<f4")
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {len(v)}",
        "property float x", "property float y", "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(v.tobytes())
            f32 = mesh.faces.astype("<i4")
            for f in f32:
                fh.write(struct.pack("<B", 3))
                fh.write(f.tobytes())
        else:
            for row in mesh.vertices:
                fh.write(f"{row[0]:.9g} {row[1]:.9g} {row[2]:.9g}\n".encode("ascii"))
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


def load_mesh(path):
    """Dispatch on extension: .obj or .ply."""
    name = str(path).lower()
    if name.endswith(".obj"):
        return load_obj(path)
    if name.endswith(".ply"):
        return load_ply(path)
    raise UnsupportedFormatError(f"cannot infer mesh format from {path!r}")


def save_mesh(mesh, path, **kwargs):
    name = str(path).lower()
    if name.endswith(".obj"):
        return write_obj(mesh, path)
    if name.endswith(".ply"):
        return write_ply(mesh, path, **kwargs)
    raise UnsupportedFormatError(f"cannot infer mesh format from {path!r}")


# ---------------------------------------------------------------------------
# Point clouds

def save_cloud(cloud, path, store_dtype="float32"):
    """Write an oriented cloud as binary little-endian PLY with
    x y z nx ny nz properties."""
    cloud.validate(require_bounds=False)
    if store_dtype == "float32":
        code, pname = "<f4", "float"
    elif store_dtype == "float64":
        code, pname = "<f8", "double"
    else:
        raise ConfigError(f"store_dtype must be float32 or float64, got {store_dtype!r}")
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(cloud)}",
        f"property {pname} x", f"property {pname} y", f"property {pname} z",
        f"property {pname} nx", f"property {pname} ny", f"property {pname} nz",
        "end_header",
    ]
    block = np.concatenate([cloud.points, cloud.normals], axis=1).astype(code)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(block.tobytes())


def load_cloud(path):
    """Read an oriented cloud from PLY; normals are required."""
    data = _read_ply(path)
    if "vertex" not in data:
        raise ParseError("PLY has no vertex element", path=str(path))
    vdata = data["vertex"]
    points = _vertex_positions(vdata, path)
    sc = vdata["scalars"]
    if not all(k in sc for k in ("nx", "ny", "nz")):
        raise ValidationError(
            f"{path}: cloud has no normals (nx/ny/nz); oriented normals are required")
    normals = np.stack([sc["nx"], sc["ny"], sc["nz"]], axis=1).astype(np.float64)
    cloud = OrientedPointCloud(points, normals)
    cloud.validate(require_bounds=False)
    return cloud
