"""PLY point clouds, OBJ meshes and ground-truth transform JSON."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geometry import PointCloud, RigidTransform, TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(fh):
    first = fh.readline().strip()
    if first != b"ply":
        raise InvalidInputError("not a PLY file")
    fmt = None
    elements = []  # [name, count, [(prop, type) or (prop, ('list', count_t, item_t))]]
    while True:
        line = fh.readline()
        if not line:
            raise InvalidInputError("PLY header not terminated")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise InvalidInputError("PLY property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                elements[-1][2].append((tok[2], tok[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise InvalidInputError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _cloud_from_columns(cols: dict) -> PointCloud:
    try:
        pts = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    except KeyError as exc:
        raise InvalidInputError("PLY vertex element lacks x/y/z") from exc
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]]).astype(np.float64)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = normals / np.where(norm > 0, norm, 1.0)
    return PointCloud(pts, normals)


def read_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    if fmt == "ascii":
        lines = body.decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            rows = []
            while len(rows) < count:
                if pos >= len(lines):
                    raise InvalidInputError("PLY body truncated")
                tok = lines[pos].split()
                pos += 1
                if tok:
                    rows.append(tok)
            if name == "vertex":
                scalar = [p for p, t in props if not isinstance(t, tuple)]
                if any(isinstance(t, tuple) for _, t in props):
                    raise InvalidInputError("list properties on vertices are not supported")
                arr = np.array(rows, dtype=np.float64).reshape(count, len(scalar))
                return _cloud_from_columns({p: arr[:, i] for i, p in enumerate(scalar)})
        raise InvalidInputError("PLY file has no vertex element")
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            dtype = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
            need = dtype.itemsize * count
            if len(body) - offset < need:
                raise InvalidInputError("PLY body truncated")
            arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            return _cloud_from_columns({p: arr[p] for p, _ in props})
        offset = _skip_binary_element(body, offset, count, props)
    raise InvalidInputError("PLY file has no vertex element")


def _skip_binary_element(body, offset, count, props):
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                ct = np.dtype("<" + _PLY_TYPES[t[1]])
                n = int(np.frombuffer(body, ct, 1, offset)[0])
                offset += ct.itemsize + n * np.dtype(_PLY_TYPES[t[2]]).itemsize
            else:
                offset += np.dtype(_PLY_TYPES[t]).itemsize
    return offset


def write_ply(path, cloud: PointCloud, binary: bool = False):
    has_n = cloud.normals is not None
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
    data = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            fh.write("".join(" ".join(repr(float(v)) for v in row) + "\n" for row in data).encode("ascii"))


def read_obj(path) -> TriangleMesh:
    """Vertices and faces of a Wavefront OBJ; polygons are fan-triangulated."""
    verts, tris = [], []
    for raw in Path(path).read_text().splitlines():
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = []
            for t in tok[1:]:
                i = int(t.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for k in range(1, len(idx) - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise InvalidInputError("OBJ file has no vertices")
    return TriangleMesh(np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh):
    lines = ["v " + " ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += ["f " + " ".join(str(int(i) + 1) for i in t) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def write_gt(path, gt: RigidTransform, **extra):
    """Store a scene-to-model transform as JSON (extra keys are kept verbatim)."""
    doc = {
        "convention": "scene_to_model",
        "rotation": gt.rotation.tolist(),
        "translation": gt.translation.tolist(),
        **extra,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_gt(path) -> RigidTransform:
    try:
        doc = json.loads(Path(path).read_text())
        if doc.get("convention", "scene_to_model") != "scene_to_model":
            raise InvalidInputError(f"unsupported transform convention {doc['convention']!r}")
        return RigidTransform(np.array(doc["rotation"], dtype=np.float64), np.array(doc["translation"], dtype=np.float64))
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise InvalidInputError(f"bad ground-truth file {path}: {exc}") from exc
