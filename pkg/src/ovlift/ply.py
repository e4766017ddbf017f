"""Minimal PLY reader/writer for point clouds with optional colors and edges."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyError("missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype, list_count_dtype or None)])
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unterminated header")
        tokens = line.decode("ascii", "replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property before element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], _PLY_TYPES[tokens[3]], _PLY_TYPES[tokens[2]]))
            else:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]], None))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyError(f"unsupported format {fmt!r}")
    return fmt, elements


def _read_binary_element(fh, count, props, endian):
    if all(p[2] is None for p in props):
        dtype = np.dtype([(name, endian + dt) for name, dt, _ in props])
        buf = fh.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise PlyError("truncated binary body")
        return np.frombuffer(buf, dtype=dtype, count=count)
    rows = []
    for _ in range(count):
        row = {}
        for name, dt, cdt in props:
            if cdt is None:
                item = np.dtype(endian + dt)
                row[name] = np.frombuffer(fh.read(item.itemsize), dtype=item)[0]
            else:
                citem = np.dtype(endian + cdt)
                n = int(np.frombuffer(fh.read(citem.itemsize), dtype=citem)[0])
                item = np.dtype(endian + dt)
                row[name] = np.frombuffer(fh.read(item.itemsize * n), dtype=item)
        rows.append(row)
    return rows


def _read_ascii_element(lines, count, props):
    if all(p[2] is None for p in props):
        if count == 0:
            return np.zeros(0, dtype=[(name, dt) for name, dt, _ in props])
        table = np.array([next(lines).split()[: len(props)] for _ in range(count)], dtype=float)
        out = np.zeros(count, dtype=[(name, dt) for name, dt, _ in props])
        for k, (name, _, _) in enumerate(props):
            out[name] = table[:, k]
        return out
    rows = []
    for _ in range(count):
        tokens = next(lines).split()
        pos = 0
        row = {}
        for name, dt, cdt in props:
            if cdt is None:
                row[name] = float(tokens[pos])
                pos += 1
            else:
                n = int(tokens[pos])
                row[name] = np.array(tokens[pos + 1 : pos + 1 + n], dtype=dt)
                pos += 1 + n
        rows.append(row)
    return rows


def read_ply(path):
    """Read vertices (N×3 float64), colors (N×3 uint8 or None) and edges (E×2 or None)."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        data = {}
        if fmt == "ascii":
            lines = iter(fh.read().decode("ascii").splitlines())
            lines = (ln for ln in lines if ln.strip())
            try:
                for name, count, props in elements:
                    data[name] = _read_ascii_element(lines, count, props)
            except StopIteration:
                raise PlyError("truncated ascii body") from None
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            for name, count, props in elements:
                data[name] = _read_binary_element(fh, count, props, endian)

    if "vertex" not in data:
        raise PlyError("no vertex element")
    vertex = data["vertex"]
    names = vertex.dtype.names
    if not {"x", "y", "z"} <= set(names):
        raise PlyError("vertex element lacks x/y/z")
    points = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1).astype(np.uint8)

    edges = []
    if "edge" in data:
        e = data["edge"]
        if isinstance(e, np.ndarray):
            edges.append(np.stack([e["vertex1"], e["vertex2"]], axis=1).astype(np.int64))
        else:
            edges.append(np.array([[r["vertex1"], r["vertex2"]] for r in e], dtype=np.int64).reshape(-1, 2))
    if "face" in data:
        pairs = []
        for row in data["face"]:
            idx = row["vertex_indices"] if "vertex_indices" in row else row["vertex_index"]
            idx = np.asarray(idx, dtype=np.int64)
            pairs.append(np.stack([idx, np.roll(idx, -1)], axis=1))
        if pairs:
            edges.append(np.concatenate(pairs))
    mesh_edges = np.concatenate(edges) if edges else None
    return points, colors, mesh_edges


def write_ply(path, points, colors=None, binary=True):
    points = np.asarray(points, dtype=np.float32)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.zeros(len(points), dtype=fields)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]

    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(points)}",
              "property float x", "property float y", "property float z"]
    if colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            for row in rec:
                fh.write((" ".join(str(v) for v in row) + "\n").encode("ascii"))
