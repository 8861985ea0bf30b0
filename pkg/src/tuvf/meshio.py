"""OBJ and ASCII PLY ingestion, plus PLY point-cloud serialization."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud, TriangleMesh


class MeshFormatError(ValueError):
    pass


def load_obj(path) -> TriangleMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            if len(tok) != 4:
                raise MeshFormatError(
                    f"{path}:{lineno}: only triangle faces are supported")
            # indices may carry /vt/vn suffixes; OBJ is 1-based
            faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
    if not verts or not faces:
        raise MeshFormatError(f"{path}: no triangle mesh found")
    return TriangleMesh(np.asarray(verts), np.asarray(faces))


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_ply_header(lines: list[str]):
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError("not a PLY file")
    if "format ascii" not in lines[1]:
        raise MeshFormatError("only ASCII PLY is supported")
    elements = []  # (name, count, [property names])
    i = 2
    while i < len(lines):
        tok = lines[i].split()
        if tok[0] == "end_header":
            return elements, i + 1
        if tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            elements[-1][2].append(tok[-1])
        elif tok[0] != "comment":
            raise MeshFormatError(f"unsupported PLY header line: {lines[i]!r}")
        i += 1
    raise MeshFormatError("PLY header missing end_header")


def load_ply(path) -> tuple[PointCloud, np.ndarray | None]:
    """Read an ASCII PLY; returns (cloud with optional normals, faces or None)."""
    lines = Path(path).read_text().splitlines()
    elements, body_start = _parse_ply_header(lines)
    cursor = body_start
    points = normals = faces = None
    for name, count, props in elements:
        rows = lines[cursor:cursor + count]
        cursor += count
        if name == "vertex":
            data = np.array([[float(v) for v in r.split()] for r in rows])
            cols = {p: i for i, p in enumerate(props)}
            points = data[:, [cols["x"], cols["y"], cols["z"]]]
            if {"nx", "ny", "nz"} <= cols.keys():
                normals = data[:, [cols["nx"], cols["ny"], cols["nz"]]]
        elif name == "face":
            fl = []
            for r in rows:
                tok = [int(v) for v in r.split()]
                if tok[0] != 3:
                    raise MeshFormatError(f"{path}: only triangle faces are supported")
                fl.append(tok[1:4])
            faces = np.asarray(fl, dtype=np.int64)
    if points is None:
        raise MeshFormatError(f"{path}: PLY has no vertex element")
    return PointCloud(points, normals), faces


def save_pointcloud_ply(cloud: PointCloud, path) -> None:
    n = len(cloud)
    with_normals = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if with_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")
    rows = []
    for i in range(n):
        vals = list(cloud.points[i])
        if with_normals:
            vals += list(cloud.normals[i])
        rows.append(" ".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(header + rows) + "\n")


def load_mesh(path) -> TriangleMesh:
    """Load a triangle mesh from .obj or .ply by extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return load_obj(path)
    if suffix == ".ply":
        cloud, faces = load_ply(path)
        if faces is None:
            raise MeshFormatError(f"{path}: PLY has no faces; not a mesh")
        return TriangleMesh(cloud.points, faces)
    raise MeshFormatError(f"unsupported mesh format: {path}")
