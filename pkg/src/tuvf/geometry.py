"""Canonical UV sphere, point-cloud utilities, exact KNN, and Chamfer distance.

The icosphere is the shared canonical domain: vertex ordering is a pure
function of the subdivision level, so vertex indices are stable
correspondence anchors across shapes and runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class UvSphere:
    """Subdivided icosahedron reprojected to the unit sphere."""

    level: int
    vertices: np.ndarray          # [n, 3] float64, unit norm
    edges: np.ndarray             # [m, 2] int, i < j, lexicographically sorted
    faces: np.ndarray             # [f, 3] int

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    def adjacency(self) -> list[np.ndarray]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_vertices)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [np.array(sorted(n), dtype=np.int64) for n in nbrs]


def _base_icosahedron() -> tuple[np.ndarray, np.ndarray]:
    # Canonical orientation: poles on +-z, upper ring at longitude 0.
    lat = np.arctan(0.5)
    verts = [np.array([0.0, 0.0, 1.0])]
    for k in range(5):
        lon = 2.0 * np.pi * k / 5.0
        verts.append(np.array([np.cos(lon) * np.cos(lat),
                               np.sin(lon) * np.cos(lat), np.sin(lat)]))
    for k in range(5):
        lon = 2.0 * np.pi * (k + 0.5) / 5.0
        verts.append(np.array([np.cos(lon) * np.cos(lat),
                               np.sin(lon) * np.cos(lat), -np.sin(lat)]))
    verts.append(np.array([0.0, 0.0, -1.0]))

    faces = []
    for k in range(5):
        kn = (k + 1) % 5
        faces.append((0, 1 + k, 1 + kn))
        faces.append((1 + k, 6 + k, 1 + kn))
        faces.append((6 + k, 6 + kn, 1 + kn))
        faces.append((11, 6 + kn, 6 + k))
    return np.stack(verts), np.asarray(faces, dtype=np.int64)


def build_icosphere(level: int) -> UvSphere:
    """Midpoint-subdivide the canonical icosahedron ``level`` times.

    Vertex count is 10 * 4**level + 2; ordering is deterministic (parents
    first, then edge midpoints in face-traversal order).
    """
    if not 0 <= level <= 6:
        raise ValueError(f"icosphere level must be in [0, 6], got {level}")
    verts, faces = _base_icosahedron()
    verts = list(verts)
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}
        new_faces = []

        def mid(i: int, j: int) -> int:
            key = (i, j) if i < j else (j, i)
            idx = midpoint.get(key)
            if idx is None:
                p = verts[i] + verts[j]
                p = p / np.linalg.norm(p)
                idx = len(verts)
                verts.append(p)
                midpoint[key] = idx
            return idx

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = np.asarray(new_faces, dtype=np.int64)

    vertices = np.stack(verts)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    edges = np.unique(e, axis=0)
    return UvSphere(level=level, vertices=vertices, edges=edges, faces=faces)


@dataclass
class PointCloud:
    points: np.ndarray                      # [n, 3]
    normals: np.ndarray | None = None       # [n, 3], unit

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be [n, 3], got {self.points.shape}")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must be index-aligned with points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class CubeTransform:
    """Isotropic scale + translation recorded by ``normalize_to_unit_cube``."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) / self.scale + self.center


def normalize_to_unit_cube(cloud: PointCloud) -> tuple[PointCloud, CubeTransform]:
    """Map the bounding box into [-0.5, 0.5]^3, centered, aspect preserved."""
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ValueError("degenerate cloud: zero extent")
    tf = CubeTransform(center=(lo + hi) / 2.0, scale=1.0 / extent)
    return PointCloud(tf.apply(cloud.points), cloud.normals), tf


class KnnIndex:
    """Exact k-nearest-neighbor queries over a fixed point set.

    Low-dimensional point sets use a static kd-tree; high-dimensional ones
    (EdgeConv feature spaces) use a chunked vectorized scan, where trees
    degenerate. Ties break toward the lower point index in both paths.
    """

    _PAD = 8
    _TREE_MAX_DIM = 3
    _CHUNK = 2048

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError(f"KnnIndex needs [n, d] points, got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("KnnIndex over an empty point set")
        self.points = pts
        self._tree = cKDTree(pts) if pts.shape[1] <= self._TREE_MAX_DIM else None
        self._sq = None if self._tree is not None else (pts ** 2).sum(axis=1)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (indices, distances) of the exact k nearest points.

        Results are sorted ascending by distance, then by index. Accepts a
        single query [d] or a batch [m, d]; output shapes follow.
        """
        n = len(self.points)
        if not 1 <= k <= n:
            raise ValueError(f"k={k} out of range for {n} points")
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        qb = q[None] if single else q
        if qb.shape[1] != self.points.shape[1]:
            raise ValueError(f"query dim {qb.shape[1]} != index dim {self.points.shape[1]}")

        idx, dist = (self._query_tree(qb, k) if self._tree is not None
                     else self._query_scan(qb, k))
        if single:
            return idx[0], dist[0]
        return idx, dist

    def _query_tree(self, qb: np.ndarray, k: int):
        n = len(self.points)
        pad = min(n, k + self._PAD)
        dist, idx = self._tree.query(qb, k=pad)
        if pad == 1:
            dist, idx = dist[:, None], idx[:, None]
        order = np.lexsort((idx, dist), axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)

        if pad < n:
            # A tie straddling the padded window could hide a lower index.
            unresolved = np.flatnonzero(dist[:, k - 1] >= dist[:, pad - 1])
            for r in unresolved:
                d_all = np.linalg.norm(self.points - qb[r], axis=1)
                o = np.lexsort((np.arange(n), d_all))[:k]
                idx[r, :k] = o
                dist[r, :k] = d_all[o]
        return idx[:, :k], dist[:, :k]

    def _query_scan(self, qb: np.ndarray, k: int):
        n = len(self.points)
        m = len(qb)
        kk = min(k + self._PAD, n)
        idx = np.empty((m, k), dtype=np.int64)
        dist = np.empty((m, k), dtype=np.float64)
        for lo in range(0, m, self._CHUNK):
            hi = min(lo + self._CHUNK, m)
            chunk = qb[lo:hi]
            d2 = np.maximum(
                self._sq[None, :] + (chunk ** 2).sum(axis=1)[:, None]
                - 2.0 * chunk @ self.points.T, 0.0)
            part = (np.argpartition(d2, kk - 1, axis=1)[:, :kk] if kk < n
                    else np.broadcast_to(np.arange(n), (hi - lo, n)).copy())
            dpart = np.take_along_axis(d2, part, axis=1)
            order = np.lexsort((part, dpart), axis=-1)
            i_sorted = np.take_along_axis(part, order, axis=-1)
            d_sorted = np.take_along_axis(dpart, order, axis=-1)
            if kk < n:
                unresolved = np.flatnonzero(d_sorted[:, k - 1] >= d_sorted[:, kk - 1])
                for r in unresolved:
                    o = np.lexsort((np.arange(n), d2[r]))[:k]
                    i_sorted[r, :k] = o
                    d_sorted[r, :k] = d2[r, o]
            idx[lo:hi] = i_sorted[:, :k]
            dist[lo:hi] = np.sqrt(d_sorted[:, :k])
        return idx, dist


def chamfer_distance(a, b) -> Tensor:
    """Symmetric squared Chamfer distance, mean-reduced per direction.

    Differentiable with respect to whichever side is a tracked Tensor;
    nearest-neighbor assignments are treated as constants.
    """
    at = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float32))
    bt = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float32))
    if at.size == 0 or bt.size == 0:
        raise ValueError("chamfer_distance on an empty cloud")
    nn_in_b, _ = KnnIndex(bt.data).query(at.data, 1)
    nn_in_a, _ = KnnIndex(at.data).query(bt.data, 1)
    d_ab = at - ad.gather_rows(bt, nn_in_b[:, 0])
    d_ba = ad.gather_rows(at, nn_in_a[:, 0]) - bt
    return (ad.mean_(ad.sum_(d_ab * d_ab, axis=1))
            + ad.mean_(ad.sum_(d_ba * d_ba, axis=1)))


@dataclass
class TriangleMesh:
    vertices: np.ndarray          # [v, 3]
    faces: np.ndarray             # [f, 3] int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError("faces must be triangles [f, 3]")

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-12)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(n, axis=1)


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform surface samples with face normals, seeded."""
    if len(mesh.faces) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(mesh.faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[face_idx]]          # [n, 3, 3]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) \
        + v[:, None] * (tri[:, 2] - tri[:, 0])
    normals = mesh.face_normals()[face_idx]
    return PointCloud(pts, normals)
