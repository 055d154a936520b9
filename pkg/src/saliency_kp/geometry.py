"""Point clouds, rigid transforms, exact neighbor search and rigid fitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfiguration, EmptyCloud, ShapeMismatch

ORTHO_TOL = 1e-9


def as_points(cloud) -> np.ndarray:
    """Return the (N, 3) float64 coordinate array of a cloud or array-like."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim == 1 and pts.shape[0] == 3:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"expected (N, 3) coordinates, got {pts.shape}")
    return pts


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered, immutable set of 3D points (meters)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3) coordinates, got {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyCloud("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __getitem__(self, idx):
        return self.points[idx]

    def translated(self, t) -> "PointCloud":
        return PointCloud(self.points + np.asarray(t, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ShapeMismatch("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def rotation_about_axis(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of `degrees` about `axis`."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    th = np.deg2rad(degrees)
    K = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)


def random_transform(rng: np.random.Generator, max_degrees: float = 180.0,
                     max_translation: float = 1.0) -> RigidTransform:
    """Random rotation (uniform axis, angle up to max_degrees) and bounded translation."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-8:
        axis = rng.normal(size=3)
    angle = rng.uniform(-max_degrees, max_degrees)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(rotation_about_axis(axis, angle), t)


def apply_transform(cloud, t: RigidTransform):
    """Apply a rigid transform; returns the same container kind it was given."""
    pts = as_points(cloud)
    out = pts @ t.rotation.T + t.translation
    return PointCloud(out) if isinstance(cloud, PointCloud) else out


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -Rt @ t.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def point_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance of every row of `points` to `q`; the one formula used for all ordering."""
    diff = points - q
    return np.sqrt(np.sum(diff * diff, axis=-1))


class ExactKnn:
    """Exact k-nearest-neighbour search in any dimension.

    A k-d tree proposes candidates; the final ordering is always decided by
    recomputed Euclidean distances with ties broken by the lowest source
    index, so answers agree with a brute-force scan. Rows whose candidate
    list cannot prove the k-th boundary fall back to a ball query.
    """

    EXTRA = 4

    def __init__(self, data):
        data = np.array(data, dtype=np.float64, copy=True)
        if data.ndim != 2 or data.shape[0] < 1:
            raise EmptyCloud("cannot index an empty point set")
        data.flags.writeable = False
        self.data = data
        self._tree = cKDTree(data)

    def __len__(self):
        return self.data.shape[0]

    @staticmethod
    def _pad(r):
        return r * (1.0 + 1e-9) + 1e-12

    def _exact(self, q, cand):
        diff = self.data[cand] - q[..., None, :]
        return np.sqrt(np.sum(diff * diff, axis=-1))

    def query(self, queries, k: int):
        """(Q, k) indices and distances ordered by (distance, index)."""
        qs = np.asarray(queries, dtype=np.float64)
        n = len(self)
        k = min(k, n)
        m = min(k + self.EXTRA, n)
        _, cand = self._tree.query(qs, k=m)
        cand = np.asarray(cand, dtype=np.intp).reshape(len(qs), m)
        d = self._exact(qs, cand)
        order = np.lexsort((cand, d), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        idx, dist = cand[:, :k].copy(), d[:, :k].copy()
        if m < n:
            # the candidate list is complete only if the k-th exact distance
            # is clearly inside the farthest candidate the tree returned
            unsure = np.flatnonzero(self._pad(d[:, k - 1]) >= d[:, -1] * (1.0 - 1e-9))
            for row in unsure:
                ball = np.asarray(self._tree.query_ball_point(qs[row], self._pad(d[row, k - 1])),
                                  dtype=np.intp)
                bd = self._exact(qs[row], ball)
                o = np.lexsort((ball, bd))[:k]
                idx[row], dist[row] = ball[o], bd[o]
        return idx, dist


class NeighborIndex(ExactKnn):
    """Exact nearest-neighbour and radius queries over one fixed cloud."""

    def __init__(self, cloud):
        super().__init__(as_points(cloud))

    @property
    def points(self) -> np.ndarray:
        return self.data

    def nearest(self, q):
        idx, dist = self.query(np.asarray(q, dtype=np.float64).reshape(1, 3), 1)
        return int(idx[0, 0]), float(dist[0, 0])

    def knn(self, q, k: int):
        idx, dist = self.query(np.asarray(q, dtype=np.float64).reshape(1, 3), k)
        return idx[0], dist[0]

    def knn_all(self, queries, k: int):
        return self.query(as_points(queries), k)

    def nearest_all(self, queries):
        idx, dist = self.query(as_points(queries), 1)
        return idx[:, 0], dist[:, 0]

    def radius(self, q, r: float) -> np.ndarray:
        """All indices within distance r (inclusive), ordered by (distance, index)."""
        q = np.asarray(q, dtype=np.float64).reshape(3)
        cand = np.asarray(self._tree.query_ball_point(q, self._pad(r)), dtype=np.intp)
        d = self._exact(q, cand)
        o = np.lexsort((cand, d))
        return cand[o][d[o] <= r]


def build_index(cloud) -> NeighborIndex:
    return NeighborIndex(cloud)


def nearest(index: NeighborIndex, q):
    return index.nearest(q)


def median_center(cloud) -> np.ndarray:
    """Coordinate-wise median; for even N the midpoint of the two middle values."""
    return np.median(as_points(cloud), axis=0)


def radial_distances(cloud, center) -> np.ndarray:
    return point_distances(as_points(cloud), np.asarray(center, dtype=np.float64))


def umeyama_fit(src, dst) -> RigidTransform:
    """Least-squares rigid transform mapping src onto dst (no scale, reflection corrected)."""
    a = as_points(src)
    b = as_points(dst)
    if a.shape != b.shape:
        raise ShapeMismatch("src and dst must have the same shape")
    if a.shape[0] < 3:
        raise DegenerateConfiguration("need at least three correspondences")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    H = (a - ca).T @ (b - cb)
    U, S, Vt = np.linalg.svd(H)
    scale = max(S[0], np.abs(a - ca).max() ** 2, 1e-300)
    if S[1] <= 1e-12 * scale:
        raise DegenerateConfiguration("points are collinear or coincident")
    d = 1.0 if np.linalg.det(Vt.T @ U.T) > 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidTransform(R, cb - R @ ca)
