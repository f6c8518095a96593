"""Point cloud primitives and handcrafted local geometry.

Everything in this module works in float64. Learned layers live elsewhere and
run in float32; the invariance guarantees for A/P/O, normals and LRFs need the
extra precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

AREA_EPS = 1e-14
SIGN_EPS = 1e-12


class GeometryError(ValueError):
    pass


class DegenerateNeighborhoodError(GeometryError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"expected an (n, 3) array, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise GeometryError("normals must match points in shape")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation acting as ``p -> R @ p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation(rot, 1e-9):
            raise GeometryError("rotation must be orthonormal with det = +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> RigidTransform:
        m = np.asarray(matrix, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def is_rotation(matrix: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(
        np.max(np.abs(m.T @ m - np.eye(3))) <= tol
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; ``axis`` need not be normalized."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ transform.rotation.T
    return PointCloud(transform.apply(cloud.points), normals)


class NeighborhoodIndex:
    """Immutable k-d tree over a cloud; k-NN and radius-capped queries."""

    def __init__(self, points):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise GeometryError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, query, k: int, radius_cap: float | None = None, exclude_self: bool = False) -> np.ndarray:
        """Indices of up to ``k`` nearest points, sorted by distance.

        With ``exclude_self`` points coincident with the query are dropped.
        Fewer than ``k`` hits are returned as-is.
        """
        if k < 1:
            raise GeometryError("k must be >= 1")
        if radius_cap is not None and radius_cap <= 0:
            raise GeometryError("radius_cap must be positive")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        n = len(self)
        want = min(n, k + 1 if exclude_self else k)
        bound = np.inf if radius_cap is None else radius_cap
        dist, idx = self._tree.query(q, k=want, distance_upper_bound=bound)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        keep = idx < n
        if radius_cap is not None:
            keep &= dist < radius_cap
        if exclude_self:
            keep &= dist > 0.0
        return idx[keep][:k].astype(np.int64)

    def knn_all(self, k: int, exclude_self: bool = True) -> np.ndarray:
        """Fixed-shape ``(n, k)`` neighbor table for every indexed point.

        Rows short of ``k`` neighbors are padded by repeating their farthest
        available neighbor.
        """
        n = len(self)
        want = min(n, k + 1 if exclude_self else k)
        dist, idx = self._tree.query(self.points, k=want)
        dist = dist.reshape(n, want)
        idx = idx.reshape(n, want)
        out = np.empty((n, k), dtype=np.int64)
        for i in range(n):
            row = idx[i]
            if exclude_self:
                row = row[dist[i] > 0.0]
            row = row[:k]
            if row.size == 0:
                row = np.array([i])
            out[i, : row.size] = row
            out[i, row.size :] = row[-1]
        return out


def covariance_eigen(points) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of the mean-centered covariance of a neighborhood.

    Returns eigenvalues sorted descending and the matching unit eigenvectors
    as columns.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise DegenerateNeighborhoodError("covariance needs at least 3 points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    if not np.any(cov):
        return np.zeros(3), np.eye(3)
    vals, vecs = np.linalg.eigh(cov)
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def compute_apo(eigenvalues) -> tuple[float, float, float]:
    """Anisotropy, planarity and omnivariance from descending eigenvalues."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(lam < -SIGN_EPS):
        raise GeometryError(f"negative eigenvalue {lam.min()!r}")
    l1, l2, l3 = np.clip(lam, 0.0, None)
    if l1 == 0.0:
        return 0.0, 0.0, 0.0
    return (l1 - l3) / l1, (l2 - l3) / l1, float(np.cbrt(l1 * l2 * l3))


def _orient(vec: np.ndarray, ref: np.ndarray) -> np.ndarray:
    dot = float(vec @ ref)
    if abs(dot) < SIGN_EPS:
        dot = vec[np.argmax(np.abs(vec))]
    return vec if dot >= 0 else -vec


def compute_lrf(eigenvectors, point, neighborhood_centroid) -> np.ndarray:
    """Sign-disambiguated local reference frame with columns (u, v, w)."""
    vecs = np.asarray(eigenvectors, dtype=np.float64)
    ref = np.asarray(point, dtype=np.float64) - np.asarray(neighborhood_centroid, dtype=np.float64)
    u = _orient(vecs[:, 0], ref)
    w = _orient(vecs[:, 2], ref)
    v = np.cross(w, u)
    return np.column_stack([u, v, w])


def _tangent_order(point, neighbors, axis):
    """Azimuthal order of neighbors around ``axis``, starting at the nearest."""
    offsets = neighbors - point
    tangential = offsets - np.outer(offsets @ axis, axis)
    norms = np.linalg.norm(tangential, axis=1)
    ref = int(np.argmax(norms > 0)) if np.any(norms > 0) else 0
    e1 = tangential[ref] / norms[ref] if norms[ref] > 0 else np.zeros(3)
    e2 = np.cross(axis, e1)
    phi = np.mod(np.arctan2(tangential @ e2, tangential @ e1), 2.0 * np.pi)
    phi[ref] = 0.0
    return np.argsort(phi, kind="stable")


def triangle_fan_normal(point, fan) -> tuple[np.ndarray, np.ndarray]:
    """Raw cross-product normals and areas of the fan (point, fan[j], fan[j+1])."""
    e1 = fan[:-1] - point
    e2 = fan[1:] - point
    cross = np.cross(e1, e2)
    return cross, 0.5 * np.linalg.norm(cross, axis=1)


def estimate_normal(point, neighbors, provisional_axis) -> np.ndarray:
    """Area-softmax weighted average of k-1 triangle normals.

    Neighbors (given nearest first) are sorted by azimuth around the
    provisional axis; each triangle normal is flipped into the axis'
    hemisphere before averaging.
    """
    p = np.asarray(point, dtype=np.float64)
    nbrs = np.asarray(neighbors, dtype=np.float64)
    axis = np.asarray(provisional_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    if nbrs.shape[0] < 3:
        raise DegenerateNeighborhoodError("normal estimation needs at least 3 neighbors")
    fan = nbrs[_tangent_order(p, nbrs, axis)]
    cross, area = triangle_fan_normal(p, fan)
    valid = area >= AREA_EPS
    if not np.any(valid):
        return axis.copy()
    z = np.zeros_like(cross)
    z[valid] = cross[valid] / (2.0 * area[valid, None])
    z[valid & (z @ axis < 0)] *= -1.0
    a = np.where(valid, area, 0.0)
    w = np.exp(a - a.max())
    w /= w.sum()
    n = w @ z
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return axis.copy()
    return n / norm


def fps(points, k: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; ties resolve to the lowest index."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"fps needs 1 <= k <= {n}, got {k}")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    mind = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return chosen


@dataclass
class LocalGeometry:
    """Per-point handcrafted geometry for a whole cloud (arrays over points)."""

    eigenvalues: np.ndarray  # (n, 3) descending
    apo: np.ndarray  # (n, 3) anisotropy, planarity, omnivariance
    lrf: np.ndarray  # (n, 3, 3) columns u, v, w
    normals: np.ndarray  # (n, 3)
    neighbors: np.ndarray  # (n, k) triangle/graph neighbors, nearest first

    def __len__(self) -> int:
        return self.apo.shape[0]


def local_geometry(
    cloud,
    k: int = 30,
    pca_max_neighbors: int = 128,
    pca_radius: float = 0.3,
    index: NeighborhoodIndex | None = None,
) -> LocalGeometry:
    """A/P/O, LRF and triangle-fan normal for every point of ``cloud``.

    One tree serves both query configurations: the PCA neighborhood (point
    itself plus up to ``pca_max_neighbors`` within ``pca_radius``) and the
    k nearest others for triangles and the feature graph.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    index = index or NeighborhoodIndex(pts)
    nbrs = index.knn_all(k, exclude_self=True)

    want = min(n, pca_max_neighbors)
    dist, idx = index._tree.query(pts, k=want)
    dist = dist.reshape(n, want)
    idx = idx.reshape(n, want)

    evals = np.zeros((n, 3))
    apo = np.zeros((n, 3))
    lrf = np.zeros((n, 3, 3))
    normals = np.zeros((n, 3))
    for i in range(n):
        members = idx[i, dist[i] < pca_radius]
        if members.size < 3:
            members = np.concatenate([[i], nbrs[i]])
        hood = pts[members]
        if hood.shape[0] < 3:
            raise DegenerateNeighborhoodError(f"point {i} has fewer than 3 neighbors")
        lam, vecs = covariance_eigen(hood)
        evals[i] = lam
        apo[i] = compute_apo(lam)
        frame = compute_lrf(vecs, pts[i], hood.mean(axis=0))
        lrf[i] = frame
        normals[i] = estimate_normal(pts[i], pts[nbrs[i]], frame[:, 2])
    return LocalGeometry(evals, apo, lrf, normals, nbrs)
