"""Rigid pose estimation from correspondences: Kabsch, FSR and RANSAC.

All estimators return the transform mapping SOURCE points onto TARGET points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, fps


class PoseError(ValueError):
    pass


class DegeneratePairsError(PoseError):
    """Raised when correspondences cannot pin down a rigid transform."""


def _as_pairs(src, tgt):
    x = np.asarray(src, dtype=np.float64)
    y = np.asarray(tgt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise PoseError(f"paired points must be matching (C, 3) arrays, got {x.shape} and {y.shape}")
    return x, y


def kabsch(src, tgt, weights=None) -> RigidTransform:
    """Least-squares rigid transform with ``tgt ≈ R @ src + t``."""
    x, y = _as_pairs(src, tgt)
    if x.shape[0] < 3:
        raise DegeneratePairsError(f"need at least 3 pairs, got {x.shape[0]}")
    if weights is None:
        w = np.full(x.shape[0], 1.0 / x.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (x.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise PoseError("weights must be non-negative with positive sum")
        w = w / w.sum()
    xm = w @ x
    ym = w @ y
    xc = x - xm
    yc = y - ym
    h = (xc * w[:, None]).T @ yc
    spread = np.linalg.svd(xc, compute_uv=False)
    if spread[1] <= 1e-12 * max(spread[0], 1e-300):
        raise DegeneratePairsError("correspondences are collinear or coincident")
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    if np.linalg.det(v @ u.T) < 0:
        v[:, -1] *= -1.0
    r = v @ u.T
    return RigidTransform(r, ym - r @ xm)


@dataclass
class FsrConfig:
    iterations: int = 64
    k: int | None = None  # defaults to min(C, 24)
    tau: float = 0.05
    seed: int = 0
    refine: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise PoseError("iterations must be >= 1")
        if self.k is not None and self.k < 3:
            raise PoseError("k must be >= 3")
        if self.tau <= 0:
            raise PoseError("tau must be positive")


def count_inliers(transform: RigidTransform, src, tgt, tau: float) -> np.ndarray:
    return np.linalg.norm(transform.apply(src) - tgt, axis=1) < tau


def fsr(src, tgt, cfg: FsrConfig | None = None) -> tuple[RigidTransform, int]:
    """Farthest sampling-guided registration.

    Each iteration samples ``k`` pairs by FPS over the source points (start
    index drawn from the seeded generator), fits Kabsch and counts pairs
    closer than ``tau`` after transforming the source. The best-so-far model
    wins; with ``refine`` it is refit on its own inlier set until the set
    stops growing.
    """
    cfg = cfg or FsrConfig()
    x, y = _as_pairs(src, tgt)
    c = x.shape[0]
    if c < 3:
        raise DegeneratePairsError(f"fsr needs at least 3 pairs, got {c}")
    k = min(c, 24) if cfg.k is None else cfg.k
    if k > c:
        raise PoseError(f"fsr sample size k={k} exceeds {c} pairs")
    rng = np.random.default_rng(cfg.seed)
    starts = rng.integers(0, c, size=cfg.iterations)

    best, best_t, failures = 0, None, 0
    for start in starts:
        ind = fps(x, k, int(start))
        try:
            t = kabsch(x[ind], y[ind])
        except DegeneratePairsError:
            failures += 1
            continue
        n_in = int(np.count_nonzero(count_inliers(t, x, y, cfg.tau)))
        if best_t is None or n_in > best:
            best, best_t = n_in, t
    if best_t is None:
        raise DegeneratePairsError(
            f"all {cfg.iterations} fsr iterations were degenerate ({failures} rank-deficient samples)"
        )
    if cfg.refine:
        best_t, best = _refine(best_t, best, x, y, cfg.tau)
    return best_t, best


def _refine(t, best, x, y, tau, max_rounds: int = 20):
    for _ in range(max_rounds):
        mask = count_inliers(t, x, y, tau)
        if np.count_nonzero(mask) < 3:
            break
        try:
            cand = kabsch(x[mask], y[mask])
        except DegeneratePairsError:
            break
        n_in = int(np.count_nonzero(count_inliers(cand, x, y, tau)))
        if n_in < best:
            break
        grew = n_in > best
        t, best = cand, n_in
        if not grew:
            break
    return t, best


def mutual_nearest(src_feat, tgt_feat) -> tuple[np.ndarray, np.ndarray]:
    """Mutual nearest neighbors in descriptor space."""
    a = np.asarray(src_feat, dtype=np.float64)
    b = np.asarray(tgt_feat, dtype=np.float64)
    _, ab = cKDTree(b).query(a, k=1)
    _, ba = cKDTree(a).query(b, k=1)
    i = np.arange(a.shape[0])
    keep = ba[ab] == i
    return i[keep], ab[keep]


def ransac_registration(
    src_feat,
    tgt_feat,
    src_pts,
    tgt_pts,
    iterations: int = 1000,
    tau: float = 0.05,
    seed: int = 0,
) -> tuple[RigidTransform, int]:
    """3-point RANSAC over mutual-NN feature matches, refit on the consensus."""
    si, ti = mutual_nearest(src_feat, tgt_feat)
    if si.size < 3:
        raise DegeneratePairsError(f"only {si.size} mutual feature matches; need 3")
    x = np.asarray(src_pts, dtype=np.float64)[si]
    y = np.asarray(tgt_pts, dtype=np.float64)[ti]
    rng = np.random.default_rng(seed)
    best_t, best = None, -1
    for _ in range(iterations):
        pick = rng.choice(x.shape[0], size=3, replace=False)
        try:
            t = kabsch(x[pick], y[pick])
        except DegeneratePairsError:
            continue
        n_in = int(np.count_nonzero(count_inliers(t, x, y, tau)))
        if n_in > best:
            best, best_t = n_in, t
    if best_t is None or best < 3:
        raise DegeneratePairsError("ransac found no non-degenerate consensus")
    # the refit only replaces the sampled model if it keeps at least as many inliers
    return _refine(best_t, best, x, y, tau)
