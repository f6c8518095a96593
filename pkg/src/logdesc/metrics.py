"""Registration and matching metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import RigidTransform, is_rotation


class MetricError(ValueError):
    pass


def euler_zyx_deg(rotation) -> np.ndarray:
    """Intrinsic ZYX Euler angles returned in (x, y, z) order, degrees."""
    z, y, x = Rotation.from_matrix(rotation).as_euler("ZYX", degrees=True)
    return np.array([x, y, z])


def isotropic_rotation_error(r_est, r_gt) -> float:
    """Geodesic angle arccos((tr(R_gt^T R_est) - 1) / 2) in degrees.

    Evaluated as atan2(sin, cos) of the relative rotation, which keeps full
    precision near 0 and 180 degrees where arccos does not.
    """
    d = np.asarray(r_gt, dtype=np.float64).T @ np.asarray(r_est, dtype=np.float64)
    c = (np.trace(d) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([d[2, 1] - d[1, 2], d[0, 2] - d[2, 0], d[1, 0] - d[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def rotation_errors(r_est, r_gt) -> tuple[np.ndarray, float]:
    """Per-axis absolute Euler errors (wrapped to ±180) and geodesic error."""
    for r in (r_est, r_gt):
        if not is_rotation(r, 1e-6):
            raise MetricError("input is not a rotation matrix")
    diff = euler_zyx_deg(r_est) - euler_zyx_deg(r_gt)
    diff = (diff + 180.0) % 360.0 - 180.0
    return np.abs(diff), isotropic_rotation_error(r_est, r_gt)


def rmse_mae(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise MetricError("no values to aggregate")
    return float(np.sqrt(np.mean(v**2))), float(np.mean(np.abs(v)))


def l_rmse(source, t_est: RigidTransform, t_gt: RigidTransform) -> float:
    pts = np.asarray(source, dtype=np.float64)
    if pts.size == 0:
        raise MetricError("empty source")
    diff = t_gt.apply(pts) - t_est.apply(pts)
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


@dataclass
class RegistrationReport:
    rmse_R: float
    mae_R: float
    rmse_t: float
    mae_t: float
    L_R: float
    L_t: float
    L_RMSE: float
    FR: float
    per_case: list[dict] = field(default_factory=list, repr=False)

    def summary(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("per_case")
        return d


def evaluate_registration(estimates, truths, sources, rot_fail_deg=5.0, trans_fail=1.0) -> RegistrationReport:
    """Aggregate over cases; ``L_*`` are means of the per-case isotropic errors."""
    if not estimates:
        raise MetricError("no cases")
    euler, trans, per_case = [], [], []
    for est, gt, src in zip(estimates, truths, sources):
        e, iso = rotation_errors(est.rotation, gt.rotation)
        dt = est.translation - gt.translation
        euler.append(e)
        trans.append(np.abs(dt))
        per_case.append(
            {"L_R": iso, "L_t": float(np.linalg.norm(dt)), "L_RMSE": l_rmse(src, est, gt)}
        )
    rmse_r, mae_r = rmse_mae(euler)
    rmse_t, mae_t = rmse_mae(trans)
    lr = [c["L_R"] for c in per_case]
    lt = [c["L_t"] for c in per_case]
    return RegistrationReport(
        rmse_R=rmse_r,
        mae_R=mae_r,
        rmse_t=rmse_t,
        mae_t=mae_t,
        L_R=float(np.mean(lr)),
        L_t=float(np.mean(lt)),
        L_RMSE=float(np.mean([c["L_RMSE"] for c in per_case])),
        FR=failure_rate(lr, lt, rot_fail_deg, trans_fail),
        per_case=per_case,
    )


@dataclass
class MatchingCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: MatchingCounts) -> MatchingCounts:
        return MatchingCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MatchingReport:
    precision: float
    accuracy: float
    recall: float
    inlier_ratio: float
    counts: MatchingCounts = field(default_factory=MatchingCounts)

    @classmethod
    def from_counts(cls, c: MatchingCounts) -> MatchingReport:
        pred = c.tp + c.fp
        total = c.tp + c.tn + c.fp + c.fn
        p = c.tp / pred if pred else 0.0
        return cls(
            precision=p,
            accuracy=(c.tp + c.tn) / total if total else 0.0,
            recall=c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0,
            inlier_ratio=p,
            counts=c,
        )

    def summary(self, percent: bool = False) -> dict[str, float]:
        s = 100.0 if percent else 1.0
        return {
            "precision": s * self.precision,
            "accuracy": s * self.accuracy,
            "recall": s * self.recall,
            "IR": s * self.inlier_ratio,
        }


def matching_counts(matches, correspondence, src_pts, tgt_pts, t_gt: RigidTransform, threshold=0.05) -> MatchingCounts:
    """Confusion counts for one case.

    A predicted pair is a true positive when its source point has a ground
    truth partner and ``|T_gt(x_i) - y_j| < threshold``. FN counts matchable
    source points without a true positive; TN counts unmatchable source
    points left unmatched.
    """
    if threshold <= 0:
        raise MetricError("threshold must be positive")
    corr = np.asarray(correspondence)
    src = np.asarray(matches.src, dtype=np.int64)
    tgt = np.asarray(matches.tgt, dtype=np.int64)
    matchable = corr >= 0
    if src.size:
        dist = np.linalg.norm(t_gt.apply(np.asarray(src_pts)[src]) - np.asarray(tgt_pts)[tgt], axis=1)
        good = (dist < threshold) & matchable[src]
    else:
        good = np.zeros(0, bool)
    tp = int(np.count_nonzero(good))
    fp = int(src.size - tp)
    fn = int(np.count_nonzero(matchable) - tp)
    predicted = np.zeros(corr.size, bool)
    predicted[src] = True
    tn = int(np.count_nonzero(~matchable & ~predicted))
    return MatchingCounts(tp, fp, fn, tn)


def matching_par(matches, correspondence, src_pts, tgt_pts, t_gt, threshold=0.05) -> MatchingReport:
    return MatchingReport.from_counts(
        matching_counts(matches, correspondence, src_pts, tgt_pts, t_gt, threshold)
    )


def failure_rate(l_r, l_t, rot_fail_deg: float = 5.0, trans_fail: float = 1.0) -> float:
    lr = np.asarray(l_r, dtype=np.float64)
    lt = np.asarray(l_t, dtype=np.float64)
    if lr.size == 0:
        raise MetricError("no cases")
    if rot_fail_deg <= 0 or trans_fail <= 0:
        raise MetricError("thresholds must be positive")
    return float(np.mean((lr > rot_fail_deg) | (lt > trans_fail)))
