import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from logdesc.geometry import RigidTransform, axis_angle_matrix
from logdesc.matching import MatchSet
from logdesc.metrics import (
    MetricError,
    evaluate_registration,
    euler_zyx_deg,
    failure_rate,
    isotropic_rotation_error,
    l_rmse,
    matching_counts,
    matching_par,
    rmse_mae,
    rotation_errors,
)


def quaternion_angle_deg(r1, r2):
    """Geodesic angle from the relative quaternion conj(q1) * q2."""
    x1, y1, z1, w1 = Rotation.from_matrix(r1).as_quat()
    x2, y2, z2, w2 = Rotation.from_matrix(r2).as_quat()
    w = w1 * w2 + x1 * x2 + y1 * y2 + z1 * z2
    vec = [w1 * x2 - x1 * w2 - y1 * z2 + z1 * y2, w1 * y2 - y1 * w2 - z1 * x2 + x1 * z2, w1 * z2 - z1 * w2 - x1 * y2 + y1 * x2]
    return np.degrees(2 * np.arctan2(np.linalg.norm(vec), abs(w)))


def matches(pairs):
    a = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return MatchSet(a[:, 0], a[:, 1], np.ones(len(a)))


# --------------------------------------------------------------- rotations


def test_equal_rotations_zero_error():
    r = Rotation.random(random_state=0).as_matrix()
    e, iso = rotation_errors(r, r)
    assert np.all(e < 1e-9) and iso < 1e-9


def test_ten_degrees_about_z():
    e, iso = rotation_errors(axis_angle_matrix([0, 0, 1], np.radians(10)), np.eye(3))
    assert iso == pytest.approx(10.0)
    np.testing.assert_allclose(e, [0, 0, 10], atol=1e-9)


def test_isotropic_matches_quaternion_oracle():
    rs = Rotation.random(200, random_state=1).as_matrix()
    near = [r @ Rotation.from_rotvec(v).as_matrix() for r, v in zip(rs[:20], np.random.default_rng(1).normal(0, 1e-4, (20, 3)))]
    flip = [r @ Rotation.from_rotvec([0, 0, np.pi - 1e-5]).as_matrix() for r in rs[:20]]
    for a, b in zip([*rs[:100], *near, *flip], [*rs[100:], *rs[:20], *rs[:20]]):
        assert isotropic_rotation_error(a, b) == pytest.approx(quaternion_angle_deg(b, a), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_isotropic_error_symmetric_and_bounded(seed):
    a, b = Rotation.random(2, random_state=seed).as_matrix()
    x, y = isotropic_rotation_error(a, b), isotropic_rotation_error(b, a)
    assert abs(x - y) < 1e-9 and 0 <= x <= 180


def test_euler_wraps_around():
    e, _ = rotation_errors(axis_angle_matrix([0, 0, 1], np.radians(179)), axis_angle_matrix([0, 0, 1], np.radians(-179)))
    np.testing.assert_allclose(e, [0, 0, 2], atol=1e-9)


def test_euler_order():
    r = Rotation.from_euler("ZYX", [30, 20, 10], degrees=True).as_matrix()
    np.testing.assert_allclose(euler_zyx_deg(r), [10, 20, 30], atol=1e-9)


def test_non_rotation_rejected():
    with pytest.raises(MetricError):
        rotation_errors(np.diag([1, 1, -1.0]), np.eye(3))


# -------------------------------------------------------------- aggregates


def test_rmse_mae_examples():
    assert rmse_mae([2, 2, 2]) == (2.0, 2.0)
    rmse, mae = rmse_mae([0, 2])
    assert mae == 1.0 and rmse == pytest.approx(np.sqrt(2))


def test_rmse_mae_against_two_pass_oracle():
    v = np.random.default_rng(2).normal(size=1000)
    sq = ab = 0.0
    for x in v:
        sq += x * x
        ab += abs(x)
    rmse, mae = rmse_mae(v)
    assert rmse == pytest.approx(np.sqrt(sq / 1000), rel=1e-12)
    assert mae == pytest.approx(ab / 1000, rel=1e-12)


def test_rmse_mae_empty():
    with pytest.raises(MetricError):
        rmse_mae([])


def test_l_rmse_examples():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 3))
    t = RigidTransform(Rotation.random(random_state=3).as_matrix(), rng.normal(size=3))
    assert l_rmse(pts, t, t) == 0.0
    shifted = RigidTransform(t.rotation, t.translation + [0.3, 0, 0.4])
    assert l_rmse(pts, shifted, t) == pytest.approx(0.5, abs=1e-12)


def test_l_rmse_loop_oracle():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(30, 3))
    a = RigidTransform(Rotation.random(random_state=4).as_matrix(), rng.normal(size=3))
    b = RigidTransform(Rotation.random(random_state=5).as_matrix(), rng.normal(size=3))
    total = 0.0
    for p in pts:
        d = (a.rotation @ p + a.translation) - (b.rotation @ p + b.translation)
        total += d @ d
    assert l_rmse(pts, a, b) == pytest.approx(np.sqrt(total / 30), abs=1e-12)


def test_evaluate_registration_order_invariant():
    rng = np.random.default_rng(6)
    est, gt, src = [], [], []
    for s in range(6):
        gt.append(RigidTransform(Rotation.random(random_state=s).as_matrix(), rng.normal(size=3)))
        est.append(RigidTransform(Rotation.random(random_state=s + 50).as_matrix(), rng.normal(size=3)))
        src.append(rng.normal(size=(10, 3)))
    a = evaluate_registration(est, gt, src).summary()
    order = [3, 1, 5, 0, 2, 4]
    b = evaluate_registration([est[i] for i in order], [gt[i] for i in order], [src[i] for i in order]).summary()
    for key in a:
        assert a[key] == pytest.approx(b[key], rel=1e-12)
    assert set(a) == {"rmse_R", "mae_R", "rmse_t", "mae_t", "L_R", "L_t", "L_RMSE", "FR"}


# ---------------------------------------------------------------- matching


def test_all_ground_truth_predicted():
    pts = np.random.default_rng(7).normal(size=(5, 3))
    rep = matching_par(matches([(i, i) for i in range(5)]), np.arange(5), pts, pts, RigidTransform.identity())
    assert rep.precision == rep.accuracy == rep.recall == 1.0


def test_empty_prediction():
    pts = np.random.default_rng(8).normal(size=(5, 3))
    rep = matching_par(matches([]), np.arange(5), pts, pts, RigidTransform.identity())
    assert rep.recall == 0.0 and rep.precision == 0.0


def test_confusion_counts_against_oracle():
    rng = np.random.default_rng(9)
    for _ in range(30):
        m = 12
        src = rng.normal(size=(m, 3))
        tgt = rng.normal(size=(m, 3))
        corr = rng.permutation(m)
        corr[rng.uniform(size=m) < 0.3] = -1
        for i in np.flatnonzero(corr >= 0):
            tgt[corr[i]] = src[i] + rng.normal(0, 0.02, 3)
        s = rng.choice(m, 6, replace=False)
        t = rng.choice(m, 6, replace=False)
        pred = matches(list(zip(s, t)))
        tp = fp = 0
        for i, j in zip(s, t):
            if corr[i] >= 0 and np.linalg.norm(src[i] - tgt[j]) < 0.05:
                tp += 1
            else:
                fp += 1
        fn = int(np.sum(corr >= 0)) - tp
        tn = sum(1 for i in range(m) if corr[i] < 0 and i not in s)
        c = matching_counts(pred, corr, src, tgt, RigidTransform.identity())
        assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
        assert c.tp + c.fp == len(pred) and c.tp + c.fn == int(np.sum(corr >= 0))


def test_inlier_ratio_percent():
    pts = np.random.default_rng(10).normal(size=(4, 3))
    rep = matching_par(matches([(0, 0), (1, 2)]), np.arange(4), pts, pts, RigidTransform.identity())
    assert rep.summary(percent=True)["IR"] == 50.0


# ------------------------------------------------------------ failure rate


def test_failure_rate_examples():
    assert failure_rate([0, 0, 0], [0, 0, 0]) == 0.0
    assert failure_rate([0, 10, 0, 0], [0, 0, 0, 0]) == 0.25
    assert failure_rate([90, 10], [5, 5], np.inf, np.inf) == 0.0
    with pytest.raises(MetricError):
        failure_rate([], [])
