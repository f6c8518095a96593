import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from logdesc.matching import (
    MatchingError,
    log_sinkhorn,
    mutual_best,
    nll_matching_loss,
    similarity,
    sinkhorn,
)


def brute_mutual_best(p):
    m, n = p.shape
    out = set()
    for i in range(m):
        for j in range(n):
            if all(p[i, j] > p[i, b] or (p[i, j] == p[i, b] and j <= b) for b in range(n)) and all(
                p[i, j] > p[a, j] or (p[i, j] == p[a, j] and i <= a) for a in range(m)
            ):
                out.add((i, j))
    return out


# ------------------------------------------------------------- similarity


def test_similarity_identical_orthonormal():
    s = similarity(torch.eye(4, dtype=torch.float64), torch.eye(4, dtype=torch.float64))
    assert torch.all(s.diagonal() == 0.5) and s.sum() == 2.0


def test_similarity_zero_features():
    assert torch.all(similarity(torch.zeros(3, 8), torch.randn(5, 8)) == 0)


def test_similarity_two_by_two():
    f = torch.tensor([[1.0, 2.0], [0.0, -1.0]], dtype=torch.float64)
    h = torch.tensor([[3.0, 1.0], [2.0, 2.0]], dtype=torch.float64)
    expected = torch.tensor([[5.0, 6.0], [-1.0, -2.0]], dtype=torch.float64) / math.sqrt(2)
    torch.testing.assert_close(similarity(f, h), expected)


def test_similarity_width_mismatch():
    with pytest.raises(MatchingError):
        similarity(torch.zeros(2, 3), torch.zeros(2, 4))


# --------------------------------------------------------------- sinkhorn


@pytest.mark.parametrize("method", ["log", "auto"])
def test_uniform_scores(method):
    plan = sinkhorn(torch.zeros(4, 4, dtype=torch.float64), method=method)
    torch.testing.assert_close(plan, torch.full((4, 4), 0.25, dtype=torch.float64))


def test_strong_diagonal_is_near_permutation():
    rng = np.random.default_rng(0)
    perm = rng.permutation(5)
    s = np.zeros((5, 5))
    s[np.arange(5), perm] = 30.0
    plan = sinkhorn(torch.as_tensor(s)).numpy()
    rows, cols = linear_sum_assignment(-s)
    target = np.zeros((5, 5))
    target[rows, cols] = 1
    assert np.abs(plan - target).max() < 1e-3


@pytest.mark.parametrize("method", ["log", "auto"])
@pytest.mark.parametrize("dustbin", [None, 1.0])
def test_marginals(method, dustbin):
    torch.manual_seed(1)
    s = torch.randn(7, 5, dtype=torch.float64) * 3
    plan = sinkhorn(s, 50, dustbin=dustbin, method=method)
    if dustbin is None:
        torch.testing.assert_close(plan.sum(1), torch.ones(7, dtype=torch.float64), atol=1e-6, rtol=0)
        torch.testing.assert_close(plan.sum(0), torch.full((5,), 7 / 5, dtype=torch.float64), atol=1e-6, rtol=0)
    else:
        mu = torch.tensor([1.0] * 7 + [5.0], dtype=torch.float64)
        nu = torch.tensor([1.0] * 5 + [7.0], dtype=torch.float64)
        torch.testing.assert_close(plan.sum(1), mu, atol=1e-6, rtol=0)
        torch.testing.assert_close(plan.sum(0), nu, atol=1e-6, rtol=0)


def test_scaling_and_log_forms_agree_with_gradients():
    torch.manual_seed(2)
    s1 = torch.randn(6, 8, dtype=torch.float64, requires_grad=True)
    s2 = s1.detach().clone().requires_grad_(True)
    b1 = torch.tensor(0.7, dtype=torch.float64, requires_grad=True)
    b2 = b1.detach().clone().requires_grad_(True)
    w = torch.randn(7, 9, dtype=torch.float64)
    a = log_sinkhorn(s1, 30, b1, method="log")
    b = log_sinkhorn(s2, 30, b2, method="auto")
    torch.testing.assert_close(a, b, atol=1e-9, rtol=0)
    (a * w).sum().backward()
    (b * w).sum().backward()
    torch.testing.assert_close(s1.grad, s2.grad, atol=1e-9, rtol=0)
    torch.testing.assert_close(b1.grad, b2.grad, atol=1e-9, rtol=0)


def test_huge_spread_falls_back_to_log_domain():
    s = torch.tensor([[0.0, 2000.0], [-2000.0, 0.0]], dtype=torch.float64)
    plan = sinkhorn(s)
    assert torch.isfinite(plan).all()
    torch.testing.assert_close(plan.sum(1), torch.ones(2, dtype=torch.float64))


def test_nonfinite_scores_rejected():
    with pytest.raises(MatchingError):
        sinkhorn(torch.tensor([[0.0, float("nan")]]))
    with pytest.raises(MatchingError):
        sinkhorn(torch.zeros(2, 2), iterations=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_permutation_equivariance_and_shift_invariance(seed, shift):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(6, 4, generator=g, dtype=torch.float64)
    perm = torch.randperm(6, generator=g)
    plan = sinkhorn(s, dustbin=0.5)
    torch.testing.assert_close(sinkhorn(s[perm], dustbin=0.5)[:6], plan[perm], atol=1e-9, rtol=0)
    torch.testing.assert_close(sinkhorn(s + shift, dustbin=0.5 + shift), plan, atol=1e-6, rtol=0)
    torch.testing.assert_close(sinkhorn(s + shift), sinkhorn(s), atol=1e-6, rtol=0)


# ------------------------------------------------------------- mutual best


def test_identity_plan_gives_diagonal():
    plan = np.eye(4) * 0.9 + 0.01
    ms = mutual_best(plan, dustbin=False)
    assert ms.src.tolist() == [0, 1, 2, 3] and ms.tgt.tolist() == [0, 1, 2, 3]


def test_dustbin_row_unmatched():
    plan = np.full((4, 4), 0.01)
    plan[0, 0] = plan[1, 1] = 0.9
    plan[2, 3] = 0.9  # row 2 prefers the dustbin column
    ms = mutual_best(plan, dustbin=True)
    assert ms.pairs() == [(0, 0, 0.9), (1, 1, 0.9)]


def test_random_plan_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = rng.uniform(size=(6, 4))
        ms = mutual_best(p, dustbin=False)
        assert set(zip(ms.src.tolist(), ms.tgt.tolist())) == brute_mutual_best(p)


def test_tie_broken_by_smallest_index():
    ms = mutual_best(np.ones((3, 3)), dustbin=False)
    assert ms.pairs() == [(0, 0, 1.0)]


def test_confidence_threshold():
    plan = np.diag([0.9, 0.2, 0.6]) + 0.01
    assert mutual_best(plan, dustbin=False, threshold=0.5).src.tolist() == [0, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_match_set_is_injective(seed, m, n):
    p = np.random.default_rng(seed).integers(0, 3, size=(m + 1, n + 1)).astype(float)
    ms = mutual_best(p)
    assert len(set(ms.src.tolist())) == len(ms) == len(set(ms.tgt.tolist()))
    assert np.all(ms.src < m) and np.all(ms.tgt < n)


# -------------------------------------------------------------------- loss


def test_nll_loss_terms():
    torch.manual_seed(4)
    log_plan = log_sinkhorn(torch.randn(3, 3, dtype=torch.float64), dustbin=1.0)
    corr = [1, -1, 0]
    expected = -(log_plan[0, 1] + log_plan[2, 0] + log_plan[1, 3] + log_plan[3, 2]) / 4
    torch.testing.assert_close(nll_matching_loss(log_plan, corr), expected)


def test_nll_loss_minimal_for_matching_scores():
    good = torch.full((3, 3), -5.0, dtype=torch.float64)
    good[[0, 1, 2], [2, 0, 1]] = 5.0
    corr = [2, 0, 1]
    perms = [list(p) for p in itertools.permutations(range(3))]
    losses = [float(nll_matching_loss(log_sinkhorn(good[:, p], dustbin=0.0), corr)) for p in perms]
    assert np.argmin(losses) == 0
