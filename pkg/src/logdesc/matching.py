"""Score matrices, log-domain Sinkhorn with dustbins, mutual-best matches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

# exp(-600) is still a normal float64
SCALING_SPREAD_LIMIT = 600.0


class MatchingError(ValueError):
    pass


@dataclass
class MatchSet:
    src: np.ndarray
    tgt: np.ndarray
    confidence: np.ndarray

    def __len__(self) -> int:
        return int(self.src.size)

    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(c)) for i, j, c in zip(self.src, self.tgt, self.confidence)]


def similarity(f, h) -> torch.Tensor:
    """``S_ij = <f_i, h_j> / sqrt(d)``."""
    f = torch.as_tensor(f)
    h = torch.as_tensor(h)
    if f.shape[-1] != h.shape[-1]:
        raise MatchingError(f"feature widths differ: {f.shape[-1]} vs {h.shape[-1]}")
    return (f / math.sqrt(f.shape[-1])) @ h.T


def _augment(z, dustbin):
    m, n = z.shape
    if dustbin is None:
        return z, z.new_zeros(m), z.new_full((n,), math.log(m / n))
    alpha = dustbin.reshape(1, 1)
    z = torch.cat([torch.cat([z, alpha.expand(m, 1)], 1), torch.cat([alpha.expand(1, n), alpha], 1)], 0)
    log_mu = torch.cat([z.new_zeros(m), z.new_tensor([math.log(n)])])
    log_nu = torch.cat([z.new_zeros(n), z.new_tensor([math.log(m)])])
    return z, log_mu, log_nu


def _log_iterations(z, log_mu, log_nu, iterations):
    u = torch.zeros_like(log_mu)
    v = torch.zeros_like(log_nu)
    for _ in range(iterations):
        u = log_mu - torch.logsumexp(z + v[None, :], dim=1)
        v = log_nu - torch.logsumexp(z + u[:, None], dim=0)
    return u, v


class _ScalingLoop(torch.autograd.Function):
    """``a = mu / (K b); b = nu / (K^T a)`` repeated, with a hand-written
    backward that folds the per-step outer products into two matmuls."""

    @staticmethod
    def forward(ctx, k, mu, nu, iterations):
        b = torch.ones_like(nu)
        a_hist, b_hist, s_hist, r_hist = [], [], [], []
        for _ in range(iterations):
            b_hist.append(b)
            s = k @ b
            a = mu / s
            r = k.T @ a
            b = nu / r
            s_hist.append(s)
            a_hist.append(a)
            r_hist.append(r)
        ctx.save_for_backward(k, torch.stack(a_hist), torch.stack(b_hist), torch.stack(s_hist), torch.stack(r_hist), b)
        return a, b

    @staticmethod
    def backward(ctx, grad_a, grad_b):
        k, a_hist, b_hist, s_hist, r_hist, b_last = ctx.saved_tensors
        steps = a_hist.shape[0]
        ga = torch.zeros_like(a_hist[0]) if grad_a is None else grad_a.clone()
        gb = torch.zeros_like(b_last) if grad_b is None else grad_b.clone()
        r_bar = torch.empty_like(r_hist)
        s_bar = torch.empty_like(s_hist)
        b_next = b_last
        for t in range(steps - 1, -1, -1):
            rb = -gb * b_next / r_hist[t]
            r_bar[t] = rb
            ga = ga + k @ rb
            sb = -ga * a_hist[t] / s_hist[t]
            s_bar[t] = sb
            gb = k.T @ sb
            ga = torch.zeros_like(ga)
            b_next = b_hist[t]
        grad_k = a_hist.T @ r_bar + s_bar.T @ b_hist
        return grad_k, None, None, None


def _scaling_iterations(z, log_mu, log_nu, iterations):
    """Same fixed point as the log-domain loop, carried out on exp(z - max)
    in float64 so each half-step is a matrix-vector product."""
    z64 = z.double()
    shift = z64.detach().max()
    k = torch.exp(z64 - shift)
    a, b = _ScalingLoop.apply(k, torch.exp(log_mu.double()), torch.exp(log_nu.double()), iterations)
    u = torch.log(a) - shift
    v = torch.log(b)
    return u.to(z.dtype), v.to(z.dtype)


def log_sinkhorn(scores, iterations: int = 50, dustbin=None, temperature: float = 1.0, method: str = "auto") -> torch.Tensor:
    """Log transport plan from alternating row/column normalization.

    With a ``dustbin`` score the matrix is augmented by one row and column;
    row marginals are ``(1, ..., 1, N)`` and column marginals ``(1, ..., 1, M)``.
    Without it, rows sum to 1 and columns to ``M / N``.

    ``method="log"`` runs the textbook log-sum-exp updates. ``"auto"`` uses the
    equivalent float64 scaling form while the score spread cannot underflow,
    and falls back to ``"log"`` otherwise.
    """
    z = torch.as_tensor(scores)
    if iterations < 1:
        raise MatchingError("iterations must be >= 1")
    if not torch.all(torch.isfinite(z)):
        raise MatchingError("score matrix contains non-finite entries")
    if dustbin is not None:
        dustbin = torch.as_tensor(dustbin, dtype=z.dtype)
        if not torch.isfinite(dustbin):
            raise MatchingError("dustbin score is not finite")
        dustbin = dustbin / temperature
    z, log_mu, log_nu = _augment(z / temperature, dustbin)
    u = v = None
    if method == "auto":
        spread = float(z.detach().max() - z.detach().min())
        if spread < SCALING_SPREAD_LIMIT:
            u, v = _scaling_iterations(z, log_mu, log_nu, iterations)
            if not (torch.all(torch.isfinite(u)) and torch.all(torch.isfinite(v))):
                u = v = None
    elif method != "log":
        raise MatchingError(f"unknown sinkhorn method {method!r}")
    if u is None:
        u, v = _log_iterations(z, log_mu, log_nu, iterations)
    return z + u[:, None] + v[None, :]


def sinkhorn(scores, iterations: int = 50, dustbin=None, temperature: float = 1.0, method: str = "auto") -> torch.Tensor:
    return torch.exp(log_sinkhorn(scores, iterations, dustbin, temperature, method))


def mutual_best(plan, dustbin: bool = True, threshold: float = 0.0) -> MatchSet:
    """Pairs that are each other's argmax; dustbin winners stay unmatched."""
    p = np.asarray(plan.detach().numpy() if isinstance(plan, torch.Tensor) else plan, dtype=np.float64)
    m, n = (p.shape[0] - 1, p.shape[1] - 1) if dustbin else p.shape
    row_best = np.argmax(p[:m], axis=1)
    col_best = np.argmax(p[:, :n], axis=0)
    src = np.flatnonzero(row_best < n)
    tgt = row_best[src]
    keep = col_best[tgt] == src
    src, tgt = src[keep], tgt[keep]
    conf = p[src, tgt]
    keep = conf > threshold if threshold > 0 else np.ones(src.size, bool)
    return MatchSet(src[keep].astype(np.int64), tgt[keep].astype(np.int64), conf[keep])


def nll_matching_loss(log_plan: torch.Tensor, correspondence, n_target: int | None = None) -> torch.Tensor:
    """Negative log-likelihood of the ground-truth assignment.

    ``correspondence[i]`` is the target index of source point i or -1.
    Unmatched source rows and unmatched target columns are scored against the
    dustbin; the mean is taken over all these terms.
    """
    corr = np.asarray(correspondence, dtype=np.int64)
    m = corr.size
    n = log_plan.shape[1] - 1 if n_target is None else n_target
    matched = np.flatnonzero(corr >= 0)
    terms = [log_plan[matched, corr[matched]]]
    src_un = np.flatnonzero(corr < 0)
    terms.append(log_plan[src_un, n])
    tgt_hit = np.zeros(n, bool)
    tgt_hit[corr[matched]] = True
    terms.append(log_plan[m, np.flatnonzero(~tgt_hit)])
    return -torch.cat(terms).mean()
