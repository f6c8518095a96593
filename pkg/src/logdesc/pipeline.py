"""Descriptor -> matches -> pose, and the synthetic benchmark loop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen import SHAPES, ProtocolConfig, RegistrationCase, make_cases
from .descriptor import DescriptorConfig, compute_features, geometric_descriptor
from .geometry import RigidTransform
from .matching import MatchSet, log_sinkhorn, mutual_best, similarity
from .metrics import MatchingCounts, MatchingReport, RegistrationReport, evaluate_registration, matching_counts
from .model import PreparedCloud, RegistrationNet, TrainingPair, prepare_cloud
from .pose import DegeneratePairsError, FsrConfig, fsr, kabsch, mutual_nearest, ransac_registration

ESTIMATORS = ("fsr", "ransac", "svd")


@dataclass
class RegistrationResult:
    transform: object
    matches: MatchSet
    inliers: int
    estimator: str


def describe_pair(src, tgt, model: RegistrationNet | None, cfg: DescriptorConfig):
    """Descriptors for both clouds, plus the match set they induce.

    Without a model the handcrafted max-pooled f2 rows are compared by mutual
    nearest neighbor; with a model the Sinkhorn plan is reduced by mutual-best.
    """
    if model is None:
        fa = geometric_descriptor(compute_features(src, cfg))
        fb = geometric_descriptor(compute_features(tgt, cfg))
        si, ti = mutual_nearest(fa, fb)
        return fa, fb, MatchSet(si, ti, np.ones(si.size))
    dtype = next(model.parameters()).dtype
    return network_matches(model, prepare_cloud(src, cfg, dtype), prepare_cloud(tgt, cfg, dtype))


@torch.no_grad()
def network_matches(model: RegistrationNet, ps: PreparedCloud, pt: PreparedCloud):
    f, h = model.describe(ps, pt)
    plan = torch.exp(log_sinkhorn(similarity(f, h), model.cfg.sinkhorn_iterations, model.dustbin))
    return f.numpy(), h.numpy(), mutual_best(plan, dustbin=True)


def estimate_pose(estimator, src_pts, tgt_pts, matches: MatchSet, fa=None, fb=None, seed=0, fsr_cfg=None,
                  ransac_iterations=1000, tau=0.05):
    if estimator == "ransac":
        t, n = ransac_registration(fa, fb, src_pts, tgt_pts, ransac_iterations, tau, seed)
        return t, n
    if len(matches) < 3:
        raise DegeneratePairsError(f"only {len(matches)} matches; need at least 3")
    x = np.asarray(src_pts)[matches.src]
    y = np.asarray(tgt_pts)[matches.tgt]
    if estimator == "svd":
        return kabsch(x, y), len(matches)
    if estimator == "fsr":
        cfg = fsr_cfg or FsrConfig(seed=seed, tau=tau)
        return fsr(x, y, cfg)
    raise ValueError(f"unknown estimator {estimator!r}; choose from {', '.join(ESTIMATORS)}")


def register(src, tgt, model=None, estimator="fsr", seed=0, cfg: DescriptorConfig | None = None, **kw):
    cfg = cfg or (model.cfg.descriptor if model is not None else DescriptorConfig())
    fa, fb, matches = describe_pair(src, tgt, model, cfg)
    t, n = estimate_pose(estimator, src.points, tgt.points, matches, fa, fb, seed, **kw)
    return RegistrationResult(t, matches, n, estimator)


@dataclass
class BenchmarkResult:
    registration: RegistrationReport
    matching: MatchingReport
    failures: list[int] = field(default_factory=list)

    def metrics(self) -> dict[str, float]:
        return {**self.registration.summary(), **self.matching.summary()}


def oracle_matches(case: RegistrationCase) -> MatchSet:
    si, ti = case.pairs()
    return MatchSet(si, ti, np.ones(si.size))


def _run_case(i, case, model, estimator, seed, cfg, use_oracle, threshold):
    if use_oracle:
        fa = fb = None
        matches = oracle_matches(case)
    else:
        fa, fb, matches = describe_pair(case.source, case.target, model, cfg)
    return _score_case(i, case, fa, fb, matches, estimator, seed, use_oracle, threshold)


def _score_case(i, case, fa, fb, matches, estimator, seed, use_oracle, threshold):
    if estimator == "ransac" and not use_oracle:
        si, ti = mutual_nearest(fa, fb)
        matches = MatchSet(si, ti, np.ones(si.size))
    failed = False
    try:
        t, _ = estimate_pose(
            "svd" if use_oracle else estimator,
            case.source.points, case.target.points, matches, fa, fb, seed + i,
        )
    except DegeneratePairsError:
        t, failed = RigidTransform.identity(), True
    counts = matching_counts(matches, case.correspondence, case.source_clean, case.target_clean, case.transform, threshold)
    return t, counts, failed


def run_benchmark(
    cases: list[RegistrationCase],
    model=None,
    estimator="fsr",
    seed=0,
    cfg: DescriptorConfig | None = None,
    use_oracle=False,
    threshold=0.05,
    workers: int = 1,
) -> BenchmarkResult:
    """Register every case; degenerate cases fall back to identity and count as failures.

    Each case draws from its own seed, and results are reduced in case order,
    so ``workers > 1`` gives the same numbers as a sequential run.
    """
    cfg = cfg or (model.cfg.descriptor if model is not None else DescriptorConfig())
    args = (model, estimator, seed, cfg, use_oracle, threshold)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda ic: _run_case(ic[0], ic[1], *args), enumerate(cases)))
    else:
        results = [_run_case(i, c, *args) for i, c in enumerate(cases)]
    return _reduce(cases, results)


def evaluate_pairs(model: RegistrationNet, cases, pairs: list[TrainingPair], estimator="fsr", seed=0, threshold=0.05):
    """Benchmark metrics on already prepared training pairs (no feature recomputation)."""
    results = []
    for i, (case, pair) in enumerate(zip(cases, pairs)):
        fa, fb, matches = network_matches(model, pair.src, pair.tgt)
        results.append(_score_case(i, case, fa, fb, matches, estimator, seed, False, threshold))
    return _reduce(cases, results)


def _reduce(cases, results) -> BenchmarkResult:
    counts = MatchingCounts()
    for _, c, _ in results:
        counts = counts + c
    failures = [i for i, (_, _, failed) in enumerate(results) if failed]
    reg = evaluate_registration([r[0] for r in results], [c.transform for c in cases], [c.source.points for c in cases])
    return BenchmarkResult(reg, MatchingReport.from_counts(counts), failures)


def benchmark_cases(protocol: str, pairs: int, seed: int, shapes=SHAPES, **overrides) -> list[RegistrationCase]:
    return make_cases(pairs, ProtocolConfig.named(protocol, seed=seed, **overrides), shapes)
