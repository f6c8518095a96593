"""Synthetic shapes and the rotate / subsample / jitter / crop protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform, axis_angle_matrix

SHAPES = ("plane", "sphere", "cube", "torus", "gaussian-blob", "two-planes")
BLOB_BUMPS, BLOB_HEIGHTS, BLOB_WIDTHS = 24, (0.1, 0.3), (0.15, 0.3)


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _raw_shape(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "plane":
        return np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])
    if kind == "sphere":
        return _unit_vectors(rng, n)
    if kind == "cube":
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-1, 1, (n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            rows = axis == a
            others = [b for b in range(3) if b != a]
            pts[rows, a] = sign[rows]
            pts[np.ix_(rows, others)] = uv[rows]
        return pts
    if kind == "torus":
        big, small = 1.0, 0.4
        out = np.empty((0, 3))
        while out.shape[0] < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            # area element is proportional to (R + r cos v)
            keep = rng.uniform(0, big + small, 2 * n) < big + small * np.cos(v)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.vstack([out, np.column_stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)])])
        return out[:n]
    if kind == "gaussian-blob":
        # star-shaped surface: unit sphere pushed out by Gaussian bumps
        bumps = BLOB_BUMPS
        centers = _unit_vectors(rng, bumps)
        heights = rng.uniform(*BLOB_HEIGHTS, bumps)
        widths = rng.uniform(*BLOB_WIDTHS, bumps)
        dirs = _unit_vectors(rng, n)
        ang = np.arccos(np.clip(dirs @ centers.T, -1, 1))
        radius = 1.0 + np.sum(heights * np.exp(-0.5 * (ang / widths) ** 2), axis=1)
        return dirs * radius[:, None]
    if kind == "two-planes":
        # two rectangles of unequal size sharing the edge x = 0, 100 deg apart
        n_a = n // 2
        a = np.column_stack([rng.uniform(0, 1.2, n_a), rng.uniform(-1, 1, n_a), np.zeros(n_a)])
        t = rng.uniform(0, 0.8, n - n_a)
        phi = np.deg2rad(100.0)
        b = np.column_stack([t * np.cos(phi), rng.uniform(-1, 1, n - n_a), t * np.sin(phi)])
        return np.vstack([a, b])
    raise ValueError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPES)}")


def sample_shape(kind: str, n: int, seed: int = 0) -> PointCloud:
    """Seeded surface sample, centered and scaled into the unit ball."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pts = _raw_shape(kind, n, np.random.default_rng(seed))
    pts = pts - pts.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0:
        pts = pts / radius
    return PointCloud(pts)


@dataclass(frozen=True)
class ProtocolConfig:
    max_angle_deg: float = 45.0
    max_translation: float = 0.5
    points_kept: int = 1024
    noise: bool = True
    noise_std: float = 0.01  # N(0, 0.01) read as standard deviation 0.01
    noise_clip: float = 0.05
    partial: bool = False
    partial_count: int = 768
    anchor_distance: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.points_kept < 1:
            raise ValueError("points_kept must be >= 1")
        if self.partial and not 0 < self.partial_count <= self.points_kept:
            raise ValueError("partial_count must lie in (0, points_kept]")

    @classmethod
    def named(cls, protocol: str, **overrides) -> ProtocolConfig:
        presets = {
            "clean": dict(noise=False, partial=False),
            "full-noisy": dict(noise=True, partial=False),
            "partial-noisy": dict(noise=True, partial=True),
        }
        if protocol not in presets:
            raise ValueError(f"unknown protocol {protocol!r}; choose from {', '.join(presets)}")
        return cls(**{**presets[protocol], **overrides})


@dataclass
class RegistrationCase:
    source: PointCloud
    target: PointCloud
    transform: RigidTransform  # maps source onto target
    correspondence: np.ndarray  # per source point: target index or -1
    source_clean: np.ndarray = field(repr=False)  # pre-noise positions
    target_clean: np.ndarray = field(repr=False)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        src = np.flatnonzero(self.correspondence >= 0)
        return src, self.correspondence[src]


def random_transform(rng: np.random.Generator, max_angle_deg: float, max_translation: float) -> RigidTransform:
    """Uniform random axis, angle uniform in [0, max], translation uniform per axis."""
    axis = _unit_vectors(rng, 1)[0]
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    t = rng.uniform(-max_translation, max_translation, 3)
    return RigidTransform(axis_angle_matrix(axis, angle), t)


def _jitter(rng, n, cfg):
    return np.clip(cfg.noise_std * rng.normal(size=(n, 3)), -cfg.noise_clip, cfg.noise_clip)


def _crop(rng, pts, count, distance):
    anchor = _unit_vectors(rng, 1)[0] * distance
    _, idx = cKDTree(pts).query(anchor, k=count)
    return np.sort(np.atleast_1d(idx))


def make_case(cloud, cfg: ProtocolConfig, seed: int | None = None) -> RegistrationCase:
    """Build one source/target pair with ground truth from ``cloud``.

    Both sides share the same ``points_kept`` subset; the target is the
    transformed subset in an independent random order. Noise is added per
    side, then (in partial mode) each side keeps the ``partial_count`` nearest
    neighbors of its own random far-away anchor.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.shape[0] < cfg.points_kept:
        raise ValueError(f"cloud has {pts.shape[0]} points, protocol keeps {cfg.points_kept}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    transform = random_transform(rng, cfg.max_angle_deg, cfg.max_translation)
    base = pts[rng.permutation(pts.shape[0])[: cfg.points_kept]]
    order = rng.permutation(cfg.points_kept)
    src_clean = base
    tgt_clean = transform.apply(base)[order]
    src_id = np.arange(cfg.points_kept)
    tgt_id = order
    src = src_clean.copy()
    tgt = tgt_clean.copy()
    if cfg.noise:
        src += _jitter(rng, src.shape[0], cfg)
        tgt += _jitter(rng, tgt.shape[0], cfg)
    if cfg.partial:
        keep_s = _crop(rng, src, cfg.partial_count, cfg.anchor_distance)
        keep_t = _crop(rng, tgt, cfg.partial_count, cfg.anchor_distance)
        src, src_clean, src_id = src[keep_s], src_clean[keep_s], src_id[keep_s]
        tgt, tgt_clean, tgt_id = tgt[keep_t], tgt_clean[keep_t], tgt_id[keep_t]
    where = np.full(cfg.points_kept, -1, dtype=np.int64)
    where[tgt_id] = np.arange(tgt_id.size)
    corr = where[src_id]
    return RegistrationCase(PointCloud(src), PointCloud(tgt), transform, corr, src_clean, tgt_clean)


def make_cases(count: int, cfg: ProtocolConfig, shapes=SHAPES, shape_points: int = 2048) -> list[RegistrationCase]:
    """Seeded benchmark/training set cycling through ``shapes``."""
    cases = []
    for i in range(count):
        kind = shapes[i % len(shapes)]
        cloud = sample_shape(kind, max(shape_points, cfg.points_kept), seed=cfg.seed * 100003 + i)
        cases.append(make_case(cloud, cfg, seed=cfg.seed * 100003 + i + 7919))
    return cases
