"""LoGDesc: handcrafted neighborhood features, graph CNN, rotary self-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import LocalGeometry, PointCloud, local_geometry
from .nn import GN_EPS, MLP, ConfigError, GroupNorm, PointwiseLinear, softmax

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class DescriptorConfig:
    k: int = 30
    d: int = 132
    layers: int = 4
    heads: int = 1
    use_A: bool = True
    use_P: bool = True
    use_O: bool = True
    use_N: bool = True
    pca_max_neighbors: int = 128
    pca_radius: float = 0.3
    groups: int = 4
    cnn_channels: tuple[int, int] = (32, 64)
    rotate_values: bool = True

    def __post_init__(self):
        if self.k < 3:
            raise ConfigError("k must be at least 3")
        if self.d % 6:
            raise ConfigError(f"d={self.d} must be divisible by 6 for the rotary blocks")
        for c in (*self.cnn_channels, self.d):
            if c % self.groups:
                raise ConfigError(f"{c} channels not divisible into {self.groups} groups")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by {self.heads} heads")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")


@dataclass
class GeometricFeatures:
    """Non-learned part of the descriptor for one (mean-centered) cloud."""

    positions: np.ndarray  # (n, 3) centered coordinates
    centroid: np.ndarray  # (3,)
    geometry: LocalGeometry
    f0: np.ndarray  # (n, 6)
    f1: np.ndarray  # (n, k, 12)
    normals_lrf: np.ndarray  # (n, k, 3)
    f2: np.ndarray  # (n, k, 15)


def build_f0(points, apo, use_A=True, use_P=True, use_O=True) -> np.ndarray:
    """Rows ``[x, y, z, A, P, O]``; ablated columns are zeroed, not dropped."""
    f0 = np.concatenate([np.asarray(points, np.float64), np.asarray(apo, np.float64)], axis=1)
    for col, keep in zip((3, 4, 5), (use_A, use_P, use_O)):
        if not keep:
            f0[:, col] = 0.0
    return f0


def build_f1(f0, neighbors) -> np.ndarray:
    """Edge features ``[f0_i, f0_j - f0_i]`` for every neighbor j of i."""
    f0 = np.asarray(f0)
    center = np.broadcast_to(f0[:, None, :], (f0.shape[0], neighbors.shape[1], f0.shape[1]))
    return np.concatenate([center, f0[neighbors] - center], axis=2)


def project_neighbor_normals(normals, lrf, neighbors) -> np.ndarray:
    """Neighbor normals expressed in the center point's LRF axes."""
    return np.einsum("nab,nka->nkb", lrf, np.asarray(normals)[neighbors])


def build_f2(f1, normals_lrf, use_N=True) -> np.ndarray:
    nl = np.asarray(normals_lrf)
    if f1.shape[:2] != nl.shape[:2]:
        raise ConfigError(f"f1 {f1.shape} and projected normals {nl.shape} disagree")
    if not use_N:
        nl = np.zeros_like(nl)
    return np.concatenate([f1, nl], axis=2)


def compute_features(cloud, cfg: DescriptorConfig) -> GeometricFeatures:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if n < cfg.k:
        raise ConfigError(f"cloud has {n} points but k={cfg.k}; use a smaller k")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    geo = local_geometry(centered, cfg.k, cfg.pca_max_neighbors, cfg.pca_radius)
    f0 = build_f0(centered, geo.apo, cfg.use_A, cfg.use_P, cfg.use_O)
    f1 = build_f1(f0, geo.neighbors)
    nl = project_neighbor_normals(geo.normals, geo.lrf, geo.neighbors)
    f2 = build_f2(f1, nl, cfg.use_N)
    return GeometricFeatures(centered, centroid, geo, f0, f1, nl, f2)


def geometric_descriptor(features: GeometricFeatures) -> np.ndarray:
    """Untrained fallback: max over the k rows of f2 (15 channels)."""
    return features.f2.max(axis=1)


class GraphCNN(nn.Module):
    """Three pointwise conv + GroupNorm + ReLU stages, then max over neighbors."""

    def __init__(self, channels: list[int], groups: int):
        super().__init__()
        self.convs = nn.ModuleList(PointwiseLinear(a, b) for a, b in zip(channels[:-1], channels[1:]))
        self.norms = nn.ModuleList(GroupNorm(c, groups) for c in channels[1:])

    def forward(self, f2: torch.Tensor) -> torch.Tensor:
        # channels-first (n, c, k) so conv1d and group_norm need no copies;
        # same math as PointwiseLinear / GroupNorm on (n, k, c)
        x = f2.transpose(1, 2)
        for conv, norm in zip(self.convs, self.norms):
            x = F.conv1d(x, conv.weight.T.unsqueeze(-1), conv.bias)
            x = torch.relu(F.group_norm(x, norm.groups, norm.gain, norm.offset, GN_EPS))
        return x.amax(dim=2)


def rotary_angles(positions: torch.Tensor, d: int) -> torch.Tensor:
    """Per-pair rotation angles ``(n, d/2)`` ordered (xθ_j, yθ_j, zθ_j) per block."""
    if d % 6:
        raise ConfigError(f"d={d} must be divisible by 6")
    j = torch.arange(d // 6, dtype=positions.dtype, device=positions.device)
    theta = ROPE_BASE ** (-6.0 * j / d)
    return (positions[:, None, :] * theta[None, :, None]).reshape(positions.shape[0], d // 2)


def rotary_apply(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Block-diagonal rotation by position, as paired 2D rotations."""
    d = x.shape[-1]
    ang = rotary_angles(positions, d)
    c, s = torch.cos(ang), torch.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack([even * c - odd * s, even * s + odd * c], dim=-1).reshape(x.shape)


def rotary_matrix(position, d: int) -> np.ndarray:
    """Dense ``d x d`` block rotation; for checks only."""
    pos = torch.as_tensor(np.asarray(position, dtype=np.float64)).reshape(1, 3)
    ang = rotary_angles(pos, d)[0].numpy()
    m = np.zeros((d, d))
    for q, a in enumerate(ang):
        i = 2 * q
        m[i : i + 2, i : i + 2] = [[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]
    return m


class RotarySelfAttention(nn.Module):
    """Residual self-attention with 3D rotary position encoding.

    ``f <- f + MLP([R W_Q f_i, sum_j a_ij R W_V f_j])`` with
    ``a_ij = softmax_j((R W_Q f_i) . (R W_K f_j) / sqrt(d))``.
    """

    def __init__(self, d: int, heads: int = 1, rotate_values: bool = True):
        super().__init__()
        self.d, self.heads, self.rotate_values = d, heads, rotate_values
        self.wq = PointwiseLinear(d, d, bias=False)
        self.wk = PointwiseLinear(d, d, bias=False)
        self.wv = PointwiseLinear(d, d, bias=False)
        self.mlp = MLP([2 * d, 2 * d, d])

    def attention(self, f, positions):
        q = rotary_apply(self.wq(f), positions)
        k = rotary_apply(self.wk(f), positions)
        n, h = f.shape[0], self.heads
        qh = q.reshape(n, h, -1).transpose(0, 1)
        kh = k.reshape(n, h, -1).transpose(0, 1)
        return softmax((qh / np.sqrt(qh.shape[-1])) @ kh.transpose(1, 2), axis=-1), q

    def forward(self, f, positions):
        alpha, q = self.attention(f, positions)
        v = self.wv(f)
        if self.rotate_values:
            v = rotary_apply(v, positions)
        else:
            q = self.wq(f)
        n, h = f.shape[0], self.heads
        msg = (alpha @ v.reshape(n, h, -1).transpose(0, 1)).transpose(0, 1).reshape(n, self.d)
        return f + self.mlp(torch.cat([q, msg], dim=-1))


class LogDescNet(nn.Module):
    """Learned half of the descriptor: f2 -> CNN -> max-pool -> attention."""

    def __init__(self, cfg: DescriptorConfig):
        super().__init__()
        self.cfg = cfg
        self.cnn = GraphCNN([15, *cfg.cnn_channels, cfg.d], cfg.groups)
        self.attention = nn.ModuleList(
            RotarySelfAttention(cfg.d, cfg.heads, cfg.rotate_values) for _ in range(cfg.layers)
        )

    def forward(self, f2: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        f = self.cnn(f2)
        for layer in self.attention:
            f = layer(f, positions)
        return f


def extract_logdesc(cloud, cfg: DescriptorConfig, model: LogDescNet | None):
    """Full descriptor pipeline; returns ``(descriptors [n, d], features)``."""
    if model is None:
        raise ConfigError("no descriptor model given; load or initialize weights first")
    feats = compute_features(cloud, cfg)
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.as_tensor(feats.f2, dtype=dtype), torch.as_tensor(feats.positions, dtype=dtype))
    return out.numpy(), feats
