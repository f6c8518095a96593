"""Finite-difference audit of every parameterized layer in a tiny fp64 model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datagen import ProtocolConfig, make_case, sample_shape
from .descriptor import DescriptorConfig
from .model import ModelConfig, RegistrationNet, TrainingPair, pair_loss, prepare_cloud
from .nn import finite_difference_check

TOLERANCE = 1e-4


@dataclass
class LayerCheck:
    layer: str
    worst: float
    parameters: dict[str, float]

    @property
    def ok(self) -> bool:
        return self.worst < TOLERANCE


def tiny_setup(seed: int = 0, points: int = 48):
    """fp64 model small enough for per-coordinate central differences."""
    torch.manual_seed(seed)
    dc = DescriptorConfig(k=8, d=12, layers=1, cnn_channels=(8, 8), pca_max_neighbors=16, pca_radius=0.6)
    model = RegistrationNet(ModelConfig(dc, transformer_pairs=1, sinkhorn_iterations=10)).double()
    cfg = ProtocolConfig(points_kept=points, partial=True, partial_count=points - 8, seed=seed)
    case = make_case(sample_shape("gaussian-blob", 2 * points, seed), cfg, seed=seed)
    pair = TrainingPair(
        prepare_cloud(case.source, dc, torch.float64),
        prepare_cloud(case.target, dc, torch.float64),
        case.correspondence,
    )
    return model, pair


def corrupt_gradient(model: RegistrationNet, name: str | None = None, factor: float = 1.5):
    """Test-mode fault: scale one parameter's gradient. Returns the hook handle."""
    params = dict(model.named_parameters())
    name = name or next(iter(params))
    return params[name].register_hook(lambda g: g * factor)


def run_gradcheck(seed: int = 0, eps: float = 1e-5, max_coords: int = 8, corrupt: bool = False) -> list[LayerCheck]:
    model, pair = tiny_setup(seed)
    if corrupt:
        corrupt_gradient(model)
    params = dict(model.named_parameters())
    out = []
    for i, (layer, names) in enumerate(model.layers().items()):
        errs = finite_difference_check(
            lambda: pair_loss(model, pair),
            {n: params[n] for n in names},
            eps=eps,
            max_coords=max_coords,
            seed=seed * 1000 + i,
        )
        out.append(LayerCheck(layer, max(errs.values()), errs))
    return out


def format_report(checks: list[LayerCheck]) -> str:
    width = max(len(c.layer) for c in checks)
    lines = [f"{c.layer:<{width}}  {c.worst:.3e}  {'ok' if c.ok else 'FAIL'}" for c in checks]
    return "\n".join(lines) + "\n"


def worst_error(checks: list[LayerCheck]) -> float:
    return float(np.max([c.worst for c in checks]))
