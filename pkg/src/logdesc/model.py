"""End-to-end matching network, checkpoint mapping and toy training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace

import numpy as np
import torch
from torch import nn

from .descriptor import DescriptorConfig, GeometricFeatures, LogDescNet, compute_features
from .io import read_checkpoint, write_checkpoint
from .matching import MatchingError, log_sinkhorn, nll_matching_loss, similarity
from .nn import Adam, ConfigError
from .transformer import AngleLookup, NormalEncoderTransformer, angle_embedding, normal_angles

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    descriptor: DescriptorConfig = DescriptorConfig()
    transformer_pairs: int = 4
    sinkhorn_iterations: int = 50
    dustbin_init: float = 1.0
    angle_table_size: int = 0  # 0: dense normal-angle embedding

    @property
    def d(self) -> int:
        return self.descriptor.d


@dataclass
class PreparedCloud:
    """Per-cloud inputs of the network, computed once."""

    features: GeometricFeatures
    f2: torch.Tensor
    positions: torch.Tensor
    angles: torch.Tensor
    _embedding: torch.Tensor | None = None
    cache_embedding: bool = False

    def __len__(self) -> int:
        return self.f2.shape[0]

    def embedding(self, d: int, table_size: int = 0):
        if (
            self._embedding is not None
            and self._embedding.shape[-1] == d
            and isinstance(self._embedding, AngleLookup) == bool(table_size)
        ):
            return self._embedding
        emb = AngleLookup(self.angles, d, table_size) if table_size else angle_embedding(self.angles, d)
        if self.cache_embedding:
            self._embedding = emb
        return emb


def prepare_cloud(cloud, cfg: DescriptorConfig, dtype=torch.float32, cache_embedding=False) -> PreparedCloud:
    feats = compute_features(cloud, cfg)
    return PreparedCloud(
        features=feats,
        f2=torch.as_tensor(feats.f2, dtype=dtype),
        positions=torch.as_tensor(feats.positions, dtype=dtype),
        angles=torch.as_tensor(normal_angles(feats.geometry.normals), dtype=dtype),
        cache_embedding=cache_embedding,
    )


class RegistrationNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.descriptor = LogDescNet(cfg.descriptor)
        self.transformer = NormalEncoderTransformer(cfg.d, cfg.transformer_pairs, cfg.descriptor.heads)
        self.dustbin = nn.Parameter(torch.tensor(float(cfg.dustbin_init)))

    def describe(self, src: PreparedCloud, tgt: PreparedCloud):
        """Final conditioned descriptors ``(f~, h~)``."""
        f = self.descriptor(src.f2, src.positions)
        h = self.descriptor(tgt.f2, tgt.positions)
        size = self.cfg.angle_table_size
        return self.transformer(f, h, src.embedding(self.cfg.d, size), tgt.embedding(self.cfg.d, size))

    def forward(self, src: PreparedCloud, tgt: PreparedCloud) -> torch.Tensor:
        f, h = self.describe(src, tgt)
        return log_sinkhorn(similarity(f, h), self.cfg.sinkhorn_iterations, self.dustbin)

    def layers(self) -> dict[str, list[str]]:
        """Parameter names grouped per parameterized layer."""
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            parts = name.split(".")
            if parts[0] == "dustbin":
                key = "dustbin"
            elif parts[1] == "cnn":
                key = f"descriptor.cnn.stage{parts[3]}"
            else:
                key = ".".join(parts[:3])
            groups.setdefault(key, []).append(name)
        return groups


# ------------------------------------------------------------ checkpoints

_DESC_INTS = ("k", "d", "layers", "heads", "pca_max_neighbors", "groups")
_DESC_FLAGS = ("use_A", "use_P", "use_O", "use_N", "rotate_values")


def model_tensors(model: RegistrationNet) -> dict[str, np.ndarray]:
    cfg = model.cfg
    dc = cfg.descriptor
    meta = {f"meta/{f}": float(getattr(dc, f)) for f in _DESC_INTS + _DESC_FLAGS}
    meta["meta/pca_radius"] = dc.pca_radius
    meta["meta/cnn_channels"] = list(dc.cnn_channels)
    meta["meta/transformer_pairs"] = cfg.transformer_pairs
    meta["meta/sinkhorn_iterations"] = cfg.sinkhorn_iterations
    meta["meta/angle_table_size"] = cfg.angle_table_size
    out = {k: np.asarray(v, dtype=np.float32).reshape(-1) for k, v in meta.items()}
    for name, p in model.named_parameters():
        out[name] = p.detach().cpu().float().numpy()
    return out


def config_from_tensors(tensors) -> ModelConfig:
    def scalar(key):
        if f"meta/{key}" not in tensors:
            raise ConfigError(f"checkpoint lacks meta/{key}")
        return tensors[f"meta/{key}"].reshape(-1)

    desc = {f: int(scalar(f)[0]) for f in _DESC_INTS}
    desc.update({f: bool(scalar(f)[0]) for f in _DESC_FLAGS})
    # shortest decimal that rounds to the stored f32: 0.3 comes back as 0.3
    desc["pca_radius"] = float(str(np.float32(scalar("pca_radius")[0])))
    desc["cnn_channels"] = tuple(int(c) for c in scalar("cnn_channels"))
    return ModelConfig(
        descriptor=DescriptorConfig(**desc),
        transformer_pairs=int(scalar("transformer_pairs")[0]),
        sinkhorn_iterations=int(scalar("sinkhorn_iterations")[0]),
        angle_table_size=int(scalar("angle_table_size")[0]),
    )


def model_from_tensors(tensors, **descriptor_overrides) -> RegistrationNet:
    cfg = config_from_tensors(tensors)
    if descriptor_overrides:
        cfg = replace(cfg, descriptor=replace(cfg.descriptor, **descriptor_overrides))
    model = RegistrationNet(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ConfigError(f"checkpoint lacks parameter {name!r}")
            src = torch.as_tensor(np.asarray(tensors[name]))
            if src.shape != p.shape:
                raise ConfigError(f"{name}: checkpoint shape {tuple(src.shape)} != model {tuple(p.shape)}")
            p.copy_(src)
    return model


def save_model(model: RegistrationNet, path, optimizer: Adam | None = None, extra: dict | None = None):
    tensors = model_tensors(model)
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    tensors.update(extra or {})
    write_checkpoint(tensors, path)


def load_model(path, **descriptor_overrides) -> tuple[RegistrationNet, dict]:
    tensors = read_checkpoint(path)
    return model_from_tensors(tensors, **descriptor_overrides), tensors


def descriptor_config_fields() -> set[str]:
    return {f.name for f in fields(DescriptorConfig)}


# --------------------------------------------------------------- training


@dataclass
class TrainingPair:
    src: PreparedCloud
    tgt: PreparedCloud
    correspondence: np.ndarray


def prepare_pairs(cases, cfg: DescriptorConfig, cache_embedding=True) -> list[TrainingPair]:
    return [
        TrainingPair(
            prepare_cloud(c.source, cfg, cache_embedding=cache_embedding),
            prepare_cloud(c.target, cfg, cache_embedding=cache_embedding),
            c.correspondence,
        )
        for c in cases
    ]


def pair_loss(model: RegistrationNet, pair: TrainingPair) -> torch.Tensor:
    return nll_matching_loss(model(pair.src, pair.tgt), pair.correspondence, len(pair.tgt))


def train(
    model: RegistrationNet,
    pairs: list[TrainingPair],
    epochs: int,
    lr: float = 1e-4,
    seed: int = 0,
    optimizer: Adam | None = None,
    start_epoch: int = 0,
    on_epoch=None,
) -> list[float]:
    """Batch-1 Adam on the matching NLL; returns the mean loss per epoch.

    ``on_epoch(epoch, mean_loss)`` may return True to stop early.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    opt = optimizer or Adam(model.named_parameters(), lr=lr)
    history = []
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        total = 0.0
        for i in order:
            opt.zero_grad()
            try:
                loss = pair_loss(model, pairs[i])
            except MatchingError as exc:  # non-finite scores from blown-up weights
                raise DivergenceError(epoch + 1, float("nan")) from exc
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(epoch + 1, value)
            loss.backward()
            opt.step()
            total += value
        mean = total / len(pairs)
        history.append(mean)
        log.info("epoch %d loss %.6f", epoch + 1, mean)
        if on_epoch is not None and on_epoch(epoch + 1, mean):
            break
    return history


@torch.no_grad()
def mean_loss(model: RegistrationNet, pairs: list[TrainingPair]) -> float:
    return float(np.mean([float(pair_loss(model, p)) for p in pairs]))
