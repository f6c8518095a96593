"""Learned-layer primitives on top of torch tensors.

Forward passes run in float32; ``model.double()`` gives the float64 replay
used by the finite-difference checker.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable

import numpy as np
import torch
from torch import nn

GN_EPS = 1e-5


class ConfigError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def fan_in_uniform_(tensor: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        return tensor.uniform_(-bound, bound)


def pointwise_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Same affine map at every position; ``weight`` is ``[c_in, c_out]``."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ConfigError(
            f"input has {x.shape[-1]} channels but weight expects {tuple(weight.shape)}"
        )
    out = x @ weight
    if bias is not None:
        out = out + bias
    return out


def group_norm(
    x: torch.Tensor,
    groups: int,
    gain: torch.Tensor | None = None,
    offset: torch.Tensor | None = None,
    eps: float = GN_EPS,
) -> torch.Tensor:
    """Normalize each sample (leading axis) per channel group.

    Statistics are taken over every non-leading axis except that channels are
    split into ``groups`` contiguous blocks.
    """
    c = x.shape[-1]
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    shape = x.shape
    g = x.reshape(shape[0], -1, groups, c // groups)
    mean = g.mean(dim=(1, 3), keepdim=True)
    var = ((g - mean) ** 2).mean(dim=(1, 3), keepdim=True)
    out = ((g - mean) / torch.sqrt(var + eps)).reshape(shape)
    if gain is not None:
        out = out * gain
    if offset is not None:
        out = out + offset
    return out


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-shifted softmax (torch's fused kernel shifts internally)."""
    return torch.softmax(x, dim=axis)


class PointwiseLinear(nn.Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(fan_in_uniform_(torch.empty(c_in, c_out), c_in))
        self.bias = nn.Parameter(fan_in_uniform_(torch.empty(c_out), c_in)) if bias else None

    def forward(self, x):
        return pointwise_linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.gain = nn.Parameter(torch.ones(channels))
        self.offset = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        # fused kernel; ``group_norm`` above is the explicit reference
        y = nn.functional.group_norm(x.movedim(-1, 1), self.groups, self.gain, self.offset, GN_EPS)
        return y.movedim(1, -1)


class MLP(nn.Module):
    """Pointwise layers with ReLU between them (none after the last)."""

    def __init__(self, channels: list[int]):
        super().__init__()
        self.layers = nn.ModuleList(
            PointwiseLinear(a, b) for a, b in zip(channels[:-1], channels[1:])
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x

    def zero_output_(self):
        with torch.no_grad():
            self.layers[-1].weight.zero_()
            self.layers[-1].bias.zero_()


def backward(loss: torch.Tensor, parameters: Iterable[tuple[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    """Reverse-mode pass; returns gradients keyed by parameter name."""
    if loss.numel() != 1:
        raise GradientError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise GradientError("loss is detached from any trainable parameter")
    loss.backward()
    return {name: p.grad for name, p in parameters if p.requires_grad}


class Adam:
    """Adam with bias correction; state tensors are checkpointable."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self):
        for name, p in self.params:
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.step_count], dtype=np.float32)}
        for name, _ in self.params:
            out[f"adam/m/{name}"] = self.m[name].detach().cpu().numpy()
            out[f"adam/v/{name}"] = self.v[name].detach().cpu().numpy()
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        if "adam/step" not in tensors:
            return
        self.step_count = int(tensors["adam/step"][0])
        for name, p in self.params:
            self.m[name] = torch.as_tensor(tensors[f"adam/m/{name}"], dtype=p.dtype).clone()
            self.v[name] = torch.as_tensor(tensors[f"adam/v/{name}"], dtype=p.dtype).clone()


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error; ``floor`` keeps exactly-zero gradients from
    turning finite-difference noise into a relative error of 1."""
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    eps: float = 1e-5,
    max_coords: int = 12,
    seed: int = 0,
    kink_tol: float | None = 1e-3,
    skipped: dict[str, int] | None = None,
) -> dict[str, float]:
    """Compare autodiff gradients with central differences, per tensor.

    ``loss_fn`` must rebuild the graph on each call. Up to ``max_coords``
    randomly chosen entries of each tensor are probed; the returned value is
    the norm-wise relative error over those entries.

    ReLU and max-pooling make the loss piecewise smooth. A probe is taken to
    straddle a kink when its one-sided slopes disagree by more than
    ``kink_tol``, or when the central differences at ``eps`` and ``eps / 2``
    disagree by more than ``kink_tol ** 2`` (both relative). Such a probe is
    replaced by another coordinate; ``skipped`` collects how many per tensor.
    Both tests look only at loss values, never at the autodiff gradient, so a
    wrong gradient cannot be skipped away.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    base = float(loss.detach())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    result = {}
    for (name, p), g in zip(params.items(), grads):
        analytic = np.zeros(p.numel()) if g is None else g.detach().reshape(-1).double().cpu().numpy()
        flat = p.data.view(-1)
        order = rng.permutation(p.numel())
        used, numeric, n_skip = [], [], 0
        with torch.no_grad():
            for c in order:
                if len(used) == max_coords:
                    break
                orig = flat[c].item()

                def at(h):
                    flat[c] = orig + h
                    value = float(loss_fn())
                    flat[c] = orig
                    return value

                up, down = at(eps), at(-eps)
                central = (up - down) / (2.0 * eps)
                if kink_tol is not None:
                    s_up, s_down = (up - base) / eps, (base - down) / eps
                    half = (at(eps / 2) - at(-eps / 2)) / eps
                    scale = max(abs(s_up), abs(s_down), 1e-12)
                    if abs(s_up - s_down) > kink_tol * scale + 1e-9 or abs(central - half) > kink_tol**2 * scale + 1e-9:
                        n_skip += 1
                        continue
                used.append(c)
                numeric.append(central)
        if skipped is not None:
            skipped[name] = n_skip
        result[name] = relative_error(analytic[np.array(used, dtype=np.int64)], np.array(numeric))
    return result
