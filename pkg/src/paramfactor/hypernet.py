"""Parameter generator mapping a (task, language) latent pair to a classifier head.

Two feed-forward maps share one physical stack of hidden ReLU layers and
differ only in their final affine heads: one emits the head-parameter mean
(linear output), the other the diagonal variance (softplus output). Sampled
parameter vectors reshape into a single affine classifier (weight e x c,
bias c), so the output dimension is d = e * c + c.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch

from .config import stream
from .gauss import softplus, softplus_inverse

Tensor = torch.Tensor

# New nets produce near-deterministic heads: large initial output variance
# makes the early stochastic objective too noisy to descend.
_PHI_BIAS_INIT_VAR = 1e-3
_VAR_FLOOR = 1e-300


@dataclass(frozen=True)
class HyperNetDims:
    h: int
    e: int
    c: int
    hidden: tuple[int, ...]

    def __post_init__(self) -> None:
        if min(self.h, self.e, self.c) < 1 or not self.hidden:
            raise ValueError("dims must be positive and hidden widths non-empty")

    @property
    def d(self) -> int:
        return self.e * self.c + self.c

    @property
    def input_width(self) -> int:
        return 4 * self.h


@dataclass
class HyperNet:
    """Shared hidden stack plus untied mean/variance heads.

    ``shared`` holds the single physical copy of every hidden layer; both
    heads read the same activations, so the stacks are tied by construction.
    """

    dims: HyperNetDims
    shared: list[tuple[Tensor, Tensor]]  # (weight in x out, bias out), ReLU after each
    psi_weight: Tensor
    psi_bias: Tensor
    phi_weight: Tensor
    phi_bias: Tensor


@dataclass
class HeadParams:
    """A single affine classifier head: logits = embedding @ weight + bias."""

    weight: Tensor  # e x c
    bias: Tensor  # c


def init_hypernet(dims: HyperNetDims, seed: int = 0) -> HyperNet:
    """Fan-in uniform init for hidden layers and heads, zero biases.

    The variance head's bias starts at softplus^{-1}(1e-3) so freshly drawn
    parameter vectors are nearly deterministic.
    """
    rng = stream(seed, "hypernet-init")
    shared: list[tuple[Tensor, Tensor]] = []
    fan_in = dims.input_width
    for width in dims.hidden:
        bound = (6.0 / fan_in) ** 0.5
        w = torch.from_numpy(rng.uniform(-bound, bound, (fan_in, width)))
        b = torch.zeros(width, dtype=torch.float64)
        w.requires_grad_(True)
        b.requires_grad_(True)
        shared.append((w, b))
        fan_in = width

    head_bound = (3.0 / fan_in) ** 0.5
    psi_w = torch.from_numpy(rng.uniform(-head_bound, head_bound, (fan_in, dims.d)))
    phi_w = torch.from_numpy(rng.uniform(-head_bound, head_bound, (fan_in, dims.d)))
    psi_b = torch.zeros(dims.d, dtype=torch.float64)
    phi_b = torch.full((dims.d,), softplus_inverse(_PHI_BIAS_INIT_VAR), dtype=torch.float64)
    for t in (psi_w, psi_b, phi_w, phi_b):
        t.requires_grad_(True)
    return HyperNet(dims, shared, psi_w, psi_b, phi_w, phi_b)


def combine(t: Tensor, l: Tensor) -> Tensor:
    """Feature map for a latent pair: t ++ l ++ (t - l) ++ (t * l).

    Accepts single vectors or stacked rows of draws.
    """
    if t.shape != l.shape:
        raise ValueError("task and language vectors must have equal shape")
    return torch.cat([t, l, t - l, t * l], dim=-1)


def forward(net: HyperNet, t: Tensor, l: Tensor) -> tuple[Tensor, Tensor]:
    """Map a latent pair to (head mean, head variance), each of length d.

    The variance output is strictly positive elementwise.
    """
    x = combine(t, l)
    for w, b in net.shared:
        x = torch.relu(x @ w + b)
    theta_mean = x @ net.psi_weight + net.psi_bias
    theta_var = softplus(x @ net.phi_weight + net.phi_bias)
    # softplus underflows to exactly 0.0 below about -745; keep the output
    # strictly positive as declared.
    theta_var = torch.clamp(theta_var, min=_VAR_FLOOR)
    return theta_mean, theta_var


def sample_theta(mean: Tensor, var: Tensor, noise: Tensor) -> Tensor:
    """Reparametrized head draw: mean + sqrt(var) * noise."""
    if noise.shape != mean.shape:
        raise ValueError("noise shape does not match the head dimension")
    if bool((torch.as_tensor(var) <= 0).any()):
        raise ValueError("head variance must be strictly positive")
    return mean + torch.sqrt(var) * noise


def reshape_theta(theta: Tensor, e: int, c: int) -> HeadParams:
    """Split a flat parameter vector into (weight e x c, bias c), row-major.

    Row index is the embedding coordinate, column index the class.
    """
    d = e * c + c
    if theta.shape != (d,):
        raise ValueError(f"theta must have length e*c + c = {d}, got {tuple(theta.shape)}")
    return HeadParams(weight=theta[: e * c].reshape(e, c), bias=theta[e * c :])


def flatten_head(params: HeadParams) -> Tensor:
    """Inverse of reshape_theta."""
    return torch.cat([params.weight.reshape(-1), params.bias])


def named_parameters(net: HyperNet) -> Iterator[tuple[str, Tensor]]:
    for i, (w, b) in enumerate(net.shared):
        yield f"hypernet.shared.{i}.weight", w
        yield f"hypernet.shared.{i}.bias", b
    yield "hypernet.psi.weight", net.psi_weight
    yield "hypernet.psi.bias", net.psi_bias
    yield "hypernet.phi.weight", net.phi_weight
    yield "hypernet.phi.bias", net.phi_bias
