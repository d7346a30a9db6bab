"""Per-task and per-language variational posteriors with standard-normal priors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import torch

from .config import stream
from .gauss import DiagGaussian, LowRankGaussian, Posterior, kl_to_std

Tensor = torch.Tensor

DIAGONAL = "diagonal"
LOW_RANK = "low_rank"

# Means start near zero (normal, variance 0.1); rho and factor entries start
# uniform in (0, 0.5) so initial variances sit near 1.
_MEAN_INIT_STD = math.sqrt(0.1)
_COV_INIT_LOW, _COV_INIT_HIGH = 0.0, 0.5


@dataclass
class LatentStore:
    """One posterior per task and per language, all sharing one family.

    Priors are fixed standard normals and are implicit: the KL penalty is
    always taken against N(0, I).
    """

    family: str
    h: int
    k: Optional[int]
    task_posteriors: dict[str, Posterior]
    lang_posteriors: dict[str, Posterior]

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(self.task_posteriors)

    @property
    def langs(self) -> tuple[str, ...]:
        return tuple(self.lang_posteriors)


def _init_posterior(family, h, k, mean_rng, rho_rng, factor_rng) -> Posterior:
    mean = torch.from_numpy(mean_rng.normal(0.0, _MEAN_INIT_STD, h))
    rho = torch.from_numpy(rho_rng.uniform(_COV_INIT_LOW, _COV_INIT_HIGH, h))
    mean.requires_grad_(True)
    rho.requires_grad_(True)
    if family == DIAGONAL:
        return DiagGaussian(mean, rho)
    factor = torch.from_numpy(factor_rng.uniform(_COV_INIT_LOW, _COV_INIT_HIGH, (h, k)))
    factor.requires_grad_(True)
    return LowRankGaussian(mean, rho, factor)


def init_store(
    tasks: Sequence[str],
    langs: Sequence[str],
    family: str,
    h: int,
    k: Optional[int] = None,
    seed: int = 0,
) -> LatentStore:
    """Allocate and randomly initialize every task and language posterior.

    Deterministic given the seed. Mean, rho and factor entries come from
    separate derived streams, so a diagonal and a low-rank store built from
    the same seed share identical means and rhos.
    """
    if family not in (DIAGONAL, LOW_RANK):
        raise ValueError(f"unknown family '{family}'")
    if h < 1:
        raise ValueError("latent dimension h must be >= 1")
    if family == LOW_RANK and (k is None or k < 1):
        raise ValueError("low-rank family needs a rank k >= 1")
    if not tasks or not langs:
        raise ValueError("task and language lists must be non-empty")
    if len(set(tasks)) != len(tasks):
        raise ValueError("duplicate task identifiers")
    if len(set(langs)) != len(langs):
        raise ValueError("duplicate language identifiers")

    mean_rng = stream(seed, "latent-mean")
    rho_rng = stream(seed, "latent-rho")
    factor_rng = stream(seed, "latent-factor")
    k_eff = k if family == LOW_RANK else None

    task_posteriors = {
        t: _init_posterior(family, h, k_eff, mean_rng, rho_rng, factor_rng) for t in tasks
    }
    lang_posteriors = {
        l: _init_posterior(family, h, k_eff, mean_rng, rho_rng, factor_rng) for l in langs
    }
    return LatentStore(family, h, k_eff, task_posteriors, lang_posteriors)


def kl_penalty(store: LatentStore) -> Tensor:
    """Sum of KL(posterior || N(0, I)) over every task and language."""
    total = torch.zeros((), dtype=torch.float64)
    for q in store.task_posteriors.values():
        total = total + kl_to_std(q)
    for q in store.lang_posteriors.values():
        total = total + kl_to_std(q)
    return total


def named_parameters(store: LatentStore) -> Iterator[tuple[str, Tensor]]:
    """Trainable tensors in a stable order, keyed for checkpointing."""
    for kind, posteriors in (("task", store.task_posteriors), ("lang", store.lang_posteriors)):
        for ident, q in posteriors.items():
            yield f"latent.{kind}.{ident}.mean", q.mean
            yield f"latent.{kind}.{ident}.rho", q.rho
            if isinstance(q, LowRankGaussian):
                yield f"latent.{kind}.{ident}.factor", q.factor
