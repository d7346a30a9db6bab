"""Classification head: masked softmax, token log-likelihood, and entropy.

Tasks may use fewer classes than the head provides columns for; the unused
columns are masked out before the softmax, so invalid classes carry exactly
zero probability regardless of the generated parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .hypernet import HeadParams

Tensor = torch.Tensor


@dataclass(frozen=True)
class TaskSchema:
    task_id: str
    labels: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"task {self.task_id!r}: duplicate labels")
        if not self.labels:
            raise ValueError(f"task {self.task_id!r}: empty label set")
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(self.labels)})

    @property
    def class_count(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValueError(f"label {label!r} not in task {self.task_id!r} schema") from None

    def is_span_task(self) -> bool:
        """True when the labels form a BIO tagging inventory."""
        return all(lab == "O" or lab[:2] in ("B-", "I-") for lab in self.labels) and any(
            lab.startswith("B-") for lab in self.labels
        )


@dataclass
class PredictiveDist:
    """Probabilities over a task's valid classes."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or (p < 0).any() or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("probs must be a 1-D distribution summing to 1")
        self.probs = p


def token_log_probs(params: HeadParams, embeddings: Tensor, schema: TaskSchema) -> Tensor:
    """Log class probabilities for a batch of token embeddings.

    Differentiable; restricts the head to the schema's valid classes and uses
    a shift-stabilized log-softmax. Shape (n_tokens, class_count).
    """
    cc = schema.class_count
    if embeddings.dim() == 1:
        embeddings = embeddings.unsqueeze(0)
    if embeddings.shape[1] != params.weight.shape[0]:
        raise ValueError("embedding width does not match the head weight")
    if cc > params.weight.shape[1]:
        raise ValueError(
            f"task {schema.task_id!r} needs {cc} classes but the head provides "
            f"{params.weight.shape[1]}"
        )
    logits = embeddings @ params.weight[:, :cc] + params.bias[:cc]
    return torch.log_softmax(logits, dim=-1)


def class_distribution(params: HeadParams, embedding, schema: TaskSchema) -> PredictiveDist:
    """Predictive distribution for one token."""
    emb = torch.as_tensor(embedding, dtype=torch.float64)
    log_p = token_log_probs(params, emb.unsqueeze(0), schema)[0]
    return PredictiveDist(torch.exp(log_p).detach().numpy())


def log_likelihood(params: HeadParams, embedding, schema: TaskSchema, gold: str) -> float:
    """ln p(gold | embedding, head); always <= 0."""
    idx = schema.index(gold)
    emb = torch.as_tensor(embedding, dtype=torch.float64)
    log_p = token_log_probs(params, emb.unsqueeze(0), schema)
    return float(log_p[0, idx])


def entropy(dist: PredictiveDist) -> float:
    """Shannon entropy in nats, with 0 * ln 0 = 0."""
    p = dist.probs
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_of_probs(probs: np.ndarray) -> float:
    return entropy(PredictiveDist(probs))


def gold_indices(schema: TaskSchema, golds: Sequence[str]) -> Tensor:
    """Integer class indices for a gold label sequence."""
    return torch.tensor([schema.index(g) for g in golds], dtype=torch.long)
