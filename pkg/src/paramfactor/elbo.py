"""Per-step stochastic objective: Monte Carlo likelihood plus weighted KL.

One step draws V latent pairs and head-parameter vectors by
reparametrization, averages the batch log-likelihood over the V samples,
and adds the KL penalty over every posterior scaled by the step weight.
All noise flows through a recording bank, so (parameters, noise record)
determine the objective value bit for bit and autograd yields the exact
pathwise gradient of that deterministic function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .gauss import LowRankGaussian, NoiseDraw, sample
from .hypernet import HyperNet, forward, reshape_theta, sample_theta
from .latents import LatentStore, kl_penalty
from .likelihood import TaskSchema, token_log_probs

Tensor = torch.Tensor


class NoiseBank:
    """Standard-normal noise with exact record/replay.

    In recording mode draws come from named numpy streams and are stored
    under their key. A bank rebuilt from a record replays the same values
    in any order.
    """

    def __init__(
        self,
        streams: Optional[Mapping[str, np.random.Generator]] = None,
        record: Optional[dict[str, Tensor]] = None,
    ) -> None:
        if (streams is None) == (record is None):
            raise ValueError("provide exactly one of streams (record mode) or record (replay)")
        self._streams = streams
        self._record: dict[str, Tensor] = dict(record) if record is not None else {}
        self._replay = record is not None

    @classmethod
    def replay(cls, record: dict[str, Tensor]) -> "NoiseBank":
        return cls(record=record)

    def normal(self, stream: str, key: str, shape: tuple[int, ...]) -> Tensor:
        if self._replay:
            if key not in self._record:
                raise KeyError(f"noise record has no draw {key!r}")
            draw = self._record[key]
            if tuple(draw.shape) != tuple(shape):
                raise ValueError(f"noise draw {key!r} has shape {tuple(draw.shape)}, want {shape}")
            return draw
        if key in self._record:
            raise ValueError(f"duplicate noise key {key!r}")
        gen = self._streams[stream]
        draw = torch.from_numpy(gen.standard_normal(shape))
        self._record[key] = draw
        return draw

    def record(self) -> dict[str, Tensor]:
        return dict(self._record)


@dataclass
class StepObjective:
    """Negative-ELBO contribution of one step, with its noise for replay."""

    value: float
    neg_log_lik: float
    kl_weighted: float
    noise_record: dict[str, Tensor]
    loss: Tensor  # graph-carrying scalar; float(loss) == value


def draw_latent(q, bank: NoiseBank, prefix: str) -> Tensor:
    eps = bank.normal("eps", f"{prefix}.eps", tuple(q.mean.shape))
    zeta = None
    if isinstance(q, LowRankGaussian):
        zeta = bank.normal("zeta", f"{prefix}.zeta", (q.rank,))
    return sample(q, NoiseDraw(eps, zeta))


def evaluate_step(
    store: LatentStore,
    net: HyperNet,
    batch: Sequence[tuple[np.ndarray, str]],
    schema: TaskSchema,
    task: str,
    lang: str,
    V: int,
    kl_weight: float,
    noise: NoiseBank,
) -> StepObjective:
    """Objective for one sampled cell and one batch of (embedding, gold) tokens.

    Per sample v the head draw is shared across the batch: the generated
    parameters belong to the cell, not to individual tokens.
    """
    if V < 1:
        raise ValueError("V must be >= 1")
    if not batch:
        raise ValueError("batch must be non-empty")
    if task not in store.task_posteriors:
        raise ValueError(f"unknown task {task!r}")
    if lang not in store.lang_posteriors:
        raise ValueError(f"unknown language {lang!r}")

    q_task = store.task_posteriors[task]
    q_lang = store.lang_posteriors[lang]
    dims = net.dims

    embeddings = torch.as_tensor(
        np.stack([np.asarray(emb, dtype=np.float64) for emb, _ in batch])
    )
    gold = torch.tensor([schema.index(g) for _, g in batch], dtype=torch.long)

    total_ll = torch.zeros((), dtype=torch.float64)
    for v in range(V):
        t_draw = draw_latent(q_task, noise, f"{v}/task")
        l_draw = draw_latent(q_lang, noise, f"{v}/lang")
        theta_mean, theta_var = forward(net, t_draw, l_draw)
        theta_noise = noise.normal("theta", f"{v}/theta", (dims.d,))
        theta = sample_theta(theta_mean, theta_var, theta_noise)
        head = reshape_theta(theta, dims.e, dims.c)
        log_p = token_log_probs(head, embeddings, schema)
        total_ll = total_ll + log_p[torch.arange(len(batch)), gold].sum()

    nll = -(total_ll / V)
    if kl_weight == 0.0:
        klw = torch.zeros((), dtype=torch.float64)
    else:
        klw = kl_weight * kl_penalty(store)
    loss = nll + klw
    return StepObjective(
        value=float(loss.detach()),
        neg_log_lik=float(nll.detach()),
        kl_weighted=float(klw.detach()),
        noise_record=noise.record(),
        loss=loss,
    )


def gradient(
    closure: Callable[[], Tensor], params: Mapping[str, Tensor]
) -> dict[str, Tensor]:
    """Exact gradient of a deterministic recomputation w.r.t. every parameter.

    The closure must rebuild the objective from the live parameter tensors
    (with any noise replayed); parameters not on the graph get zero.
    """
    loss = closure()
    ordered = list(params.items())
    grads = torch.autograd.grad(
        loss, [p for _, p in ordered], allow_unused=True, retain_graph=False
    )
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(ordered, grads)
    }
