"""SVI training loop: uniform seen-cell sampling, Adam, early stopping,
and bit-reproducible checkpointing.

Checkpoint files use the binary container format (see ``container``): an
8-byte magic, a text header carrying dims, id lists, label maps, counters
and RNG states, then the parameter, optimizer and sampler arrays as raw
little-endian float64. Saving and loading round-trips training exactly:
resuming from a mid-run checkpoint continues the loss stream bit for bit.

The training log has one tab-separated line per step:
    step, task, lang, loss, neg_log_lik, kl_weighted
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import hypernet as hn
from . import latents as lt
from .config import stream
from .container import read_container, write_container
from .data import Cell, CellPartition, Corpus
from .elbo import NoiseBank, evaluate_step
from .hypernet import HyperNet, HyperNetDims
from .latents import LatentStore
from .likelihood import TaskSchema, token_log_probs

Tensor = torch.Tensor

CHECKPOINT_VERSION = "1"
_NOISE_STREAMS = ("eps", "zeta", "theta")


class TrainingError(RuntimeError):
    """Training aborted (divergence, empty data, or a bad resume state)."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-6
    batch_size: int = 8
    v_train: int = 3
    patience: int = 10
    validation_every: int = 2500
    max_steps: int = 50000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None
    freeze_factor: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "v_train", "patience", "validation_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")


def adam_update(param, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step. ``state`` is (m, v, t) with t = completed steps.

    Works elementwise for floats, numpy arrays and torch tensors alike.
    """
    m, v, t = state
    if t < 0:
        raise ValueError("step counter t must be >= 0")
    t = t + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (v_hat**0.5 + eps), (m, v, t)


class Adam:
    """Adam over a fixed dict of named tensors, with serializable state."""

    def __init__(self, params: dict[str, Tensor], config: TrainConfig) -> None:
        self.params = params
        self.lr = config.learning_rate
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.t = 0
        self.m = {name: torch.zeros_like(p) for name, p in params.items()}
        self.v = {name: torch.zeros_like(p) for name, p in params.items()}

    def step(self) -> None:
        t_before = self.t
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            new_p, (m, v, t_new) = adam_update(
                p.data, grad, (self.m[name], self.v[name], t_before),
                lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            )
            p.data = new_p
            self.m[name] = m
            self.v[name] = v
            self.t = t_new

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class CellData:
    """One cell's featurized corpus plus its split membership."""

    cell: Cell
    schema: TaskSchema
    embeddings: np.ndarray  # n_tokens x e
    gold_labels: list[str]
    spans: list[tuple[int, int]]  # token range per sentence
    sentence_ids: list[str]
    train_ids: tuple[int, ...] = ()
    dev_ids: tuple[int, ...] = ()
    test_ids: tuple[int, ...] = ()

    def token_indices(self, sentence_ids: Sequence[int]) -> np.ndarray:
        parts = [np.arange(*self.spans[s]) for s in sentence_ids]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def batch(self, sentence_ids: Sequence[int]) -> list[tuple[np.ndarray, str]]:
        idx = self.token_indices(sentence_ids)
        return [(self.embeddings[i], self.gold_labels[i]) for i in idx]

    @property
    def train_token_count(self) -> int:
        return int(sum(self.spans[s][1] - self.spans[s][0] for s in self.train_ids))


def prepare_cells(
    corpora: dict[Cell, Corpus],
    part: CellPartition,
    embed_corpus: Callable[[Corpus], np.ndarray],
    schemas: Optional[dict[str, TaskSchema]] = None,
) -> dict[Cell, CellData]:
    """Featurize every corpus and attach split membership.

    ``embed_corpus`` returns an (n_tokens, e) matrix in sentence-major token
    order. Unseen cells keep their entire corpus as the test set.
    """
    cells: dict[Cell, CellData] = {}
    for cell in sorted(corpora):
        corpus = corpora[cell]
        schema = schemas[cell[0]] if schemas else corpus.schema
        matrix = embed_corpus(corpus)
        spans = []
        golds: list[str] = []
        offset = 0
        for tokens, labels in corpus.sentences:
            spans.append((offset, offset + len(tokens)))
            golds.extend(labels)
            offset += len(tokens)
        if matrix.shape[0] != offset:
            raise ValueError(f"cell {cell}: embedding rows do not match token count")
        cd = CellData(
            cell=cell,
            schema=schema,
            embeddings=np.asarray(matrix, dtype=np.float64),
            gold_labels=golds,
            spans=spans,
            sentence_ids=[str(i) for i in range(len(spans))],
        )
        if cell in part.seen:
            train, dev, test = part.splits[cell]
            cd = replace(cd, train_ids=train, dev_ids=dev, test_ids=test)
        else:
            cd = replace(cd, test_ids=tuple(range(len(spans))))
        cells[cell] = cd
    return cells


def all_named_parameters(store: LatentStore, net: HyperNet) -> dict[str, Tensor]:
    params = dict(lt.named_parameters(store))
    params.update(dict(hn.named_parameters(net)))
    return params


@dataclass
class StepRecord:
    step: int
    task: str
    lang: str
    loss: float
    neg_log_lik: float
    kl_weighted: float

    def log_line(self) -> str:
        return "\t".join(
            [
                str(self.step),
                self.task,
                self.lang,
                repr(self.loss),
                repr(self.neg_log_lik),
                repr(self.kl_weighted),
            ]
        )


@dataclass
class Checkpoint:
    """Full training state. ``params`` is the current parameter set;
    ``best_params`` (when validation has run) is the early-stopping winner
    that evaluation should use."""

    version: str
    family: str
    h: int
    e: int
    c: int
    k: Optional[int]
    hidden: tuple[int, ...]
    tasks: tuple[str, ...]
    langs: tuple[str, ...]
    labels: dict[str, tuple[str, ...]]
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    rng_states: dict[str, str]
    sampler_perms: dict[Cell, np.ndarray]
    sampler_cursors: dict[Cell, int]
    best_params: Optional[dict[str, np.ndarray]] = None
    best_dev: Optional[float] = None
    best_step: Optional[int] = None
    stale: int = 0

    def eval_params(self) -> dict[str, np.ndarray]:
        return self.best_params if self.best_params is not None else self.params


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[StepRecord] = field(default_factory=list)


def _check_ident(name: str) -> str:
    if any(ch.isspace() for ch in name) or "/" in name:
        raise ValueError(f"identifier {name!r} may not contain whitespace or '/'")
    return name


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    header: dict[str, str] = {
        "version": ckpt.version,
        "family": ckpt.family,
        "h": str(ckpt.h),
        "e": str(ckpt.e),
        "c": str(ckpt.c),
        "k": "none" if ckpt.k is None else str(ckpt.k),
        "hidden": ",".join(str(w) for w in ckpt.hidden),
        "tasks": " ".join(_check_ident(t) for t in ckpt.tasks),
        "langs": " ".join(_check_ident(l) for l in ckpt.langs),
        "step": str(ckpt.step),
        "adam.t": str(ckpt.adam_t),
        "stale": str(ckpt.stale),
    }
    for task, labels in ckpt.labels.items():
        header[f"labels.{task}"] = " ".join(_check_ident(lab) for lab in labels)
    for name, state in ckpt.rng_states.items():
        header[f"rng.{name}"] = state
    for (task, lang), cursor in ckpt.sampler_cursors.items():
        header[f"sampler.cursor.{task}/{lang}"] = str(cursor)
    if ckpt.best_dev is not None:
        header["best.dev"] = repr(ckpt.best_dev)
        header["best.step"] = str(ckpt.best_step)

    arrays: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        arrays[f"param.{name}"] = arr
    for name, arr in ckpt.adam_m.items():
        arrays[f"adam.m.{name}"] = arr
    for name, arr in ckpt.adam_v.items():
        arrays[f"adam.v.{name}"] = arr
    for (task, lang), perm in ckpt.sampler_perms.items():
        arrays[f"sampler.perm.{task}/{lang}"] = perm.astype(np.float64)
    if ckpt.best_params is not None:
        for name, arr in ckpt.best_params.items():
            arrays[f"bestparam.{name}"] = arr
    write_container(path, header, arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, arrays = read_container(path)
    k = None if header["k"] == "none" else int(header["k"])
    tasks = tuple(header["tasks"].split())
    langs = tuple(header["langs"].split())
    labels = {t: tuple(header[f"labels.{t}"].split()) for t in tasks}

    params, adam_m, adam_v, best_params = {}, {}, {}, {}
    sampler_perms: dict[Cell, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("adam.m."):
            adam_m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v.") :]] = arr
        elif name.startswith("bestparam."):
            best_params[name[len("bestparam.") :]] = arr
        elif name.startswith("sampler.perm."):
            task, lang = name[len("sampler.perm.") :].split("/")
            sampler_perms[(task, lang)] = arr.astype(np.int64)

    rng_states = {
        key[len("rng.") :]: value for key, value in header.items() if key.startswith("rng.")
    }
    sampler_cursors: dict[Cell, int] = {}
    for key, value in header.items():
        if key.startswith("sampler.cursor."):
            task, lang = key[len("sampler.cursor.") :].split("/")
            sampler_cursors[(task, lang)] = int(value)

    return Checkpoint(
        version=header["version"],
        family=header["family"],
        h=int(header["h"]),
        e=int(header["e"]),
        c=int(header["c"]),
        k=k,
        hidden=tuple(int(w) for w in header["hidden"].split(",")),
        tasks=tasks,
        langs=langs,
        labels=labels,
        step=int(header["step"]),
        params=params,
        adam_m=adam_m,
        adam_v=adam_v,
        adam_t=int(header["adam.t"]),
        rng_states=rng_states,
        sampler_perms=sampler_perms,
        sampler_cursors=sampler_cursors,
        best_params=best_params or None,
        best_dev=float(header["best.dev"]) if "best.dev" in header else None,
        best_step=int(header["best.step"]) if "best.step" in header else None,
        stale=int(header["stale"]),
    )


def store_from_checkpoint(ckpt: Checkpoint, use_best: bool = False) -> LatentStore:
    store = lt.init_store(
        list(ckpt.tasks), list(ckpt.langs), ckpt.family, ckpt.h, ckpt.k, seed=0
    )
    values = ckpt.eval_params() if use_best else ckpt.params
    _load_params_into(dict(lt.named_parameters(store)), values)
    return store


def net_from_checkpoint(ckpt: Checkpoint, use_best: bool = False) -> HyperNet:
    net = hn.init_hypernet(HyperNetDims(ckpt.h, ckpt.e, ckpt.c, ckpt.hidden), seed=0)
    values = ckpt.eval_params() if use_best else ckpt.params
    _load_params_into(dict(hn.named_parameters(net)), values)
    return net


def schemas_from_checkpoint(ckpt: Checkpoint) -> dict[str, TaskSchema]:
    return {task: TaskSchema(task, labels) for task, labels in ckpt.labels.items()}


def _load_params_into(tensors: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    for name, tensor in tensors.items():
        if name not in values:
            raise TrainingError(f"checkpoint is missing parameter '{name}'")
        arr = values[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise TrainingError(
                f"checkpoint parameter '{name}' has shape {arr.shape}, "
                f"expected {tuple(tensor.shape)}"
            )
        tensor.data = torch.from_numpy(arr.copy())


def _rng_state(gen: np.random.Generator) -> str:
    return json.dumps(gen.bit_generator.state, sort_keys=True)


def _set_rng_state(gen: np.random.Generator, state: str) -> None:
    gen.bit_generator.state = json.loads(state)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.detach().numpy().copy() for name, p in params.items()}


def sample_cell(rng: np.random.Generator, seen: Sequence[Cell]) -> Cell:
    """Uniform draw over the seen cells; one SVI step trains one cell."""
    return seen[int(rng.integers(len(seen)))]


def dev_objective(
    cells: dict[Cell, CellData], seen: Sequence[Cell], store: LatentStore, net: HyperNet
) -> float:
    """Mean per-token log-likelihood at the posterior means, pooled over the
    dev splits of every seen cell."""
    total_lp = 0.0
    total_tokens = 0
    with torch.no_grad():
        for cell in sorted(seen):
            cd = cells[cell]
            if not cd.dev_ids:
                continue
            task, lang = cell
            theta_mean, _ = hn.forward(
                net, store.task_posteriors[task].mean, store.lang_posteriors[lang].mean
            )
            head = hn.reshape_theta(theta_mean, net.dims.e, net.dims.c)
            idx = cd.token_indices(cd.dev_ids)
            emb = torch.from_numpy(cd.embeddings[idx])
            gold = torch.tensor([cd.schema.index(cd.gold_labels[i]) for i in idx])
            log_p = token_log_probs(head, emb, cd.schema)
            total_lp += float(log_p[torch.arange(len(idx)), gold].sum())
            total_tokens += len(idx)
    if total_tokens == 0:
        raise TrainingError("no dev sentences available for validation")
    return total_lp / total_tokens


def train(
    part: CellPartition,
    cells: dict[Cell, CellData],
    store: LatentStore,
    net: HyperNet,
    config: TrainConfig,
    log_path: Optional[str | Path] = None,
    resume: Optional[Checkpoint] = None,
) -> TrainResult:
    """Run SVI until early stopping or ``max_steps``.

    Each step samples a seen cell uniformly, takes the next batch of the
    cell's epoch permutation (reshuffled when exhausted), backpropagates the
    step objective and applies Adam to every trainable parameter. Every
    ``validation_every`` steps the dev objective decides early stopping.
    """
    seen = sorted(part.seen)
    if not seen:
        raise TrainingError("no seen cells to train on")
    for cell in seen:
        if not cells[cell].train_ids:
            raise TrainingError(f"seen cell {cell} has no training sentences")

    params = all_named_parameters(store, net)
    trainable = dict(params)
    if config.freeze_factor:
        for name in list(trainable):
            if name.endswith(".factor"):
                trainable[name].data = torch.zeros_like(trainable[name])
                del trainable[name]

    adam = Adam(trainable, config)
    rngs = {
        "cell": stream(config.seed, "train-cell"),
        "shuffle": stream(config.seed, "train-shuffle"),
        "eps": stream(config.seed, "train-eps"),
        "zeta": stream(config.seed, "train-zeta"),
        "theta": stream(config.seed, "train-theta"),
    }

    total_train_sentences = sum(len(cells[c].train_ids) for c in seen)
    n_batches = math.ceil(total_train_sentences / config.batch_size)
    kl_weight = 1.0 / n_batches

    perms: dict[Cell, np.ndarray] = {}
    cursors: dict[Cell, int] = {}
    step = 0
    best_params: Optional[dict[str, np.ndarray]] = None
    best_dev: Optional[float] = None
    best_step: Optional[int] = None
    stale = 0

    if resume is not None:
        _load_params_into(params, resume.params)
        for name in adam.m:
            adam.m[name] = torch.from_numpy(resume.adam_m[name].copy())
            adam.v[name] = torch.from_numpy(resume.adam_v[name].copy())
        adam.t = resume.adam_t
        for name, gen in rngs.items():
            _set_rng_state(gen, resume.rng_states[name])
        perms = {c: resume.sampler_perms[c].copy() for c in seen}
        cursors = dict(resume.sampler_cursors)
        step = resume.step
        best_params = resume.best_params
        best_dev = resume.best_dev
        best_step = resume.best_step
        stale = resume.stale
    else:
        for cell in seen:
            perms[cell] = rngs["shuffle"].permutation(np.asarray(cells[cell].train_ids))
            cursors[cell] = 0

    def next_batch(cell: Cell) -> list[int]:
        if cursors[cell] >= len(perms[cell]):
            perms[cell] = rngs["shuffle"].permutation(np.asarray(cells[cell].train_ids))
            cursors[cell] = 0
        take = perms[cell][cursors[cell] : cursors[cell] + config.batch_size]
        cursors[cell] += len(take)
        return [int(i) for i in take]

    history: list[StepRecord] = []
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "a" if resume is not None else "w", encoding="utf-8")

    try:
        while step < config.max_steps:
            step += 1
            cell = sample_cell(rngs["cell"], seen)
            cd = cells[cell]
            batch = cd.batch(next_batch(cell))
            bank = NoiseBank(streams=rngs)
            adam.zero_grad()
            obj = evaluate_step(
                store, net, batch, cd.schema, cell[0], cell[1],
                config.v_train, kl_weight, bank,
            )
            if not math.isfinite(obj.value):
                raise TrainingError(
                    f"non-finite loss {obj.value} at step {step} on cell {cell}"
                )
            obj.loss.backward()
            if config.grad_clip is not None:
                norm = torch.sqrt(
                    sum(
                        (p.grad * p.grad).sum()
                        for p in trainable.values()
                        if p.grad is not None
                    )
                )
                if float(norm) > config.grad_clip:
                    scale = config.grad_clip / float(norm)
                    for p in trainable.values():
                        if p.grad is not None:
                            p.grad *= scale
            adam.step()

            record = StepRecord(step, cell[0], cell[1], obj.value, obj.neg_log_lik, obj.kl_weighted)
            history.append(record)
            if log_fh is not None:
                log_fh.write(record.log_line() + "\n")

            if step % config.validation_every == 0:
                dev = dev_objective(cells, seen, store, net)
                if best_dev is None or dev > best_dev:
                    best_dev = dev
                    best_step = step
                    best_params = _snapshot(params)
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        break
    finally:
        if log_fh is not None:
            log_fh.close()

    ckpt = Checkpoint(
        version=CHECKPOINT_VERSION,
        family=store.family,
        h=store.h,
        e=net.dims.e,
        c=net.dims.c,
        k=store.k,
        hidden=net.dims.hidden,
        tasks=store.tasks,
        langs=store.langs,
        labels={cell[0]: cells[cell].schema.labels for cell in sorted(cells)},
        step=step,
        params=_snapshot(params),
        adam_m={name: m.numpy().copy() for name, m in adam.m.items()},
        adam_v={name: v.numpy().copy() for name, v in adam.v.items()},
        adam_t=adam.t,
        rng_states={name: _rng_state(gen) for name, gen in rngs.items()},
        sampler_perms={c: perms[c].copy() for c in seen},
        sampler_cursors={c: cursors[c] for c in seen},
        best_params=best_params,
        best_dev=best_dev,
        best_step=best_step,
        stale=stale,
    )
    return TrainResult(checkpoint=ckpt, history=history)
