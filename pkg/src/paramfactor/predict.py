"""Zero-shot inference: plug-in prediction, Bayesian model averaging,
per-example entropy, and report aggregation.

Plug-in prediction substitutes the posterior means through the mean head
map. Model averaging draws latent pairs and heads by reparametrization and
averages the resulting class distributions. Per-example noise streams are
keyed by the example's stable id, so reports are invariant to evaluation
order and to parallel scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.stats
import torch

from . import hypernet as hn
from .config import stream
from .data import Cell
from .gauss import LowRankGaussian
from .hypernet import HeadParams, HyperNet
from .latents import LatentStore
from .likelihood import TaskSchema, entropy_of_probs, token_log_probs

Tensor = torch.Tensor


@dataclass
class EvalExample:
    """One sentence to score: stable id, token embeddings, optional golds."""

    id: str
    embeddings: np.ndarray  # n_tokens x e
    golds: Optional[tuple[str, ...]] = None


@dataclass
class TokenRecord:
    example_id: str
    token_index: int
    gold: Optional[str]
    predicted: str
    probs: np.ndarray
    entropy: float


@dataclass
class PredictiveReport:
    cell: Cell
    records: list[TokenRecord]
    accuracy: Optional[float]
    span_f1: Optional[float]
    mean_entropy: float

    @property
    def n_examples(self) -> int:
        return len({r.example_id for r in self.records})

    def primary_score(self) -> float:
        """Span F1 for BIO tasks, token accuracy otherwise."""
        if self.span_f1 is not None:
            return self.span_f1
        if self.accuracy is None:
            raise ValueError("report has no gold labels, so no score")
        return self.accuracy


def bio_spans(labels: Sequence[str]) -> set[tuple[int, int, str]]:
    """Decode BIO labels into (start, end, type) spans, end exclusive.

    A stray I- tag (no open span of the same type) is promoted to B-.
    """
    spans: set[tuple[int, int, str]] = set()
    start = None
    kind = None

    def close(end: int) -> None:
        nonlocal start, kind
        if start is not None:
            spans.add((start, end, kind))
        start, kind = None, None

    for i, label in enumerate(labels):
        if label == "O":
            close(i)
        elif label.startswith("B-"):
            close(i)
            start, kind = i, label[2:]
        elif label.startswith("I-"):
            if kind != label[2:]:
                close(i)
                start, kind = i, label[2:]
        else:
            raise ValueError(f"not a BIO label: {label!r}")
    close(len(labels))
    return spans


def span_f1(gold_seqs: Sequence[Sequence[str]], pred_seqs: Sequence[Sequence[str]]) -> float:
    """Exact-match span F1 over sentences, micro-averaged."""
    tp = n_gold = n_pred = 0
    for gold, pred in zip(gold_seqs, pred_seqs):
        g = bio_spans(gold)
        p = bio_spans(pred)
        tp += len(g & p)
        n_gold += len(g)
        n_pred += len(p)
    if n_gold == 0 and n_pred == 0:
        return 1.0
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gold if n_gold else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def build_report(
    cell: Cell,
    schema: TaskSchema,
    examples: Sequence[EvalExample],
    probs_per_example: Sequence[np.ndarray],
) -> PredictiveReport:
    """Assemble records and aggregates from per-token class probabilities."""
    records: list[TokenRecord] = []
    correct = 0
    total_gold = 0
    entropy_sum = 0.0
    pred_seqs: list[list[str]] = []
    gold_seqs: list[tuple[str, ...]] = []

    for example, probs in zip(examples, probs_per_example):
        preds = []
        for pos in range(probs.shape[0]):
            p = probs[pos]
            pred_idx = int(np.argmax(p))  # first max wins: lowest class index
            predicted = schema.labels[pred_idx]
            gold = example.golds[pos] if example.golds is not None else None
            ent = entropy_of_probs(p)
            entropy_sum += ent
            if gold is not None:
                total_gold += 1
                correct += int(predicted == gold)
            preds.append(predicted)
            records.append(TokenRecord(example.id, pos, gold, predicted, p, ent))
        pred_seqs.append(preds)
        if example.golds is not None:
            gold_seqs.append(example.golds)

    accuracy = correct / total_gold if total_gold else None
    f1 = None
    if schema.is_span_task() and total_gold:
        f1 = span_f1(gold_seqs, pred_seqs)
    mean_entropy = entropy_sum / len(records) if records else 0.0
    return PredictiveReport(cell, records, accuracy, f1, mean_entropy)


def _mean_head(store: LatentStore, net: HyperNet, cell: Cell) -> HeadParams:
    task, lang = cell
    if task not in store.task_posteriors:
        raise ValueError(f"unknown task {task!r}")
    if lang not in store.lang_posteriors:
        raise ValueError(f"unknown language {lang!r}")
    t = store.task_posteriors[task].mean
    l = store.lang_posteriors[lang].mean
    theta_mean, _ = hn.forward(net, t, l)
    return hn.reshape_theta(theta_mean, net.dims.e, net.dims.c)


def plug_in_predict(
    store: LatentStore,
    net: HyperNet,
    cell: Cell,
    examples: Sequence[EvalExample],
    schema: TaskSchema,
) -> PredictiveReport:
    """Deterministic prediction with posterior means through the mean head."""
    with torch.no_grad():
        head = _mean_head(store, net, cell)
        probs = []
        for example in examples:
            emb = torch.from_numpy(np.asarray(example.embeddings, dtype=np.float64))
            log_p = token_log_probs(head, emb, schema)
            probs.append(torch.exp(log_p).numpy())
    return build_report(cell, schema, examples, probs)


def _posterior_rows(q, eps: Tensor, zeta: Optional[Tensor]) -> Tensor:
    """V reparametrized draws stacked as rows."""
    rows = q.mean + torch.sqrt(q.variance()) * eps
    if isinstance(q, LowRankGaussian):
        rows = rows + zeta @ q.factor.T
    return rows


def bma_predict(
    store: LatentStore,
    net: HyperNet,
    cell: Cell,
    examples: Sequence[EvalExample],
    schema: TaskSchema,
    V: int = 100,
    seed: int = 0,
    draw: Optional[Callable[[str, str, tuple[int, ...]], np.ndarray]] = None,
) -> PredictiveReport:
    """Average the class distributions of V posterior draws per example.

    Noise comes from a stream derived from (seed, example id); ``draw`` can
    replace it for tests (called as draw(example_id, name, shape)).
    """
    if V < 1:
        raise ValueError("V must be >= 1")
    task, lang = cell
    if task not in store.task_posteriors:
        raise ValueError(f"unknown task {task!r}")
    if lang not in store.lang_posteriors:
        raise ValueError(f"unknown language {lang!r}")
    q_task = store.task_posteriors[task]
    q_lang = store.lang_posteriors[lang]
    dims = net.dims
    cc = schema.class_count
    low_rank = isinstance(q_task, LowRankGaussian)

    probs_out = []
    with torch.no_grad():
        for example in examples:
            if draw is None:
                rng = stream(seed, f"bma/{example.id}")
                def _draw(name: str, shape: tuple[int, ...]) -> np.ndarray:
                    return rng.standard_normal(shape)
            else:
                def _draw(name: str, shape: tuple[int, ...], _eid=example.id) -> np.ndarray:
                    return draw(_eid, name, shape)

            t_eps = torch.from_numpy(_draw("task.eps", (V, dims.h)))
            t_zeta = torch.from_numpy(_draw("task.zeta", (V, q_task.rank))) if low_rank else None
            l_eps = torch.from_numpy(_draw("lang.eps", (V, dims.h)))
            l_zeta = torch.from_numpy(_draw("lang.zeta", (V, q_lang.rank))) if low_rank else None
            theta_noise = torch.from_numpy(_draw("theta", (V, dims.d)))

            t_rows = _posterior_rows(q_task, t_eps, t_zeta)
            l_rows = _posterior_rows(q_lang, l_eps, l_zeta)
            theta_mean, theta_var = hn.forward(net, t_rows, l_rows)
            theta = theta_mean + torch.sqrt(theta_var) * theta_noise  # V x d
            weights = theta[:, : dims.e * dims.c].reshape(V, dims.e, dims.c)
            biases = theta[:, dims.e * dims.c :]

            emb = torch.from_numpy(np.asarray(example.embeddings, dtype=np.float64))
            logits = torch.einsum("ne,vec->nvc", emb, weights[:, :, :cc])
            logits = logits + biases[:, :cc].unsqueeze(0)
            token_probs = torch.softmax(logits, dim=-1).mean(dim=1)  # n x cc
            probs_out.append(token_probs.numpy())
    return build_report(cell, schema, examples, probs_out)


def entropy_accuracy_correlation(
    reports: Sequence[PredictiveReport],
) -> tuple[float, float]:
    """Pearson r between per-cell mean entropy and per-cell score, with the
    two-tailed p-value from the t transform."""
    if len(reports) < 3:
        raise ValueError("need at least 3 cells with gold labels")
    entropies = np.array([r.mean_entropy for r in reports], dtype=np.float64)
    scores = np.array([r.primary_score() for r in reports], dtype=np.float64)
    return _pearson(entropies, scores)


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    n = len(x)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("zero variance: correlation undefined")
    r = float((xc * yc).sum() / (sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t_stat = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(scipy.stats.t.sf(abs(t_stat), df=n - 2))
    return r, p


def write_report(report: PredictiveReport, path: str | Path) -> None:
    """Tab-separated token records followed by a trailing aggregate block."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("example_id\ttoken_index\tgold\tpredicted\tentropy\tprobs\n")
        for r in report.records:
            probs = " ".join(repr(float(p)) for p in r.probs)
            gold = r.gold if r.gold is not None else "-"
            fh.write(f"{r.example_id}\t{r.token_index}\t{gold}\t{r.predicted}\t{repr(r.entropy)}\t{probs}\n")
        fh.write("#aggregates\n")
        fh.write(f"#task\t{report.cell[0]}\n")
        fh.write(f"#lang\t{report.cell[1]}\n")
        fh.write(f"#n_examples\t{report.n_examples}\n")
        if report.accuracy is not None:
            fh.write(f"#accuracy\t{repr(report.accuracy)}\n")
        if report.span_f1 is not None:
            fh.write(f"#span_f1\t{repr(report.span_f1)}\n")
        fh.write(f"#mean_entropy\t{repr(report.mean_entropy)}\n")


def write_cell_summaries(
    reports: Sequence[PredictiveReport], path: str | Path
) -> None:
    """Per-cell summary table: task, lang, n_examples, score, mean entropy."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("task\tlang\tn_examples\taccuracy_or_f1\tmean_entropy\n")
        for r in sorted(reports, key=lambda r: r.cell):
            fh.write(
                f"{r.cell[0]}\t{r.cell[1]}\t{r.n_examples}\t"
                f"{repr(r.primary_score())}\t{repr(r.mean_entropy)}\n"
            )


def read_cell_summaries(path: str | Path) -> list[tuple[str, str, int, float, float]]:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        task, lang, n, score, ent = line.split("\t")
        rows.append((task, lang, int(n), float(score), float(ent)))
    return rows
