"""Transfer baselines: nearest-source, largest-source, joint multilingual.

Each baseline reduces to point-estimate classifier heads trained by maximum
likelihood with Adam plus the same validation-patience early stopping as the
main model, then a source-selection rule at prediction time. All predictions
flow through the shared report machinery so metrics are comparable across
systems by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Cell, CellPartition
from .hypernet import HeadParams
from .likelihood import TaskSchema, token_log_probs
from .predict import EvalExample, PredictiveReport, build_report
from .train import Adam, CellData, TrainConfig

Tensor = torch.Tensor


@dataclass
class CellClassifier:
    cell: Cell
    head: HeadParams


def load_features(path: str | Path) -> dict[str, np.ndarray]:
    """Language feature file: "<lang> <v1> ... <vn>" per line."""
    features: dict[str, np.ndarray] = {}
    width = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected '<lang> <values...>'")
        vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise ValueError(f"{path}:{lineno}: feature width {len(vec)} != {width}")
        if not np.any(vec):
            raise ValueError(f"{path}:{lineno}: zero feature vector (cosine undefined)")
        features[parts[0]] = vec
    if not features:
        raise ValueError(f"{path}: empty feature file")
    return features


def _fit_head(
    embeddings: np.ndarray,
    gold: np.ndarray,
    dev_embeddings: np.ndarray,
    dev_gold: np.ndarray,
    schema: TaskSchema,
    e: int,
    c: int,
    config: TrainConfig,
) -> HeadParams:
    """Full-batch MLE for one affine head with early stopping on dev log-lik.

    Zero initialization plus full-batch gradients make this deterministic
    without any random stream.
    """
    weight = torch.zeros((e, c), dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(c, dtype=torch.float64, requires_grad=True)
    head = HeadParams(weight, bias)
    params = {"weight": weight, "bias": bias}
    adam = Adam(params, config)

    emb = torch.from_numpy(np.ascontiguousarray(embeddings))
    gold_t = torch.from_numpy(np.ascontiguousarray(gold))
    dev_emb = torch.from_numpy(np.ascontiguousarray(dev_embeddings))
    dev_gold_t = torch.from_numpy(np.ascontiguousarray(dev_gold))

    def dev_loglik() -> float:
        with torch.no_grad():
            log_p = token_log_probs(head, dev_emb, schema)
            return float(log_p[torch.arange(len(dev_gold_t)), dev_gold_t].mean())

    best: Optional[tuple[float, np.ndarray, np.ndarray]] = None
    stale = 0
    for step in range(1, config.max_steps + 1):
        adam.zero_grad()
        log_p = token_log_probs(head, emb, schema)
        loss = -log_p[torch.arange(len(gold_t)), gold_t].mean()
        loss.backward()
        adam.step()
        if step % config.validation_every == 0:
            dev = dev_loglik()
            if best is None or dev > best[0]:
                best = (dev, weight.detach().numpy().copy(), bias.detach().numpy().copy())
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best is not None:
        return HeadParams(torch.from_numpy(best[1]), torch.from_numpy(best[2]))
    return HeadParams(weight.detach().clone(), bias.detach().clone())


def _cell_tensors(cd: CellData, sentence_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    idx = cd.token_indices(sentence_ids)
    emb = cd.embeddings[idx]
    gold = np.array([cd.schema.index(cd.gold_labels[i]) for i in idx], dtype=np.int64)
    return emb, gold


def train_cell_classifiers(
    part: CellPartition,
    cells: dict[Cell, CellData],
    e: int,
    c: int,
    config: TrainConfig,
) -> dict[Cell, CellClassifier]:
    """One point-estimate head per seen cell, trained on its own train split."""
    classifiers: dict[Cell, CellClassifier] = {}
    for cell in sorted(part.seen):
        cd = cells[cell]
        emb, gold = _cell_tensors(cd, cd.train_ids)
        dev_emb, dev_gold = _cell_tensors(cd, cd.dev_ids)
        head = _fit_head(emb, gold, dev_emb, dev_gold, cd.schema, e, c, config)
        classifiers[cell] = CellClassifier(cell, head)
    return classifiers


def joint_multilingual(
    part: CellPartition,
    cells: dict[Cell, CellData],
    e: int,
    c: int,
    config: TrainConfig,
) -> dict[str, HeadParams]:
    """One shared head per task, trained on the union of its seen cells."""
    tasks = sorted({t for t, _ in part.grid})
    heads: dict[str, HeadParams] = {}
    for task in tasks:
        task_cells = [cell for cell in sorted(part.seen) if cell[0] == task]
        if not task_cells:
            raise ValueError(f"task {task!r} has no seen cells")
        schema = cells[task_cells[0]].schema
        emb_parts, gold_parts, dev_emb_parts, dev_gold_parts = [], [], [], []
        for cell in task_cells:
            cd = cells[cell]
            tr_emb, tr_gold = _cell_tensors(cd, cd.train_ids)
            dv_emb, dv_gold = _cell_tensors(cd, cd.dev_ids)
            emb_parts.append(tr_emb)
            gold_parts.append(tr_gold)
            dev_emb_parts.append(dv_emb)
            dev_gold_parts.append(dv_gold)
        heads[task] = _fit_head(
            np.concatenate(emb_parts),
            np.concatenate(gold_parts),
            np.concatenate(dev_emb_parts),
            np.concatenate(dev_gold_parts),
            schema, e, c, config,
        )
    return heads


def _head_report(
    head: HeadParams, cell: Cell, examples: Sequence[EvalExample], schema: TaskSchema
) -> PredictiveReport:
    probs = []
    with torch.no_grad():
        for example in examples:
            emb = torch.from_numpy(np.asarray(example.embeddings, dtype=np.float64))
            probs.append(torch.exp(token_log_probs(head, emb, schema)).numpy())
    return build_report(cell, schema, examples, probs)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(a @ b) / (na * nb)


def nearest_source_predict(
    classifiers: dict[Cell, CellClassifier],
    features: dict[str, np.ndarray],
    target_cell: Cell,
    examples: Sequence[EvalExample],
    schema: TaskSchema,
) -> PredictiveReport:
    """Apply the same-task source whose language features are most cosine-
    similar to the target's. Ties break to the lexicographically first id."""
    task, target_lang = target_cell
    candidates = sorted(cell for cell in classifiers if cell[0] == task)
    if not candidates:
        raise ValueError(f"no seen source shares task {task!r}")
    if target_lang not in features:
        raise ValueError(f"no feature vector for target language {target_lang!r}")
    for _, lang in candidates:
        if lang not in features:
            raise ValueError(f"no feature vector for source language {lang!r}")
    best = min(
        candidates,
        key=lambda cell: (-cosine(features[cell[1]], features[target_lang]), cell[1]),
    )
    return _head_report(classifiers[best].head, target_cell, examples, schema)


def largest_source_predict(
    classifiers: dict[Cell, CellClassifier],
    train_token_counts: dict[Cell, int],
    target_cell: Cell,
    examples: Sequence[EvalExample],
    schema: TaskSchema,
) -> PredictiveReport:
    """Apply the same-task source with the largest train-split token count."""
    task, _ = target_cell
    candidates = sorted(cell for cell in classifiers if cell[0] == task)
    if not candidates:
        raise ValueError(f"no seen source shares task {task!r}")
    best = min(candidates, key=lambda cell: (-train_token_counts[cell], cell[1]))
    return _head_report(classifiers[best].head, target_cell, examples, schema)


def jm_predict(
    heads: dict[str, HeadParams],
    target_cell: Cell,
    examples: Sequence[EvalExample],
    schema: TaskSchema,
) -> PredictiveReport:
    task = target_cell[0]
    if task not in heads:
        raise ValueError(f"no joint head for task {task!r}")
    return _head_report(heads[task], target_cell, examples, schema)
