"""Ground-truth data generator for recovery experiments.

Samples the full generative story with a known generator network: one latent
vector per task and per language from N(0, I), a head-parameter vector per
cell from the generator's output distribution, standard-normal token
embeddings, and labels from the per-token masked softmax. Everything is
deterministic given the seed, and the emitted files (corpora, embedding
tables, grid manifest, language features, truth container) feed the same
loaders the real pipeline uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import hypernet as hn
from .config import derive_seed, stream
from .container import read_container, write_container
from .data import Cell, Corpus, write_conll, write_manifest
from .encoder import write_embeddings
from .hypernet import HeadParams, HyperNet, HyperNetDims
from .likelihood import TaskSchema

# Feature vectors handed to the nearest-source baseline are the true language
# latents plus Gaussian noise (covariance 0.1 * I): informative but imperfect.
_FEATURE_NOISE_VAR = 0.1


@dataclass
class GroundTruth:
    tasks: tuple[str, ...]
    langs: tuple[str, ...]
    dims: HyperNetDims
    class_counts: dict[str, int]
    schemas: dict[str, TaskSchema]
    task_latents: dict[str, np.ndarray]
    lang_latents: dict[str, np.ndarray]
    heads: dict[Cell, np.ndarray]  # flat theta per cell
    corpora: dict[Cell, Corpus]
    embeddings: dict[Cell, np.ndarray]  # n_tokens x e, sentence-major
    features: dict[str, np.ndarray]
    net: HyperNet

    def head_params(self, cell: Cell) -> HeadParams:
        theta = torch.from_numpy(self.heads[cell])
        return hn.reshape_theta(theta, self.dims.e, self.dims.c)


def generate(
    n_tasks: int,
    n_langs: int,
    h: int,
    e: int,
    class_counts: Sequence[int],
    examples_per_cell: int,
    sentence_length: int,
    seed: int = 0,
    out_dir: Optional[str | Path] = None,
    hidden: Optional[Sequence[int]] = None,
) -> GroundTruth:
    """Sample a complete grid; optionally write it to disk.

    ``class_counts`` gives one label-inventory size per task. Token strings
    are "tok_<task>-<lang>_<sentence>_<position>"; labels are "c0".."c{n-1}".
    """
    if min(n_tasks, n_langs, h, e, examples_per_cell, sentence_length) < 1:
        raise ValueError("all generation counts must be >= 1")
    if len(class_counts) != n_tasks:
        raise ValueError("need one class count per task")

    tasks = tuple(f"task{i}" for i in range(n_tasks))
    langs = tuple(f"lang{j}" for j in range(n_langs))
    counts = {t: int(c) for t, c in zip(tasks, class_counts)}
    c_max = max(counts.values())
    dims = HyperNetDims(h, e, c_max, tuple(hidden) if hidden else (4 * h, 4 * h))
    schemas = {
        t: TaskSchema(t, tuple(f"c{i}" for i in range(counts[t]))) for t in tasks
    }

    latent_rng = stream(seed, "truth-latents")
    theta_rng = stream(seed, "truth-theta")
    token_rng = stream(seed, "truth-tokens")
    label_rng = stream(seed, "truth-labels")
    feature_rng = stream(seed, "truth-features")
    net = hn.init_hypernet(dims, seed=derive_seed(seed, "truth-net"))

    task_latents = {t: latent_rng.standard_normal(h) for t in tasks}
    lang_latents = {l: latent_rng.standard_normal(h) for l in langs}

    heads: dict[Cell, np.ndarray] = {}
    corpora: dict[Cell, Corpus] = {}
    embeddings: dict[Cell, np.ndarray] = {}
    with torch.no_grad():
        for task in tasks:
            for lang in langs:
                cell = (task, lang)
                t_vec = torch.from_numpy(task_latents[task])
                l_vec = torch.from_numpy(lang_latents[lang])
                theta_mean, theta_var = hn.forward(net, t_vec, l_vec)
                noise = torch.from_numpy(theta_rng.standard_normal(dims.d))
                theta = hn.sample_theta(theta_mean, theta_var, noise)
                heads[cell] = theta.numpy().copy()

                head = hn.reshape_theta(theta, e, c_max)
                cc = counts[task]
                w = head.weight[:, :cc].numpy()
                b = head.bias[:cc].numpy()
                labels = schemas[task].labels

                n_tokens = examples_per_cell * sentence_length
                emb = token_rng.standard_normal((n_tokens, e))
                logits = emb @ w + b
                logits -= logits.max(axis=1, keepdims=True)
                probs = np.exp(logits)
                probs /= probs.sum(axis=1, keepdims=True)
                draws = label_rng.random(n_tokens)
                label_idx = (probs.cumsum(axis=1) < draws[:, None]).sum(axis=1)
                label_idx = np.minimum(label_idx, cc - 1)

                sentences = []
                for s in range(examples_per_cell):
                    base = s * sentence_length
                    tokens = tuple(
                        f"tok_{task}-{lang}_{s}_{p}" for p in range(sentence_length)
                    )
                    labs = tuple(labels[label_idx[base + p]] for p in range(sentence_length))
                    sentences.append((tokens, labs))
                corpora[cell] = Corpus(cell, sentences, schemas[task])
                embeddings[cell] = emb

    features = {
        l: lang_latents[l]
        + feature_rng.normal(0.0, np.sqrt(_FEATURE_NOISE_VAR), h)
        for l in langs
    }

    truth = GroundTruth(
        tasks, langs, dims, counts, schemas, task_latents, lang_latents,
        heads, corpora, embeddings, features, net,
    )
    if out_dir is not None:
        write_outputs(truth, out_dir)
    return truth


def write_outputs(truth: GroundTruth, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_entries = []
    for (task, lang), corpus in sorted(truth.corpora.items()):
        name = f"cell_{task}_{lang}"
        write_conll(corpus, out / f"{name}.tsv")
        emb = truth.embeddings[(task, lang)]
        rows = []
        offset = 0
        for s, (tokens, _) in enumerate(corpus.sentences):
            for p in range(len(tokens)):
                rows.append((str(s), p, emb[offset + p]))
            offset += len(tokens)
        write_embeddings(out / f"{name}.emb", truth.dims.e, rows)
        manifest_entries.append((task, lang, f"{name}.tsv"))
    write_manifest(out / "manifest.tsv", manifest_entries)

    with open(out / "features.tsv", "w", encoding="utf-8") as fh:
        for lang in truth.langs:
            values = " ".join(repr(float(v)) for v in truth.features[lang])
            fh.write(f"{lang} {values}\n")

    save_truth(truth, out / "truth.bin")


def save_truth(truth: GroundTruth, path: str | Path) -> None:
    header = {
        "kind": "ground-truth",
        "h": str(truth.dims.h),
        "e": str(truth.dims.e),
        "c": str(truth.dims.c),
        "hidden": ",".join(str(w) for w in truth.dims.hidden),
        "tasks": " ".join(truth.tasks),
        "langs": " ".join(truth.langs),
    }
    for task in truth.tasks:
        header[f"labels.{task}"] = " ".join(truth.schemas[task].labels)
    arrays: dict[str, np.ndarray] = {}
    for task, vec in truth.task_latents.items():
        arrays[f"latent.task.{task}"] = vec
    for lang, vec in truth.lang_latents.items():
        arrays[f"latent.lang.{lang}"] = vec
    for (task, lang), theta in truth.heads.items():
        arrays[f"head.{task}/{lang}"] = theta
    for name, tensor in hn.named_parameters(truth.net):
        arrays[f"net.{name}"] = tensor.detach().numpy()
    for lang, vec in truth.features.items():
        arrays[f"feature.{lang}"] = vec
    write_container(path, header, arrays)


def load_truth_heads(path: str | Path) -> tuple[dict[Cell, np.ndarray], dict[str, TaskSchema], HyperNetDims]:
    """Read back what oracle scoring needs from a truth container."""
    header, arrays = read_container(path)
    if header.get("kind") != "ground-truth":
        raise ValueError(f"{path}: not a ground-truth container")
    dims = HyperNetDims(
        int(header["h"]), int(header["e"]), int(header["c"]),
        tuple(int(w) for w in header["hidden"].split(",")),
    )
    schemas = {
        t: TaskSchema(t, tuple(header[f"labels.{t}"].split()))
        for t in header["tasks"].split()
    }
    heads: dict[Cell, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("head."):
            task, lang = name[len("head.") :].split("/")
            heads[(task, lang)] = arr
    return heads, schemas, dims


def oracle_score(
    truth: GroundTruth, cell: Cell, embeddings: np.ndarray, golds: Sequence[str]
) -> float:
    """Accuracy of argmax prediction under the cell's true head."""
    if cell not in truth.heads:
        raise ValueError(f"unknown cell {cell}")
    task = cell[0]
    cc = truth.class_counts[task]
    head = truth.head_params(cell)
    w = head.weight[:, :cc].numpy()
    b = head.bias[:cc].numpy()
    logits = np.asarray(embeddings, dtype=np.float64) @ w + b
    pred = logits.argmax(axis=1)
    gold_idx = np.array([truth.schemas[task].index(g) for g in golds])
    return float((pred == gold_idx).mean())
