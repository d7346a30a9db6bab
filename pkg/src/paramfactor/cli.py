"""Command-line front end wiring the modules into reproducible experiments.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every subcommand reruns byte-identically for a fixed config, seed and
output directory.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import baselines as bl
from . import data as dt
from . import predict as pr
from . import synth as sy
from . import train as tr
from .config import ConfigError, echo_config, load_config
from .encoder import FeaturizerConfig, featurize_sentence, load_precomputed, lookup_sentence
from .hypernet import HyperNetDims, init_hypernet
from .latents import init_store
from .likelihood import TaskSchema
from .train import TrainConfig


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


def _train_config(config: dict, seed: int) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"],
        batch_size=t["batch_size"],
        v_train=t["v_train"],
        patience=t["patience"],
        validation_every=t["validation_every"],
        max_steps=t["max_steps"],
        seed=seed,
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        grad_clip=t["grad_clip"],
        freeze_factor=t["freeze_factor"],
    )


class Workspace:
    """Loaded grid, partition and featurized cells for one run."""

    def __init__(self, config: dict, seed: int, out: Path) -> None:
        self.config = config
        self.seed = seed
        self.out = out
        manifest = config["paths"]["manifest"]
        if not manifest:
            raise UsageError("config paths.manifest is required for this subcommand")
        self.entries = dt.read_manifest(manifest)
        self.paths = {(t, l): p for t, l, p in self.entries}
        self.corpora = self._load_corpora()
        self.schemas = self._task_schemas()
        self.c_max = max(s.class_count for s in self.schemas.values())
        dims = config["dims"]
        self.c = dims["c"] if dims["c"] is not None else self.c_max
        if self.c < self.c_max:
            raise UsageError(f"dims.c = {self.c} is below the largest class count {self.c_max}")
        self.part = self._partition()
        self.cells = tr.prepare_cells(self.corpora, self.part, self._embedder(), self.schemas)

    def _load_corpora(self) -> dict[dt.Cell, dt.Corpus]:
        corpora = {}
        for task, lang, path in self.entries:
            corpora[(task, lang)] = dt.load_conll(path, task, lang)
        return corpora

    def _task_schemas(self) -> dict[str, TaskSchema]:
        schema_files = self.config["paths"]["schemas"] or {}
        schemas: dict[str, TaskSchema] = {}
        tasks = sorted({t for t, _ in self.corpora})
        for task in tasks:
            if task in schema_files:
                schemas[task] = dt.read_schema_file(schema_files[task], task)
            else:
                labels: list[str] = []
                for cell in sorted(self.corpora):
                    if cell[0] != task:
                        continue
                    for lab in self.corpora[cell].schema.labels:
                        if lab not in labels:
                            labels.append(lab)
                schemas[task] = TaskSchema(task, tuple(labels))
        # Re-validate every corpus against its task-wide schema.
        for cell, corpus in self.corpora.items():
            self.corpora[cell] = dt.Corpus(cell, corpus.sentences, schemas[cell[0]])
        return schemas

    def _partition(self) -> dt.CellPartition:
        part_file = self.config["partition"]["file"]
        if part_file:
            payload = json.loads(Path(part_file).read_text(encoding="utf-8"))
            part = dt.partition_from_dict(payload)
        else:
            grid = sorted(self.corpora)
            part = dt.partition(grid, self.config["partition"]["hold_out_fraction"], self.seed)
        if not part.splits:
            dt.assign_splits(part, self.corpora, self.seed)
        return part

    def _embedder(self):
        feat = self.config["featurizer"]
        e = self.config["dims"]["e"]
        if feat["mode"] == "hashed":
            fc = FeaturizerConfig(
                e=e,
                ngram_orders=tuple(feat["ngram_orders"]),
                window=feat["window"],
                hash_seed=feat["hash_seed"],
            )

            def embed(corpus: dt.Corpus) -> np.ndarray:
                rows = [featurize_sentence(fc, tokens) for tokens, _ in corpus.sentences]
                return np.concatenate(rows)

            return embed

        def embed_precomputed(corpus: dt.Corpus) -> np.ndarray:
            emb_path = self.paths[corpus.cell].with_suffix(".emb")
            table = load_precomputed(emb_path)
            rows = [
                lookup_sentence(table, str(i), len(tokens))
                for i, (tokens, _) in enumerate(corpus.sentences)
            ]
            matrix = np.concatenate(rows)
            if matrix.shape[1] != e:
                raise UsageError(
                    f"embedding width {matrix.shape[1]} in {emb_path} does not match dims.e = {e}"
                )
            return matrix

        return embed_precomputed

    def eval_examples(self, cell: dt.Cell, sentence_ids: Sequence[int]) -> list[pr.EvalExample]:
        cd = self.cells[cell]
        corpus = self.corpora[cell]
        out = []
        for s in sentence_ids:
            a, b = cd.spans[s]
            out.append(
                pr.EvalExample(str(s), cd.embeddings[a:b], corpus.sentences[s][1])
            )
        return out

    def eval_cells(self, which: str) -> list[dt.Cell]:
        if which == "seen":
            return sorted(self.part.seen)
        if which == "unseen":
            return sorted(self.part.unseen)
        return sorted(self.part.grid)

    def eval_sentences(self, cell: dt.Cell) -> tuple[int, ...]:
        return self.cells[cell].test_ids


def _resolve(args) -> tuple[dict, int, Path]:
    try:
        config = load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc
    seed = args.seed if args.seed is not None else config["seed"]
    out = Path(args.out) if args.out else Path(config["paths"]["out"])
    config = dict(config)
    config["seed"] = seed
    config["paths"] = dict(config["paths"])
    config["paths"]["out"] = str(out)
    echo_config(config, out)
    return config, seed, out


def cmd_synth(args) -> int:
    config, seed, out = _resolve(args)
    s = config["synth"]
    counts = (s["n_tasks"], s["n_langs"], s["examples_per_cell"], s["sentence_length"])
    if min(counts) < 1:
        raise UsageError("synth counts must all be >= 1")
    if len(s["class_counts"]) != s["n_tasks"]:
        raise UsageError("synth.class_counts must list one entry per task")
    dims = config["dims"]
    sy.generate(
        n_tasks=s["n_tasks"],
        n_langs=s["n_langs"],
        h=dims["h"],
        e=dims["e"],
        class_counts=s["class_counts"],
        examples_per_cell=s["examples_per_cell"],
        sentence_length=s["sentence_length"],
        seed=seed,
        out_dir=out,
    )
    print(f"wrote synthetic grid to {out}")
    return 0


def cmd_train(args) -> int:
    config, seed, out = _resolve(args)
    ws = Workspace(config, seed, out)
    dims = config["dims"]
    k = dims["k"] if config["family"] == "low_rank" else None

    resume = None
    if args.resume:
        resume = tr.load_checkpoint(args.resume)
        store = tr.store_from_checkpoint(resume)
        net = tr.net_from_checkpoint(resume)
    else:
        tasks = sorted({t for t, _ in ws.part.grid})
        langs = sorted({l for _, l in ws.part.grid})
        store = init_store(tasks, langs, config["family"], dims["h"], k, seed=seed)
        net = init_hypernet(
            HyperNetDims(dims["h"], dims["e"], ws.c, tuple(dims["hidden"])), seed=seed
        )

    result = tr.train(
        ws.part, ws.cells, store, net, _train_config(config, seed),
        log_path=out / "train.log", resume=resume,
    )
    tr.save_checkpoint(result.checkpoint, out / "checkpoint.bin")
    (out / "partition.json").write_text(
        json.dumps(dt.partition_to_dict(ws.part), indent=2) + "\n", encoding="utf-8"
    )
    best = result.checkpoint.best_dev
    print(f"trained {result.checkpoint.step} steps; checkpoint at {out / 'checkpoint.bin'}")
    if best is not None:
        print(f"best dev objective {best!r} at step {result.checkpoint.best_step}")
    return 0


def _load_model(args, config, out):
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint not found: {ckpt_path}")
    ckpt = tr.load_checkpoint(ckpt_path)
    store = tr.store_from_checkpoint(ckpt, use_best=True)
    net = tr.net_from_checkpoint(ckpt, use_best=True)
    return ckpt, store, net


def _factor_reports(ws, store, net, cells, bma_v, seed):
    reports = []
    for cell in cells:
        examples = ws.eval_examples(cell, ws.eval_sentences(cell))
        schema = ws.schemas[cell[0]]
        if bma_v:
            rep = pr.bma_predict(store, net, cell, examples, schema, V=bma_v, seed=seed)
        else:
            rep = pr.plug_in_predict(store, net, cell, examples, schema)
        reports.append(rep)
    return reports


def _baseline_reports(ws, config, system, cells, seed):
    bcfg = _train_config(config, seed)
    e = config["dims"]["e"]
    classifiers = None
    heads = None
    if system in ("ns", "ls"):
        classifiers = bl.train_cell_classifiers(ws.part, ws.cells, e, ws.c, bcfg)
    if system == "jm":
        heads = bl.joint_multilingual(ws.part, ws.cells, e, ws.c, bcfg)
    features = None
    if system == "ns":
        feat_path = config["paths"]["features"]
        if not feat_path:
            raise UsageError("the ns baseline needs config paths.features (language feature file)")
        features = bl.load_features(feat_path)
    counts = {cell: ws.cells[cell].train_token_count for cell in ws.part.seen}

    reports = []
    for cell in cells:
        examples = ws.eval_examples(cell, ws.eval_sentences(cell))
        schema = ws.schemas[cell[0]]
        if system == "ns":
            rep = bl.nearest_source_predict(classifiers, features, cell, examples, schema)
        elif system == "ls":
            rep = bl.largest_source_predict(classifiers, counts, cell, examples, schema)
        else:
            rep = bl.jm_predict(heads, cell, examples, schema)
        reports.append(rep)
    return reports


def cmd_eval(args) -> int:
    config, seed, out = _resolve(args)
    ws = Workspace(config, seed, out)
    cells = ws.eval_cells(args.cells)
    if args.system == "factor":
        _, store, net = _load_model(args, config, out)
        reports = _factor_reports(ws, store, net, cells, args.bma, seed)
    else:
        reports = _baseline_reports(ws, config, args.system, cells, seed)
    pr.write_cell_summaries(reports, out / f"summary_{args.system}.tsv")
    for rep in reports:
        print(
            f"{rep.cell[0]}\t{rep.cell[1]}\t{rep.primary_score()!r}\t{rep.mean_entropy!r}"
        )
    scored = [r for r in reports if r.accuracy is not None]
    if len(scored) >= 3:
        try:
            r, p = pr.entropy_accuracy_correlation(scored)
            print(f"entropy-score correlation r={r!r} p={p!r}")
        except ValueError as exc:
            print(f"entropy-score correlation unavailable: {exc}")
    return 0


def cmd_predict(args) -> int:
    config, seed, out = _resolve(args)
    ws = Workspace(config, seed, out)
    cell = (args.task, args.lang)
    if cell not in ws.corpora:
        raise UsageError(f"cell {cell} not in the grid manifest")
    if args.system == "factor":
        _, store, net = _load_model(args, config, out)
        reports = _factor_reports(ws, store, net, [cell], args.bma, seed)
    else:
        reports = _baseline_reports(ws, config, args.system, [cell], seed)
    path = out / f"report_{args.task}_{args.lang}_{args.system}.tsv"
    pr.write_report(reports[0], path)
    print(f"wrote {path}")
    return 0


def cmd_entropy(args) -> int:
    config, seed, out = _resolve(args)
    ws = Workspace(config, seed, out)
    _, store, net = _load_model(args, config, out)
    cells = ws.eval_cells(args.cells)
    reports = _factor_reports(ws, store, net, cells, args.bma, seed)
    path = out / "entropy.tsv"
    rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        if args.per_example:
            fh.write("task\tlang\texample_id\tmean_entropy\n")
            for rep in reports:
                by_example: dict[str, list[float]] = {}
                for rec in rep.records:
                    by_example.setdefault(rec.example_id, []).append(rec.entropy)
                for eid in sorted(by_example, key=int):
                    ents = by_example[eid]
                    fh.write(
                        f"{rep.cell[0]}\t{rep.cell[1]}\t{eid}\t{repr(sum(ents) / len(ents))}\n"
                    )
                    rows += 1
        else:
            fh.write("task\tlang\texample_id\ttoken_index\tentropy\n")
            for rep in reports:
                for rec in rep.records:
                    fh.write(
                        f"{rep.cell[0]}\t{rep.cell[1]}\t{rec.example_id}\t"
                        f"{rec.token_index}\t{repr(rec.entropy)}\n"
                    )
                    rows += 1
    print(f"wrote {rows} entropy rows to {path}")
    return 0


def cmd_baseline(args) -> int:
    config, seed, out = _resolve(args)
    ws = Workspace(config, seed, out)
    cells = ws.eval_cells(args.cells)
    reports = _baseline_reports(ws, config, args.system, cells, seed)
    pr.write_cell_summaries(reports, out / f"summary_{args.system}.tsv")
    for rep in reports:
        path = out / f"report_{rep.cell[0]}_{rep.cell[1]}_{args.system}.tsv"
        pr.write_report(rep, path)
        print(f"{rep.cell[0]}\t{rep.cell[1]}\t{rep.primary_score()!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paramfactor",
        description="Factorized Bayesian parameter generation for zero-shot "
        "task-language transfer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, evalset=False, bma=False):
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="checkpoint path (default OUT/checkpoint.bin)")
        if evalset:
            p.add_argument("--cells", choices=["seen", "unseen", "all"], default="unseen")
        if bma:
            p.add_argument(
                "--bma", type=int, default=0, metavar="V",
                help="average V posterior samples instead of plugging in the means",
            )

    p = sub.add_parser("synth", help="generate a synthetic grid with known ground truth")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the factorized model on the seen cells")
    common(p)
    p.add_argument("--resume", default=None, help="continue from a saved checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score cells and write per-cell summaries")
    common(p, checkpoint=True, evalset=True, bma=True)
    p.add_argument("--system", choices=["factor", "ns", "ls", "jm"], default="factor")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a full per-token report for one cell")
    common(p, checkpoint=True, bma=True)
    p.add_argument("--task", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--system", choices=["factor", "ns", "ls", "jm"], default="factor")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("entropy", help="emit per-token (or per-example) predictive entropies")
    common(p, checkpoint=True, evalset=True, bma=True)
    p.add_argument("--per-example", action="store_true")
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("baseline", help="run a transfer baseline over the evaluation cells")
    p.add_argument("system", choices=["ns", "ls", "jm"])
    common(p, evalset=True)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: bad data, divergence, IO
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
