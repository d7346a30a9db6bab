"""Corpus ingestion, the task-language grid, and seen/unseen partitioning.

Corpus format: one "token<TAB>label" line per token, blank line between
sentences. A grid manifest lists "task<TAB>lang<TAB>corpus-path" triples.
An optional schema file pins a task's label inventory (one label per line).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .config import stream
from .likelihood import TaskSchema

Cell = tuple[str, str]  # (task, lang)

_PARTITION_RETRY_BUDGET = 10_000


class CorpusFormatError(ValueError):
    """Malformed corpus, schema, or manifest file."""


class InfeasiblePartitionError(RuntimeError):
    """No seen/unseen assignment can satisfy the transfer constraint."""


@dataclass
class Corpus:
    cell: Cell
    sentences: list[tuple[tuple[str, ...], tuple[str, ...]]]
    schema: TaskSchema

    def __post_init__(self) -> None:
        for tokens, labels in self.sentences:
            if len(tokens) != len(labels):
                raise ValueError("token/label length mismatch in sentence")
            for lab in labels:
                self.schema.index(lab)

    @property
    def n_sentences(self) -> int:
        return len(self.sentences)

    @property
    def n_tokens(self) -> int:
        return sum(len(tokens) for tokens, _ in self.sentences)


@dataclass
class CellPartition:
    """Seen/unseen split of the grid plus per-seen-cell sentence splits."""

    grid: tuple[Cell, ...]
    seen: frozenset[Cell]
    unseen: frozenset[Cell]
    splits: dict[Cell, tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]] = field(
        default_factory=dict
    )


def read_schema_file(path: str | Path, task: str) -> TaskSchema:
    labels = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    labels = [lab for lab in labels if lab]
    if not labels:
        raise CorpusFormatError(f"{path}: schema file has no labels")
    return TaskSchema(task, tuple(labels))


def load_conll(
    path: str | Path, task: str, lang: str, schema: Optional[TaskSchema] = None
) -> Corpus:
    """Parse the two-column format; labels collected in first-appearance order
    unless a schema is supplied."""
    path = Path(path)
    sentences: list[tuple[tuple[str, ...], tuple[str, ...]]] = []
    tokens: list[str] = []
    labels: list[str] = []
    seen_labels: list[str] = []

    def flush() -> None:
        if tokens:
            sentences.append((tuple(tokens), tuple(labels)))
            tokens.clear()
            labels.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if "\t" not in line:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'token<TAB>label', got {line!r}")
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise CorpusFormatError(f"{path}:{lineno}: expected exactly two non-empty fields")
            token, label = parts
            if schema is not None and label not in schema.labels:
                raise CorpusFormatError(
                    f"{path}:{lineno}: label {label!r} not in the supplied schema"
                )
            if schema is None and label not in seen_labels:
                seen_labels.append(label)
            tokens.append(token)
            labels.append(label)
    flush()

    if not sentences:
        raise CorpusFormatError(f"{path}: empty corpus")
    final_schema = schema if schema is not None else TaskSchema(task, tuple(seen_labels))
    return Corpus((task, lang), sentences, final_schema)


def write_conll(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tokens, labels in corpus.sentences:
            for token, label in zip(tokens, labels):
                fh.write(f"{token}\t{label}\n")
            fh.write("\n")


def read_manifest(path: str | Path) -> list[tuple[str, str, Path]]:
    """Grid manifest: task<TAB>lang<TAB>path, relative to the manifest file."""
    path = Path(path)
    base = path.parent
    entries: list[tuple[str, str, Path]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusFormatError(f"{path}:{lineno}: expected 'task<TAB>lang<TAB>path'")
        task, lang, rel = parts
        entries.append((task, lang, (base / rel) if not Path(rel).is_absolute() else Path(rel)))
    if not entries:
        raise CorpusFormatError(f"{path}: empty manifest")
    return entries


def write_manifest(path: str | Path, entries: Sequence[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task, lang, rel in entries:
            fh.write(f"{task}\t{lang}\t{rel}\n")


def constraint_violations(grid: Sequence[Cell], unseen: frozenset[Cell]) -> list[Cell]:
    """Unseen cells lacking a same-task or same-language seen counterpart."""
    seen = [cell for cell in grid if cell not in unseen]
    bad = []
    for task, lang in sorted(unseen):
        same_task = any(t == task and l != lang for t, l in seen)
        same_lang = any(l == lang and t != task for t, l in seen)
        if not (same_task and same_lang):
            bad.append((task, lang))
    return bad


def partition(grid: Sequence[Cell], hold_out_fraction: float, seed: int = 0) -> CellPartition:
    """Randomly assign cells to unseen such that every unseen cell keeps a
    same-task and a same-language seen counterpart.

    Rejection sampling with a bounded retry budget; deterministic given seed.
    """
    if not 0.0 < hold_out_fraction < 1.0:
        raise ValueError("hold_out_fraction must lie strictly between 0 and 1")
    cells = sorted(set(grid))
    if len(cells) != len(grid):
        raise ValueError("duplicate cells in grid")
    tasks = {t for t, _ in cells}
    langs = {l for _, l in cells}
    n_unseen = round(hold_out_fraction * len(cells))
    if n_unseen == 0:
        return CellPartition(tuple(cells), frozenset(cells), frozenset())
    if len(tasks) < 2 or len(langs) < 2:
        raise InfeasiblePartitionError(
            "grid needs at least 2 tasks and 2 languages to hold out cells "
            f"(got {len(tasks)} tasks, {len(langs)} languages)"
        )

    rng = stream(seed, "partition")
    last_bad: list[Cell] = []
    for _ in range(_PARTITION_RETRY_BUDGET):
        order = rng.permutation(len(cells))
        unseen = frozenset(cells[i] for i in order[:n_unseen])
        bad = constraint_violations(cells, unseen)
        if not bad:
            return CellPartition(tuple(cells), frozenset(cells) - unseen, unseen)
        last_bad = bad
    raise InfeasiblePartitionError(
        f"no valid partition found in {_PARTITION_RETRY_BUDGET} attempts; "
        f"last violating cells: {last_bad}"
    )


def split_cell(
    corpus: Corpus,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Shuffle sentence indices and cut at the ratio boundaries.

    Rounding rule: floor for train and dev, remainder to test.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    n = corpus.n_sentences
    if n < 10:
        raise ValueError(f"cell {corpus.cell} has only {n} sentences; need at least 10 to split")
    rng = stream(seed, f"split/{corpus.cell[0]}/{corpus.cell[1]}")
    perm = rng.permutation(n)
    n_train = int(ratios[0] * n)
    n_dev = int(ratios[1] * n)
    train = tuple(int(i) for i in perm[:n_train])
    dev = tuple(int(i) for i in perm[n_train : n_train + n_dev])
    test = tuple(int(i) for i in perm[n_train + n_dev :])
    return train, dev, test


def assign_splits(part: CellPartition, corpora: dict[Cell, Corpus], seed: int = 0) -> None:
    """Fill per-seen-cell splits in place. Unseen cells keep their whole
    corpus as a test set and get no entry here."""
    for cell in sorted(part.seen):
        part.splits[cell] = split_cell(corpora[cell], seed=seed)


def partition_to_dict(part: CellPartition) -> dict:
    return {
        "grid": [list(c) for c in part.grid],
        "seen": sorted([list(c) for c in part.seen]),
        "unseen": sorted([list(c) for c in part.unseen]),
        "splits": {
            f"{t}\t{l}": [list(s) for s in split] for (t, l), split in sorted(part.splits.items())
        },
    }


def partition_from_dict(payload: dict) -> CellPartition:
    grid = tuple((t, l) for t, l in payload["grid"])
    seen = frozenset((t, l) for t, l in payload["seen"])
    unseen = frozenset((t, l) for t, l in payload["unseen"])
    splits = {}
    for key, split in payload.get("splits", {}).items():
        task, lang = key.split("\t")
        splits[(task, lang)] = tuple(tuple(int(i) for i in part) for part in split)
    if seen | unseen != set(grid) or seen & unseen:
        raise ValueError("seen/unseen sets do not partition the grid")
    return CellPartition(grid, seen, unseen, splits)
