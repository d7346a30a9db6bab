"""Deterministic token featurizer and the precomputed-embedding file format.

The featurizer hashes character n-grams of a token and its context window
into a fixed number of signed buckets, then scales to unit norm. It is a
pure function of (config, sentence window), so the whole pipeline stays
seed-reproducible without any pretrained encoder. Exported encoder outputs
can be served instead through ``load_precomputed``.

Embedding file format (plain text):
    line 1:            "e <width>"
    every other line:  "<sentence_id> <position> <v1> ... <ve>"
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class EmbeddingFileError(ValueError):
    """Malformed precomputed-embedding file."""


class EmbeddingWidthError(EmbeddingFileError):
    """A row's vector width disagrees with the declared width."""


class MissingEmbeddingError(KeyError):
    """A corpus token has no row in the embedding table."""


@dataclass(frozen=True)
class FeaturizerConfig:
    e: int = 64
    ngram_orders: tuple[int, ...] = (2, 3, 4)
    window: int = 1
    hash_seed: int = 0

    def __post_init__(self) -> None:
        if self.e < 8:
            raise ValueError("embedding width e must be >= 8")
        if not self.ngram_orders:
            raise ValueError("ngram_orders must be non-empty")
        if self.window < 0:
            raise ValueError("window must be >= 0")


def _hash_ngram(hash_seed: int, offset: int, ngram: str) -> tuple[int, int]:
    payload = f"{hash_seed}|{offset}|{ngram}".encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=9).digest()
    bucket = int.from_bytes(digest[:8], "little")
    sign = 1 if digest[8] & 1 else -1
    return bucket, sign


def featurize(config: FeaturizerConfig, sentence: Sequence[str], index: int) -> np.ndarray:
    """Embed the token at ``index`` given its context window.

    Tokens are wrapped in boundary markers before n-gram extraction so short
    tokens still contribute. The result has unit Euclidean norm (a zero
    accumulator stays zero).
    """
    if not 0 <= index < len(sentence):
        raise ValueError(f"index {index} out of range for sentence of length {len(sentence)}")
    acc = np.zeros(config.e, dtype=np.float64)
    for offset in range(-config.window, config.window + 1):
        pos = index + offset
        if not 0 <= pos < len(sentence):
            continue
        marked = f"^{sentence[pos]}$"
        for order in config.ngram_orders:
            for start in range(len(marked) - order + 1):
                bucket, sign = _hash_ngram(config.hash_seed, offset, marked[start : start + order])
                acc[bucket % config.e] += sign
    norm = float(np.linalg.norm(acc))
    if norm > 0.0:
        acc /= norm
    return acc


def featurize_sentence(config: FeaturizerConfig, sentence: Sequence[str]) -> np.ndarray:
    """All token vectors of one sentence, stacked (len(sentence) x e)."""
    return np.stack([featurize(config, sentence, i) for i in range(len(sentence))])


def load_precomputed(path: str | Path) -> dict[tuple[str, int], np.ndarray]:
    """Read an embedding table keyed by (sentence_id, token position)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmbeddingFileError(f"{path}: empty embedding file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "e":
        raise EmbeddingFileError(f"{path}:1: expected header 'e <width>', got {lines[0]!r}")
    try:
        width = int(head[1])
    except ValueError as exc:
        raise EmbeddingFileError(f"{path}:1: width is not an integer") from exc

    table: dict[tuple[str, int], np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 3:
            raise EmbeddingFileError(f"{path}:{lineno}: expected '<id> <pos> <values...>'")
        sid = parts[0]
        try:
            pos = int(parts[1])
        except ValueError as exc:
            raise EmbeddingFileError(f"{path}:{lineno}: position is not an integer") from exc
        if len(parts) - 2 != width:
            raise EmbeddingWidthError(
                f"{path}:{lineno}: expected {width} values, got {len(parts) - 2}"
            )
        try:
            vec = np.array([float(v) for v in parts[2:]], dtype=np.float64)
        except ValueError as exc:
            raise EmbeddingFileError(f"{path}:{lineno}: non-numeric value") from exc
        table[(sid, pos)] = vec
    return table


def lookup_sentence(
    table: Mapping[tuple[str, int], np.ndarray], sentence_id: str, n_tokens: int
) -> np.ndarray:
    """Stack the vectors for one sentence; every position must be present."""
    rows = []
    for pos in range(n_tokens):
        key = (sentence_id, pos)
        if key not in table:
            raise MissingEmbeddingError(f"no embedding for sentence {sentence_id!r} position {pos}")
        rows.append(table[key])
    return np.stack(rows)


def write_embeddings(
    path: str | Path, e: int, rows: Iterable[tuple[str, int, np.ndarray]]
) -> None:
    """Write the table format above. Floats use repr for exact round-trips."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"e {e}\n")
        for sid, pos, vec in rows:
            if len(vec) != e:
                raise EmbeddingWidthError(f"row ({sid}, {pos}) has width {len(vec)}, expected {e}")
            values = " ".join(repr(float(v)) for v in vec)
            fh.write(f"{sid} {pos} {values}\n")
