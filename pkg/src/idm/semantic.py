"""Embeddings, reference vector sets, and cosine-similarity gating.

The default provider is seeded feature hashing over word n-grams so the
whole input-validation battery runs deterministically offline. Reference
sets load from editable tab-separated files (`label<TAB>phrase` per
line) and are immutable after load.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

_WORD = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")


class HashingEmbedder:
    """Deterministic text embedder using seeded feature hashing.

    Tokens (unigrams and bigrams) are hashed into a fixed-dimension
    vector with signed buckets; the result is L2-normalized. Identical
    text always maps to the identical vector.
    """

    def __init__(self, dimension: int = 256, seed: int = 13) -> None:
        if dimension < 2:
            raise ValueError("dimension must be >= 2")
        self.dimension = dimension
        self._seed = seed

    def _tokens(self, text: str) -> list[str]:
        words = _WORD.findall(text.lower())
        return words + [f"{a}_{b}" for a, b in zip(words, words[1:])]

    def _bucket(self, token: str) -> tuple[int, float]:
        # FNV-1a with the seed folded in; stable across processes.
        h = 2166136261 ^ (self._seed * 16777619 & 0xFFFFFFFF)
        for ch in token.encode("utf-8"):
            h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
        sign = 1.0 if (h >> 31) & 1 == 0 else -1.0
        return h % self.dimension, sign

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dimension)
        for token in self._tokens(text):
            idx, sign = self._bucket(token)
            vec[idx] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            # No alphanumeric token hashed anywhere; give a stable fallback.
            vec[0] = 1.0
            norm = 1.0
        return vec / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity a.b / (|a||b|), in [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine undefined for the zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class ReferenceSet:
    """Labeled reference vectors with a gating threshold."""

    kind: str
    labels: tuple[str, ...]
    vectors: tuple[np.ndarray, ...] = ()
    threshold: float = 0.75

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("reference set must be nonempty")
        if len(self.labels) != len(self.vectors):
            raise ValueError("labels and vectors must have equal length")
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("threshold must be in [0, 1]")
        dims = {v.shape for v in self.vectors}
        if len(dims) > 1:
            raise ValueError("all reference vectors must share a dimension")

    @classmethod
    def from_phrases(
        cls,
        kind: str,
        entries: list[tuple[str, str]],
        embedder: HashingEmbedder,
        threshold: float,
    ) -> "ReferenceSet":
        labels = tuple(label for label, _ in entries)
        vectors = tuple(embedder.embed(phrase) for _, phrase in entries)
        return cls(kind=kind, labels=labels, vectors=vectors, threshold=threshold)

    @classmethod
    def from_file(cls, kind: str, path: str, embedder: HashingEmbedder, threshold: float) -> "ReferenceSet":
        entries: list[tuple[str, str]] = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                label, _, phrase = line.partition("\t")
                entries.append((label.strip(), phrase.strip() or label.strip()))
        return cls.from_phrases(kind, entries, embedder, threshold)


def max_similarity(q: np.ndarray, refset: ReferenceSet) -> tuple[float, str]:
    """Maximum cosine over refset entries; ties break on first entry."""
    best_score = -2.0
    best_label = ""
    for label, vec in zip(refset.labels, refset.vectors):
        score = cosine(q, vec)
        if score > best_score:
            best_score, best_label = score, label
    return best_score, best_label


def gate(q: np.ndarray, refset: ReferenceSet) -> bool:
    """True iff the best match meets the refset threshold (>=)."""
    score, _ = max_similarity(q, refset)
    return score >= refset.threshold
