"""Tokenization, vocabulary, and fixed word-embedding lookup."""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import DataFormatError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, treat punctuation as whitespace, split.

    Tokens are maximal ASCII alphanumeric runs; everything else separates.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """token -> contiguous index map; index 0 is padding, 1 is unknown."""

    index: dict[str, int] = field(default_factory=lambda: {PAD_TOKEN: 0, UNK_TOKEN: 1})

    @classmethod
    def build(cls, texts: list[str]) -> "Vocabulary":
        vocab = cls()
        for text in texts:
            for token in tokenize(text):
                if token not in vocab.index:
                    vocab.index[token] = len(vocab.index)
        return vocab

    def __len__(self) -> int:
        return len(self.index)

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.index[UNK_TOKEN])


class EmbeddingTable:
    """token -> dense vector of fixed dimension; unknown tokens map to zeros."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError(f"embedding dimension must be positive, got {dim}")
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        self._zero = np.zeros(dim, dtype=np.float64)

    def add(self, token: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"token {token!r}: expected {self.dim} floats, got {vec.shape}")
        self._vectors[token] = vec

    def get(self, token: str) -> np.ndarray:
        return self._vectors.get(token, self._zero)

    def __contains__(self, token: str) -> bool:
        return token in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def tokens(self) -> list[str]:
        return list(self._vectors)


def load_embedding_table(path: str) -> EmbeddingTable:
    """Read a text embedding file: one line per token, "<token> <floats...>".

    The dimension is inferred from the first line; ragged lines are errors.
    """
    table: EmbeddingTable | None = None
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                raise DataFormatError(f"line {line_no}: expected '<token> <floats...>'")
            token = parts[0]
            try:
                vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"line {line_no}: non-numeric embedding value") from None
            if table is None:
                table = EmbeddingTable(vec.shape[0])
            if vec.shape != (table.dim,):
                raise DataFormatError(
                    f"line {line_no}: expected {table.dim} floats, got {vec.shape[0]}"
                )
            table.add(token, vec)
    if table is None:
        raise DataFormatError(f"{path}: empty embedding file")
    return table


def save_embedding_table(table: EmbeddingTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token in table.tokens():
            values = " ".join("%.17g" % v for v in table.get(token))
            fh.write(f"{token} {values}\n")


def random_embedding_table(tokens: list[str], dim: int, seed: int,
                           scale: float = 1.0) -> EmbeddingTable:
    """Seeded random embeddings of norm `scale`, one per distinct token in order.

    Distributional word vectors typically carry norms well above one, and the
    norm controls how sharply scaled-dot-product attention concentrates on
    exact token matches, so synthetic corpora can tune it.
    """
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(dim)
    for token in tokens:
        if token in table:
            continue
        vec = rng.standard_normal(dim)
        table.add(token, vec * (scale / np.linalg.norm(vec)))
    return table


def partitioned_embedding_table(groups: Sequence[Sequence[str]], dim: int,
                                seed: int, scale: float = 1.0) -> EmbeddingTable:
    """Random embeddings where each token group occupies its own slice of the space.

    Tokens from different groups come out exactly orthogonal, so cross-group
    dot products vanish instead of carrying O(1/sqrt(dim)) alignment noise;
    within a group vectors are random with norm `scale`.  A token listed in
    several groups keeps its first assignment.  Synthetic corpora use this so
    a planted match signal is not diluted by chance alignments between
    unrelated vocabularies.
    """
    if len(groups) < 1:
        raise ValueError("need at least one token group")
    if dim < len(groups):
        raise ValueError(f"dim {dim} smaller than group count {len(groups)}")
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(dim)
    g = len(groups)
    for i, tokens in enumerate(groups):
        lo, hi = i * dim // g, (i + 1) * dim // g
        for token in tokens:
            if token in table:
                continue
            vec = np.zeros(dim)
            part = rng.standard_normal(hi - lo)
            vec[lo:hi] = part * (scale / np.linalg.norm(part))
            table.add(token, vec)
    return table


def embed_sequence(tokens: list[str], table: EmbeddingTable, max_len: int) -> np.ndarray:
    """[max_len x dim] matrix: embeddings in token order, zero-padded suffix.

    Sequences longer than ``max_len`` are truncated at the tail.
    """
    if max_len <= 0:
        raise ValueError(f"max_len must be positive, got {max_len}")
    out = np.zeros((max_len, table.dim), dtype=np.float64)
    for row, token in enumerate(tokens[:max_len]):
        out[row] = table.get(token)
    return out
