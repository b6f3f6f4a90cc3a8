"""Tokenization, vocabulary, and the word-embedding-average text encoder."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

UNK = "<unk>"
_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric character."""
    return [tok for tok in _SPLIT.split(text.lower()) if tok]


@dataclass(frozen=True)
class Vocabulary:
    """Token to index map. Index 0 is reserved for unknown tokens."""

    token_to_index: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_index) + 1

    def __len__(self) -> int:
        return self.size

    def lookup(self, token: str) -> int:
        return self.token_to_index.get(token, 0)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.lookup(t) for t in tokens], dtype=np.int64)

    def tokens(self) -> list[str]:
        """Tokens ordered by index, with the UNK placeholder first."""
        out = [UNK] * self.size
        for tok, i in self.token_to_index.items():
            out[i] = tok
        return out


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for doc in corpus for tok in doc)
    kept = sorted(tok for tok, c in counts.items() if c >= min_count)
    return Vocabulary({tok: i + 1 for i, tok in enumerate(kept)})


def init_table(vocab_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    bound = 0.5 / dim
    return rng.uniform(-bound, bound, size=(vocab_size, dim))


def _check_indices(table: np.ndarray, toks: np.ndarray) -> np.ndarray:
    toks = np.asarray(toks, dtype=np.int64)
    if toks.size and (toks.min() < 0 or toks.max() >= table.shape[0]):
        raise IndexError(f"token index out of range for a table of {table.shape[0]} rows")
    return toks


def encode_wavg(table: np.ndarray, toks: np.ndarray) -> np.ndarray:
    """Mean of the embedding rows of ``toks``; empty text gives zeros."""
    toks = _check_indices(table, toks)
    if toks.size == 0:
        return np.zeros(table.shape[1])
    return table[toks].mean(axis=0)


def encode_wavg_backward(grad_x: np.ndarray, toks: np.ndarray) -> dict[int, np.ndarray]:
    """Row gradients of the table given the gradient of one encoded text."""
    toks = np.asarray(toks, dtype=np.int64)
    grads: dict[int, np.ndarray] = {}
    if toks.size == 0:
        return grads
    share = np.asarray(grad_x, dtype=np.float64) / toks.size
    for i in toks.tolist():
        if i in grads:
            grads[i] = grads[i] + share
        else:
            grads[i] = share.copy()
    return grads


def averaging_matrix(docs: Sequence[np.ndarray], vocab_size: int) -> sp.csr_matrix:
    """Sparse ``N x V`` matrix ``W`` with ``W @ table`` = encoded texts.

    Its transpose maps node-level gradients back onto table rows.
    """
    indptr = np.zeros(len(docs) + 1, dtype=np.int64)
    for i, d in enumerate(docs):
        indptr[i + 1] = indptr[i] + len(d)
    indices = np.concatenate([np.asarray(d, dtype=np.int64) for d in docs]) if docs else np.zeros(0, np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= vocab_size):
        raise IndexError("token index out of range for the vocabulary")
    lengths = np.diff(indptr)
    data = np.repeat(1.0 / np.maximum(lengths, 1), lengths)
    w = sp.csr_matrix((data, indices, indptr), shape=(len(docs), vocab_size))
    w.sum_duplicates()
    return w
