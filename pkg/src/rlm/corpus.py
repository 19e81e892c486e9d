"""Vocabulary, encoding, contiguous batching and BPTT slicing.

Corpus files are whitespace-tokenised UTF-8 text with one segment per line,
in the Penn Treebank / WikiText layout.  An end-of-line token is appended
after every line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EOS = "<eos>"
UNK = "<unk>"


@dataclass
class Vocabulary:
    id_to_token: list[str] = field(default_factory=list)
    token_to_id: dict[str, int] = field(default_factory=dict)

    def add(self, token: str) -> int:
        idx = self.token_to_id.get(token)
        if idx is None:
            idx = len(self.id_to_token)
            self.token_to_id[token] = idx
            self.id_to_token.append(token)
        return idx

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Rebuild from an ordered id->token list (as stored in checkpoints)."""
        vocab = cls()
        for tok in tokens:
            if tok in vocab:
                raise ValueError(f"duplicate token {tok!r} in vocabulary list")
            vocab.add(tok)
        if EOS not in vocab or UNK not in vocab:
            raise ValueError("vocabulary lacks the reserved eos/unk tokens")
        return vocab


def build_vocabulary(train_tokens: Iterable[str]) -> Vocabulary:
    """Ids in first-occurrence order; eos and unk appended if the text lacks them."""
    vocab = Vocabulary()
    for tok in train_tokens:
        vocab.add(tok)
    if not any(tok not in (EOS, UNK) for tok in vocab.id_to_token):
        raise ValueError("cannot build a vocabulary from an empty token stream")
    vocab.add(EOS)
    vocab.add(UNK)
    return vocab


def tokenize_lines(lines: Iterable[str]) -> list[str]:
    """Split each line on whitespace and append eos after it."""
    out: list[str] = []
    for line in lines:
        out.extend(line.split())
        out.append(EOS)
    return out


def encode(text: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    unk = vocab.unk_id
    get = vocab.token_to_id.get
    return np.array([get(tok, unk) for tok in tokenize_lines(text)], dtype=np.int64)


def read_lines(path: str | os.PathLike) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return fh.read().splitlines()


@dataclass
class BatchedCorpus:
    """Id matrix [n_steps x batch]; column b is one contiguous stream."""

    data: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.data.shape[0]

    @property
    def batch_size(self) -> int:
        return self.data.shape[1]

    def offsets(self, bptt: int) -> range:
        return range(0, self.n_steps - 1, bptt)


def batchify(ids: Sequence[int], batch_size: int) -> BatchedCorpus:
    """Trim to a multiple of ``batch_size`` and lay the stream out column by column."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if ids.size < batch_size:
        raise ValueError(f"{ids.size} tokens cannot fill a batch of {batch_size}")
    n_steps = ids.size // batch_size
    return BatchedCorpus(ids[: n_steps * batch_size].reshape(batch_size, n_steps).T.copy())


def bptt_slice(corpus: BatchedCorpus, offset: int, bptt: int) -> tuple[np.ndarray, np.ndarray]:
    """Inputs rows ``[offset, offset+L)`` and next-token targets one row later."""
    if bptt < 1:
        raise ValueError("bptt must be positive")
    if not 0 <= offset < corpus.n_steps - 1:
        raise IndexError(f"offset {offset} outside [0, {corpus.n_steps - 1})")
    L = min(bptt, corpus.n_steps - 1 - offset)
    return corpus.data[offset: offset + L], corpus.data[offset + 1: offset + 1 + L]


@dataclass
class Corpus:
    """Vocabulary plus encoded splits; the vocabulary comes from train only."""

    vocab: Vocabulary
    train: np.ndarray
    valid: np.ndarray | None = None
    test: np.ndarray | None = None

    @classmethod
    def from_files(cls, train: str | os.PathLike, valid: str | os.PathLike | None = None,
                   test: str | os.PathLike | None = None) -> "Corpus":
        train_lines = read_lines(train)
        vocab = build_vocabulary(tokenize_lines(train_lines))
        return cls(
            vocab,
            encode(train_lines, vocab),
            None if valid is None else encode(read_lines(valid), vocab),
            None if test is None else encode(read_lines(test), vocab),
        )

    @classmethod
    def from_text(cls, train: str, valid: str | None = None, test: str | None = None) -> "Corpus":
        train_lines = train.splitlines()
        vocab = build_vocabulary(tokenize_lines(train_lines))
        enc = lambda s: None if s is None else encode(s.splitlines(), vocab)  # noqa: E731
        return cls(vocab, encode(train_lines, vocab), enc(valid), enc(test))
