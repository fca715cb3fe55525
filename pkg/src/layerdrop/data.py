"""Byte-level corpora, contiguous block batching, and synthetic tasks."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .numcore import Rng

BYTE_VOCAB = 256

# synthetic tasks draw from a small alphabet and reserve one separator id
SYNTH_ALPHABET = 64
SEP = 64
COPY_SEGMENT = 8


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    split: str = "train"
    source: str = ""
    vocab_size: int = BYTE_VOCAB

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise ValueError(f"token id {int(self.tokens.max())} >= vocab_size {self.vocab_size}")

    def __len__(self):
        return int(self.tokens.size)

    def to_bytes(self) -> bytes:
        return self.tokens.astype(np.uint8).tobytes()

    def head(self, n: int) -> "Corpus":
        return Corpus(self.tokens[:n], self.split, f"{self.source}[:{n}]", self.vocab_size)


@dataclass
class BlockBatch:
    inputs: np.ndarray  # [batch, block_len]
    targets: np.ndarray  # inputs shifted left by one

    @property
    def n_tokens(self) -> int:
        return int(self.inputs.size)


def load_corpus(path, split_fracs=(0.9, 0.05, 0.05)) -> tuple[Corpus, Corpus, Corpus]:
    """Read raw bytes and cut them into contiguous train/valid/test spans."""
    if len(split_fracs) != 3 or any(f <= 0 for f in split_fracs):
        raise ValueError(f"split fractions must be three positive numbers, got {split_fracs}")
    if abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(split_fracs)}")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    if not raw:
        raise ValueError(f"corpus file {path} is empty")
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    n = tokens.size
    n_train = int(round(n * split_fracs[0]))
    n_valid = int(round(n * split_fracs[1]))
    name = os.path.basename(os.fspath(path))
    return (
        Corpus(tokens[:n_train], "train", name),
        Corpus(tokens[n_train:n_train + n_valid], "valid", name),
        Corpus(tokens[n_train + n_valid:], "test", name),
    )


def n_blocks(corpus: Corpus, block_len: int) -> int:
    return (len(corpus) - 1) // block_len


def make_blocks(corpus: Corpus, batch: int, block_len: int, rng: Rng | None = None,
                shuffle: bool = False) -> Iterator[BlockBatch]:
    """One epoch of non-overlapping contiguous blocks.

    Block ``k`` reads inputs ``tokens[k*L : (k+1)*L]`` and the next-token
    targets one position later; the trailing partial block is dropped. The
    final batch may hold fewer than ``batch`` blocks.
    """
    if batch < 1 or block_len < 1:
        raise ValueError("batch and block_len must be positive")
    if len(corpus) <= block_len:
        raise ValueError(f"corpus of {len(corpus)} tokens too short for block_len {block_len}")
    nb = n_blocks(corpus, block_len)
    order = np.arange(nb)
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        order = rng.permutation(nb)
    toks = corpus.tokens
    offsets = np.arange(block_len)
    for start in range(0, nb, batch):
        idx = order[start:start + batch, None] * block_len + offsets
        yield BlockBatch(toks[idx], toks[idx + 1])


def batch_stream(corpus: Corpus, batch: int, block_len: int, rng: Rng) -> Iterator[BlockBatch]:
    """Endless shuffled epochs of full batches."""
    while True:
        for b in make_blocks(corpus, batch, block_len, rng, shuffle=True):
            if b.inputs.shape[0] == batch:
                yield b


def zipf_bigram_transition(seed: int, k: int = SYNTH_ALPHABET, s_global: float = 1.0,
                           s_local: float = 0.5) -> np.ndarray:
    """Row-stochastic ``[k, k]`` matrix: Zipf over ids times a per-row Zipf over a seeded ranking."""
    rng = Rng(seed).spawn("zipf_bigram")
    glob = 1.0 / np.arange(1, k + 1) ** s_global
    trans = np.empty((k, k))
    for a in range(k):
        ranks = np.empty(k)
        ranks[rng.permutation(k)] = np.arange(1, k + 1)
        row = glob / ranks ** s_local
        trans[a] = row / row.sum()
    return trans


def stationary_distribution(trans: np.ndarray, iters: int = 2000) -> np.ndarray:
    pi = np.full(trans.shape[0], 1.0 / trans.shape[0])
    for _ in range(iters):
        pi = pi @ trans
    return pi / pi.sum()


def gen_synthetic(task: str, size: int, seed: int) -> Corpus:
    """Deterministic synthetic corpus of ``size`` tokens.

    ``copy``: episodes of a random 8-symbol segment, SEP, the same segment,
    SEP. ``zipf_bigram``: a Markov chain from :func:`zipf_bigram_transition`.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = Rng(seed)
    if task == "copy":
        ep = 2 * COPY_SEGMENT + 2
        n_ep = -(-size // ep)
        seg = rng.integers(SYNTH_ALPHABET, (n_ep, COPY_SEGMENT))
        sep = np.full((n_ep, 1), SEP)
        toks = np.concatenate([seg, sep, seg, sep], axis=1).reshape(-1)[:size]
    elif task == "zipf_bigram":
        trans = zipf_bigram_transition(seed)
        cdf = np.cumsum(trans, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random(size)
        toks = np.empty(size, dtype=np.int64)
        prev = 0
        for i in range(size):
            prev = int(np.searchsorted(cdf[prev], u[i], side="right"))
            toks[i] = prev
    else:
        raise ValueError(f"unknown synthetic task {task!r}")
    return Corpus(toks, "train", f"synthetic:{task}:{seed}")


def copy_target_mask(length: int) -> np.ndarray:
    """True where a copy-task target lies in a repeated segment (fully predictable)."""
    ep = 2 * COPY_SEGMENT + 2
    pos = (np.arange(length) + 1) % ep  # target index within episode
    return (pos > COPY_SEGMENT) & (pos <= 2 * COPY_SEGMENT)
