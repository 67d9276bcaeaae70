"""Byte-level corpus ingestion and synthetic corpora for desk-scale runs.

A corpus is any byte string. It is cut into fixed-length blocks (the final
partial block is dropped), blocks are shuffled once per epoch with the run's
generator, and batches pair each block with its next-byte targets. The last
position of a block has no in-block successor and is excluded from the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IGNORE_INDEX = -1


class CorpusError(ValueError):
    """The corpus is empty or too short for the requested block length."""


@dataclass
class Batch:
    """Token ids (B, T) and next-byte targets with the tail position masked."""

    inputs: np.ndarray
    targets: np.ndarray


def load_corpus(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) == 0:
        raise CorpusError(f"corpus {path} is empty")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def blocks_from_bytes(data: np.ndarray, block_len: int) -> np.ndarray:
    """Cut into (N, block_len) blocks, dropping the final partial block."""
    if block_len <= 0:
        raise CorpusError(f"block length must be positive, got {block_len}")
    n = len(data) // block_len
    if n == 0:
        raise CorpusError(f"corpus of {len(data)} bytes is shorter than one {block_len}-byte block")
    return np.asarray(data[: n * block_len]).reshape(n, block_len)


def targets_for(inputs: np.ndarray) -> np.ndarray:
    """Next-token ids; the final column is IGNORE_INDEX (no successor in block)."""
    targets = np.full_like(inputs, IGNORE_INDEX)
    targets[..., :-1] = inputs[..., 1:]
    return targets


def ingest_corpus(path, block_len: int, batch_size: int, seed: int,
                  shuffle: bool = True):
    """Yield an endless, deterministic stream of Batches.

    Block order is reshuffled each epoch from a generator seeded once, so the
    stream is a pure function of (corpus, block_len, batch_size, seed).
    Incomplete trailing batches are dropped along with the partial block.
    """
    data = load_corpus(path)
    blocks = blocks_from_bytes(data, block_len)
    if len(blocks) < batch_size:
        raise CorpusError(f"corpus has {len(blocks)} blocks, fewer than batch size {batch_size}")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(blocks)) if shuffle else np.arange(len(blocks))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            chosen = blocks[order[start:start + batch_size]]
            yield Batch(inputs=chosen, targets=targets_for(chosen))


def make_synthetic_corpus(n_bytes: int = 65536, seed: int = 42,
                          n_words: int = 12, alphabet: int = 16) -> bytes:
    """Structured byte soup: a small lexicon recombined into looping phrases.

    Words are short strings over a narrow byte alphabet; phrases are fixed
    word sequences; the corpus cycles phrases chosen by a seeded generator,
    separated by a sentinel byte. Strong local structure makes next-byte
    prediction learnable within a few hundred steps at desk scale.
    """
    rng = np.random.default_rng(seed)
    sep = alphabet  # one byte above the word alphabet
    words = []
    for _ in range(n_words):
        length = int(rng.integers(3, 8))
        words.append(bytes(rng.integers(0, alphabet, length).astype(np.uint8)))
    phrases = []
    for _ in range(6):
        picks = rng.integers(0, n_words, int(rng.integers(3, 6)))
        phrase = bytes([sep]).join(words[int(p)] for p in picks) + bytes([sep, sep])
        phrases.append(phrase)
    out = bytearray()
    while len(out) < n_bytes:
        out += phrases[int(rng.integers(0, len(phrases)))]
    return bytes(out[:n_bytes])
