"""Corpus ingestion, byte-level tokenization, block packing, batch iteration.

The corpus is one concatenated id stream; document boundaries are ignored.
Blocks are disjoint contiguous spans, the tail remainder is dropped, and
batch order is a deterministic function of (seed, epoch).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TokenizerSpec",
    "encode",
    "decode",
    "load_corpus",
    "write_ids_corpus",
    "pack_blocks",
    "BlockStream",
    "Batch",
    "batch_iter",
    "cycle_batches",
    "synthetic_corpus",
]

IDS_MAGIC = b"PLMT"


@dataclass
class TokenizerSpec:
    kind: str = "byte"  # "byte" (V=256) or "ids" (pre-tokenized stream)
    vocab_size: int = 256

    def __post_init__(self):
        if self.kind not in ("byte", "ids"):
            raise ValueError(f"unknown tokenizer kind {self.kind!r}")
        if self.kind == "byte" and self.vocab_size != 256:
            raise ValueError("byte tokenizer has a fixed vocabulary of 256")


def encode(text: bytes) -> np.ndarray:
    """Byte string -> int32 ids (identity mapping)."""
    return np.frombuffer(text, dtype=np.uint8).astype(np.int32)


def decode(ids) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= 256):
        raise ValueError("byte decode requires ids in [0, 256)")
    return ids.astype(np.uint8).tobytes()


def write_ids_corpus(path, ids, vocab_size: int) -> None:
    """Pre-tokenized corpus file: 8-byte header {magic, V}, then u32 ids."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ValueError(f"ids out of range for vocab {vocab_size}")
    with open(path, "wb") as f:
        f.write(IDS_MAGIC)
        f.write(struct.pack("<I", vocab_size))
        f.write(ids.astype("<u4").tobytes())


def load_corpus(path, kind: str = "byte") -> tuple[np.ndarray, int]:
    """Read a corpus file; returns (int32 id stream, vocab size)."""
    with open(path, "rb") as f:
        raw = f.read()
    if kind == "byte":
        return encode(raw), 256
    if kind == "ids":
        if raw[:4] != IDS_MAGIC:
            raise ValueError(f"{path}: bad id-stream magic")
        (vocab,) = struct.unpack("<I", raw[4:8])
        ids = np.frombuffer(raw[8:], dtype="<u4").astype(np.int32)
        if ids.size and ids.max() >= vocab:
            raise ValueError(f"{path}: id exceeds declared vocab {vocab}")
        return ids, vocab
    raise ValueError(f"unknown corpus kind {kind!r}")


def pack_blocks(ids, block_length: int) -> np.ndarray:
    """floor(n/L) disjoint contiguous blocks of L ids; the tail is dropped."""
    if block_length < 1:
        raise ValueError("block_length must be >= 1")
    ids = np.asarray(ids)
    n_blocks = len(ids) // block_length
    return ids[: n_blocks * block_length].reshape(n_blocks, block_length)


@dataclass
class BlockStream:
    ids: np.ndarray
    block_length: int
    seed: int = 0

    def __post_init__(self):
        self.blocks = pack_blocks(self.ids, self.block_length)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_blocks)


@dataclass
class Batch:
    tokens: np.ndarray  # [B, block_length] int32
    stage: str = "token"


def batch_iter(stream: BlockStream, batch_size: int, epochs: int = 1,
               stage: str = "token", skip_batches: int = 0):
    """Deterministic shuffled batches; each epoch is a fresh full-permutation pass.

    Yields floor(n_blocks / B) batches per epoch, so every block appears at
    most once per epoch (exactly once when B divides the block count).
    skip_batches drops leading batches of the first epoch only, which lets a
    later stage pick up the unconsumed remainder of a single data pass.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if stream.n_blocks < batch_size:
        raise ValueError(f"corpus has {stream.n_blocks} blocks, fewer than one batch of {batch_size}")
    per_epoch = stream.n_blocks // batch_size
    for epoch in range(epochs):
        order = stream.epoch_order(epoch)
        start = skip_batches if epoch == 0 else 0
        for j in range(start, per_epoch):
            rows = order[j * batch_size : (j + 1) * batch_size]
            yield Batch(stream.blocks[rows], stage=stage)


def cycle_batches(stream: BlockStream, batch_size: int, n_steps: int,
                  stage: str = "token", skip_batches: int = 0):
    """Exactly n_steps batches, cycling epochs with fresh shuffles as needed."""
    produced = 0
    epoch = 0
    while produced < n_steps:
        for batch in batch_iter(stream, batch_size, epochs=1, stage=stage,
                                skip_batches=skip_batches if epoch == 0 else 0):
            yield batch
            produced += 1
            if produced == n_steps:
                return
        epoch += 1


def synthetic_corpus(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-text: Zipf-weighted made-up words with light
    sentence structure. Enough statistical regularity for a byte-level model
    to show clear learning curves."""
    rng = np.random.default_rng(seed)
    letters = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    n_words = 512
    words = []
    for _ in range(n_words):
        length = int(rng.integers(2, 9))
        words.append(bytes(letters[rng.integers(0, 26, length)]))
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    probs = ranks ** -1.1
    probs /= probs.sum()
    avg_len = sum(len(w) for w in words) / n_words + 1
    n_draw = int(n_bytes / avg_len * 1.2) + 64
    choices = rng.choice(n_words, size=n_draw, p=probs)
    sentence_break = rng.random(n_draw) < 0.08
    pieces = []
    total = 0
    for idx, brk in zip(choices, sentence_break):
        w = words[idx]
        pieces.append(w + (b".\n" if brk else b" "))
        total += len(pieces[-1])
        if total >= n_bytes:
            break
    return b"".join(pieces)[:n_bytes]
