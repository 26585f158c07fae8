"""Byte-level tokenizer and corpus streams."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DegenerateInputError(ValueError):
    pass


class ByteTokenizer:
    """256 byte tokens followed by special tokens that represent no bytes."""

    specials = ("<|bos|>", "<|eos|>")

    def __init__(self):
        self.bos = 256
        self.eos = 257

    @property
    def vocab_size_raw(self) -> int:
        return 256 + len(self.specials)

    def byte_counts(self, vocab_size: int | None = None) -> np.ndarray:
        n = vocab_size or self.vocab_size_raw
        b = np.zeros(n, dtype=np.int64)
        b[:256] = 1
        return b

    def encode(self, data: bytes | str, bos: bool = False) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        ids = list(data)
        return [self.bos] + ids if bos else ids

    def decode(self, ids) -> bytes:
        return bytes(int(i) for i in ids if 0 <= int(i) < 256)


def read_bytes(path) -> bytes:
    p = Path(path)
    if p.is_dir():
        return b"".join(f.read_bytes() for f in sorted(p.rglob("*")) if f.is_file())
    return p.read_bytes()


@dataclass
class TokenStream:
    """Fixed-length windows of ``seq_len + 1`` tokens from one token array."""

    tokens: np.ndarray
    seq_len: int
    seed: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self._rng = np.random.default_rng(self.seed)

    def __len__(self) -> int:
        return int(self.tokens.size)

    def sample(self, batch: int) -> np.ndarray:
        """(batch, seq_len + 1) windows at seeded uniform offsets."""
        span = self.seq_len + 1
        if self.tokens.size < span:
            raise DegenerateInputError(f"stream of {self.tokens.size} tokens is shorter than {span}")
        starts = self._rng.integers(0, self.tokens.size - span + 1, size=batch)
        return self.tokens[starts[:, None] + np.arange(span)[None, :]]

    def windows(self, max_windows: int | None = None) -> np.ndarray:
        """Consecutive non-overlapping windows, deterministic."""
        span = self.seq_len + 1
        n = self.tokens.size // span
        if max_windows is not None:
            n = min(n, max_windows)
        return self.tokens[: n * span].reshape(n, span)


def load_corpus(path, split_fraction: float, seed: int, seq_len: int) -> tuple[TokenStream, TokenStream]:
    """Split a raw byte corpus into (train, validation) token streams.

    The last ``split_fraction`` of the bytes is held out as validation.
    """
    if not 0.0 <= split_fraction < 1.0:
        raise ValueError("split_fraction must be in [0, 1)")
    raw = read_bytes(path)
    n_val = int(len(raw) * split_fraction)
    train, val = raw[: len(raw) - n_val], raw[len(raw) - n_val :]
    if len(train) < seq_len + 1:
        raise DegenerateInputError(f"corpus {path} has {len(train)} training bytes, need >= {seq_len + 1}")
    tr = TokenStream(np.frombuffer(train, dtype=np.uint8), seq_len, seed)
    va = TokenStream(np.frombuffer(val, dtype=np.uint8), seq_len, seed + 1)
    return tr, va


def unigram_entropy_nats(data: bytes) -> float:
    """Entropy of the empirical byte distribution, in nats per byte."""
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())
