"""Toy character corpora: a seeded Markov text generator, byte vocabularies, batching."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ALPHABET",
    "Vocab",
    "Batch",
    "CorpusData",
    "generate_corpus",
    "conditional_entropy",
    "load_corpus",
    "RegressionData",
]

# 64 printable symbols, one per vocabulary id
ALPHABET = (b"abcdefghijklmnopqrstuvwxyz"
            b"ABCDEFGHIJKLMNOPQRSTUVWXYZ"
            b"0123456789 .")


@dataclass(frozen=True)
class Vocab:
    symbols: bytes

    @property
    def size(self) -> int:
        return len(self.symbols)

    @classmethod
    def from_data(cls, data: bytes, size: int) -> "Vocab":
        """Vocabulary of ``size`` symbols covering ``data``.

        Symbols not present in the data are filled from :data:`ALPHABET` so the
        id range is always exactly ``size``.
        """
        present = sorted(set(data))
        if len(present) > size:
            raise ValueError(f"corpus uses {len(present)} distinct bytes, vocabulary holds {size}")
        fill = [b for b in ALPHABET if b not in present]
        fill += [b for b in range(256) if b not in present and b not in fill]
        return cls(bytes(sorted(present + fill[: size - len(present)])))

    def encode(self, data: bytes) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int64)
        table[np.frombuffer(self.symbols, dtype=np.uint8)] = np.arange(self.size)
        ids = table[np.frombuffer(data, dtype=np.uint8)]
        if (ids < 0).any():
            raise ValueError("corpus contains bytes outside the vocabulary")
        return ids

    def decode(self, ids) -> bytes:
        return bytes(self.symbols[i] for i in np.asarray(ids).reshape(-1))

    def to_tsv(self) -> str:
        lines = ["id\tbyte\tchar"]
        for i, b in enumerate(self.symbols):
            ch = chr(b) if 32 < b < 127 else f"\\x{b:02x}"
            lines.append(f"{i}\t{b}\t{ch}")
        return "\n".join(lines) + "\n"


def _transition_table(rng: np.random.Generator, v: int, sharpness: float) -> np.ndarray:
    # additive per-symbol preferences plus a pair-specific term; exp of a scaled
    # Gaussian field gives peaked but overlapping successor distributions
    prev2 = rng.standard_normal((v, 1, v))
    prev1 = rng.standard_normal((1, v, v))
    pair = 0.5 * rng.standard_normal((v, v, v))
    logits = sharpness * (prev2 + prev1 + pair)
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def generate_corpus(seed: int, n_bytes: int, sharpness: float = 2.0) -> bytes:
    """Deterministic order-2 Markov text over :data:`ALPHABET`."""
    if n_bytes < 3:
        raise ValueError("need at least 3 bytes")
    rng = np.random.default_rng(seed)
    v = len(ALPHABET)
    cum = np.cumsum(_transition_table(rng, v, sharpness), axis=-1)
    cum[..., -1] = 1.0
    cum_lists = [[row.tolist() for row in plane] for plane in cum]
    u = rng.random(n_bytes)
    ids = [int(x) for x in rng.integers(0, v, size=2)]
    for i in range(2, n_bytes):
        row = cum_lists[ids[-2]][ids[-1]]
        ids.append(min(bisect.bisect_right(row, u[i]), v - 1))
    return bytes(ALPHABET[i] for i in ids)


def conditional_entropy(ids: np.ndarray, v: int) -> float:
    """Plug-in estimate of H(x_t | x_{t-1}) in nats from bigram counts."""
    ids = np.asarray(ids)
    counts = np.zeros((v, v))
    np.add.at(counts, (ids[:-1], ids[1:]), 1.0)
    total = counts.sum()
    rows = counts.sum(axis=1, keepdims=True)
    nz = counts > 0
    p_joint = counts[nz] / total
    p_cond = (counts / np.where(rows == 0, 1.0, rows))[nz]
    return float(-(p_joint * np.log(p_cond)).sum())


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray


@dataclass
class CorpusData:
    """Train/validation split of an id stream with deterministic batching."""

    vocab: Vocab
    train: np.ndarray
    val: np.ndarray
    context: int

    @classmethod
    def from_bytes(cls, data: bytes, vocab_size: int, context: int,
                   val_fraction: float = 0.1) -> "CorpusData":
        vocab = Vocab.from_data(data, vocab_size)
        ids = vocab.encode(data)
        n_val = int(len(ids) * val_fraction)
        if n_val <= context + 1 or len(ids) - n_val <= context + 1:
            raise ValueError("corpus too short for the context length")
        return cls(vocab, ids[:-n_val], ids[-n_val:], context)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        starts = rng.integers(0, len(self.train) - self.context - 1, size=batch_size)
        return self._windows(self.train, starts)

    def validation(self, n_seqs: int) -> Batch:
        """Evenly spaced, non-random validation windows."""
        span = len(self.val) - self.context - 1
        n = min(n_seqs, span + 1)
        starts = np.linspace(0, span, n).astype(np.int64)
        return self._windows(self.val, starts)

    def _windows(self, ids: np.ndarray, starts: np.ndarray) -> Batch:
        idx = starts[:, None] + np.arange(self.context + 1)[None, :]
        w = ids[idx]
        return Batch(w[:, :-1], w[:, 1:])


def load_corpus(source: str, seed: int, n_bytes: int) -> bytes:
    """``"synthetic"`` generates a Markov corpus; anything else is read as a file path."""
    if source == "synthetic":
        return generate_corpus(seed, n_bytes)
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {source}")
    return path.read_bytes()


def uniform_entropy(v: int) -> float:
    return math.log(v)


@dataclass
class RegressionData:
    """Noise-free linear regression ``y = A x`` with Gaussian inputs."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    @classmethod
    def linear(cls, seed: int, d_in: int, d_out: int, n_train: int = 4096,
               n_val: int = 512) -> "RegressionData":
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((d_out, d_in)) / math.sqrt(d_in)
        x = rng.standard_normal((n_train + n_val, d_in))
        y = x @ a.T
        return cls(x[:n_train], y[:n_train], x[n_train:], y[n_train:])

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = rng.integers(0, len(self.train_x), size=batch_size)
        return Batch(self.train_x[idx], self.train_y[idx])

    def validation(self, n_seqs: int) -> Batch:
        n = min(n_seqs, len(self.val_x))
        return Batch(self.val_x[:n], self.val_y[:n])
