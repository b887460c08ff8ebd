"""Synthetic token-sequence classification tasks.

Token 0 is a [CLS] marker at position 0.  The top ``n_reserved`` ids are kept
out of natural data so the trigger baseline can use them as a prefix pattern.
Class ``c`` owns a disjoint subset of the remaining content tokens; each
position draws from the class subset with probability ``signal`` and uniformly
from all content tokens otherwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .rng import make_rng

CLS_TOKEN = 0


@dataclass(frozen=True)
class TaskConfig:
    vocab_size: int = 64
    seq_len: int = 12
    n_classes: int = 10
    signal: float = 0.5
    n_reserved: int = 4
    task_seed: int = 0

    def __post_init__(self):
        if self.seq_len < 2:
            raise ValueError("seq_len must leave room for [CLS] plus content")
        if not 0.0 < self.signal <= 1.0:
            raise ValueError("signal must lie in (0, 1]")
        if self.n_classes * 1 > len(self.content_tokens):
            raise ValueError("not enough content tokens for the requested classes")

    @property
    def content_tokens(self) -> np.ndarray:
        return np.arange(1, self.vocab_size - self.n_reserved)

    @property
    def reserved_tokens(self) -> np.ndarray:
        return np.arange(self.vocab_size - self.n_reserved, self.vocab_size)

    def class_tokens(self) -> list[np.ndarray]:
        content = make_rng(self.task_seed, "class-tokens").permutation(self.content_tokens)
        k = len(content) // self.n_classes
        return [np.sort(content[c * k:(c + 1) * k]) for c in range(self.n_classes)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    tokens: np.ndarray
    labels: np.ndarray
    config: TaskConfig
    seed: int
    split: str

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        return SyntheticDataset(self.tokens[idx], self.labels[idx], self.config, self.seed, self.split)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.tokens[idx], self.labels[idx]


def make_dataset(config: TaskConfig, n_samples: int, seed: int, split: str = "train") -> SyntheticDataset:
    """Balanced labels (counts differ by at most one), deterministic in (seed, split)."""
    rng = make_rng(seed, "dataset", split, config.task_seed)
    labels = rng.permutation(np.arange(n_samples) % config.n_classes)
    pools = config.class_tokens()
    content = config.content_tokens
    L = config.seq_len - 1
    noise = rng.choice(content, size=(n_samples, L))
    use_signal = rng.random((n_samples, L)) < config.signal
    picks = rng.integers(0, len(pools[0]), size=(n_samples, L))
    pool_arr = np.stack(pools)
    signal_tokens = pool_arr[labels[:, None], picks]
    body = np.where(use_signal, signal_tokens, noise)
    tokens = np.concatenate([np.full((n_samples, 1), CLS_TOKEN), body], axis=1).astype(np.int64)
    return SyntheticDataset(tokens, labels.astype(np.int64), config, seed, split)


def add_trigger(tokens: np.ndarray, pattern) -> np.ndarray:
    """Prepend the trigger pattern to the content, keeping [CLS] first."""
    tokens = np.asarray(tokens, dtype=np.int64)
    pattern = np.broadcast_to(np.asarray(pattern, dtype=np.int64), (tokens.shape[0], len(pattern)))
    return np.concatenate([tokens[:, :1], pattern, tokens[:, 1:]], axis=1)
