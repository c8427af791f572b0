"""Add-k smoothed bigram language model over vocabulary indices."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class BigramLM:
    """``P(b | a) = (c(a, b) + k) / (c(a, .) + k * num_types)``.

    Sequences carry no boundary markers, so a text of ``L`` tokens contributes
    ``L - 1`` bigrams.
    """

    def __init__(self, num_types: int, smoothing: float = 1.0):
        if num_types < 1:
            raise ValueError("num_types must be >= 1")
        if smoothing <= 0:
            raise ValueError("smoothing must be positive")
        self.num_types = num_types
        self.k = smoothing
        self.pair_counts: dict[tuple[int, int], int] = {}
        self.context_counts = np.zeros(num_types, dtype=np.int64)

    @classmethod
    def train(cls, sequences: Iterable[Sequence[int]], num_types: int, smoothing: float = 1.0) -> "BigramLM":
        lm = cls(num_types, smoothing)
        for seq in sequences:
            lm.update(seq)
        return lm

    def update(self, seq: Sequence[int]) -> None:
        seq = [int(x) for x in seq]
        for a, b in zip(seq, seq[1:]):
            self.pair_counts[(a, b)] = self.pair_counts.get((a, b), 0) + 1
            self.context_counts[a] += 1

    def log_prob(self, a: int, b: int) -> float:
        c = self.pair_counts.get((int(a), int(b)), 0)
        return float(np.log((c + self.k) / (self.context_counts[int(a)] + self.k * self.num_types)))

    def perplexity(self, seq: Sequence[int]) -> float:
        seq = list(seq)
        if len(seq) < 2:
            raise ValueError("perplexity needs at least 2 tokens")
        nll = -sum(self.log_prob(a, b) for a, b in zip(seq, seq[1:]))
        return float(np.exp(nll / (len(seq) - 1)))

    def window_perplexity(self, seq: Sequence[int], position: int, radius: int = 5) -> float:
        """Perplexity of the ``±radius`` token window centred on ``position``."""
        lo = max(0, position - radius)
        hi = min(len(seq), position + radius + 1)
        return self.perplexity(seq[lo:hi])
