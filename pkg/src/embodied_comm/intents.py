"""Intent library with a Zipf rank-frequency prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import UsageError


@dataclass(frozen=True)
class IntentDistribution:
    n: int
    exponent: float
    probs: np.ndarray

    @property
    def max_class(self):
        return float(self.probs[0])

    def entropy(self):
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())


def zipf_probs(n, s=1.0):
    """Normalised ``1/(k+1)**s`` weights for ranks ``k = 0..n-1``.

    ``s = 0`` gives the uniform distribution.
    """
    if n < 1:
        raise UsageError(f"need at least one intent, got n={n}")
    if s < 0:
        raise UsageError(f"Zipf exponent must be >= 0, got {s}")
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(s)
    probs = w / w.sum()
    probs.setflags(write=False)
    return IntentDistribution(int(n), float(s), probs)


def make_distribution(n, exponent=1.0, uniform=False):
    return zipf_probs(n, 0.0 if uniform else exponent)


def sample_intents(dist, batch, rng):
    if batch < 1:
        raise UsageError(f"batch must be >= 1, got {batch}")
    if dist.n == 1:
        return np.zeros(batch, dtype=np.int64)
    cdf = np.cumsum(dist.probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(batch), side="right").astype(np.int64)


def intent_embedding(ids, n):
    """One-hot rows for an id or an array of ids."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise UsageError(f"intent id out of range [0, {n}): {ids}")
    return np.eye(n)[ids]
