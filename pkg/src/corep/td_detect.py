"""TD-error ring buffer and the confidence-interval gate for the core branch.

The buffer stores magnitudes of recent temporal-difference errors.  The gate
compares the mean of the newest fraction of the buffer against the
confidence interval (mean - eta * std, mean + eta * std) over the whole
buffer: a recent mean inside the interval means nothing changed and the
core branch stays frozen; outside means a structural change and the core
branch updates.
"""
from __future__ import annotations

import math

import numpy as np

DEFAULT_CAPACITY = 2000
SIGMA_FLOOR = 1e-8
COLD_START_FRACTION = 0.1


class TdBufferError(Exception):
    pass


class TdBuffer:
    """Fixed-capacity chronological buffer of TD-error magnitudes.

    Statistics are computed on demand over the current contents (population
    standard deviation), so they always match a direct recomputation.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise TdBufferError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._ring = np.zeros(capacity, dtype=np.float64)
        self._count = 0
        self._next = 0

    def __len__(self) -> int:
        return min(self._count, self.capacity)

    def push(self, delta: float) -> None:
        """Store |delta|, evicting the oldest value at capacity."""
        d = float(delta)
        if not math.isfinite(d):
            raise TdBufferError(f"rejected non-finite TD error: {delta!r}")
        self._ring[self._next] = abs(d)
        self._next = (self._next + 1) % self.capacity
        self._count += 1

    def values(self) -> np.ndarray:
        """Contents in chronological order (oldest first)."""
        n = len(self)
        if self._count <= self.capacity:
            return self._ring[:n].copy()
        return np.concatenate([self._ring[self._next:], self._ring[:self._next]])

    def mean(self) -> float:
        if len(self) == 0:
            raise TdBufferError("buffer is empty")
        return float(np.mean(self.values()))

    def std(self) -> float:
        if len(self) == 0:
            raise TdBufferError("buffer is empty")
        return float(np.std(self.values()))

    def recent_mean(self, alpha: float) -> float:
        """Mean of the newest ceil(alpha * len) values."""
        if not 0.0 < alpha <= 1.0:
            raise TdBufferError(f"alpha must be in (0, 1], got {alpha}")
        n = len(self)
        if n == 0:
            raise TdBufferError("buffer is empty")
        k = math.ceil(alpha * n)
        return float(np.mean(self.values()[n - k:]))


def should_update_core(buffer: TdBuffer, alpha: float, eta: float) -> bool:
    """True when the core branch should unfreeze and update.

    During cold start (buffer below 10% capacity, including empty) the gate
    defaults to updating.  Afterwards it fires exactly when the recent mean
    falls outside the open interval mean +/- eta * max(std, floor).
    """
    if not eta >= 0.0:
        raise TdBufferError(f"eta must be >= 0, got {eta}")
    if len(buffer) < COLD_START_FRACTION * buffer.capacity:
        return True
    delta_alpha = buffer.recent_mean(alpha)
    mu = buffer.mean()
    sigma = max(buffer.std(), SIGMA_FLOOR)
    return not (mu - eta * sigma < delta_alpha < mu + eta * sigma)
