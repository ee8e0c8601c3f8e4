"""Dataset-level transformation sampler fed by recent policy outputs."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from metaaug.augment import FUNCTION_NAMES, K, TransformSpec


@dataclass
class SamplerState:
    """Ring buffer of ``(j, k, raw weight)`` plus the derived ``v``, ``c`` and ``p`` tables.

    Indices ``j, k`` are 1-based; the tables are 0-based ``K x K`` arrays.
    ``capacity`` is ``r * n_tr`` (window ``r`` iterations, ``n_tr`` outputs each).
    """

    capacity: int
    epsilon: float = 0.1
    refresh_every: int = 1
    buffer: deque = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    c: np.ndarray = field(default=None, repr=False)
    p: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("sampler capacity must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.refresh_every < 1:
            raise ValueError("refresh period must be positive")
        if self.buffer is None:
            self.buffer = deque(maxlen=self.capacity)
        if self.v is None:
            self.v = np.zeros((K, K))
        if self.c is None:
            self.c = np.zeros((K, K), dtype=np.int64)
        if self.p is None:
            self.p = np.full((K, K), 1.0 / K**2)

    def record(self, j, k, weight):
        if not (1 <= j <= K and 1 <= k <= K):
            raise ValueError(f"function indices ({j}, {k}) outside [1, {K}]")
        self.buffer.append((int(j), int(k), float(weight)))

    def record_batch(self, specs, weights):
        for s, w in zip(specs, weights):
            self.record(s.j, s.k, w)

    def due(self, t) -> bool:
        """True when a refresh follows iteration ``t`` (0-based)."""
        return (t + 1) % self.refresh_every == 0

    def refresh(self):
        if not self.buffer:
            self.v[:] = 0.0
            self.c[:] = 0
            self.p[:] = 1.0 / K**2
            return
        arr = np.array(self.buffer, dtype=np.float64)
        cells = (arr[:, 0].astype(np.int64) - 1) * K + (arr[:, 1].astype(np.int64) - 1)
        sums = np.bincount(cells, weights=arr[:, 2], minlength=K * K).reshape(K, K)
        counts = np.bincount(cells, minlength=K * K).reshape(K, K)
        # unobserved cells take the global buffer mean
        v = np.full((K, K), arr[:, 2].mean())
        seen = counts > 0
        v[seen] = sums[seen] / counts[seen]
        self.v = v
        self.c = counts
        self.p = mix_distribution(v, self.epsilon)

    def sample(self, rng) -> TransformSpec:
        cell = int(rng.choice(K * K, p=self.p.ravel()))
        m1, m2 = rng.uniform(0.0, 10.0, size=2)
        return TransformSpec(cell // K + 1, cell % K + 1, float(m1), float(m2))

    def sample_batch(self, n, rng):
        cells = rng.choice(K * K, size=n, p=self.p.ravel())
        mags = rng.uniform(0.0, 10.0, size=(n, 2))
        return [TransformSpec(int(c) // K + 1, int(c) % K + 1, float(a), float(b))
                for c, (a, b) in zip(cells, mags)]

    def marginal(self, index) -> float:
        """Total probability of transforms using function ``index`` in either slot, the shared cell counted twice."""
        i = index - 1
        return float(self.p[i, :].sum() + self.p[:, i].sum())


def mix_distribution(v, epsilon):
    """``(1 - eps) * v / sum(v) + eps / K^2``."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    total = v.sum()
    if total <= 0:
        return np.full(v.shape, 1.0 / n)
    return (1.0 - epsilon) * (v / total) + epsilon / n


def distribution_csv(p) -> str:
    """``K x K`` matrix with a header row of function names; row ``j`` is the first function."""
    lines = ["first/second," + ",".join(FUNCTION_NAMES)]
    for name, row in zip(FUNCTION_NAMES, np.asarray(p)):
        lines.append(name + "," + ",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"
