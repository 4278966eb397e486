"""Single-head autoregressive attention over a mutable KV cache."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import as_vec


class CacheState:
    """Per-head KV cache plus the bookkeeping compression policies read.

    ``acc_scores`` and ``counts`` are the running attention sums and
    observation counts; their ratio is the average attention score of each
    slot. ``positions`` holds the original token index a slot stands for
    (after a merge, the index of the surviving right-hand token).

    Storage is a pair of over-allocated buffers so that the per-step append
    is amortized O(d); the public attributes are views of the live prefix.
    """

    def __init__(self, d: int, capacity: int = 64):
        if d < 1:
            raise ValueError(f"head dimension must be >= 1, got {d}")
        self.d = d
        self.scale = 1.0 / math.sqrt(d)
        self.steps = 0
        self._n = 0
        self._alloc(max(capacity, 1))

    def _alloc(self, capacity: int) -> None:
        n, old = self._n, getattr(self, "_k", None)
        k = np.empty((capacity, self.d))
        v = np.empty((capacity, self.d))
        a = np.empty(capacity)
        c = np.empty(capacity)
        p = np.empty(capacity, dtype=np.int64)
        if old is not None:
            k[:n], v[:n] = self._k[:n], self._v[:n]
            a[:n], c[:n], p[:n] = self._a[:n], self._c[:n], self._p[:n]
        self._k, self._v, self._a, self._c, self._p = k, v, a, c, p

    def __len__(self) -> int:
        return self._n

    @property
    def keys(self) -> np.ndarray:
        return self._k[: self._n]

    @property
    def values(self) -> np.ndarray:
        return self._v[: self._n]

    @property
    def acc_scores(self) -> np.ndarray:
        return self._a[: self._n]

    @property
    def counts(self) -> np.ndarray:
        return self._c[: self._n]

    @property
    def positions(self) -> np.ndarray:
        return self._p[: self._n]

    def average_scores(self) -> np.ndarray:
        """``acc_scores / counts``; slots never attended report 0."""
        c = self.counts
        return np.divide(self.acc_scores, c, out=np.zeros_like(c), where=c > 0)

    def remove(self, j: int) -> None:
        """Drop slot ``j`` from every array (key, value and bookkeeping)."""
        n = self._n
        if not 0 <= j < n:
            raise IndexError(f"slot {j} out of range for cache of size {n}")
        for buf in (self._k, self._v, self._a, self._c, self._p):
            buf[j : n - 1] = buf[j + 1 : n]
        self._n = n - 1

    def copy(self) -> CacheState:
        other = CacheState(self.d, capacity=max(self._n, 1) + 16)
        other.steps = self.steps
        other._n = self._n
        for name in ("_k", "_v", "_a", "_c", "_p"):
            getattr(other, name)[: self._n] = getattr(self, name)[: self._n]
        return other

    def check_invariants(self) -> None:
        n = self._n
        if n == 0:
            return
        c, a, p = self.counts, self.acc_scores, self.positions
        if np.any(a < 0) or np.any(a > c + 1e-9 * np.maximum(c, 1)):
            raise AssertionError("acc_scores outside [0, counts]")
        if n > 1 and np.any(np.diff(p) <= 0):
            raise AssertionError("positions not strictly increasing")

    def __repr__(self) -> str:
        return f"CacheState(d={self.d}, size={self._n}, positions={self.positions.tolist()})"


@dataclass
class AttentionStep:
    step_index: int
    query: np.ndarray
    new_key: np.ndarray | None
    new_value: np.ndarray | None
    weights: np.ndarray
    output: np.ndarray


def append(cache: CacheState, key, value, position: int) -> CacheState:
    """Concatenate one token's key and value; bookkeeping gets a trailing 0."""
    key = as_vec(key, "key")
    value = as_vec(value, "value")
    if key.size != cache.d or value.size != cache.d:
        raise ValueError(
            f"dimension mismatch: cache d={cache.d}, key {key.size}, value {value.size}"
        )
    n = cache._n
    if n and position <= cache._p[n - 1]:
        raise ValueError(
            f"non-increasing position {position} after {int(cache._p[n - 1])}"
        )
    if n == cache._k.shape[0]:
        cache._alloc(2 * n)
    cache._k[n] = key
    cache._v[n] = value
    cache._a[n] = 0.0
    cache._c[n] = 0.0
    cache._p[n] = position
    cache._n = n + 1
    return cache


def observe(cache: CacheState, weights: np.ndarray) -> None:
    """Accumulate one step's attention weights into the cache bookkeeping."""
    n = cache._n
    cache._a[:n] += weights
    cache._c[:n] += 1.0


def attend(cache: CacheState, query) -> AttentionStep:
    """Attend ``query`` over the cache and update its bookkeeping in place."""
    n = cache._n
    if n == 0:
        raise ValueError("empty cache")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (cache.d,):
        raise ValueError(f"query shape {q.shape} does not match d={cache.d}")
    logits = (cache._k[:n] @ q) * cache.scale
    e = np.exp(logits - logits.max())
    w = e / e.sum()
    out = w @ cache._v[:n]
    observe(cache, w)
    step = AttentionStep(
        step_index=cache.steps,
        query=q,
        new_key=cache._k[n - 1].copy(),
        new_value=cache._v[n - 1].copy(),
        weights=w,
        output=out,
    )
    cache.steps += 1
    return step


def full_attention_reference(queries, keys, values) -> list[np.ndarray]:
    """Uncompressed causal attention outputs, one per step.

    Computed directly from the growing prefix of keys and values, without a
    cache object, so it can serve as ground truth for any policy run.
    """
    if not (len(queries) == len(keys) == len(values)):
        raise ValueError(
            f"length mismatch: {len(queries)} queries, {len(keys)} keys, {len(values)} values"
        )
    if len(queries) == 0:
        return []
    Q = np.asarray(queries, dtype=np.float64)
    K = np.asarray(keys, dtype=np.float64)
    V = np.asarray(values, dtype=np.float64)
    scale = 1.0 / math.sqrt(Q.shape[1])
    outputs = []
    for t in range(Q.shape[0]):
        s = (K[: t + 1] @ Q[t]) * scale
        e = np.exp(s - s.max())
        outputs.append((e / e.sum()) @ V[: t + 1])
    return outputs
