"""Closed forms for replacing two adjacent cache slots by one.

Dropping the key of slot ``j`` and substituting a single value for the pair
``(v_j, v_{j+1})`` can be made output-neutral for one particular query. This
module provides that exact substitute, the cheap two-term convex
approximation used in practice, and a cosine measure of how much a merge
perturbs an attention distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import as_mat, as_vec, cosine_similarity

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class MergeWeights:
    w_left: float
    w_right: float

    def __post_init__(self):
        if self.w_left < 0 or self.w_right < 0:
            raise ValueError(f"negative merge weight: {self.w_left}, {self.w_right}")
        if abs(self.w_left + self.w_right - 1.0) > _WEIGHT_TOL:
            raise ValueError(
                f"merge weights must sum to 1, got {self.w_left + self.w_right!r}"
            )

    @classmethod
    def from_scores(cls, left: float, right: float) -> MergeWeights:
        """Normalize two non-negative importance scores; 0/0 falls back to 1/2."""
        left, right = float(left), float(right)
        total = left + right
        if total <= 0.0:
            return cls(0.5, 0.5)
        w_left = left / total
        return cls(w_left, 1.0 - w_left)


def ideal_merge(query, keys, values, slot: int = 0) -> np.ndarray:
    """Exact replacement value for slots ``slot`` and ``slot + 1``.

    The key at ``slot`` is discarded and the key at ``slot + 1`` kept. The
    returned value ``v~`` satisfies, for *this* query only::

        softmax(q K / sqrt d) V == softmax(q K' / sqrt d) V'

    where ``K'`` lacks the discarded key and ``V'`` has ``v~`` in place of the
    pair. With ``r = exp((s_j - s_{j+1}))`` and ``p = softmax(s)``::

        v~ = (1 - p_j) (r v_j + v_{j+1}) - r * sum_{i not in pair} p_i v_i

    ``slot=0`` is the two-leading-positions case; other slots are the same
    formula with the remaining tokens relabelled.
    """
    q = as_vec(query, "query")
    K = as_mat(keys, "keys")
    V = as_mat(values, "values")
    t = K.shape[0]
    if t < 2:
        raise ValueError("ideal_merge needs at least 2 tokens")
    if V.shape[0] != t or K.shape[1] != q.size:
        raise ValueError(f"shape mismatch: q {q.shape}, K {K.shape}, V {V.shape}")
    if not 0 <= slot < t - 1:
        raise IndexError(f"slot {slot} has no right neighbour among {t} tokens")
    s = (K @ q) / math.sqrt(q.size)
    p = np.exp(s - s.max())
    p /= p.sum()
    r = math.exp(s[slot] - s[slot + 1])
    rest = np.ones(t, dtype=bool)
    rest[[slot, slot + 1]] = False
    tail = p[rest] @ V[rest] if rest.any() else np.zeros(V.shape[1])
    return (1.0 - p[slot]) * (r * V[slot] + V[slot + 1]) - r * tail


def approx_merge_weights(query, k1, k2) -> MergeWeights:
    """Two-term softmax over the pair alone, dropping every other token."""
    q = as_vec(query, "query")
    k1 = as_vec(k1, "k1")
    k2 = as_vec(k2, "k2")
    if not (q.size == k1.size == k2.size):
        raise ValueError("query and keys must share a dimension")
    scale = math.sqrt(q.size)
    s1 = float(q @ k1) / scale
    s2 = float(q @ k2) / scale
    # exponent is never positive, so no overflow
    e = math.exp(-abs(s1 - s2))
    small = e / (1.0 + e)
    if s1 >= s2:
        return MergeWeights(1.0 - small, small)
    return MergeWeights(small, 1.0 - small)


def convex_combine(w: MergeWeights, v1, v2) -> np.ndarray:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    if v1.shape != v2.shape:
        raise ValueError(f"length mismatch: {v1.shape} vs {v2.shape}")
    out = w.w_left * v1 + w.w_right * v2
    # clamp rounding excursions so betweenness holds exactly
    return np.clip(out, np.minimum(v1, v2), np.maximum(v1, v2))


def fold_weights(full_weights, merged_slot: int) -> np.ndarray:
    """Add slot ``merged_slot`` into its right neighbour and drop it."""
    w = np.asarray(full_weights, dtype=np.float64)
    if not 0 <= merged_slot < w.size - 1:
        raise IndexError(f"cannot fold slot {merged_slot} of {w.size}")
    folded = np.delete(w, merged_slot)
    folded[merged_slot] += w[merged_slot]
    return folded


def attention_perturbation(full_weights, merged_weights, merged_slot: int) -> float:
    """Cosine similarity between a merged-cache attention row and the full one.

    The full row is one slot longer; it is aligned by folding the merged
    slot's weight into its right neighbour, mirroring what the merge did to
    the cache.
    """
    merged = np.asarray(merged_weights, dtype=np.float64)
    folded = fold_weights(full_weights, merged_slot)
    if folded.shape != merged.shape:
        raise ValueError(
            f"length mismatch after fold: {folded.size} vs {merged.size}"
        )
    return cosine_similarity(folded, merged)
