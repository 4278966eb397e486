"""Small dense linear algebra used across the package.

Vectors and matrices are plain ``float64`` numpy arrays. One key or value is
stored per row, matching the append-per-step access pattern of a KV cache.
"""

from __future__ import annotations

import math

import numpy as np

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


class ConvergenceError(RuntimeError):
    """Raised when the Jacobi SVD exceeds its sweep limit."""


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_mat(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"{name} must have rows > 0 and cols > 0, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def logsumexp(x: np.ndarray) -> float:
    top = float(np.max(x))
    return top + math.log(float(np.sum(np.exp(x - top))))


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty logits")
    z = as_vec(z, "logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def scaled_scores(q, K, d: int | None = None) -> np.ndarray:
    """Return ``K @ q / sqrt(d)``; ``K`` holds one key per row.

    ``d`` defaults to the query length; it is only the scaling count.
    """
    q = as_vec(q, "query")
    K = as_mat(K, "keys")
    if q.size != K.shape[1]:
        raise ValueError(f"dimension mismatch: query {q.size}, key columns {K.shape[1]}")
    if d is None:
        d = q.size
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    return (K @ q) / math.sqrt(d)


def singular_values(M) -> np.ndarray:
    """Singular values of ``M`` in non-increasing order.

    One-sided (Hestenes) Jacobi: columns are rotated pairwise until mutually
    orthogonal, at which point the column norms are the singular values. This
    works on ``M`` directly rather than its Gram matrix, so small singular
    values keep full relative accuracy.
    """
    A = as_mat(M, "M")
    # rotate the shorter dimension; rows of W are the columns being orthogonalized
    W = (A if A.shape[0] <= A.shape[1] else A.T).copy()
    n = W.shape[0]
    # columns at rounding level carry no direction worth orthogonalizing
    negligible = (64 * np.finfo(np.float64).eps) ** 2 * float(np.sum(W * W))
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                wp, wq = W[p], W[q]
                alpha = float(wp @ wp)
                beta = float(wq @ wq)
                gamma = float(wp @ wq)
                if min(alpha, beta) <= negligible or abs(gamma) <= SVD_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                W[p], W[q] = c * wp - s * wq, s * wp + c * wq
        if not rotated:
            sv = np.sqrt(np.einsum("ij,ij->i", W, W))
            return np.sort(sv)[::-1].copy()
    raise ConvergenceError(f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps")


def normalized_spectrum(M) -> np.ndarray:
    sv = singular_values(M)
    if sv[0] == 0.0:
        raise ValueError("zero spectrum")
    return sv / sv[0]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))
