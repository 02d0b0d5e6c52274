"""Dense-vector primitives used by every other module.

Embeddings are plain 1-D float64 numpy arrays. All functions are pure.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from descdet.errors import DimMismatchError, EmptyInputError, ZeroVectorError

EPS = 1e-12


def as_embedding(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimMismatchError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains non-finite entries")
    return v


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= EPS:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatchError(f"dim {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= EPS or nb <= EPS:
        raise ZeroVectorError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_n_indices(scores: Sequence[float], n: int) -> list[int]:
    """Indices of the ``n`` largest scores, descending; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInputError("top_n_indices of an empty score list")
    if n < 1:
        raise ValueError("n must be positive")
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[: min(n, s.size)]]


def softmax(logits: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)
