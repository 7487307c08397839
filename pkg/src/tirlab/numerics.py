"""Deterministic numeric kernels shared by every other module.

Everything runs in float64. Reductions go through numpy's sequential
kernels on small arrays, so for fixed inputs the results are
bit-reproducible run to run. Seeded randomness uses counter-based Philox
streams keyed by (seed, label): a child stream never depends on how many
draws other streams have consumed.
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, NonPositiveTemperature, ZeroVector

ZERO_NORM_FLOOR = 1e-30


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Independent random stream for (seed, label).

    The label is hashed into the second Philox key word, so streams for
    different labels are independent regardless of draw order.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    label_word = int.from_bytes(digest[:8], "little")
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(label_word)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.sqrt(np.dot(v, v)))
    if norm < ZERO_NORM_FLOOR:
        raise ZeroVector(f"cannot normalize vector with norm {norm!r}")
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row of a matrix; returns (normalized, row_norms).

    The norms are needed by backward passes that differentiate through
    the normalization.
    """
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if np.any(norms < ZERO_NORM_FLOOR):
        raise ZeroVector("row with (near-)zero norm")
    return m / norms[:, None], norms


def cosine_similarity_matrix(t: np.ndarray, i: np.ndarray) -> np.ndarray:
    """Pairwise dot products between rows of two unit-normalized matrices."""
    t = np.asarray(t, dtype=np.float64)
    i = np.asarray(i, dtype=np.float64)
    if t.ndim != 2 or i.ndim != 2 or t.shape[1] != i.shape[1]:
        raise DimensionMismatch(f"incompatible shapes {t.shape} and {i.shape}")
    return t @ i.T


def stable_softmax_rows(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of logits/tau with max-subtraction for stability."""
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau!r}")
    logits = np.asarray(logits, dtype=np.float64) / tau
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def finite_difference_gradient(f: Callable[[np.ndarray], float],
                               x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_k) - f(x-h e_k)) / 2h."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
