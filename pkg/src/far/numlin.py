"""Dense numerical kernels: thin SVD, singular value thresholding,
soft thresholding and PCA.

Everything here works in float64 and is a pure function of its inputs.
"""
import warnings
from typing import NamedTuple

import numpy as np


class RankTruncationWarning(UserWarning):
    """Requested number of components exceeds the numerical rank."""


class SvdFactors(NamedTuple):
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    def reconstruct(self):
        return (self.left * self.singular_values) @ self.right.T


def as_finite_matrix(q, name="q"):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < 1 or q.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        bad = int(np.count_nonzero(~np.isfinite(q)))
        raise ValueError(f"{name} contains {bad} non-finite entries")
    return q


def _check_tau(tau):
    tau = float(tau)
    if not tau >= 0:
        raise ValueError(f"threshold must be nonnegative, got {tau}")
    return tau


def thin_svd(q):
    """Economy SVD with a deterministic sign convention.

    Each left singular vector is flipped so that its largest-magnitude
    entry (lowest index on ties) is nonnegative; the matching right
    vector is flipped with it.
    """
    q = as_finite_matrix(q)
    u, s, vt = np.linalg.svd(q, full_matrices=False)
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivot, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return SvdFactors(u * signs, s, vt.T * signs)


def shrink(q, tau):
    """Element-wise soft thresholding ``sgn(q) * max(|q| - tau, 0)``."""
    tau = _check_tau(tau)
    q = np.asarray(q, dtype=np.float64)
    return np.sign(q) * np.maximum(np.abs(q) - tau, 0.0)


def svt(q, tau):
    """Singular value thresholding, the proximal map of ``tau * ||.||_*``."""
    tau = _check_tau(tau)
    factors = thin_svd(q)
    s = shrink(factors.singular_values, tau)
    keep = s > 0
    if not np.any(keep):
        return np.zeros((factors.left.shape[0], factors.right.shape[0]))
    return (factors.left[:, keep] * s[keep]) @ factors.right[:, keep].T


def nuclear_norm(q):
    return float(np.sum(np.linalg.svd(as_finite_matrix(q), compute_uv=False)))


def numerical_rank(s, shape):
    s = np.asarray(s)
    if s.size == 0 or s[0] == 0:
        return 0
    tol = s[0] * max(shape) * np.finfo(np.float64).eps
    return int(np.count_nonzero(s > tol))


def pca(samples, k):
    """Principal components of the columns of ``samples`` (f x N).

    Returns ``(mean, basis)`` where ``basis`` is f x k' with orthonormal
    columns sorted by decreasing explained variance. When ``k`` exceeds the
    numerical rank of the centred data, ``k' < k`` and a
    :class:`RankTruncationWarning` is emitted.
    """
    x = as_finite_matrix(samples, "samples")
    f, n = x.shape
    if n < 2:
        raise ValueError(f"pca needs at least 2 samples, got {n}")
    if k < 0:
        raise ValueError(f"k must be nonnegative, got {k}")
    mean = x.mean(axis=1)
    factors = thin_svd(x - mean[:, None])
    rank = numerical_rank(factors.singular_values, x.shape)
    if k > rank:
        warnings.warn(
            f"requested {k} components but data has rank {rank}; truncating",
            RankTruncationWarning,
            stacklevel=2,
        )
        k = rank
    return mean, factors.left[:, :k].copy()


def orthonormalize(columns, tol=1e-10):
    """Gram-Schmidt (two passes) over columns, dropping dependent ones.

    Columns that are already orthonormal and come first are returned
    unchanged up to rounding.
    """
    a = np.asarray(columns, dtype=np.float64)
    out = []
    for j in range(a.shape[1]):
        v = a[:, j].copy()
        norm0 = np.linalg.norm(v)
        if norm0 == 0:
            continue
        for _ in range(2):
            for q in out:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm <= tol * norm0:
            continue
        out.append(v / norm)
    if not out:
        return np.zeros((a.shape[0], 0))
    return np.column_stack(out)
