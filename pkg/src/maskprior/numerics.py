"""Log-space kernels shared by the dense-prior and circuit paths.

Every routine tolerates ``-inf`` entries (hard zeros) and never produces NaN
from inputs that are finite or ``-inf``.  All reductions are max-shifted.
"""

from __future__ import annotations

import numpy as np

NEG_INF = float("-inf")


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Max-shifted log-sum-exp that returns -inf (not NaN) for all--inf slices."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = np.max(a, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - shift), axis=axis, keepdims=True)) + shift
    out = np.where(np.isfinite(m), out, m)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_normalize(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift ``a`` along ``axis`` so its exponentials sum to one."""
    z = logsumexp(a, axis=axis)
    if np.any(np.asarray(z) == NEG_INF):
        raise ValueError("cannot normalize an all--inf log vector")
    return a - np.expand_dims(np.asarray(z), axis)


def log_matvec(lin_mat: np.ndarray, log_vec: np.ndarray) -> np.ndarray:
    """log(lin_mat.T @ exp(log_vec)) with a max shift; -inf vectors propagate.

    ``lin_mat`` is a linear-space (N, M) matrix, ``log_vec`` a log-space (N,)
    vector.  Returns a log-space (M,) vector.
    """
    m = float(np.max(log_vec))
    if m == NEG_INF:
        return np.full(lin_mat.shape[1], NEG_INF)
    with np.errstate(divide="ignore"):
        return np.log(np.exp(log_vec - m) @ lin_mat) + m


def floor_normalize(weights: np.ndarray, floor: float) -> np.ndarray:
    """Turn nonnegative ``weights`` into a distribution with entries >= floor.

    Floored entries are pinned exactly at ``floor``; the remaining mass is
    shared among the others proportionally to their weights.  Requires
    ``len(weights) * floor < 1``.  An all-zero input yields the uniform
    distribution.
    """
    w = np.asarray(weights, dtype=np.float64)
    k = w.shape[0]
    if not 0.0 <= floor * k < 1.0:
        raise ValueError(f"floor {floor} infeasible for {k} entries")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0.0:
        return np.full(k, 1.0 / k)
    p = w / total
    floored = np.zeros(k, dtype=bool)
    for _ in range(k):
        free = ~floored
        scale = (1.0 - floored.sum() * floor) / p[free].sum()
        candidate = p * scale
        newly = free & (candidate < floor)
        if not newly.any():
            out = np.where(floored, floor, candidate)
            return out
        floored |= newly
        if p[~floored].sum() <= 0.0:
            # everything pinned except zero-weight entries: spread the rest
            out = np.full(k, floor)
            out[~floored] = (1.0 - floored.sum() * floor) / max((~floored).sum(), 1)
            return out
    return np.full(k, 1.0 / k)


def sample_rows(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Draw one category per row of ``probs`` (each row a distribution)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
        squeeze = True
    else:
        squeeze = False
    cum = np.cumsum(p, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(p.shape[0])
    idx = (cum < u[:, None]).sum(axis=1)
    idx = np.minimum(idx, p.shape[1] - 1)
    return int(idx[0]) if squeeze else idx
