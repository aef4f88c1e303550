"""Dense float32 kernels used by the cache, selection and attention code.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float32; masks are
1-D boolean arrays. Every function here is pure except :func:`scatter_row`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractViolation

DTYPE = np.float32


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b, transpose_b: bool = False) -> np.ndarray:
    """Dense product ``a @ b`` (or ``a @ b.T``).

    The transposed operand is materialised contiguously first so both call
    forms hit the same kernel and give bitwise-equal results.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if transpose_b:
        b = np.ascontiguousarray(b.T)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return np.matmul(a, b)


def masked_softmax_rows(scores, mask=None, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * scores`` over the columns where ``mask`` is true.

    Masked columns come out exactly zero. A row with every column masked has no
    distribution and raises.
    """
    s = as_matrix(scores) * DTYPE(scale)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (s.shape[1],):
            raise ContractViolation(
                f"mask length {mask.shape} does not match {s.shape[1]} columns"
            )
        if not mask.any():
            raise ContractViolation("softmax over a fully masked row")
        s = np.where(mask, s, -np.inf)
    elif s.shape[1] == 0:
        raise ContractViolation("softmax over an empty row")
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(DTYPE, copy=False)


def avgpool1d(v, kernel: int) -> np.ndarray:
    """Centered moving average; windows shrink at the edges instead of zero padding."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"pool kernel must be a positive odd integer, got {kernel}")
    v = np.asarray(v, dtype=DTYPE)
    n = v.shape[0]
    if kernel == 1 or n == 0:
        return v.copy()
    half = kernel // 2
    csum = np.concatenate([[0.0], np.cumsum(v, dtype=np.float64)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    return ((csum[hi] - csum[lo]) / (hi - lo)).astype(DTYPE)


def topk_indices(v, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, ascending; ties go to the lower index."""
    v = np.asarray(v)
    if k < 0 or k > v.shape[0]:
        raise ContractViolation(f"k={k} out of range for length {v.shape[0]}")
    # stable sort on the negated values keeps lower indices first among equals
    order = np.argsort(-v.astype(np.float64), kind="stable")
    return np.sort(order[:k])


def rope_apply(x, positions: Sequence[int], theta_base: float = 10000.0) -> np.ndarray:
    """Rotate adjacent pairs ``(x[2i], x[2i+1])`` of each row by ``pos / theta_base**(2i/d)``."""
    x = as_matrix(x)
    d = x.shape[1]
    if d % 2:
        raise ConfigError(f"rotary encoding needs an even head dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[0],):
        raise ContractViolation("one position per row is required")
    inv_freq = theta_base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos[:, None] * inv_freq[None, :]
    cos = np.cos(ang)
    sin = np.sin(ang)
    even = x[:, 0::2].astype(np.float64)
    odd = x[:, 1::2].astype(np.float64)
    out = np.empty(x.shape, dtype=np.float64)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out.astype(DTYPE)


def gather_rows(src, idx) -> np.ndarray:
    src = np.asarray(src)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= src.shape[0]):
        raise ContractViolation(f"gather index out of range for {src.shape[0]} rows")
    return src[idx].copy()


def scatter_row(dst: np.ndarray, row_idx: int, row) -> None:
    """Overwrite ``dst[row_idx]`` in place."""
    if not 0 <= row_idx < dst.shape[0]:
        raise ContractViolation(f"scatter index {row_idx} out of range for {dst.shape[0]} rows")
    row = np.asarray(row, dtype=dst.dtype)
    if row.shape != dst.shape[1:]:
        raise ContractViolation(f"row shape {row.shape} does not match {dst.shape[1:]}")
    dst[row_idx] = row
