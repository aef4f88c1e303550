"""Prefill and decode attention for a single head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .numerics import DTYPE, masked_softmax_rows, matmul


@dataclass
class AttentionWorkspace:
    """Fixed tile geometry for the prefill path."""

    block_len: int = 64
    head_dim: int = 8

    def __post_init__(self):
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")


def prefill_attention(q, k, v, L: int, workspace: AttentionWorkspace | None = None) -> np.ndarray:
    """Causal attention over the first ``L`` rows of padded ``(L_max, d)`` inputs.

    Keys are consumed ``block_len`` at a time with a running max and running
    denominator, so no ``L x L`` score matrix is ever formed. Output rows
    ``>= L`` are zero.
    """
    q = np.asarray(q, dtype=DTYPE)
    k = np.asarray(k, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    l_max, d = q.shape
    if k.shape != (l_max, d) or v.shape[0] != l_max:
        raise ContractViolation("q, k and v must share the padded sequence length")
    if not 0 <= L <= l_max:
        raise ContractViolation(f"valid length {L} outside [0, {l_max}]")
    ws = workspace or AttentionWorkspace(head_dim=d)
    bl = ws.block_len
    out = np.zeros((l_max, v.shape[1]), DTYPE)
    if L == 0:
        return out

    scale = DTYPE(1.0 / np.sqrt(d))
    qv = q[:L]
    row = np.arange(L)[:, None]
    m = np.full((L, 1), -np.inf, DTYPE)
    denom = np.zeros((L, 1), DTYPE)
    acc = np.zeros((L, v.shape[1]), DTYPE)
    # padding keys (>= L) are never visited: every block starts below L
    for start in range(0, L, bl):
        stop = min(start + bl, L)
        s = matmul(qv, k[start:stop], transpose_b=True) * scale
        col = np.arange(start, stop)[None, :]
        s = np.where(col <= row, s, -np.inf)
        block_max = s.max(axis=1, keepdims=True)
        # the first block holds key 0, so new_m is finite for every row from here on
        new_m = np.maximum(m, block_max)
        p = np.exp(s - new_m)
        alpha = np.exp(m - new_m)
        denom = denom * alpha + p.sum(axis=1, keepdims=True)
        acc = acc * alpha + matmul(p, v[start:stop])
        m = new_m
    out[:L] = acc / denom
    return out


def attend_slots(q, keys, values, mask) -> np.ndarray:
    """Single-query softmax attention over the slots where ``mask`` is true."""
    q = np.asarray(q, dtype=DTYPE).reshape(1, -1)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractViolation("decode attention needs at least one valid slot")
    scores = matmul(q, keys, transpose_b=True)
    p = masked_softmax_rows(scores, mask, 1.0 / np.sqrt(q.shape[1]))
    # zero probabilities still multiply whatever sits in padding slots; drop them
    return matmul(p[:, mask], np.asarray(values, DTYPE)[mask])[0]


def decode_attention(q, cache, layer: int, head: int, mask=None) -> np.ndarray:
    """Attend one query against a cache's ``(layer, head)`` store.

    Works for both cache kinds; ``mask`` defaults to the cache's own
    validity mask for ``layer``.
    """
    if mask is None:
        mask = cache.validity_mask(layer)
    return attend_slots(q, cache.keys[layer, head], cache.values[layer, head], mask)


def reference_attention(q, k, v, causal: bool = False) -> np.ndarray:
    """Straight full-matrix softmax attention in float64, for cross-checks.

    With ``causal`` the query rows are taken to be the last ``len(q)``
    positions of the key sequence.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    s = q @ k.T / np.sqrt(q.shape[1])
    if causal:
        offset = k.shape[0] - q.shape[0]
        qi = np.arange(q.shape[0])[:, None] + offset
        kj = np.arange(k.shape[0])[None, :]
        s = np.where(kj <= qi, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=1, keepdims=True)
    return w @ v
