"""Prefill-time top-K selection of eviction candidates.

Candidates are the tokens between the sinks and the recent window,
``[l_sink, L - l_recent)``. The last ``l_obs`` prompt queries attend to them
(softmax over candidates only), the attention mass each candidate receives is
summed over the observation rows, smoothed with a centered average pool, and
the ``k_top`` best candidates are kept.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SnapStreamConfig
from .errors import ContractViolation
from .kvcache import FullKvCache
from .numerics import DTYPE, avgpool1d, gather_rows, masked_softmax_rows, matmul, topk_indices


@dataclass
class SelectionProblem:
    """Inputs of one layer's selection.

    ``q_obs`` is ``(n_q_heads, L_obs, d)``; ``k_evict`` is ``(n_kv_heads, L_evict, d)``.
    """

    q_obs: np.ndarray
    k_evict: np.ndarray
    L: int
    cfg: SnapStreamConfig

    @property
    def L_obs(self) -> int:
        return self.q_obs.shape[1]

    @property
    def L_evict(self) -> int:
        return self.k_evict.shape[1]

    @property
    def L_prefix(self) -> int:
        return self.L - self.L_obs


@dataclass
class SelectionResult:
    scores: np.ndarray
    indices: np.ndarray
    pad_count: int


def evict_count(L: int, cfg: SnapStreamConfig) -> int:
    return max(L - cfg.l_sr, 0)


def observation_length(L: int, cfg: SnapStreamConfig) -> int:
    """Observation rows actually used.

    Clamped to the recent window so every candidate precedes every observing
    query, which is why no causal mask is needed.
    """
    return max(min(cfg.l_obs, cfg.l_recent, L), 0)


def build_problem(q: np.ndarray, k: np.ndarray, L: int, cfg: SnapStreamConfig) -> SelectionProblem:
    """Slice a layer's post-rotary queries ``(n_q, >=L, d)`` and keys ``(n_kv, >=L, d)``."""
    n_obs = observation_length(L, cfg)
    q_obs = np.ascontiguousarray(q[:, L - n_obs:L])
    k_evict = np.ascontiguousarray(k[:, cfg.l_sink:cfg.l_sink + evict_count(L, cfg)])
    return SelectionProblem(q_obs, k_evict, L, cfg)


def observation_scores(q_obs, k_evict, head_dim: int | None = None) -> np.ndarray:
    """Softmax-normalised ``q_obs @ k_evict.T / sqrt(d)`` for one head, ``(L_obs, L_evict)``."""
    q_obs = np.asarray(q_obs, dtype=DTYPE)
    k_evict = np.asarray(k_evict, dtype=DTYPE)
    if k_evict.shape[0] == 0:
        raise ContractViolation("no eviction candidates; skip selection instead")
    if q_obs.shape[0] == 0:
        raise ContractViolation("empty observation window")
    d = head_dim or q_obs.shape[1]
    return masked_softmax_rows(matmul(q_obs, k_evict, transpose_b=True), None, 1.0 / np.sqrt(d))


def aggregate_and_select(W: Sequence[np.ndarray], cfg: SnapStreamConfig,
                         group_map: Sequence[int] | None = None) -> list[SelectionResult]:
    """One :class:`SelectionResult` per kv-head from per-query-head ``W``.

    Query heads sharing a kv-head are averaged before the row sum.
    ``group_map[q]`` names the kv-head of query head ``q``.
    """
    if group_map is None:
        group_map = [cfg.kv_head_of(h) for h in range(len(W))]
    results = []
    for g in range(cfg.n_kv_heads):
        members = [np.asarray(W[h], dtype=DTYPE) for h in range(len(W)) if group_map[h] == g]
        if not members:
            raise ContractViolation(f"kv-head {g} has no query heads")
        l_evict = members[0].shape[1]
        if l_evict == 0:
            results.append(SelectionResult(np.zeros(0, DTYPE), np.zeros(0, np.int64), cfg.k_top))
            continue
        mean_w = np.mean(np.stack(members), axis=0, dtype=np.float64).astype(DTYPE)
        scores = mean_w.sum(axis=0, dtype=np.float64).astype(DTYPE)
        k = min(cfg.k_top, l_evict)
        picked = topk_indices(avgpool1d(scores, cfg.pool_kernel), k) + cfg.l_sink
        results.append(SelectionResult(scores, picked.astype(np.int64), cfg.k_top - k))
    return results


def empty_selection(cfg: SnapStreamConfig) -> list[SelectionResult]:
    return [SelectionResult(np.zeros(0, DTYPE), np.zeros(0, np.int64), cfg.k_top)
            for _ in range(cfg.n_kv_heads)]


def select_layer(problem: SelectionProblem) -> list[SelectionResult]:
    cfg = problem.cfg
    if problem.L_evict == 0 or problem.L_obs == 0:
        return empty_selection(cfg)
    W = [observation_scores(problem.q_obs[h], problem.k_evict[cfg.kv_head_of(h)])
         for h in range(cfg.n_q_heads)]
    return aggregate_and_select(W, cfg)


def extract_topk(full: FullKvCache, result: SelectionResult, layer: int, head: int,
                 k_top: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Gather the selected rows; rows past ``len(indices)`` stay zero.

    Returns ``(keys, values, valid_topk)`` with blocks shaped ``(k_top, d)``.
    """
    idx = np.asarray(result.indices, dtype=np.int64)
    d = full.keys.shape[-1]
    keys = np.zeros((k_top, d), DTYPE)
    values = np.zeros((k_top, d), DTYPE)
    n = idx.shape[0]
    if n > k_top:
        raise ContractViolation(f"{n} indices exceed k_top={k_top}")
    keys[:n] = gather_rows(full.keys[layer, head], idx)
    values[:n] = gather_rows(full.values[layer, head], idx)
    return keys, values, n
