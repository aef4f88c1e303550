"""Static-shape KV caches.

:class:`CompressedKvCache` lays every (layer, kv-head) store out as::

    [ sink: l_sink | ring: l_recent | top-K: k_top ]

Sinks and top-K entries are written once at prefill. Every later token ``t``
(with ``t >= l_sink``) lands on ``l_sink + (t - l_sink) % l_recent``, so a
sequence shorter than ``l_sink + l_recent`` grows by plain appends and a
longer one overwrites its least recently written ring entry.

:class:`NaiveRollingCache` keeps the same live set as explicit lists rebuilt
by slicing and concatenation. It exists only as a test oracle.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .config import SnapStreamConfig
from .errors import CapacityError, ContractViolation, GenerationCapacityExhausted
from .numerics import DTYPE, gather_rows, scatter_row

PAD = -1
#: annotation for a live top-K slot whose source token is not recorded (e.g. a loaded snapshot)
UNKNOWN = -2


def ring_slot(t: int, cfg: SnapStreamConfig) -> int:
    """Cache slot of ring token ``t``."""
    if t < cfg.l_sink:
        raise ContractViolation(f"token {t} is a sink token, not a ring token")
    return cfg.l_sink + (t - cfg.l_sink) % cfg.l_recent


def _slot_for(t: int, cfg: SnapStreamConfig) -> int:
    return t if t < cfg.l_sink else ring_slot(t, cfg)


def _check_kv(cfg: SnapStreamConfig, new_k, new_v):
    new_k = np.asarray(new_k, dtype=DTYPE)
    new_v = np.asarray(new_v, dtype=DTYPE)
    shape = (cfg.n_kv_heads, cfg.head_dim)
    if new_k.shape != shape or new_v.shape != shape:
        raise ContractViolation(f"expected per-head key/value rows of shape {shape}")
    return new_k, new_v


@dataclass
class FullKvCache:
    """Uncompressed cache: slot ``t`` holds token ``t``; capacity ``l_max``."""

    cfg: SnapStreamConfig
    keys: np.ndarray
    values: np.ndarray
    lengths: np.ndarray

    @classmethod
    def empty(cls, cfg: SnapStreamConfig) -> "FullKvCache":
        shape = (cfg.n_layers, cfg.n_kv_heads, cfg.l_max, cfg.head_dim)
        return cls(cfg, np.zeros(shape, DTYPE), np.zeros(shape, DTYPE),
                   np.zeros(cfg.n_layers, dtype=np.int64))

    @property
    def capacity(self) -> int:
        return self.keys.shape[2]

    @property
    def seq_len(self) -> int:
        return int(self.lengths.min())

    def fill_layer(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Store a prefill's keys/values, shaped ``(n_kv_heads, L, head_dim)``."""
        L = k.shape[1]
        if L > self.capacity:
            raise CapacityError(f"prefill length {L} exceeds l_max={self.capacity}")
        self.keys[layer, :, :L] = k
        self.values[layer, :, :L] = v
        self.keys[layer, :, L:] = 0
        self.values[layer, :, L:] = 0
        self.lengths[layer] = L

    def write(self, layer: int, new_k, new_v, t: int) -> int:
        if t != self.lengths[layer]:
            raise ContractViolation(f"expected token {self.lengths[layer]}, got {t}")
        if t >= self.capacity:
            raise GenerationCapacityExhausted(f"token {t} exceeds l_max={self.capacity}")
        new_k, new_v = _check_kv(self.cfg, new_k, new_v)
        for h in range(self.cfg.n_kv_heads):
            scatter_row(self.keys[layer, h], t, new_k[h])
            scatter_row(self.values[layer, h], t, new_v[h])
        self.lengths[layer] += 1
        return t

    def validity_mask(self, layer: int | None = None) -> np.ndarray:
        n = self.seq_len if layer is None else int(self.lengths[layer])
        mask = np.zeros(self.capacity, dtype=bool)
        mask[:n] = True
        return mask

    def live_tokens(self, layer: int = 0, head: int = 0) -> list[int]:
        return list(range(int(self.lengths[layer])))

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def valid_bytes(self) -> int:
        per_slot = self.nbytes // self.capacity
        return per_slot * int(self.validity_mask().sum())


@dataclass
class CompressedKvCache:
    """Fixed-capacity SnapStream cache for one sequence.

    ``slot_tokens`` records which absolute token sits in each slot (``PAD``
    when empty). It is debug metadata; attention never reads it.
    """

    cfg: SnapStreamConfig
    keys: np.ndarray
    values: np.ndarray
    slot_tokens: np.ndarray
    valid_topk: int
    lengths: np.ndarray

    @classmethod
    def empty(cls, cfg: SnapStreamConfig) -> "CompressedKvCache":
        shape = (cfg.n_layers, cfg.n_kv_heads, cfg.l_snapstream, cfg.head_dim)
        return cls(
            cfg,
            np.zeros(shape, DTYPE),
            np.zeros(shape, DTYPE),
            np.full(shape[:3], PAD, dtype=np.int64),
            0,
            np.zeros(cfg.n_layers, dtype=np.int64),
        )

    @property
    def capacity(self) -> int:
        return self.keys.shape[2]

    @property
    def seq_len(self) -> int:
        return int(self.lengths.min())

    def region(self, name: str) -> slice:
        cfg = self.cfg
        return {
            "sink": slice(0, cfg.l_sink),
            "ring": slice(cfg.l_sink, cfg.l_sr),
            "topk": slice(cfg.l_sr, cfg.l_snapstream),
        }[name]

    def validity_mask(self, layer: int | None = None) -> np.ndarray:
        return validity_mask(self, layer)

    def live_tokens(self, layer: int = 0, head: int = 0) -> list[int]:
        mask = self.validity_mask(layer)
        return [int(t) for t in self.slot_tokens[layer, head][mask]]

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes

    def valid_bytes(self) -> int:
        per_slot = self.nbytes // self.capacity
        return per_slot * int(self.validity_mask().sum())

    def copy(self) -> "CompressedKvCache":
        return CompressedKvCache(self.cfg, self.keys.copy(), self.values.copy(),
                                 self.slot_tokens.copy(), self.valid_topk,
                                 self.lengths.copy())


def init_compressed_cache(full: FullKvCache, topk, cfg: SnapStreamConfig,
                          L: int) -> CompressedKvCache:
    """Build the compressed cache from a prefill's full cache.

    ``topk[layer][kv_head]`` is anything with an ``indices`` attribute holding
    ascending absolute token ids (a ``SelectionResult``), or ``None`` when no
    selection ran. All heads must select the same number of tokens.
    """
    if L > cfg.l_max:
        raise CapacityError(f"prefill length {L} exceeds l_max={cfg.l_max}")
    if full.seq_len != L:
        raise ContractViolation(f"full cache holds {full.seq_len} tokens, expected {L}")
    cache = CompressedKvCache.empty(cfg)

    n_sink = min(L, cfg.l_sink)
    ring_tokens = list(range(max(cfg.l_sink, L - cfg.l_recent), L))
    ring_slots = [ring_slot(t, cfg) for t in ring_tokens]

    counts = set()
    for layer in range(cfg.n_layers):
        for h in range(cfg.n_kv_heads):
            src_k = full.keys[layer, h]
            src_v = full.values[layer, h]
            dst_k = cache.keys[layer, h]
            dst_v = cache.values[layer, h]
            ann = cache.slot_tokens[layer, h]

            dst_k[:n_sink] = src_k[:n_sink]
            dst_v[:n_sink] = src_v[:n_sink]
            ann[:n_sink] = np.arange(n_sink)

            if ring_tokens:
                dst_k[ring_slots] = gather_rows(src_k, ring_tokens)
                dst_v[ring_slots] = gather_rows(src_v, ring_tokens)
                ann[ring_slots] = ring_tokens

            sel = topk[layer][h] if topk is not None else None
            idx = [] if sel is None else [int(i) for i in sel.indices]
            if len(idx) > cfg.k_top:
                raise ContractViolation(f"{len(idx)} selected tokens exceed k_top={cfg.k_top}")
            if idx and (min(idx) < cfg.l_sink or max(idx) >= L - cfg.l_recent):
                raise ContractViolation("selected tokens must be eviction candidates")
            counts.add(len(idx))
            base = cfg.l_sr
            dst_k[base:base + len(idx)] = gather_rows(src_k, idx)
            dst_v[base:base + len(idx)] = gather_rows(src_v, idx)
            ann[base:base + len(idx)] = idx

    if len(counts) > 1:
        raise ContractViolation("every head must select the same number of top-K tokens")
    cache.valid_topk = counts.pop() if counts else 0
    cache.lengths[:] = L
    return cache


def decode_update(cache: CompressedKvCache, layer: int, new_k, new_v, t: int) -> int:
    """Write token ``t``'s per-head key/value rows for one layer. Returns the slot."""
    cfg = cache.cfg
    if t != cache.lengths[layer]:
        raise ContractViolation(f"layer {layer} expects token {cache.lengths[layer]}, got {t}")
    if t >= cfg.l_max:
        raise GenerationCapacityExhausted(f"token {t} exceeds l_max={cfg.l_max}")
    new_k, new_v = _check_kv(cfg, new_k, new_v)
    slot = _slot_for(t, cfg)
    for h in range(cfg.n_kv_heads):
        scatter_row(cache.keys[layer, h], slot, new_k[h])
        scatter_row(cache.values[layer, h], slot, new_v[h])
        cache.slot_tokens[layer, h, slot] = t
    cache.lengths[layer] += 1
    return slot


def validity_mask(cache: CompressedKvCache, layer: int | None = None) -> np.ndarray:
    cfg = cache.cfg
    n = cache.seq_len if layer is None else int(cache.lengths[layer])
    mask = np.zeros(cfg.l_snapstream, dtype=bool)
    mask[:min(n, cfg.l_sink)] = True
    n_ring = min(max(n - cfg.l_sink, 0), cfg.l_recent)
    mask[cfg.l_sink:cfg.l_sink + n_ring] = True
    mask[cfg.l_sr:cfg.l_sr + cache.valid_topk] = True
    return mask


def plan_two_range_gather(L: int, cfg: SnapStreamConfig) -> tuple[int, int, int]:
    """Source windows for the two-gather ring construction.

    Ring position ``j < split`` is filled from ``range2_start + j``; the rest
    from ``range1_start + j``. Both windows are ``l_recent`` long.
    """
    if L < cfg.l_sr:
        raise ContractViolation(f"two-range gather needs L >= l_sr ({cfg.l_sr}), got {L}")
    phase = (L - cfg.l_sr) % cfg.l_recent
    range2_start = L - phase
    range1_start = range2_start - cfg.l_recent
    return range1_start, range2_start, phase + 1


def build_ring_two_range(full: FullKvCache, layer: int, L: int, cfg: SnapStreamConfig):
    """Ring region assembled from two contiguous gathers of the full cache.

    Returns ``(keys, values, tokens)`` with shapes ``(n_kv, l_recent, d)`` and
    ``(l_recent,)``. Source rows at or past ``L`` are padding; their token ids
    are reported as ``PAD``.
    """
    r1, r2, split = plan_two_range_gather(L, cfg)
    src = [r2 + j if j < split else r1 + j for j in range(cfg.l_recent)]
    # the second window may run past l_max; those reads are padding anyway
    clipped = [min(s, full.capacity - 1) for s in src]
    keys = np.stack([gather_rows(full.keys[layer, h], clipped) for h in range(cfg.n_kv_heads)])
    values = np.stack([gather_rows(full.values[layer, h], clipped) for h in range(cfg.n_kv_heads)])
    for j, s in enumerate(src):
        if s >= L:
            keys[:, j] = 0
            values[:, j] = 0
    tokens = np.array([s if s < L else PAD for s in src], dtype=np.int64)
    return keys, values, tokens


@dataclass
class NaiveRollingCache:
    """Reference cache kept as explicit token lists.

    ``window_*`` are rebuilt by concatenation on every update, the way a
    sliding-window implementation without a ring buffer would do it.
    Per-layer arrays are shaped ``(n_kv_heads, n_tokens, head_dim)``.
    """

    cfg: SnapStreamConfig
    sink_ids: list[list[int]]
    sink_k: list[np.ndarray]
    sink_v: list[np.ndarray]
    topk_ids: list[list[list[int]]]
    topk_k: list[np.ndarray]
    topk_v: list[np.ndarray]
    window_ids: list[list[int]]
    window_k: list[np.ndarray]
    window_v: list[np.ndarray]
    lengths: list[int] = field(default_factory=list)

    @property
    def seq_len(self) -> int:
        return min(self.lengths)

    def live(self, layer: int, head: int):
        """``(ids, keys, values)`` of the live set, ordered sink, top-K, window."""
        ids = self.sink_ids[layer] + self.topk_ids[layer][head] + self.window_ids[layer]
        keys = np.concatenate([self.sink_k[layer][head], self.topk_k[layer][head],
                               self.window_k[layer][head]], axis=0)
        values = np.concatenate([self.sink_v[layer][head], self.topk_v[layer][head],
                                 self.window_v[layer][head]], axis=0)
        return ids, keys, values

    def live_tokens(self, layer: int = 0, head: int = 0) -> list[int]:
        return self.live(layer, head)[0]


def naive_prefill(full: FullKvCache, topk, cfg: SnapStreamConfig, L: int) -> NaiveRollingCache:
    """Slice sink, candidates and recent window out of the full cache."""
    if L > cfg.l_max:
        raise CapacityError(f"prefill length {L} exceeds l_max={cfg.l_max}")
    n_sink = min(L, cfg.l_sink)
    w0 = max(cfg.l_sink, L - cfg.l_recent)
    state = NaiveRollingCache(cfg, [], [], [], [], [], [], [], [], [], [])
    for layer in range(cfg.n_layers):
        k = full.keys[layer, :, :L]
        v = full.values[layer, :, :L]
        state.sink_ids.append(list(range(n_sink)))
        state.sink_k.append(k[:, :n_sink].copy())
        state.sink_v.append(v[:, :n_sink].copy())
        ids_per_head, tk, tv = [], [], []
        for h in range(cfg.n_kv_heads):
            sel = topk[layer][h] if topk is not None else None
            idx = [] if sel is None else [int(i) for i in sel.indices]
            ids_per_head.append(idx)
            tk.append(k[h, idx])
            tv.append(v[h, idx])
        if len({len(i) for i in ids_per_head}) > 1:
            raise ContractViolation("every head must select the same number of top-K tokens")
        state.topk_ids.append(ids_per_head)
        state.topk_k.append(np.stack(tk))
        state.topk_v.append(np.stack(tv))
        state.window_ids.append(list(range(w0, L)))
        state.window_k.append(k[:, w0:L].copy())
        state.window_v.append(v[:, w0:L].copy())
        state.lengths.append(L)
    return state


def naive_rolling_update(state: NaiveRollingCache, layer: int, new_k, new_v,
                         t: int) -> NaiveRollingCache:
    """Return a new oracle state with token ``t`` appended to ``layer``."""
    cfg = state.cfg
    if t != state.lengths[layer]:
        raise ContractViolation(f"layer {layer} expects token {state.lengths[layer]}, got {t}")
    if t >= cfg.l_max:
        raise GenerationCapacityExhausted(f"token {t} exceeds l_max={cfg.l_max}")
    new_k, new_v = _check_kv(cfg, new_k, new_v)
    nk = new_k[:, None, :]
    nv = new_v[:, None, :]

    def replaced(seq, value):
        out = list(seq)
        out[layer] = value
        return out

    lengths = replaced(state.lengths, t + 1)
    if t < cfg.l_sink:
        return dataclasses.replace(
            state,
            sink_ids=replaced(state.sink_ids, state.sink_ids[layer] + [t]),
            sink_k=replaced(state.sink_k, np.concatenate([state.sink_k[layer], nk], axis=1)),
            sink_v=replaced(state.sink_v, np.concatenate([state.sink_v[layer], nv], axis=1)),
            lengths=lengths,
        )
    keep = cfg.l_recent
    ids = (state.window_ids[layer] + [t])[-keep:]
    wk = np.concatenate([state.window_k[layer], nk], axis=1)[:, -keep:]
    wv = np.concatenate([state.window_v[layer], nv], axis=1)[:, -keep:]
    return dataclasses.replace(
        state,
        window_ids=replaced(state.window_ids, ids),
        window_k=replaced(state.window_k, wk),
        window_v=replaced(state.window_v, wv),
        lengths=lengths,
    )
