"""A seeded toy decoder driven through static prefill and decode graphs.

Three cache modes share one set of weights:

``full``
    Padded ``l_max`` cache; decode appends in place.
``snapstream``
    Prefill runs uncompressed, then SnapKV selection and the ring-buffer
    layout compress the cache; decode scatters into ring slots.
``naive``
    Reference path: full-matrix attention and a list-based rolling window,
    rebuilt by concatenation each step. Used only to cross-check ``snapstream``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionWorkspace, decode_attention, prefill_attention, reference_attention
from .config import ModelConfig, SnapStreamConfig
from .errors import ConfigError, ContractViolation, GenerationCapacityExhausted
from .kvcache import (
    CompressedKvCache,
    FullKvCache,
    NaiveRollingCache,
    decode_update,
    init_compressed_cache,
    naive_prefill,
    naive_rolling_update,
)
from .numerics import DTYPE, rope_apply
from .snapkv import SelectionResult, build_problem, select_layer

MODES = ("full", "snapstream", "naive")


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return (x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)).astype(DTYPE)


def _silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(DTYPE)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


class ToyModel:
    """Random pre-norm decoder with grouped-query attention and rotary positions.

    Projections are drawn from ``N(0, 1/fan_in)`` so attention is far from
    uniform and greedy tokens actually depend on cache contents.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden
        qd = cfg.n_q_heads * cfg.head_dim
        kd = cfg.n_kv_heads * cfg.head_dim
        f = cfg.ffn_mult * h

        def init(fan_in, fan_out):
            return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(DTYPE)

        self.embed = rng.standard_normal((cfg.vocab_size, h)).astype(DTYPE)
        self.layers = [
            LayerWeights(init(h, qd), init(h, kd), init(h, kd), init(qd, h), init(h, f), init(f, h))
            for _ in range(cfg.n_layers)
        ]
        self.unembed = init(h, cfg.vocab_size)

    def qkv(self, layer: int, x: np.ndarray, positions, theta_base: float):
        """Post-rotary ``(n_q, T, d)`` queries and ``(n_kv, T, d)`` keys/values for normed ``x``."""
        cfg = self.cfg
        w = self.layers[layer]
        T = x.shape[0]
        d = cfg.head_dim
        q = (x @ w.wq).reshape(T, cfg.n_q_heads, d).transpose(1, 0, 2)
        k = (x @ w.wk).reshape(T, cfg.n_kv_heads, d).transpose(1, 0, 2)
        v = (x @ w.wv).reshape(T, cfg.n_kv_heads, d).transpose(1, 0, 2)
        q = np.stack([rope_apply(q[i], positions, theta_base) for i in range(cfg.n_q_heads)])
        k = np.stack([rope_apply(k[i], positions, theta_base) for i in range(cfg.n_kv_heads)])
        return q, k, np.ascontiguousarray(v, dtype=DTYPE)

    def finish_layer(self, layer: int, h: np.ndarray, attn: np.ndarray) -> np.ndarray:
        """Output projection, residual, and feed-forward block. ``attn`` is ``(T, n_q*d)``."""
        w = self.layers[layer]
        h = (h + attn @ w.wo).astype(DTYPE)
        return (h + _silu(_rms_norm(h) @ w.w_up) @ w.w_down).astype(DTYPE)

    def logits(self, h: np.ndarray) -> np.ndarray:
        return (_rms_norm(h) @ self.unembed).astype(DTYPE)


@dataclass
class StepStats:
    step: int
    mode: str
    valid_slots: int
    cache_bytes: int
    valid_bytes: int

    def to_dict(self) -> dict:
        return {"step": self.step, "mode": self.mode, "valid_slots": self.valid_slots,
                "cache_bytes": self.cache_bytes, "valid_bytes": self.valid_bytes}


@dataclass
class GenerationState:
    mode: str
    cache: FullKvCache | CompressedKvCache | NaiveRollingCache
    tokens: list[int] = field(default_factory=list)
    step: int = 0
    logits: np.ndarray | None = None
    full_cache: FullKvCache | None = None
    selections: list[list[SelectionResult]] | None = None

    @property
    def seq_len(self) -> int:
        return self.cache.seq_len


@dataclass
class GenerationResult:
    tokens: list[int]
    stats: list[StepStats]
    stop_reason: str
    state: GenerationState


class Engine:
    """Greedy generation with a chosen cache mode."""

    def __init__(self, model: ModelConfig | ToyModel, cache_cfg: SnapStreamConfig,
                 mode: str = "snapstream", block_len: int = 64):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.model = model if isinstance(model, ToyModel) else ToyModel(model)
        m = self.model.cfg
        if (m.n_layers, m.n_q_heads, m.n_kv_heads, m.head_dim) != (
                cache_cfg.n_layers, cache_cfg.n_q_heads, cache_cfg.n_kv_heads, cache_cfg.head_dim):
            raise ConfigError("cache geometry does not match the model")
        self.cfg = cache_cfg
        self.mode = mode
        self.workspace = AttentionWorkspace(block_len=block_len, head_dim=m.head_dim)

    # -- prefill ---------------------------------------------------------
    def prefill(self, tokens: Sequence[int]) -> tuple[int, GenerationState]:
        cfg = self.cfg
        model = self.model
        tokens = [int(t) for t in tokens]
        L = len(tokens)
        if L == 0:
            raise ContractViolation("empty prompt")
        if L > cfg.l_max:
            raise ContractViolation(f"prompt length {L} exceeds l_max={cfg.l_max}")
        if min(tokens) < 0 or max(tokens) >= model.cfg.vocab_size:
            raise ContractViolation("token id outside the vocabulary")

        full = FullKvCache.empty(cfg)
        selections: list[list[SelectionResult]] = []
        positions = np.arange(L)
        h = model.embed[tokens]
        for layer in range(cfg.n_layers):
            q, k, v = model.qkv(layer, _rms_norm(h), positions, cfg.theta_base)
            full.fill_layer(layer, k, v)
            heads = [self._prefill_head(q[i], k[cfg.kv_head_of(i)], v[cfg.kv_head_of(i)], L)
                     for i in range(cfg.n_q_heads)]
            h = model.finish_layer(layer, h, np.concatenate(heads, axis=1))
            if self.mode != "full":
                selections.append(select_layer(build_problem(q, k, L, cfg)))

        logits = model.logits(h[-1:])[0]
        if self.mode == "full":
            cache = full
        elif self.mode == "snapstream":
            cache = init_compressed_cache(full, selections, cfg, L)
        else:
            cache = naive_prefill(full, selections, cfg, L)
        nxt = int(np.argmax(logits))
        state = GenerationState(self.mode, cache, [nxt], 0, logits, full,
                                selections or None)
        return nxt, state

    def _prefill_head(self, q, k, v, L):
        if self.mode == "naive":
            return reference_attention(q, k, v, causal=True).astype(DTYPE)
        pad = self.cfg.l_max - L
        qp = np.pad(q, ((0, pad), (0, 0)))
        kp = np.pad(k, ((0, pad), (0, 0)))
        vp = np.pad(v, ((0, pad), (0, 0)))
        return prefill_attention(qp, kp, vp, L, self.workspace)[:L]

    # -- decode ----------------------------------------------------------
    def decode_step(self, state: GenerationState) -> int:
        """Feed the last emitted token and return the next one."""
        cfg = self.cfg
        model = self.model
        t = state.seq_len
        if t >= cfg.l_max:
            raise GenerationCapacityExhausted(f"sequence reached l_max={cfg.l_max}")
        h = model.embed[[state.tokens[-1]]]
        for layer in range(cfg.n_layers):
            q, k, v = model.qkv(layer, _rms_norm(h), [t], cfg.theta_base)
            k1, v1 = k[:, 0], v[:, 0]
            cache = state.cache
            if state.mode == "full":
                cache.write(layer, k1, v1, t)
            elif state.mode == "snapstream":
                decode_update(cache, layer, k1, v1, t)
            else:
                state.cache = cache = naive_rolling_update(cache, layer, k1, v1, t)
            heads = []
            for i in range(cfg.n_q_heads):
                g = cfg.kv_head_of(i)
                if state.mode == "naive":
                    _, keys, values = cache.live(layer, g)
                    heads.append(reference_attention(q[i, 0], keys, values)[0].astype(DTYPE))
                else:
                    heads.append(decode_attention(q[i, 0], cache, layer, g))
            h = model.finish_layer(layer, h, np.concatenate(heads)[None, :])
        state.logits = model.logits(h)[0]
        nxt = int(np.argmax(state.logits))
        state.tokens.append(nxt)
        state.step += 1
        return nxt

    # -- driver ----------------------------------------------------------
    def stats(self, state: GenerationState) -> StepStats:
        cache = state.cache
        if isinstance(cache, NaiveRollingCache):
            n = len(cache.live_tokens(0, 0))
            per_slot = 2 * 4 * self.cfg.n_layers * self.cfg.n_kv_heads * self.cfg.head_dim
            return StepStats(state.step, state.mode, n, n * per_slot, n * per_slot)
        return StepStats(state.step, state.mode, int(cache.validity_mask(0).sum()),
                         cache.nbytes, cache.valid_bytes())

    def generate(self, prompt: Sequence[int], max_new: int,
                 stop_on_eos: bool = True) -> GenerationResult:
        """Prefill, then up to ``max_new`` decode steps.

        The returned tokens start with the prefill's token, so a full run has
        ``max_new + 1`` of them. Stops early on EOS or when the sequence fills
        ``l_max``.
        """
        if max_new < 0:
            raise ContractViolation("max_new must be >= 0")
        _, state = self.prefill(prompt)
        stats = [self.stats(state)]
        eos = self.model.cfg.eos_id if stop_on_eos else None
        reason = "max_new"
        while state.step < max_new:
            if eos is not None and state.tokens[-1] == eos:
                reason = "eos"
                break
            if state.seq_len >= self.cfg.l_max:
                reason = "capacity"
                break
            self.decode_step(state)
            stats.append(self.stats(state))
        else:
            if eos is not None and state.tokens[-1] == eos:
                reason = "eos"
        return GenerationResult(list(state.tokens), stats, reason, state)


def first_divergence(a: Sequence[int], b: Sequence[int]) -> int | None:
    """Index of the first differing token, or ``None`` if the streams agree."""
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None
