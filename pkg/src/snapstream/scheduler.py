"""Disaggregated continuous-batching simulator and analytic cost model.

One prefill node serves requests FIFO at batch size 1. Finished prefills ship
their KV cache to a decode node that gang-steps every occupied slot. The
number of slots comes from the HBM budget divided by one sequence's cache
footprint, which is where a compressed cache pays off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .config import SnapStreamConfig
from .errors import ConfigError
from .snapkv import evict_count, observation_length

log = logging.getLogger(__name__)

#: normalized per-kernel latency of one 128K-token MoE prefill layer with SnapStream enabled
PREFILL_KERNEL_FRACTIONS = {
    "qkv": 0.0410,
    "mha": 0.6940,
    "output_proj": 0.0584,
    "router": 0.0315,
    "moe_ffn": 0.1467,
    "snapkv_compression": 0.0252,
    "streaming_ring_buffer": 0.0032,
}
SNAPSTREAM_KERNELS = ("snapkv_compression", "streaming_ring_buffer")
QUADRATIC_KERNELS = ("mha",)

K = 1024
# MLA latent (512) + decoupled rope key (64), 61 layers, 2-byte elements
DEEPSEEK_CACHE_BYTES_PER_TOKEN = (512 + 64) * 61 * 2
# weights streamed per decode step (~37e9 active parameters at one byte each)
DEEPSEEK_ACTIVE_WEIGHT_BYTES = 37_000_000_000
DEFAULT_WORKSPACE_BYTES = 8_000_000_000
# leaves room for 16 + 1/32 sequences of 128K tokens: floors to 16, 32, 64, 128, 256
# for cache lengths 128K, 64K, 32K, 16K, 8K
DEFAULT_HBM_BUDGET = (DEEPSEEK_ACTIVE_WEIGHT_BYTES + DEFAULT_WORKSPACE_BYTES
                      + (16 * 32 + 1) * 128 * K * DEEPSEEK_CACHE_BYTES_PER_TOKEN // 32)

#: (prefill sequence size, compressed sequence size) rows of the throughput table
SWEEP_ROWS = ((128 * K, 32 * K), (64 * K, 16 * K), (32 * K, 8 * K))


@dataclass(frozen=True)
class CostModel:
    """Hardware abstracted to a handful of scalars.

    Prefill latency at length ``L`` is
    ``prefill_ref_seconds * (f_quad * r**2 + f_lin * r)`` with
    ``r = L / prefill_ref_len``, using the non-SnapStream kernel fractions;
    SnapStream mode adds ``snapkv_overhead_fraction * prefill_ref_seconds * r``.
    A decode step costs ``(weight_bytes + batch * cache_len *
    cache_bytes_per_token_per_seq) / bandwidth_bytes_per_s`` and emits
    ``mtp_scale`` tokens per occupied slot.
    """

    prefill_fractions: Mapping[str, float] = field(default_factory=lambda: dict(PREFILL_KERNEL_FRACTIONS))
    prefill_ref_seconds: float = 5.0
    prefill_ref_len: int = 128 * K
    weight_bytes: float = DEEPSEEK_ACTIVE_WEIGHT_BYTES
    cache_bytes_per_token_per_seq: float = DEEPSEEK_CACHE_BYTES_PER_TOKEN
    bandwidth_bytes_per_s: float = 2.0e12
    snapkv_overhead_fraction: float = sum(PREFILL_KERNEL_FRACTIONS[k] for k in SNAPSTREAM_KERNELS)
    mtp_scale: float = 2.4
    hbm_budget_bytes: float = DEFAULT_HBM_BUDGET
    workspace_bytes: float = DEFAULT_WORKSPACE_BYTES
    n_sockets: int = 16
    transfer_seconds: float = 0.0
    peak_flops: float = 16 * 638e12

    def __post_init__(self):
        total = sum(self.prefill_fractions.values())
        if abs(total - 1.0) > 0.01:
            raise ConfigError(f"prefill fractions sum to {total:.4f}, expected 1 +/- 0.01")
        if any(v < 0 for v in self.prefill_fractions.values()):
            raise ConfigError("prefill fractions must be non-negative")
        for name in ("prefill_ref_seconds", "prefill_ref_len", "cache_bytes_per_token_per_seq",
                     "bandwidth_bytes_per_s", "mtp_scale", "hbm_budget_bytes", "n_sockets",
                     "peak_flops"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("weight_bytes", "workspace_bytes", "transfer_seconds",
                     "snapkv_overhead_fraction"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prefill_fractions"] = dict(self.prefill_fractions)
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CostModel":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown keys in [cost]: {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class ServeRequest:
    id: str
    arrival_time: float
    prompt_len: int
    target_output_len: int


@dataclass
class DecodeSlot:
    request_id: str | None = None
    seq_len: int = 0
    cache_len: int = 0
    steps_left: int = 0


@dataclass
class Trace:
    events: list[dict]
    summary: dict

    def records(self) -> list[dict]:
        return self.events + [dict(kind="summary", **self.summary)]


def max_batch(cost: CostModel, cache_len: int) -> int:
    """Decode slots that fit once weights and workspace are resident.

    The budget and each sequence's cache share are both split over the
    data-parallel sockets.
    """
    free_per_socket = (cost.hbm_budget_bytes - cost.weight_bytes - cost.workspace_bytes) / cost.n_sockets
    per_seq_per_socket = cache_len * cost.cache_bytes_per_token_per_seq / cost.n_sockets
    if free_per_socket <= 0:
        log.warning("HBM budget %.3g B does not cover weights and workspace; no decode slots",
                    cost.hbm_budget_bytes)
        return 0
    return int(math.floor(free_per_socket / per_seq_per_socket))


def prefill_latency(cost: CostModel, L: int, mode: str) -> float:
    fr = cost.prefill_fractions
    r = L / cost.prefill_ref_len
    quad = sum(v for k, v in fr.items() if k in QUADRATIC_KERNELS)
    lin = sum(v for k, v in fr.items() if k not in QUADRATIC_KERNELS and k not in SNAPSTREAM_KERNELS)
    t = cost.prefill_ref_seconds * (quad * r * r + lin * r)
    if mode == "snapstream":
        t += cost.prefill_ref_seconds * cost.snapkv_overhead_fraction * r
    return t


def decode_step_latency(cost: CostModel, batch: int, cache_len: int) -> float:
    traffic = cost.weight_bytes + batch * cache_len * cost.cache_bytes_per_token_per_seq
    return traffic / cost.bandwidth_bytes_per_s


def decode_steps_for(cost: CostModel, output_len: int) -> int:
    # the first output token comes out of prefill
    remaining = output_len - 1
    if remaining <= 0:
        return 0
    return int(math.ceil(remaining / cost.mtp_scale - 1e-9))


_KIND_ORDER = {"arrival": 0, "reject": 1, "prefill_start": 2, "prefill_end": 3,
               "transfer_done": 4, "decode_admit": 5, "complete": 6}


def simulate(requests: Sequence[ServeRequest], cost: CostModel, mode: str, seed: int = 0,
             *, l_max: int, l_snapstream: int | None = None) -> Trace:
    """Run the two-node workflow over ``requests`` (sorted by arrival).

    The model is deterministic; ``seed`` is recorded in the summary so traces
    from sweeps can be told apart.
    """
    if mode not in ("full", "snapstream"):
        raise ConfigError(f"mode must be 'full' or 'snapstream', got {mode!r}")
    if mode == "snapstream" and l_snapstream is None:
        raise ConfigError("snapstream mode needs l_snapstream")
    cache_len = l_max if mode == "full" else l_snapstream
    slots_total = max_batch(cost, cache_len)
    arrivals = [r.arrival_time for r in requests]
    if any(b < a for a, b in zip(arrivals, arrivals[1:])):
        raise ConfigError("requests must be sorted by arrival time")

    events: list[tuple] = []
    order = 0

    def emit(t, kind, rid, **detail):
        nonlocal order
        events.append((t, _KIND_ORDER[kind], order, {"t": t, "kind": kind,
                                                      "request_id": rid, "detail": detail}))
        order += 1

    # prefill node: FIFO, batch size 1, independent of decode back-pressure
    ready = []
    prefill_free = 0.0
    first_token: dict[str, float] = {}
    for r in requests:
        emit(r.arrival_time, "arrival", r.id, prompt_len=r.prompt_len,
             output_len=r.target_output_len)
        reason = None
        if r.prompt_len < 1 or r.target_output_len < 1:
            reason = "empty prompt or output"
        elif r.prompt_len + r.target_output_len > l_max:
            reason = f"prompt + output exceeds l_max={l_max}"
        elif slots_total == 0:
            reason = "no decode slots fit the memory budget"
        if reason:
            emit(r.arrival_time, "reject", r.id, reason=reason)
            continue
        start = max(prefill_free, r.arrival_time)
        end = start + prefill_latency(cost, r.prompt_len, mode)
        prefill_free = end
        emit(start, "prefill_start", r.id)
        emit(end, "prefill_end", r.id, ttft=end - r.arrival_time)
        first_token[r.id] = end
        t_ready = end + cost.transfer_seconds
        emit(t_ready, "transfer_done", r.id)
        ready.append((t_ready, r))
    ready.sort(key=lambda x: x[0])

    # decode node: gang-stepped slots; fast-forward between admissions/completions
    slots = [DecodeSlot(cache_len=cache_len) for _ in range(slots_total)]
    completions: dict[str, float] = {}
    targets = {r.id: r for _, r in ready}
    t = 0.0
    busy = 0.0
    tokens = 0.0
    nxt = 0
    while True:
        active = [s for s in slots if s.request_id is not None]
        if not active:
            if nxt == len(ready):
                break
            t = max(t, ready[nxt][0])
        free = [s for s in slots if s.request_id is None]
        while free and nxt < len(ready) and ready[nxt][0] <= t:
            _, r = ready[nxt]
            nxt += 1
            steps = decode_steps_for(cost, r.target_output_len)
            emit(t, "decode_admit", r.id, batch=len(slots) - len(free) + 1)
            if steps == 0:
                emit(t, "complete", r.id, tokens=r.target_output_len)
                completions[r.id] = t
                continue
            s = free.pop(0)
            s.request_id, s.seq_len, s.steps_left = r.id, r.prompt_len + 1, steps
        active = [s for s in slots if s.request_id is not None]
        if not active:
            continue
        dt = decode_step_latency(cost, len(active), cache_len)
        n = min(s.steps_left for s in active)
        if free and nxt < len(ready):
            wait = ready[nxt][0] - t
            n = min(n, max(1, math.ceil(wait / dt - 1e-12)))
        t += n * dt
        busy += n * dt
        for s in active:
            s.steps_left -= n
            r = targets[s.request_id]
            s.seq_len = min(s.seq_len + n * cost.mtp_scale, r.prompt_len + r.target_output_len)
            if s.steps_left == 0:
                tokens += r.target_output_len - 1
                emit(t, "complete", r.id, tokens=r.target_output_len)
                completions[r.id] = t
                s.request_id, s.steps_left = None, 0

    events.sort(key=lambda e: (e[0], e[1], e[2]))
    ttfts = [first_token[rid] - targets[rid].arrival_time for rid in completions]
    tpots = [(completions[rid] - first_token[rid]) / (targets[rid].target_output_len - 1)
             for rid in completions if targets[rid].target_output_len > 1]
    n_rejected = sum(1 for e in events if e[3]["kind"] == "reject")
    summary = {
        "mode": mode,
        "seed": seed,
        "requests": len(requests),
        "completed": len(completions),
        "rejected": n_rejected,
        "ttft_p50": float(np.percentile(ttfts, 50)) if ttfts else 0.0,
        "ttft_p95": float(np.percentile(ttfts, 95)) if ttfts else 0.0,
        "tpot_mean": float(np.mean(tpots)) if tpots else 0.0,
        "throughput_tok_s": tokens / busy if busy > 0 else 0.0,
        "max_batch": slots_total,
        "cache_len": cache_len,
        "decode_busy_s": busy,
        "makespan_s": max(completions.values()) if completions else 0.0,
    }
    return Trace([e[3] for e in events], summary)


def saturating_workload(prefill_len: int, n_requests: int, output_len: int = 16 * K) -> list[ServeRequest]:
    """Saturating workload: everything arrives at once, prompt + output = ``prefill_len``."""
    prompt = prefill_len - output_len
    return [ServeRequest(f"r{i:04d}", 0.0, prompt, output_len) for i in range(n_requests)]


def poisson_workload(n: int, rate_per_s: float, prompt_len: int, output_len: int,
                     seed: int = 0) -> list[ServeRequest]:
    rng = np.random.default_rng(seed)
    times = np.cumsum(rng.exponential(1.0 / rate_per_s, size=n))
    return [ServeRequest(f"r{i:04d}", float(t), prompt_len, output_len)
            for i, t in enumerate(times)]


@dataclass
class SweepRow:
    prefill_seq: int
    compressed_seq: int
    max_batch_full: int
    max_batch_snapstream: int
    throughput_full: float
    throughput_snapstream: float

    @property
    def improvement(self) -> float:
        if self.throughput_full == 0:
            return 0.0
        return self.throughput_snapstream / self.throughput_full

    def to_dict(self) -> dict:
        d = asdict(self)
        d["improvement"] = self.improvement
        return d


def throughput_sweep(cost: CostModel | None = None, rows: Iterable[tuple[int, int]] = SWEEP_ROWS,
                 requests_per_slot: int = 3, seed: int = 0) -> list[SweepRow]:
    """Simulate both modes per (prefill, compressed) row on a saturating workload."""
    cost = cost or CostModel()
    out = []
    for l_max, l_comp in rows:
        n = requests_per_slot * max(max_batch(cost, l_comp), 1)
        work = saturating_workload(l_max, n)
        full = simulate(work, cost, "full", seed, l_max=l_max).summary
        snap = simulate(work, cost, "snapstream", seed, l_max=l_max, l_snapstream=l_comp).summary
        out.append(SweepRow(l_max, l_comp, full["max_batch"], snap["max_batch"],
                            full["throughput_tok_s"], snap["throughput_tok_s"]))
    return out


@dataclass(frozen=True)
class ServingDims:
    """Per-layer attention geometry for the analytic prefill-overhead estimate."""

    n_heads: int = 128
    qk_head_dim: int = 192
    v_head_dim: int = 128
    active_params_per_layer: float = DEEPSEEK_ACTIVE_WEIGHT_BYTES / 61
    bytes_per_elem: int = 2
    # elements cached per token per layer (MLA latent + rope key); gathers move these
    cache_dim_per_token: int = 512 + 64


def deepseek_compression_config(l_max: int = 128 * K, l_snapstream: int = 32 * K,
                                l_sink: int = 128, l_obs: int = 32) -> SnapStreamConfig:
    """Split a compressed budget evenly between the recent window and top-K."""
    k_top = l_snapstream // 2
    return SnapStreamConfig(l_max=l_max, l_sink=l_sink, l_recent=l_snapstream - k_top - l_sink,
                            k_top=k_top, l_obs=l_obs)


def prefill_overhead_breakdown(cost: CostModel, L: int, cfg: SnapStreamConfig,
                               dims: ServingDims | None = None, l_obs: int | None = None) -> dict:
    """Roofline seconds per layer: ``max(flops / peak_flops, bytes / bandwidth)``.

    ``l_obs`` overrides the observation rows (0 disables the recompute), which
    lets the cost be studied below the configurable minimum of one row.
    """
    if L < cfg.l_sr:
        raise ConfigError(f"overhead model needs L >= l_sr ({cfg.l_sr}), got {L}")
    dims = dims or ServingDims()
    N, dq, dv, b = dims.n_heads, dims.qk_head_dim, dims.v_head_dim, dims.bytes_per_elem
    dc = dims.cache_dim_per_token
    peak, bw = cost.peak_flops, cost.bandwidth_bytes_per_s

    def seconds(flops, nbytes):
        return max(flops / peak, nbytes / bw)

    attn = seconds(L * L * N * (dq + dv), L * N * (2 * dq + 2 * dv) * b)
    linear = seconds(2 * L * dims.active_params_per_layer,
                     dims.active_params_per_layer * b)
    base = attn + linear

    l_evict = evict_count(L, cfg)
    l_obs = observation_length(L, cfg) if l_obs is None else min(l_obs, cfg.l_recent, L)
    k = min(cfg.k_top, l_evict)
    if l_obs == 0 or l_evict == 0:
        snapkv = 0.0
    else:
        flops = (2 * l_obs * l_evict * dq * N           # recomputed Q_obs K_evict^T
                 + 5 * l_obs * l_evict * N              # softmax and row sum
                 + cfg.pool_kernel * l_evict * N        # pooling
                 + l_evict * N * math.log2(max(k, 2)))  # top-k
        nbytes = ((l_evict + l_obs) * dq * N * b        # read K_evict, Q_obs
                  + 2 * k * dc * b)                     # gather and write top-K
        snapkv = seconds(flops, nbytes)
    ring = seconds(0, 2 * cfg.l_sr * dc * b)
    total = base + snapkv + ring
    return {"base_s": base, "snapkv_s": snapkv, "ring_s": ring,
            "fraction": (snapkv + ring) / total}


def prefill_overhead_report(cost: CostModel, L: int, cfg: SnapStreamConfig,
                            dims: ServingDims | None = None, l_obs: int | None = None) -> float:
    """Share of prefill work spent on selection recompute and ring construction."""
    return prefill_overhead_breakdown(cost, L, cfg, dims, l_obs)["fraction"]
