"""Verification routines shared by ``snapstream selftest`` and the test suite."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .attention import decode_attention, reference_attention
from .config import ModelConfig, SnapStreamConfig
from .engine import Engine, first_divergence
from .kvcache import (
    PAD,
    FullKvCache,
    build_ring_two_range,
    decode_update,
    init_compressed_cache,
    naive_prefill,
    naive_rolling_update,
    ring_slot,
)
from .numerics import DTYPE
from . import snapshot
from .snapkv import build_problem, select_layer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def random_prefill(rng: np.random.Generator, cfg: SnapStreamConfig, L: int):
    """Full cache of random keys/values plus per-layer selections from random queries."""
    full = FullKvCache.empty(cfg)
    selections = []
    for layer in range(cfg.n_layers):
        k = rng.standard_normal((cfg.n_kv_heads, L, cfg.head_dim)).astype(DTYPE)
        v = rng.standard_normal((cfg.n_kv_heads, L, cfg.head_dim)).astype(DTYPE)
        q = rng.standard_normal((cfg.n_q_heads, L, cfg.head_dim)).astype(DTYPE)
        full.fill_layer(layer, k, v)
        selections.append(select_layer(build_problem(q, k, L, cfg)))
    return full, selections


def random_cache_config(rng: np.random.Generator, max_prompt: int = 24, max_steps: int = 20):
    n_kv = int(rng.integers(1, 3))
    cfg_kwargs = dict(
        l_sink=int(rng.integers(0, 4)),
        l_recent=int(rng.integers(1, 7)),
        k_top=int(rng.integers(0, 6)),
        l_obs=int(rng.integers(1, 6)),
        pool_kernel=int(rng.choice([1, 3, 5])),
        n_layers=int(rng.integers(1, 3)),
        n_kv_heads=n_kv,
        n_q_heads=n_kv * int(rng.integers(1, 3)),
        head_dim=int(rng.choice([2, 4, 8])),
    )
    L = int(rng.integers(0, max_prompt + 1))
    steps = int(rng.integers(0, max_steps + 1))
    budget = cfg_kwargs["l_sink"] + cfg_kwargs["l_recent"] + cfg_kwargs["k_top"]
    l_max = max(L + steps, budget, 1)
    return SnapStreamConfig(l_max=l_max, **cfg_kwargs), L, steps


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / denom)


def oracle_trial(rng: np.random.Generator, tol: float = 1e-5) -> CheckResult:
    """Drive the ring cache and the list oracle through one random prefill + decode run.

    At every step, per (layer, kv-head): the live token multisets must match
    exactly and decode attention for a random query must agree within ``tol``.
    """
    cfg, L, steps = random_cache_config(rng)
    full, selections = random_prefill(rng, cfg, L)
    ring = init_compressed_cache(full, selections, cfg, L)
    naive = naive_prefill(full, selections, cfg, L)
    worst = 0.0
    for step in range(steps + 1):
        if step:
            t = L + step - 1
            for layer in range(cfg.n_layers):
                k = rng.standard_normal((cfg.n_kv_heads, cfg.head_dim)).astype(DTYPE)
                v = rng.standard_normal((cfg.n_kv_heads, cfg.head_dim)).astype(DTYPE)
                decode_update(ring, layer, k, v, t)
                naive = naive_rolling_update(naive, layer, k, v, t)
        for layer in range(cfg.n_layers):
            for g in range(cfg.n_kv_heads):
                got = Counter(ring.live_tokens(layer, g))
                ids, keys, values = naive.live(layer, g)
                if got != Counter(ids):
                    return CheckResult("oracle", False,
                                       f"{cfg} L={L} step={step}: {sorted(got)} != {sorted(ids)}")
                if not ids:
                    continue
                q = rng.standard_normal(cfg.head_dim).astype(DTYPE)
                err = rel_err(decode_attention(q, ring, layer, g), reference_attention(q, keys, values)[0])
                worst = max(worst, err)
                if err > tol:
                    return CheckResult("oracle", False, f"{cfg} L={L} step={step}: rel err {err:.2e}")
    return CheckResult("oracle", True, f"max rel err {worst:.1e}")


def oracle_trials(n: int, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n):
        res = oracle_trial(rng, tol)
        if not res.passed:
            return CheckResult(f"oracle equivalence ({n} trials)", False, f"trial {i}: {res.detail}")
        worst = max(worst, float(res.detail.rsplit(" ", 1)[-1]))
    return CheckResult(f"oracle equivalence ({n} trials)", True, f"max rel err {worst:.1e}")


EVICTION_CFG = SnapStreamConfig(l_max=64, l_sink=1, l_recent=4, k_top=8, n_layers=1,
                               n_q_heads=1, n_kv_heads=1, head_dim=2)


def ring_eviction_check() -> CheckResult:
    """L=26, one sink, four recent: token 27 must overwrite token 23's slot.

    Checked for both ring constructions. In the canonical layout token 26
    first evicts token 22, then 27 replaces 23. In the two-range gather layout
    token 26 fills the padding slot, so 27 replacing 23 is the first eviction.
    """
    cfg = EVICTION_CFG
    L = 26
    rng = np.random.default_rng(4)
    full, _ = random_prefill(rng, cfg, L)
    cache = init_compressed_cache(full, None, cfg, L)
    ann = cache.slot_tokens[0, 0]

    expected_ring = {25: 1, 22: 2, 23: 3, 24: 4}
    if {int(ann[s]): s for s in range(1, 5)} != expected_ring:
        return CheckResult("ring eviction", False, f"ring layout {ann[1:5].tolist()}")
    evicted = {}
    for t in (26, 27):
        slot = ring_slot(t, cfg)
        evicted[t] = int(ann[slot])
        k = np.full((1, cfg.head_dim), t, DTYPE)
        decode_update(cache, 0, k, k, t)
    if evicted != {26: 22, 27: 23}:
        return CheckResult("ring eviction", False, f"canonical evictions {evicted}")

    _, _, tokens = build_ring_two_range(full, 0, L, cfg)
    # ring position j <-> cache slot l_sink + j
    two_range = tokens.tolist()
    if two_range != [25, PAD, 23, 24]:
        return CheckResult("ring eviction", False, f"two-range ring {two_range}")
    first_live_victim = None
    for t in (26, 27):
        occupant = two_range[ring_slot(t, cfg) - cfg.l_sink]
        two_range[ring_slot(t, cfg) - cfg.l_sink] = t
        if occupant != PAD and first_live_victim is None:
            first_live_victim = (t, occupant)
    if first_live_victim != (27, 23):
        return CheckResult("ring eviction", False, f"two-range first eviction {first_live_victim}")
    return CheckResult("ring eviction", True, "27 overwrites 23 (canonical slot 3; first two-range eviction)")


def resident_config(model: ModelConfig, L: int, steps: int, l_sink: int = 2, k_top: int = 4,
                    **kwargs) -> SnapStreamConfig:
    """Budget large enough that nothing is ever evicted over ``steps`` decode steps."""
    l_recent = max(L + steps - l_sink, 1)
    return model.cache_config(l_max=l_sink + l_recent + k_top + steps, l_sink=l_sink,
                              l_recent=l_recent, k_top=k_top, **kwargs)


def lossless_check(seed: int = 0, L: int = 12, steps: int = 16) -> CheckResult:
    model = ModelConfig(seed=seed, eos_id=None)
    cfg = resident_config(model, L, steps)
    prompt = np.random.default_rng(seed).integers(1, model.vocab_size, L)
    a = Engine(model, cfg, "full").generate(prompt, steps, stop_on_eos=False).tokens
    b = Engine(model, cfg, "snapstream").generate(prompt, steps, stop_on_eos=False).tokens
    div = first_divergence(a, b)
    return CheckResult("lossless identity", div is None,
                       "identical" if div is None else f"diverged at {div}")


def roundtrip_check(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = SnapStreamConfig(l_max=40, l_sink=2, l_recent=5, k_top=3, l_obs=3, pool_kernel=3,
                           n_layers=2, n_q_heads=2, n_kv_heads=1, head_dim=4)
    full, sel = random_prefill(rng, cfg, 20)
    cache = init_compressed_cache(full, sel, cfg, 20)
    for t in range(20, 23):
        for layer in range(cfg.n_layers):
            kv = rng.standard_normal((1, cfg.head_dim)).astype(DTYPE)
            decode_update(cache, layer, kv, kv, t)
    blob = snapshot.dumps(cache)
    back = snapshot.loads(blob, cfg)
    ok = (snapshot.dumps(back) == blob and back.seq_len == cache.seq_len
          and back.valid_topk == cache.valid_topk
          and np.array_equal(back.keys.view(np.uint32), cache.keys.view(np.uint32))
          and np.array_equal(back.values.view(np.uint32), cache.values.view(np.uint32)))
    return CheckResult("snapshot round-trip", ok, f"{len(blob)} bytes")


def run_selftest(oracle_n: int = 100) -> list[CheckResult]:
    return [ring_eviction_check(), lossless_check(), oracle_trials(oracle_n), roundtrip_check()]
