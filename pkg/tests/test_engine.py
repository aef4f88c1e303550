import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snapstream.config import ModelConfig
from snapstream.engine import Engine, ToyModel, first_divergence
from snapstream.errors import ConfigError, ContractViolation, GenerationCapacityExhausted
from snapstream.kvcache import CompressedKvCache
from snapstream.selftest import resident_config

MODEL = ModelConfig(eos_id=None)


def prompt_of(seed, L, vocab=64):
    return np.random.default_rng(seed).integers(1, vocab, L).tolist()


def cache_cfg(l_sink=2, l_recent=6, k_top=4, l_max=64, **kw):
    return MODEL.cache_config(l_max=l_max, l_sink=l_sink, l_recent=l_recent, k_top=k_top,
                              l_obs=kw.pop("l_obs", 4), pool_kernel=kw.pop("pool_kernel", 3), **kw)


def test_weights_deterministic():
    a, b = ToyModel(MODEL), ToyModel(MODEL)
    h = a.embed[[1, 2, 3]]
    assert a.logits(h).tobytes() == b.logits(h).tobytes()
    assert ToyModel(ModelConfig(seed=1)).embed.tobytes() != a.embed.tobytes()


def test_geometry_mismatch_rejected():
    with pytest.raises(ConfigError):
        Engine(MODEL, ModelConfig(n_q_heads=4).cache_config(64, 1, 4, 2), "full")
    with pytest.raises(ConfigError):
        Engine(MODEL, cache_cfg(), "compressed")


@pytest.mark.parametrize("bad", [[], [64], [-1]])
def test_prefill_rejects_bad_prompts(bad):
    with pytest.raises(ContractViolation):
        Engine(MODEL, cache_cfg(), "full").prefill(bad)


def test_prefill_rejects_overlong_prompt():
    with pytest.raises(ContractViolation):
        Engine(MODEL, cache_cfg(l_max=16), "full").prefill(prompt_of(0, 17))


@pytest.mark.parametrize("L", [1, 5, 8])
def test_short_prompt_prefill_identical(L):
    cfg = cache_cfg()
    assert L <= cfg.l_sr
    p = prompt_of(L, L)
    assert Engine(MODEL, cfg, "full").prefill(p)[0] == Engine(MODEL, cfg, "snapstream").prefill(p)[0]


@given(st.integers(0, 10_000), st.integers(9, 12))
@settings(max_examples=25)
def test_lossless_prefill(seed, L):
    # k_top >= L_evict: compression keeps every prompt token and the first token agrees
    cfg = cache_cfg(l_sink=2, l_recent=6, k_top=4)
    p = prompt_of(seed, L)
    tok_full, _ = Engine(MODEL, cfg, "full").prefill(p)
    tok_snap, state = Engine(MODEL, cfg, "snapstream").prefill(p)
    assert tok_full == tok_snap
    assert sorted(state.cache.live_tokens()) == list(range(L))


@given(st.integers(0, 10_000), st.integers(1, 40))
@settings(max_examples=25)
def test_tokens_agree_until_first_eviction(seed, L):
    # with every candidate retained, the caches only differ once a decode write
    # evicts a ring token, i.e. once it writes a position >= l_sr
    steps = 16
    cfg = MODEL.cache_config(l_max=L + steps, l_sink=2, l_recent=6, k_top=max(L - 8, 0),
                             l_obs=4, pool_kernel=3)
    p = prompt_of(seed, L)
    full = Engine(MODEL, cfg, "full").generate(p, steps, stop_on_eos=False).tokens
    snap = Engine(MODEL, cfg, "snapstream").generate(p, steps, stop_on_eos=False).tokens
    safe = 1 + max(cfg.l_sr - L, 0)
    assert full[:safe] == snap[:safe]


@pytest.mark.parametrize("seed", range(5))
def test_resident_generation_identical(seed):
    L, steps = 10, 20
    cfg = resident_config(MODEL, L, steps)
    p = prompt_of(seed, L)
    full = Engine(MODEL, cfg, "full").generate(p, steps, stop_on_eos=False)
    snap = Engine(MODEL, cfg, "snapstream").generate(p, steps, stop_on_eos=False)
    assert full.tokens == snap.tokens and len(full.tokens) == steps + 1


@pytest.mark.parametrize("seed", range(200))
def test_snapstream_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    L = int(rng.integers(1, 49))
    l_sink, l_recent, k_top = int(rng.integers(0, 4)), int(rng.integers(1, 12)), int(rng.integers(0, 9))
    cfg = MODEL.cache_config(l_max=max(L + 32, l_sink + l_recent + k_top), l_sink=l_sink,
                             l_recent=l_recent, k_top=k_top, l_obs=int(rng.integers(1, 9)),
                             pool_kernel=int(rng.choice([1, 3, 5])))
    p = prompt_of(seed, L)
    snap = Engine(MODEL, cfg, "snapstream").generate(p, 32, stop_on_eos=False).tokens
    naive = Engine(MODEL, cfg, "naive").generate(p, 32, stop_on_eos=False).tokens
    assert snap == naive


def test_decode_counter_and_static_shape():
    cfg = cache_cfg()
    eng = Engine(MODEL, cfg, "snapstream")
    _, state = eng.prefill(prompt_of(0, 12))
    shape = state.cache.keys.shape
    for i in range(10):
        before = state.seq_len
        eng.decode_step(state)
        assert state.seq_len == before + 1
        assert state.cache.keys.shape == shape and isinstance(state.cache, CompressedKvCache)


def test_decode_capacity_signal():
    cfg = cache_cfg(l_max=13)
    eng = Engine(MODEL, cfg, "snapstream")
    _, state = eng.prefill(prompt_of(0, 13))
    with pytest.raises(GenerationCapacityExhausted):
        eng.decode_step(state)


def test_generate_stats():
    cfg = cache_cfg(l_max=40)
    L, steps = 6, 20
    full = Engine(MODEL, cfg, "full").generate(prompt_of(3, L), steps, stop_on_eos=False)
    snap = Engine(MODEL, cfg, "snapstream").generate(prompt_of(3, L), steps, stop_on_eos=False)
    assert [s.valid_slots for s in full.stats] == list(range(L, L + steps + 1))
    assert len({s.cache_bytes for s in snap.stats}) == 1
    assert [s.valid_slots for s in snap.stats] == [min(L + i, cfg.l_sr) for i in range(steps + 1)]
    per_slot = snap.stats[0].cache_bytes // cfg.l_snapstream
    assert snap.stats[-1].valid_bytes == per_slot * cfg.l_sr


def test_generate_max_new_zero():
    res = Engine(MODEL, cache_cfg(), "snapstream").generate(prompt_of(0, 9), 0)
    assert len(res.tokens) == 1 and res.stop_reason == "max_new"


def test_generate_stops_at_capacity():
    cfg = cache_cfg(l_max=16)
    res = Engine(MODEL, cfg, "snapstream").generate(prompt_of(0, 10), 100)
    assert res.stop_reason == "capacity"
    assert res.state.seq_len == 16 and len(res.tokens) == 1 + 6


def test_generate_stops_on_eos():
    model = ModelConfig(eos_id=None)
    cfg = cache_cfg()
    probe = Engine(model, cfg, "full").generate(prompt_of(0, 9), 5, stop_on_eos=False).tokens
    eos_model = ModelConfig(eos_id=probe[2])
    res = Engine(eos_model, cfg, "full").generate(prompt_of(0, 9), 5)
    assert res.stop_reason == "eos" and res.tokens[-1] == probe[2]
    assert len(res.tokens) == probe.index(probe[2]) + 1


def test_generation_deterministic():
    cfg = cache_cfg()
    a = Engine(MODEL, cfg, "snapstream").generate(prompt_of(7, 20), 15).tokens
    b = Engine(MODEL, cfg, "snapstream").generate(prompt_of(7, 20), 15).tokens
    assert a == b


def test_first_divergence():
    assert first_divergence([1, 2, 3], [1, 2, 3]) is None
    assert first_divergence([1, 2, 3], [1, 5, 3]) == 1
    assert first_divergence([1, 2], [1, 2, 3]) == 2
