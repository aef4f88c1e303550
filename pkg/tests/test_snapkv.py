import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from oracles import snapkv_oracle
from snapstream.config import SnapStreamConfig
from snapstream.errors import ContractViolation
from snapstream.kvcache import FullKvCache
from snapstream.numerics import DTYPE
from snapstream.snapkv import (
    SelectionResult,
    aggregate_and_select,
    build_problem,
    evict_count,
    extract_topk,
    observation_length,
    observation_scores,
    select_layer,
)


def cfg_of(**kw):
    base = dict(l_max=64, l_sink=1, l_recent=4, k_top=2, l_obs=4, pool_kernel=1, head_dim=4)
    return SnapStreamConfig(**{**base, **kw})


def random_qk(rng, cfg, L):
    q = rng.standard_normal((cfg.n_q_heads, L, cfg.head_dim)).astype(DTYPE)
    k = rng.standard_normal((cfg.n_kv_heads, L, cfg.head_dim)).astype(DTYPE)
    return q, k


class TestProblem:
    def test_counts(self):
        cfg = cfg_of()
        assert evict_count(26, cfg) == 21 and evict_count(3, cfg) == 0
        assert observation_length(26, cfg) == 4
        assert observation_length(2, cfg) == 2
        assert observation_length(26, cfg_of(l_obs=32)) == 4  # clamped to the recent window

    def test_slices(self, rng):
        cfg = cfg_of(n_q_heads=2, n_kv_heads=1)
        q, k = random_qk(rng, cfg, 12)
        p = build_problem(q, k, 12, cfg)
        assert p.q_obs.shape == (2, 4, 4) and p.k_evict.shape == (1, 7, 4)
        assert np.array_equal(p.k_evict[0], k[0, 1:8])
        assert np.array_equal(p.q_obs[:, -1], q[:, 11])
        assert p.L_prefix == 8


class TestObservationScores:
    def test_zero_inputs_uniform(self):
        W = observation_scores(np.zeros((3, 4)), np.ones((5, 4)))
        np.testing.assert_allclose(W, 0.2)

    def test_single_row(self, rng):
        q = rng.standard_normal((1, 4)).astype(DTYPE)
        k = rng.standard_normal((6, 4)).astype(DTYPE)
        s = (q.astype(np.float64) @ k.T / 2.0)[0]
        expected = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        np.testing.assert_allclose(observation_scores(q, k)[0], expected, atol=1e-6)

    def test_two_by_three_elementwise_oracle(self, rng):
        import math
        q = rng.standard_normal((2, 4)).astype(DTYPE)
        k = rng.standard_normal((3, 4)).astype(DTYPE)
        W = observation_scores(q, k)
        for i in range(2):
            e = [math.exp(sum(float(q[i, c]) * float(k[j, c]) for c in range(4)) / 2) for j in range(3)]
            for j in range(3):
                assert W[i, j] == pytest.approx(e[j] / sum(e), abs=1e-6)

    def test_empty_inputs_rejected(self):
        with pytest.raises(ContractViolation):
            observation_scores(np.zeros((2, 4)), np.zeros((0, 4)))
        with pytest.raises(ContractViolation):
            observation_scores(np.zeros((0, 4)), np.zeros((3, 4)))


class TestAggregate:
    def test_hand_summed_example(self):
        cfg = cfg_of(k_top=1, l_sink=1)
        W = [np.array([[0.2, 0.3, 0.5], [0.1, 0.6, 0.3]], DTYPE)]
        (res,) = aggregate_and_select(W, cfg)
        np.testing.assert_allclose(res.scores, [0.3, 0.9, 0.8], atol=1e-7)
        assert res.indices.tolist() == [1 + 1] and res.pad_count == 0

    def test_selects_all_when_k_top_exceeds(self):
        cfg = cfg_of(k_top=5, l_max=64)
        W = [np.full((2, 3), 1 / 3, DTYPE)]
        (res,) = aggregate_and_select(W, cfg)
        assert res.indices.tolist() == [1, 2, 3] and res.pad_count == 2

    def test_uniform_ties_pick_lowest(self):
        cfg = cfg_of(k_top=2)
        (res,) = aggregate_and_select([np.full((3, 6), 1 / 6, DTYPE)], cfg)
        assert res.indices.tolist() == [1, 2]

    def test_gqa_average_before_sum(self):
        cfg = cfg_of(k_top=1, n_q_heads=2, n_kv_heads=1)
        a = np.array([[1.0, 0.0, 0.0]], DTYPE)
        b = np.array([[0.0, 0.6, 0.4]], DTYPE)
        (res,) = aggregate_and_select([a, b], cfg)
        np.testing.assert_allclose(res.scores, [0.5, 0.3, 0.2])

    def test_empty_candidates_short_circuit(self, rng):
        cfg = cfg_of(k_top=3)
        q, k = random_qk(rng, cfg, 5)
        (res,) = select_layer(build_problem(q, k, 5, cfg))
        assert res.indices.size == 0 and res.pad_count == 3


@given(st.integers(0, 2), st.integers(1, 4), st.integers(0, 4), st.integers(0, 16),
       st.sampled_from([1, 3]), st.sampled_from([1, 2, 32]), st.integers(0, 2**31))
def test_result_invariants_and_oracle(l_sink, l_recent, k_top, L, pool, l_obs, seed):
    cfg = cfg_of(l_sink=l_sink, l_recent=l_recent, k_top=k_top, pool_kernel=pool, l_obs=l_obs,
                 n_q_heads=4, n_kv_heads=2)
    q, k = random_qk(np.random.default_rng(seed), cfg, L)
    results = select_layer(build_problem(q, k, L, cfg))
    expected, margin = snapkv_oracle(q, k, L, cfg)
    n_evict = evict_count(L, cfg)
    for res, ref in zip(results, expected):
        assert len(res.indices) == min(k_top, n_evict)
        assert len(res.indices) + res.pad_count == k_top
        assert all(l_sink <= i < L - l_recent for i in res.indices)
        assert res.indices.tolist() == sorted(res.indices.tolist())
        if margin > 1e-4:
            assert res.indices.tolist() == ref


@given(st.integers(0, 2**31), st.integers(1, 12), st.floats(0.1, 3.0))
def test_monotone_under_alignment_boost(seed, n_evict, eps):
    rng = np.random.default_rng(seed)
    cfg = cfg_of(l_sink=1, l_recent=4, k_top=2, pool_kernel=1)
    L = cfg.l_sr + n_evict
    base = rng.standard_normal(cfg.head_dim)
    q = (base + 0.3 * rng.standard_normal((1, L, cfg.head_dim))).astype(DTYPE)
    k = rng.standard_normal((1, L, cfg.head_dim)).astype(DTYPE)
    (res,) = select_layer(build_problem(q, k, L, cfg))
    u = q[0, L - 4:].sum(axis=0)
    assume(np.all(q[0, L - 4:] @ u > 0))
    for j in res.indices:
        boosted = k.copy()
        boosted[0, j] += DTYPE(eps) * u / np.linalg.norm(u)
        (again,) = select_layer(build_problem(q, boosted, L, cfg))
        assert j in again.indices


@given(st.integers(0, 2**31), st.integers(2, 12))
def test_permutation_equivariance(seed, n_evict):
    rng = np.random.default_rng(seed)
    cfg = cfg_of(pool_kernel=1)
    L = cfg.l_sr + n_evict
    q, k = random_qk(rng, cfg, L)
    perm = rng.permutation(n_evict)
    k2 = k.copy()
    k2[0, 1:1 + n_evict] = k[0, 1:1 + n_evict][perm]
    (a,) = select_layer(build_problem(q, k, L, cfg))
    (b,) = select_layer(build_problem(q, k2, L, cfg))
    np.testing.assert_allclose(b.scores, a.scores[perm], rtol=1e-5, atol=1e-7)


class TestExtract:
    def setup_method(self):
        self.cfg = cfg_of(k_top=3, n_kv_heads=1)
        rng = np.random.default_rng(5)
        self.full = FullKvCache.empty(self.cfg)
        k = rng.standard_normal((1, 12, 4)).astype(DTYPE)
        self.full.fill_layer(0, k, 2 * k)

    def test_empty_selection_all_padding(self):
        keys, values, n = extract_topk(self.full, SelectionResult(np.zeros(0), np.zeros(0, int), 3), 0, 0, 3)
        assert n == 0 and not keys.any() and not values.any()

    def test_full_selection_no_padding(self):
        res = SelectionResult(np.zeros(7), np.array([1, 4, 6]), 0)
        keys, values, n = extract_topk(self.full, res, 0, 0, 3)
        assert n == 3
        assert keys.tobytes() == self.full.keys[0, 0, [1, 4, 6]].tobytes()
        assert values.tobytes() == self.full.values[0, 0, [1, 4, 6]].tobytes()

    def test_partial_selection_zero_fill(self):
        res = SelectionResult(np.zeros(7), np.array([2]), 2)
        keys, _, n = extract_topk(self.full, res, 0, 0, 3)
        assert n == 1 and not keys[1:].any()

    def test_too_many_indices(self):
        with pytest.raises(ContractViolation):
            extract_topk(self.full, SelectionResult(np.zeros(7), np.arange(1, 5), 0), 0, 0, 3)
