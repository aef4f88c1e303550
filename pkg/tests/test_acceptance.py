"""Acceptance criteria 1-9, each checked at its stated tolerance and runtime.

Every criterion prints one ``[PASS]``/``[FAIL]`` line. Run under pytest or
directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import io
import itertools
import sys
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import snapkv_oracle  # noqa: E402
from snapstream import cli, snapshot  # noqa: E402
from snapstream.config import ModelConfig, SnapStreamConfig  # noqa: E402
from snapstream.engine import Engine, first_divergence  # noqa: E402
from snapstream.kvcache import decode_update, init_compressed_cache  # noqa: E402
from snapstream.numerics import DTYPE  # noqa: E402
from snapstream.scheduler import (  # noqa: E402
    SWEEP_ROWS,
    CostModel,
    deepseek_compression_config,
    max_batch,
    prefill_overhead_report,
    throughput_sweep,
)
from snapstream.selftest import ring_eviction_check, oracle_trials, random_prefill  # noqa: E402
from snapstream.snapkv import build_problem, select_layer  # noqa: E402


class Outcome:
    def __init__(self, number, title, passed, detail, seconds, budget):
        self.number, self.title, self.passed = number, title, passed
        self.detail, self.seconds, self.budget = detail, seconds, budget

    @property
    def ok(self):
        return self.passed and (self.budget is None or self.seconds < self.budget)

    def line(self):
        limit = "" if self.budget is None else f" / limit {self.budget:g} s"
        return (f"[{'PASS' if self.ok else 'FAIL'}] criterion {self.number} ({self.title}): "
                f"{self.detail} [{self.seconds:.2f} s{limit}]")


def timed(number, title, budget):
    def wrap(fn):
        @functools.cache
        def run():
            start = time.perf_counter()
            passed, detail = fn()
            return Outcome(number, title, passed, detail, time.perf_counter() - start, budget)
        return run
    return wrap


# -- 1 ------------------------------------------------------------------------

@timed(1, "ring eviction order", 1.0)
def criterion_1():
    res = ring_eviction_check()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["selftest", "--trials", "1"])
    selftest_line = next(line for line in buf.getvalue().splitlines() if "ring eviction" in line)
    ok = res.passed and selftest_line.startswith("PASS")
    return ok, f"{res.detail}; selftest reports '{selftest_line.split(':')[0]}' (exit {code})"


# -- 2 ------------------------------------------------------------------------

@timed(2, "ring cache vs naive rolling window", 60.0)
def criterion_2():
    res = oracle_trials(1000, seed=2024, tol=1e-5)
    return res.passed, f"{res.name}: token multisets exact, attention {res.detail} (tol 1e-5)"


# -- 3 ------------------------------------------------------------------------

MODEL = ModelConfig(eos_id=None)
STEPS = 32


def lossless_case(seed):
    """Random cache config with L_evict <= k_top (every prompt token retained)."""
    rng = np.random.default_rng(10_000 + seed)
    L = int(rng.integers(1, 49))
    l_sink = int(rng.integers(0, 5))
    l_recent = int(rng.integers(1, 65))
    k_top = max(L - l_sink - l_recent, 0) + int(rng.integers(0, 4))
    cfg = MODEL.cache_config(l_max=max(L + STEPS, l_sink + l_recent + k_top), l_sink=l_sink,
                             l_recent=l_recent, k_top=k_top, l_obs=int(rng.integers(1, 9)),
                             pool_kernel=int(rng.choice([1, 3, 5])))
    prompt = rng.integers(1, MODEL.vocab_size, L)
    return cfg, prompt


@functools.cache
def lossless_runs(n_seeds=200):
    rows = []
    for seed in range(n_seeds):
        cfg, prompt = lossless_case(seed)
        model = ModelConfig(seed=seed, eos_id=None)
        full = Engine(model, cfg, "full").generate(prompt, STEPS, stop_on_eos=False).tokens
        snap = Engine(model, cfg, "snapstream").generate(prompt, STEPS, stop_on_eos=False).tokens
        # decode step s writes position L + s - 1; it evicts nothing while that is < l_sr
        first_eviction_step = max(cfg.l_sr - len(prompt), 0) + 1
        rows.append((first_divergence(full, snap), first_eviction_step, len(full)))
    return rows


@timed(3, "lossless-case token identity", 120.0)
def criterion_3():
    rows = lossless_runs()
    identical = sum(div is None for div, _, _ in rows)
    resident = [(div, n) for div, step, n in rows if step >= n]
    resident_ok = sum(div is None for div, _ in resident)
    early = sum(div is not None and div < step for div, step, _ in rows)
    detail = (f"{identical}/{len(rows)} seeds identical over {STEPS} steps; "
              f"divergences before the first ring eviction: {early}; "
              f"runs with no eviction in the horizon: {resident_ok}/{len(resident)} identical")
    return identical == len(rows), detail


# -- 4 ------------------------------------------------------------------------

GRID = dict(L=range(17), l_sink=range(3), l_recent=range(1, 5), k_top=range(5),
            pool_kernel=(1, 3), l_obs=(1, 2, 32), heads=((1, 1), (4, 2)))


@timed(4, "SnapKV selection vs brute-force oracle", 60.0)
def criterion_4():
    cases = mismatches = redraws = 0
    for L, l_sink, l_recent, k_top, pool, l_obs, (n_q, n_kv) in itertools.product(*GRID.values()):
        cfg = SnapStreamConfig(l_max=32, l_sink=l_sink, l_recent=l_recent, k_top=k_top,
                               l_obs=l_obs, pool_kernel=pool, n_q_heads=n_q, n_kv_heads=n_kv,
                               head_dim=4)
        rng = np.random.default_rng(cases)
        for _ in range(50):
            q = rng.standard_normal((n_q, L, 4)).astype(DTYPE)
            k = rng.standard_normal((n_kv, L, 4)).astype(DTYPE)
            expected, margin = snapkv_oracle(q, k, L, cfg)
            # a float32 pipeline may legitimately order a near-tie differently; redraw those
            if margin > 1e-4:
                break
            redraws += 1
        got = [r.indices.tolist() for r in select_layer(build_problem(q, k, L, cfg))]
        mismatches += got != expected
        cases += 1
    detail = f"{cases - mismatches}/{cases} configs exact ({redraws} near-tie redraws)"
    return mismatches == 0, detail


# -- 5 ------------------------------------------------------------------------

@timed(5, "max batch under the default calibration", 1.0)
def criterion_5():
    cost = CostModel()
    expected = {(128 * 1024, 32 * 1024): (16, 64), (64 * 1024, 16 * 1024): (32, 128),
                (32 * 1024, 8 * 1024): (64, 256)}
    got = {row: (max_batch(cost, row[0]), max_batch(cost, row[1])) for row in SWEEP_ROWS}
    ok = got == expected and all(b == 4 * a for a, b in got.values())
    return ok, ", ".join(f"{f // 1024}K->{c // 1024}K: {a}->{b}" for (f, c), (a, b) in got.items())


# -- 6 ------------------------------------------------------------------------

@timed(6, "decode throughput ratio", 30.0)
def criterion_6():
    rows = throughput_sweep(CostModel())
    ok = all(3.5 <= r.improvement <= 4.5 for r in rows)
    return ok, ", ".join(f"{r.prefill_seq // 1024}K: {r.improvement:.2f}x" for r in rows) + " (band [3.5, 4.5])"


# -- 7 ------------------------------------------------------------------------

@timed(7, "prefill overhead fraction", 1.0)
def criterion_7():
    frac = prefill_overhead_report(CostModel(), 128 * 1024, deepseek_compression_config())
    return frac < 0.05, f"{frac:.4f} at L=128K (bound 0.05)"


# -- 8 ------------------------------------------------------------------------

@timed(8, "accuracy (substituted)", None)
def criterion_8():
    subs = {n: fn() for n, fn in ((2, criterion_2), (3, criterion_3), (4, criterion_4))}
    ok = all(o.ok for o in subs.values())
    status = ", ".join(f"{n} {'PASS' if o.ok else 'FAIL'}" for n, o in subs.items())
    return ok, f"model-scale accuracy not reproducible here; substitute suites: {status}"


# -- 9 ------------------------------------------------------------------------

@timed(9, "snapshot round-trip", 1.0)
def criterion_9():
    checked = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = SnapStreamConfig(l_max=64, l_sink=int(rng.integers(0, 3)), l_recent=int(rng.integers(1, 8)),
                               k_top=int(rng.integers(0, 6)), l_obs=3, pool_kernel=3, n_layers=2,
                               n_q_heads=2, n_kv_heads=int(rng.choice([1, 2])), head_dim=4)
        L = int(rng.integers(0, 40))
        full, sel = random_prefill(rng, cfg, L)
        cache = init_compressed_cache(full, sel, cfg, L)
        for t in range(L, L + int(rng.integers(0, 20))):
            for layer in range(cfg.n_layers):
                kv = rng.standard_normal((cfg.n_kv_heads, cfg.head_dim)).astype(DTYPE)
                decode_update(cache, layer, kv, kv, t)
        blob = snapshot.dumps(cache)
        back = snapshot.loads(blob, cfg)
        if not (snapshot.dumps(back) == blob and back.keys.tobytes() == cache.keys.tobytes()
                and back.values.tobytes() == cache.values.tobytes()
                and back.seq_len == cache.seq_len and back.valid_topk == cache.valid_topk):
            return False, f"seed {seed} differs after round-trip"
        checked += 1
    return True, f"{checked} caches bit-exact including seq_len and valid_topk"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8, criterion_9]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_acceptance(criterion, capsys):
    outcome = criterion()
    with capsys.disabled():
        print("\n" + outcome.line())
    assert outcome.ok, outcome.line()


def test_no_eviction_runs_are_token_identical():
    """Of the criterion-3 runs, those that never evict inside the horizon must agree exactly."""
    rows = lossless_runs()
    resident = [div for div, step, n in rows if step >= n]
    assert resident and all(div is None for div in resident)


def test_divergence_only_after_first_eviction():
    """Every criterion-3 run agrees token-for-token up to its first ring eviction."""
    for div, step, _ in lossless_runs():
        assert div is None or div >= step


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    for r in results:
        print(r.line())
    sys.exit(0 if all(r.ok for r in results) else 1)
