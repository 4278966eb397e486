import math

import numpy as np
import pytest

from oracles import gram_bisection_singular_values
from weightedkv.harness import (
    ALL,
    CSV_HEADER,
    DivergeConfig,
    IdealConfig,
    MetricRow,
    PerturbConfig,
    SpectrumConfig,
    fig3_rows,
    perturbation_cosines,
    rows_to_csv,
    run_ideal_check,
    run_perturbation,
    run_policy_divergence,
    run_replay,
    run_spectrum,
    spectrum_trace,
)
from weightedkv.policies import PolicyConfig, PolicyKind
from weightedkv.toy_model import QKVTrace, ToyModelConfig, TraceReplayer, synthetic_qkv

TINY = ToyModelConfig(layers=2, heads=2, d_head=4, vocab=32)


def pol(kind, budget=12, sinks=2, recent=3):
    if kind == "fullkv":
        return PolicyConfig(PolicyKind.FULLKV)
    return PolicyConfig(PolicyKind(kind), budget=budget, sink_count=sinks, recent_count=recent)


def test_metric_row_rejects_non_finite():
    with pytest.raises(ValueError):
        MetricRow("x", 0, 0, 0, 0, "p", "m", float("nan"))


def test_csv_layout():
    text = rows_to_csv([MetricRow("e", 1, 2, 3, 4, "p", "m", 0.1)])
    assert text == ",".join(CSV_HEADER) + "\ne,1,2,3,4,p,m,0.1\n"


# -- spectrum


def test_spectrum_low_rank_values():
    cfg = SpectrumConfig(model=ToyModelConfig(d_head=8), steps=64, source="lowrank", rank=2, seeds=(0, 1))
    rows = run_spectrum(cfg)
    v_rows = [r for r in rows if r.metric.startswith("sigma_v_") and r.layer == 0 and r.head == 0]
    for r in v_rows:
        if int(r.metric.rsplit("_", 1)[1]) >= 2:
            assert r.value < 1e-8
    assert all(r.value == 1.0 for r in rows if r.metric in ("sigma_k_0", "sigma_v_0"))


def test_spectrum_row_count():
    cfg = SpectrumConfig(model=TINY, steps=20, seeds=(0, 1, 2))
    L, H, d = TINY.layers, TINY.heads, TINY.d_head
    assert len(run_spectrum(cfg)) == 3 * 2 * d * (L * H + L + 1)


def test_spectrum_matches_gram_oracle_small():
    cfg = SpectrumConfig(model=TINY, steps=40, seeds=(5,))
    rows = run_spectrum(cfg)
    trace = spectrum_trace(cfg, 5)
    for layer in range(2):
        for head in range(2):
            _, K, V = trace.head(layer, head)
            for name, M in (("k", K), ("v", V)):
                oracle = gram_bisection_singular_values(M)
                got = [r.value for r in rows if r.layer == layer and r.head == head and r.metric.startswith(f"sigma_{name}_")]
                np.testing.assert_allclose(got, oracle / oracle[0], rtol=0, atol=1e-8)


def test_spectrum_too_short():
    with pytest.raises(ValueError, match="shorter than d"):
        run_spectrum(SpectrumConfig(model=TINY, steps=3))


# -- perturbation


def zero_weight_trace(steps=40, d=2, seed=0):
    """Token 1's key points away from every query: its weight underflows to 0."""
    rng = np.random.default_rng(seed)
    q = np.column_stack([np.full(steps, 100.0), rng.standard_normal((steps, d - 1))])
    k = np.column_stack([np.zeros(steps), rng.standard_normal((steps, d - 1))])
    k[1, 0] = -100.0
    v = rng.standard_normal((steps, d))
    shape = (steps, 1, 1, d)
    return QKVTrace(q.reshape(shape), k.reshape(shape), v.reshape(shape), np.zeros(steps, int))


def test_zero_weight_merge_is_invisible():
    trace = zero_weight_trace()
    cos, slots = perturbation_cosines(TraceReplayer(trace), np.arange(40), merge_step=10, window=25)
    assert slots["merge_lowest"][0, 0] == 1
    np.testing.assert_allclose(cos["merge_lowest"], 1.0, rtol=0, atol=1e-12)


class SpyReplayer(TraceReplayer):
    def __init__(self, trace):
        super().__init__(trace)
        self.sizes = []

    def decode_step(self, token_id, position, caches, policies=None, observer=None):
        out = super().decode_step(token_id, position, caches, policies, observer)
        self.sizes.append(len(caches[0][0]))
        return out


def test_merged_cache_has_one_fewer_slot():
    spy = SpyReplayer(synthetic_qkv("isotropic", 60, 4, seed=3))
    perturbation_cosines(spy, np.arange(60), merge_step=20, window=30)
    after = spy.sizes[21:]
    assert len(after) == 3 * 30
    for full, low, high in zip(after[0::3], after[1::3], after[2::3]):
        assert low == high == full - 1


def test_perturbation_window_overflow():
    trace = synthetic_qkv("isotropic", 20, 4, seed=0)
    with pytest.raises(ValueError, match="window overflow"):
        perturbation_cosines(TraceReplayer(trace), np.arange(20), merge_step=10, window=10)


def test_perturbation_rows_and_counts():
    cfg = PerturbConfig(model=TINY, seeds=(0, 1), merge_step=8, window=6)
    rows = run_perturbation(cfg)
    L, H, w = TINY.layers, TINY.heads, 6
    assert len(rows) == 2 * (2 * w * L * H + 2) + 2 * (3 * w + 1)
    cos = [r.value for r in rows if r.metric == "cosine"]
    assert all(0.0 <= c <= 1.0 for c in cos)
    std = {r.step: r.value for r in rows if r.metric == "cosine_std" and r.policy == "merge_lowest"}
    var = {r.step: r.value for r in rows if r.metric == "cosine_var" and r.policy == "merge_lowest"}
    for step in std:
        assert std[step] == pytest.approx(math.sqrt(var[step]), abs=1e-15)


def test_perturbation_replays_a_trace():
    trace = synthetic_qkv("isotropic", 30, 4, seed=1)
    rows = run_perturbation(PerturbConfig(trace=trace, seeds=(0,), merge_step=5, window=20))
    assert sum(r.metric == "cosine" for r in rows) == 2 * 20


# -- divergence


def test_fullkv_has_zero_divergence():
    rows = run_policy_divergence(DivergeConfig(model=TINY, policies=(pol("fullkv"), pol("weightedkv")), steps=30))
    assert all(r.value <= 1e-12 for r in rows if r.policy == "fullkv" and r.metric.startswith("l2"))
    assert any(r.value > 1e-6 for r in rows if r.policy == "weightedkv" and r.metric == "l2")


def test_large_budget_means_no_divergence():
    policies = tuple(pol(k, budget=40) for k in ("weightedkv", "eviction", "h2o", "tova", "streamingllm", "cam"))
    rows = run_policy_divergence(DivergeConfig(model=TINY, policies=policies, steps=40))
    assert max(r.value for r in rows if r.metric.startswith("l2")) <= 1e-12


def test_divergence_row_count_and_guard():
    policies = (pol("weightedkv"), pol("eviction"), pol("h2o"))
    rows = run_policy_divergence(DivergeConfig(model=TINY, policies=policies, seeds=(0, 1), steps=20))
    assert len(rows) == 2 * 3 * (20 * TINY.heads * 2 + 1) + 3 * 2
    with pytest.raises(ValueError, match="at least 2"):
        run_policy_divergence(DivergeConfig(model=TINY, policies=(pol("h2o"),)))


def test_replay_rows():
    trace = synthetic_qkv("isotropic", 25, 4, seed=2)
    rows = run_replay(trace, pol("weightedkv", budget=8))
    assert len(rows) == 25 * 2 + 1 + 2
    early = [r for r in rows if r.metric == "l2" and isinstance(r.step, int) and r.step < 8]
    assert all(r.value == 0.0 for r in early)


# -- ideal check and golden


def test_ideal_check():
    cfg = IdealConfig(seeds=tuple(range(10)))
    rows = run_ideal_check(cfg)
    assert len(rows) == 10 * (4 * 5 * 2 + 12 * 2 + 1) + 2
    assert all(r.value <= 1e-10 for r in rows if r.metric == "ideal_rel_error")
    assert all(r.value <= 1e-12 for r in rows if r.metric == "approx_gap" and r.step == 2 and r.policy == "approx")
    frac = [r.value for r in rows if r.metric == "monotone_fraction"][0]
    assert frac >= 0.9


def test_fig3_rows():
    rows = fig3_rows()
    assert len(rows) == 4 * 4 + 4
    finals = [r.value for r in rows if r.metric.startswith("final_position")]
    assert finals == [3.0, 6.0, 7.0, 8.0]


# -- determinism


def test_csv_independent_of_jobs():
    cfg = DivergeConfig(model=TINY, policies=(pol("cam"), pol("weightedkv")), seeds=(0, 1, 2), steps=24)
    serial = rows_to_csv(run_policy_divergence(cfg))
    from dataclasses import replace

    parallel = rows_to_csv(run_policy_divergence(replace(cfg, jobs=2)))
    assert serial == parallel
