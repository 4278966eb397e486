"""Desk-scale experiments emitting long-format metric rows.

Every experiment returns a list of :class:`MetricRow`; :func:`write_csv`
renders them with the fixed header ``experiment,seed,step,layer,head,policy,
metric,value``. Rows that aggregate over an axis carry ``all`` in that column.

Random-weight models have meaningless perplexity, so policy quality is
measured as divergence of the compressed-cache attention output from the
full-attention output at the same step.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .engine import CacheState, append, full_attention_reference, observe
from .merge_math import approx_merge_weights, attention_perturbation, ideal_merge
from .numerics import cosine_similarity, normalized_spectrum, softmax
from .policies import (
    CompressionEvent,
    PolicyConfig,
    PolicyKind,
    enforce_budget,
    weightedkv_compress,
)
from .toy_model import (
    QKVTrace,
    ToyModelConfig,
    TraceReplayer,
    generate_trace,
    init_model,
    load_tokens,
    random_tokens,
    run_decoder,
    synthetic_qkv,
)

ALL = "all"
CSV_HEADER = ("experiment", "seed", "step", "layer", "head", "policy", "metric", "value")


@dataclass(frozen=True)
class MetricRow:
    experiment: str
    seed: int | str
    step: int | str
    layer: int | str
    head: int | str
    policy: str
    metric: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite metric value in {self}")

    def cells(self) -> tuple[str, ...]:
        return (
            self.experiment, str(self.seed), str(self.step), str(self.layer),
            str(self.head), self.policy, self.metric, repr(float(self.value)),
        )


def write_csv(rows: Sequence[MetricRow], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(row.cells())


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def fan_out(fn: Callable, seeds: Sequence[int], jobs: int = 1) -> list[MetricRow]:
    """Run ``fn(seed)`` for every seed and concatenate in seed-list order.

    Per-seed work is self-contained (own model, caches and RNG), so results
    do not depend on ``jobs``.
    """
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(fn, seeds))
    else:
        parts = [fn(s) for s in seeds]
    return [row for part in parts for row in part]


def _check_seeds(seeds) -> list[int]:
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    return seeds


def _tokens(model_cfg: ToyModelConfig, n: int, seed: int, tokens_file: str | None):
    if tokens_file:
        tokens = load_tokens(tokens_file, model_cfg.vocab)
        if tokens.size < n:
            raise ValueError(f"{tokens_file} holds {tokens.size} tokens, {n} needed")
        return tokens[:n]
    return random_tokens(model_cfg.vocab, n, seed)


# ---------------------------------------------------------------- spectrum


@dataclass(frozen=True)
class SpectrumConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    seeds: tuple[int, ...] = (0,)
    steps: int = 256
    source: str = "toy"  # toy | isotropic | lowrank | peaked
    rank: int = 2
    noise: float = 0.0
    tokens_file: str | None = None
    jobs: int = 1


def spectrum_trace(cfg: SpectrumConfig, seed: int) -> QKVTrace:
    if cfg.source == "toy":
        model = init_model(replace(cfg.model, seed=seed))
        return generate_trace(model, _tokens(cfg.model, cfg.steps, seed, cfg.tokens_file))
    return synthetic_qkv(cfg.source, cfg.steps, cfg.model.d_head, seed, rank=cfg.rank, noise=cfg.noise)


def _spectrum_seed(cfg: SpectrumConfig, seed: int) -> list[MetricRow]:
    trace = spectrum_trace(cfg, seed)
    if trace.steps < trace.d_head:
        raise ValueError(f"sequence of {trace.steps} steps is shorter than d={trace.d_head}")
    L, H = trace.layers, trace.heads
    spectra = {}
    rows = []
    for layer in range(L):
        for head in range(H):
            _, K, V = trace.head(layer, head)
            for name, M in (("k", K), ("v", V)):
                sp = normalized_spectrum(M)
                spectra[name, layer, head] = sp
                rows += [
                    MetricRow("spectrum", seed, ALL, layer, head, "none", f"sigma_{name}_{i}", x)
                    for i, x in enumerate(sp)
                ]
    for name in ("k", "v"):
        for layer in range(L):
            mean = np.mean([spectra[name, layer, h] for h in range(H)], axis=0)
            rows += [
                MetricRow("spectrum", seed, ALL, layer, ALL, "none", f"sigma_{name}_{i}", x)
                for i, x in enumerate(mean)
            ]
        mean = np.mean([spectra[name, l, h] for l in range(L) for h in range(H)], axis=0)
        rows += [
            MetricRow("spectrum", seed, ALL, ALL, ALL, "none", f"sigma_{name}_{i}", x)
            for i, x in enumerate(mean)
        ]
    return rows


def run_spectrum(cfg: SpectrumConfig) -> list[MetricRow]:
    """Normalized singular values of each head's stacked keys and values.

    Per seed: one row per (layer, head, index) for keys and values, then
    per-layer head averages and the overall average.
    """
    seeds = _check_seeds(cfg.seeds)
    return fan_out(partial(_spectrum_seed, cfg), seeds, cfg.jobs)


# ------------------------------------------------------------ perturbation


@dataclass(frozen=True)
class PerturbConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    seeds: tuple[int, ...] = tuple(range(20))
    merge_step: int = 100
    window: int = 800
    tokens_file: str | None = None
    trace: QKVTrace | None = None  # replay fixed q/k/v instead of the toy model
    jobs: int = 1


VARIANTS = ("merge_lowest", "merge_highest")


def pick_merge_slot(cache: CacheState, variant: str) -> int:
    """Lowest or highest average-attention slot, newest token excluded."""
    avg = cache.average_scores()[: len(cache) - 1]
    if avg.size == 0:
        raise ValueError("need at least two cached tokens to merge")
    return int(np.argmin(avg)) if variant == "merge_lowest" else int(np.argmax(avg))


def perturbation_cosines(decoder, tokens, merge_step: int, window: int):
    """Decode with full attention to ``merge_step``, fork the caches, merge
    one slot per head in each fork, then keep decoding all three.

    Returns ``{variant: array (window, layers, heads)}`` of cosine
    similarities and ``{variant: {(layer, head): slot}}``.
    """
    n_needed = merge_step + window + 1
    if len(tokens) < n_needed:
        raise ValueError(
            f"window overflow: merge step {merge_step} + window {window} needs "
            f"{n_needed} tokens, got {len(tokens)}"
        )
    if merge_step < 1:
        raise ValueError("merge_step must be >= 1 so two tokens are cached")
    L, H = decoder.layers, decoder.heads
    full = decoder.new_caches(capacity=n_needed)
    for t in range(merge_step + 1):
        decoder.decode_step(int(tokens[t]), t, full)
    forks, slots = {}, {}
    for variant in VARIANTS:
        caches = [[full[l][h].copy() for h in range(H)] for l in range(L)]
        slots[variant] = {}
        for l in range(L):
            for h in range(H):
                j = pick_merge_slot(caches[l][h], variant)
                weightedkv_compress(caches[l][h], j)
                slots[variant][l, h] = j
        forks[variant] = caches
    cos = {v: np.empty((window, L, H)) for v in VARIANTS}
    for i in range(window):
        t = merge_step + 1 + i
        full_w = {}
        decoder.decode_step(
            int(tokens[t]), t, full, observer=lambda l, h, s: full_w.__setitem__((l, h), s.weights)
        )
        for variant in VARIANTS:
            merged_w = {}
            decoder.decode_step(
                int(tokens[t]), t, forks[variant],
                observer=lambda l, h, s: merged_w.__setitem__((l, h), s.weights),
            )
            out = cos[variant]
            for (l, h), w in merged_w.items():
                out[i, l, h] = attention_perturbation(full_w[l, h], w, slots[variant][l, h])
    return cos, slots


def _perturb_seed(cfg: PerturbConfig, seed: int) -> list[MetricRow]:
    n = cfg.merge_step + cfg.window + 1
    if cfg.trace is not None:
        decoder, tokens = TraceReplayer(cfg.trace), np.arange(cfg.trace.steps)
    else:
        decoder = init_model(replace(cfg.model, seed=seed))
        tokens = _tokens(cfg.model, n, seed, cfg.tokens_file)
    cos, _ = perturbation_cosines(decoder, tokens, cfg.merge_step, cfg.window)
    rows = []
    for variant in VARIANTS:
        c = cos[variant]
        for i in range(cfg.window):
            step = cfg.merge_step + 1 + i
            for l in range(c.shape[1]):
                for h in range(c.shape[2]):
                    rows.append(MetricRow("perturb", seed, step, l, h, variant, "cosine", c[i, l, h]))
        rows.append(MetricRow("perturb", seed, ALL, ALL, ALL, variant, "cosine_mean", float(c.mean())))
    return rows


def run_perturbation(cfg: PerturbConfig) -> list[MetricRow]:
    """Cosine similarity of attention rows after a single merge at
    ``merge_step``, for the lowest- and highest-average-attention slot.

    After the per-seed rows come cross-seed rows per step (mean, variance and
    standard deviation over seeds, layers and heads) and an overall mean.
    """
    seeds = _check_seeds(cfg.seeds)
    rows = fan_out(partial(_perturb_seed, cfg), seeds, cfg.jobs)
    per = {v: {} for v in VARIANTS}
    for r in rows:
        if r.metric == "cosine":
            per[r.policy].setdefault(r.step, []).append(r.value)
    summary = []
    for variant in VARIANTS:
        for step in sorted(per[variant]):
            x = np.asarray(per[variant][step])
            summary += [
                MetricRow("perturb", ALL, step, ALL, ALL, variant, "cosine_mean", float(x.mean())),
                MetricRow("perturb", ALL, step, ALL, ALL, variant, "cosine_var", float(x.var())),
                MetricRow("perturb", ALL, step, ALL, ALL, variant, "cosine_std", float(x.std())),
            ]
        allv = np.concatenate([np.asarray(v) for v in per[variant].values()])
        summary.append(MetricRow("perturb", ALL, ALL, ALL, ALL, variant, "cosine_mean", float(allv.mean())))
    return rows + summary


def seed_means(rows: Sequence[MetricRow], metric: str, policy: str) -> dict:
    return {
        r.seed: r.value
        for r in rows
        if r.metric == metric and r.policy == policy and r.seed != ALL
        and r.step == ALL and r.layer == ALL
    }


# -------------------------------------------------------------- divergence


@dataclass(frozen=True)
class DivergeConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    policies: tuple[PolicyConfig, ...] = ()
    seeds: tuple[int, ...] = (0,)
    steps: int = 256
    tokens_file: str | None = None
    jobs: int = 1


def output_divergence(reference: np.ndarray, outputs: np.ndarray):
    """Per-row L2 distance and cosine similarity, inputs ``(n, d)``."""
    l2 = np.linalg.norm(outputs - reference, axis=-1)
    cos = np.array([cosine_similarity(a, b) for a, b in zip(outputs, reference)])
    return l2, cos


def _divergence_rows(experiment, seed, reference_trace, policy_traces, layers) -> list[MetricRow]:
    rows = []
    for pol, trace in policy_traces:
        l2_all = []
        for layer in layers:
            for h in range(trace.heads):
                ref = np.asarray(full_attention_reference(*reference_trace.head(layer, h)))
                l2, cos = output_divergence(ref, trace.outputs[:, layer, h])
                l2_all.append(l2)
                for t in range(trace.steps):
                    rows.append(MetricRow(experiment, seed, t, layer, h, pol, "l2", l2[t]))
                    rows.append(MetricRow(experiment, seed, t, layer, h, pol, "cosine", cos[t]))
        rows.append(
            MetricRow(experiment, seed, ALL, ALL, ALL, pol, "l2_mean", float(np.mean(l2_all)))
        )
    return rows


def _diverge_seed(cfg: DivergeConfig, seed: int) -> list[MetricRow]:
    model = init_model(replace(cfg.model, seed=seed))
    tokens = _tokens(cfg.model, cfg.steps, seed, cfg.tokens_file)
    reference = generate_trace(model, tokens)
    # CaM draws follow the run seed
    traces = [(p.label, generate_trace(model, tokens, replace(p, rng_seed=seed))) for p in cfg.policies]
    return _divergence_rows("diverge", seed, reference, traces, [model.layers - 1])


def _policy_summary(experiment: str, rows: Sequence[MetricRow], labels) -> list[MetricRow]:
    out = []
    for label in labels:
        for metric in ("l2", "cosine"):
            vals = [r.value for r in rows if r.policy == label and r.metric == metric]
            out.append(MetricRow(experiment, ALL, ALL, ALL, ALL, label, f"{metric}_mean", float(np.mean(vals))))
    return out


def run_policy_divergence(cfg: DivergeConfig) -> list[MetricRow]:
    """Final-layer output divergence of each policy from full attention.

    Per seed: ``l2`` and ``cosine`` rows per (step, head, policy), then a
    per-seed ``l2_mean`` per policy; finally cross-seed ``l2_mean`` and
    ``cosine_mean`` per policy.
    """
    if len(cfg.policies) < 2:
        raise ValueError("divergence comparison needs at least 2 policies")
    seeds = _check_seeds(cfg.seeds)
    rows = fan_out(partial(_diverge_seed, cfg), seeds, cfg.jobs)
    return rows + _policy_summary("diverge", rows, [p.label for p in cfg.policies])


def run_replay(trace: QKVTrace, policy: PolicyConfig, seed: int = 0) -> list[MetricRow]:
    """Replay a recorded trace under one policy; divergence at every layer.

    Inputs are fixed, so each layer/head is an independent single-head replay
    compared against full causal attention over the same q/k/v.
    """
    replayed = run_decoder(TraceReplayer(trace), np.arange(trace.steps), policy)
    rows = _divergence_rows("replay", seed, trace, [(policy.label, replayed)], range(trace.layers))
    return rows + _policy_summary("replay", rows, [policy.label])


# ------------------------------------------------------------ golden trace

# Average attention scores (in tenths) of the cached tokens at each
# compressing step of the toy run, budget 4. Tokens are labelled 1..8. Step 5
# is read off the worked example; steps 6-8 are chosen to produce the stated
# end state {3, 6, 7, 8} with slots 3 and 6 each absorbing two other values.
FIG3_BUDGET = 4
FIG3_SCHEDULE = {
    5: (9, 1, 5, 8, 7),  # cache 1 2 3 4 5 -> merge 2 into 3
    6: (2, 6, 4, 5, 7),  # cache 1 3 4 5 6 -> merge 1 into 3
    7: (6, 2, 4, 5, 3),  # cache 3 4 5 6 7 -> merge 4 into 5
    8: (6, 1, 3, 4, 2),  # cache 3 5 6 7 8 -> merge 5 into 6
}
FIG3_FINAL_POSITIONS = (3, 6, 7, 8)


def _set_average_scores(cache: CacheState, tenths) -> None:
    n = len(cache)
    if len(tenths) != n:
        raise AssertionError(f"schedule row has {len(tenths)} scores for {n} slots")
    cache.acc_scores[:] = np.asarray(tenths, dtype=np.float64)
    cache.counts[:] = 10.0


def replay_fig3() -> tuple[list[CompressionEvent], CacheState, dict]:
    """Drive WeightedKV over the 8-token toy schedule.

    Value rows are one-hot in token index, so the final value matrix shows
    exactly how much of each original token every retained slot carries.
    """
    config = PolicyConfig(PolicyKind.WEIGHTEDKV, budget=FIG3_BUDGET, sink_count=0, recent_count=0)
    cache = CacheState(8, capacity=FIG3_BUDGET + 1)
    events = []
    for token in range(1, 9):
        onehot = np.eye(8)[token - 1]
        append(cache, np.zeros(8), onehot, token)
        if token in FIG3_SCHEDULE:
            _set_average_scores(cache, FIG3_SCHEDULE[token])
        else:
            observe(cache, softmax(np.zeros(len(cache))))
        cache.steps = token + 1  # events then carry the 1-based step label
        _, event = enforce_budget(cache, config)
        if event is not None:
            events.append(event)
    contents = {int(p): cache.values[i].copy() for i, p in enumerate(cache.positions)}
    return events, cache, contents


def run_fig3_golden() -> list[CompressionEvent]:
    """Replay the toy schedule and check it against the worked example.

    Raises ``AssertionError`` on any mismatch.
    """
    events, cache, contents = replay_fig3()
    first = events[0]
    if first.step != 5 or (first.evicted_position, first.merged_position) != (2, 3):
        raise AssertionError(f"step-5 merge mismatch: {first}")
    w = first.weights
    if (Fraction(w.w_left).limit_denominator(1000), Fraction(w.w_right).limit_denominator(1000)) != (
        Fraction(1, 6), Fraction(5, 6),
    ) or (w.w_left, w.w_right) != (1 / 6, 5 / 6):
        raise AssertionError(f"step-5 weights {first.weights} are not (1/6, 5/6)")
    if tuple(int(p) for p in cache.positions) != FIG3_FINAL_POSITIONS:
        raise AssertionError(f"final positions {cache.positions.tolist()} != {FIG3_FINAL_POSITIONS}")
    for pos in (3, 6):
        if int(np.count_nonzero(contents[pos])) != 3:
            raise AssertionError(f"slot for token {pos} does not hold 3 merged values")
    return events


def fig3_rows() -> list[MetricRow]:
    events = run_fig3_golden()
    rows = []
    for e in events:
        for metric, value in (
            ("evicted_position", e.evicted_position),
            ("merged_position", e.merged_position),
            ("w_left", e.weights.w_left),
            ("w_right", e.weights.w_right),
        ):
            rows.append(MetricRow("golden-fig3", 0, e.step, 0, 0, "weightedkv", metric, float(value)))
    _, cache, _ = replay_fig3()
    for i, p in enumerate(cache.positions):
        rows.append(MetricRow("golden-fig3", 0, ALL, 0, 0, "weightedkv", f"final_position_{i}", float(p)))
    return rows


# ------------------------------------------------------------- ideal check


@dataclass(frozen=True)
class IdealConfig:
    seeds: tuple[int, ...] = (0,)
    t_values: tuple[int, ...] = (2, 4, 16, 64)
    d_values: tuple[int, ...] = (2, 4, 8, 16, 32)
    sweep_t: int = 16
    sweep_d: int = 8
    sweep_points: int = 12
    sweep_shift: float = 12.0


def substitution_error(q, K, V, slot: int = 0) -> float:
    """Relative output change after swapping the pair for ``ideal_merge``."""
    q = np.asarray(q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    before = softmax(K @ q / math.sqrt(q.size)) @ V
    v_tilde = ideal_merge(q, K, V, slot)
    K2 = np.delete(K, slot, axis=0)
    V2 = np.delete(V, slot, axis=0)
    V2[slot] = v_tilde
    after = softmax(K2 @ q / math.sqrt(q.size)) @ V2
    return float(np.linalg.norm(after - before) / np.linalg.norm(before))


def approximation_gap(q, K, V) -> float:
    w = approx_merge_weights(q, K[0], K[1])
    approx = w.w_left * V[0] + w.w_right * V[1]
    return float(np.linalg.norm(ideal_merge(q, K, V) - approx))


def random_case(rng: np.random.Generator, t: int, d: int):
    return rng.standard_normal(d), rng.standard_normal((t, d)), rng.standard_normal((t, d))


def evicted_weight_sweep(q, K, V, points: int, shift: float):
    """Push the first key away from the query in ``points`` even steps of
    its logit (total ``shift``); return (evicted weight, gap) per point."""
    unit = q / np.linalg.norm(q)
    per_logit = math.sqrt(q.size) / np.linalg.norm(q)
    out = []
    for delta in np.linspace(0.0, shift, points):
        K2 = K.copy()
        K2[0] = K[0] - delta * per_logit * unit
        weight = float(softmax(K2 @ q / math.sqrt(q.size))[0])
        out.append((weight, approximation_gap(q, K2, V)))
    return out


def sweep_is_monotone(sweep) -> bool:
    gaps = [g for _, g in sweep]
    return all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))


def run_ideal_check(cfg: IdealConfig) -> list[MetricRow]:
    """Exactness of the ideal substitute across a (t, d) grid, and the gap
    of the two-term approximation along a decreasing-evicted-weight sweep.

    Grid rows use ``step`` for t and ``head`` for d.
    """
    seeds = _check_seeds(cfg.seeds)
    rows = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for t in cfg.t_values:
            for d in cfg.d_values:
                q, K, V = random_case(rng, t, d)
                rows.append(MetricRow("ideal-check", seed, t, ALL, d, "ideal", "ideal_rel_error", substitution_error(q, K, V)))
                rows.append(MetricRow("ideal-check", seed, t, ALL, d, "approx", "approx_gap", approximation_gap(q, K, V)))
        q, K, V = random_case(rng, cfg.sweep_t, cfg.sweep_d)
        sweep = evicted_weight_sweep(q, K, V, cfg.sweep_points, cfg.sweep_shift)
        for i, (weight, gap) in enumerate(sweep):
            rows.append(MetricRow("ideal-check", seed, i, ALL, ALL, "sweep", "evicted_weight", weight))
            rows.append(MetricRow("ideal-check", seed, i, ALL, ALL, "sweep", "approx_gap", gap))
        rows.append(MetricRow("ideal-check", seed, ALL, ALL, ALL, "sweep", "monotone", float(sweep_is_monotone(sweep))))
    errs = [r.value for r in rows if r.metric == "ideal_rel_error"]
    rows.append(MetricRow("ideal-check", ALL, ALL, ALL, ALL, "ideal", "max_ideal_rel_error", max(errs)))
    mono = [r.value for r in rows if r.metric == "monotone"]
    rows.append(MetricRow("ideal-check", ALL, ALL, ALL, ALL, "sweep", "monotone_fraction", float(np.mean(mono))))
    return rows
