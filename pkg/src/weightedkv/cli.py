"""Command-line entry point: ``weightedkv <command> [flags]``.

Every command writes CSV (``--out``, default stdout) except ``gen-trace``,
which writes a ``.qkv.jsonl`` trace. ``--config FILE`` loads a JSON object
whose keys are flag names (dashes or underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from . import harness
from .policies import PolicyConfig, PolicyKind
from .toy_model import ToyModelConfig, generate_trace, init_model, read_trace, write_trace

DEFAULT_POLICIES = "weightedkv,eviction,h2o,tova,streamingllm,cam"


def parse_int_list(raw) -> tuple[int, ...]:
    """``"0-4,7"`` -> ``(0, 1, 2, 3, 4, 7)``; also accepts ints and lists."""
    if isinstance(raw, int):
        return (raw,)
    if isinstance(raw, (list, tuple)):
        return tuple(int(x) for x in raw)
    out = []
    for part in str(raw).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError(f"empty integer list {raw!r}")
    return tuple(out)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default flag values")
    p.add_argument("--seeds", "--seed", dest="seeds", default="0", help="e.g. 0-19 or 1,5,9")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes across seeds")


def _add_model(p: argparse.ArgumentParser, steps: int | None) -> None:
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-head", type=int, default=16)
    p.add_argument("--vocab", type=int, default=256)
    if steps is not None:
        p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--tokens-file", help="whitespace-separated token ids instead of random tokens")


def _add_policy(p: argparse.ArgumentParser, default_policy: str) -> None:
    p.add_argument("--policy", "--policies", dest="policy", default=default_policy,
                   help="comma-separated: " + ",".join(k.value for k in PolicyKind))
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--recent", type=int, default=16)
    p.add_argument("--cam-window", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weightedkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parser.set_defaults(_subparsers=sub.choices)

    p = sub.add_parser("spectrum", help="normalized singular values of per-head K and V")
    _add_common(p)
    _add_model(p, steps=256)
    p.add_argument("--source", choices=["toy", "isotropic", "lowrank", "peaked"], default="toy")
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)

    p = sub.add_parser("perturb", help="attention cosine similarity after one merge")
    _add_common(p)
    _add_model(p, steps=None)
    p.add_argument("--merge-step", type=int, default=100)
    p.add_argument("--window", type=int, default=800)

    p = sub.add_parser("diverge", help="final-layer output divergence per policy")
    _add_common(p)
    _add_model(p, steps=256)
    _add_policy(p, DEFAULT_POLICIES)

    p = sub.add_parser("golden-fig3", help="replay the 8-token budget-4 worked example")
    _add_common(p)

    p = sub.add_parser("ideal-check", help="exactness of the ideal merge, gap of the approximation")
    _add_common(p)
    p.add_argument("--t-values", default="2,4,16,64")
    p.add_argument("--d-values", default="2,4,8,16,32")
    p.add_argument("--sweep-points", type=int, default=12)

    p = sub.add_parser("gen-trace", help="write a toy-model q/k/v trace (.qkv.jsonl)")
    _add_common(p)
    _add_model(p, steps=64)
    _add_policy(p, "none")

    p = sub.add_parser("replay", help="replay a .qkv.jsonl trace under one policy")
    _add_common(p)
    _add_policy(p, "weightedkv")
    p.add_argument("--trace", required=True)
    return parser


def _normalize_config_keys(cfg: dict) -> dict:
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = _normalize_config_keys(json.loads(Path(args.config).read_text()))
        sub = args._subparsers[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    del args._subparsers
    return args


def _model_config(args, seed: int = 0) -> ToyModelConfig:
    return ToyModelConfig(
        layers=args.layers, heads=args.heads, d_head=args.d_head, vocab=args.vocab,
        seed=seed, sequence_source="file" if args.tokens_file else "random",
    )


def policy_configs(args, seed: int = 0) -> tuple[PolicyConfig, ...]:
    out = []
    for name in str(args.policy).split(","):
        name = name.strip().lower()
        if not name or name == "none":
            continue
        kind = PolicyKind(name)
        if kind is PolicyKind.FULLKV:
            out.append(PolicyConfig(kind, budget=None, sink_count=0, recent_count=0))
            continue
        out.append(PolicyConfig(
            kind, budget=args.budget, sink_count=args.sinks, recent_count=args.recent,
            rng_seed=seed, cam_window=args.cam_window,
        ))
    return tuple(out)


@contextmanager
def _open_out(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def run(args: argparse.Namespace) -> None:
    seeds = parse_int_list(args.seeds)
    cmd = args.command
    if cmd == "spectrum":
        rows = harness.run_spectrum(harness.SpectrumConfig(
            model=_model_config(args), seeds=seeds, steps=args.steps, source=args.source,
            rank=args.rank, noise=args.noise, tokens_file=args.tokens_file, jobs=args.jobs,
        ))
    elif cmd == "perturb":
        rows = harness.run_perturbation(harness.PerturbConfig(
            model=_model_config(args), seeds=seeds, merge_step=args.merge_step,
            window=args.window, tokens_file=args.tokens_file, jobs=args.jobs,
        ))
    elif cmd == "diverge":
        rows = harness.run_policy_divergence(harness.DivergeConfig(
            model=_model_config(args), policies=policy_configs(args, seeds[0]), seeds=seeds,
            steps=args.steps, tokens_file=args.tokens_file, jobs=args.jobs,
        ))
    elif cmd == "golden-fig3":
        rows = harness.fig3_rows()
    elif cmd == "ideal-check":
        rows = harness.run_ideal_check(harness.IdealConfig(
            seeds=seeds, t_values=parse_int_list(args.t_values),
            d_values=parse_int_list(args.d_values), sweep_points=args.sweep_points,
        ))
    elif cmd == "gen-trace":
        if args.out == "-":
            raise ValueError("gen-trace needs --out FILE.qkv.jsonl")
        policies = policy_configs(args, seeds[0])
        if len(policies) > 1:
            raise ValueError("gen-trace takes at most one policy")
        model_cfg = _model_config(args, seeds[0])
        tokens = harness._tokens(model_cfg, args.steps, seeds[0], args.tokens_file)
        trace = generate_trace(init_model(model_cfg), tokens, policies[0] if policies else None)
        write_trace(trace, args.out)
        return
    elif cmd == "replay":
        policies = policy_configs(args, seeds[0])
        if len(policies) != 1:
            raise ValueError("replay takes exactly one policy")
        rows = harness.run_replay(read_trace(args.trace), policies[0], seed=seeds[0])
    else:  # pragma: no cover - argparse rejects unknown commands
        raise ValueError(f"unknown command {cmd}")
    with _open_out(args.out) as fh:
        harness.write_csv(rows, fh)


def main(argv=None) -> int:
    try:
        run(parse_args(argv))
    except (AssertionError, OSError, ValueError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"weightedkv: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
