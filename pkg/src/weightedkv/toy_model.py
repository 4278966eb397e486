"""Seeded sources of per-head query/key/value streams.

:class:`ToyModel` is a small decoder-only stack with random weights. One
layer does::

    u   = rms_norm(h)
    q,k = rope(W_Q u), rope(W_K u)   split into heads
    v   = W_V u
    h   = h + W_O concat(attend(cache[l][head], q[head]))
    h   = h + tanh(W_F rms_norm(h))

``rope`` rotates coordinate pairs ``(2i, 2i+1)`` of each head by angle
``position * 10000 ** (-2i / d_head)``. There is no training; the model only
has to produce position-sensitive attention so that cache perturbations
propagate across layers.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import CacheState, append, attend
from .policies import Policy, PolicyConfig

ROPE_BASE = 10000.0


class SequenceSource(str, enum.Enum):
    RANDOM_TOKENS = "random"
    FILE_TOKENS = "file"


@dataclass(frozen=True)
class ToyModelConfig:
    layers: int = 4
    heads: int = 4
    d_head: int = 16
    vocab: int = 256
    seed: int = 0
    sequence_source: SequenceSource = SequenceSource.RANDOM_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "sequence_source", SequenceSource(self.sequence_source))
        for name in ("layers", "heads", "d_head", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_head % 2:
            raise ValueError(f"d_head must be even for the rotary embedding, got {self.d_head}")

    @property
    def d_model(self) -> int:
        return self.heads * self.d_head


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / math.sqrt(float(x @ x) / x.size)


def rope_tables(d_head: int, position: int) -> tuple[np.ndarray, np.ndarray]:
    freqs = ROPE_BASE ** (-np.arange(0, d_head, 2) / d_head)
    ang = position * freqs
    return np.cos(ang), np.sin(ang)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate pairs of the last axis of ``x`` (shape ``(..., d_head)``)."""
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


class ToyModel:
    def __init__(self, config: ToyModelConfig):
        self.config = config
        c = config
        D = c.d_model
        rng = np.random.default_rng(c.seed)
        std = 1.0 / math.sqrt(D)
        self.embed = rng.standard_normal((c.vocab, D))
        self.w_q = rng.standard_normal((c.layers, D, D)) * std
        self.w_k = rng.standard_normal((c.layers, D, D)) * std
        self.w_v = rng.standard_normal((c.layers, D, D)) * std
        self.w_o = rng.standard_normal((c.layers, D, D)) * std
        self.w_ff = rng.standard_normal((c.layers, D, D)) * std

    @property
    def layers(self) -> int:
        return self.config.layers

    @property
    def heads(self) -> int:
        return self.config.heads

    @property
    def d_head(self) -> int:
        return self.config.d_head

    def new_caches(self, capacity: int = 64) -> list[list[CacheState]]:
        return new_caches(self.layers, self.heads, self.d_head, capacity)

    def decode_step(self, token_id: int, position: int, caches, policies=None, observer=None):
        """Run one token through every layer, updating ``caches`` in place.

        ``policies[l][h]`` (optional) compresses each head's cache right after
        its attention step. ``observer(layer, head, step)`` sees every
        :class:`AttentionStep` before compression. Returns ``(q, k, v, out)``
        arrays of shape ``(layers, heads, d_head)``.
        """
        c = self.config
        if not 0 <= token_id < c.vocab:
            raise ValueError(f"token id {token_id} outside vocab of size {c.vocab}")
        shape = (c.layers, c.heads, c.d_head)
        qs, ks, vs, outs = (np.empty(shape) for _ in range(4))
        cos, sin = rope_tables(c.d_head, position)
        h = self.embed[token_id].copy()
        for layer in range(c.layers):
            u = rms_norm(h)
            q = apply_rope((self.w_q[layer] @ u).reshape(c.heads, c.d_head), cos, sin)
            k = apply_rope((self.w_k[layer] @ u).reshape(c.heads, c.d_head), cos, sin)
            v = (self.w_v[layer] @ u).reshape(c.heads, c.d_head)
            qs[layer], ks[layer], vs[layer] = q, k, v
            for head in range(c.heads):
                cache = caches[layer][head]
                append(cache, k[head], v[head], position)
                step = attend(cache, q[head])
                outs[layer, head] = step.output
                if observer is not None:
                    observer(layer, head, step)
                if policies is not None:
                    policies[layer][head].enforce(cache, step.weights)
            h = h + self.w_o[layer] @ outs[layer].reshape(-1)
            h = h + np.tanh(self.w_ff[layer] @ rms_norm(h))
        return qs, ks, vs, outs


def new_caches(layers: int, heads: int, d_head: int, capacity: int = 64):
    return [[CacheState(d_head, capacity) for _ in range(heads)] for _ in range(layers)]


def init_model(config: ToyModelConfig) -> ToyModel:
    return ToyModel(config)


def make_policies(config: PolicyConfig | None, layers: int, heads: int):
    if config is None:
        return None
    return [[Policy(config, stream=(layer, head)) for head in range(heads)] for layer in range(layers)]


@dataclass
class QKVTrace:
    """Per-step, per-layer, per-head q/k/v; arrays are ``(steps, layers, heads, d)``.

    ``outputs`` holds the attention outputs when the trace came from a model
    run; it is not serialized.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    token_ids: np.ndarray
    outputs: np.ndarray | None = None
    events: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 4:
            raise ValueError("q, k, v must share a (steps, layers, heads, d) shape")
        if self.token_ids.shape != (self.q.shape[0],):
            raise ValueError("one token id per step required")

    @property
    def steps(self) -> int:
        return self.q.shape[0]

    @property
    def layers(self) -> int:
        return self.q.shape[1]

    @property
    def heads(self) -> int:
        return self.q.shape[2]

    @property
    def d_head(self) -> int:
        return self.q.shape[3]

    def head(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.q[:, layer, head], self.k[:, layer, head], self.v[:, layer, head]


def generate_trace(model: ToyModel, token_ids, policy: PolicyConfig | None = None) -> QKVTrace:
    """Decode ``token_ids`` (teacher forced) and record q/k/v and outputs.

    With ``policy`` set, every layer/head cache is compressed independently
    by its own instance of that policy; otherwise attention is full.
    """
    return run_decoder(model, token_ids, policy)


class TraceReplayer:
    """Feeds a recorded trace through per-head caches with the same
    ``decode_step`` interface as :class:`ToyModel`.

    Inputs are fixed, so a compressed cache in one layer does not change the
    q/k/v seen by later layers.
    """

    def __init__(self, trace: QKVTrace):
        self.trace = trace
        self.layers, self.heads, self.d_head = trace.layers, trace.heads, trace.d_head

    def new_caches(self, capacity: int = 64):
        return new_caches(self.layers, self.heads, self.d_head, capacity)

    def decode_step(self, token_id: int, position: int, caches, policies=None, observer=None):
        tr = self.trace
        t = position
        out = np.empty((self.layers, self.heads, self.d_head))
        for layer in range(self.layers):
            for head in range(self.heads):
                cache = caches[layer][head]
                append(cache, tr.k[t, layer, head], tr.v[t, layer, head], position)
                step = attend(cache, tr.q[t, layer, head])
                out[layer, head] = step.output
                if observer is not None:
                    observer(layer, head, step)
                if policies is not None:
                    policies[layer][head].enforce(cache, step.weights)
        return tr.q[t], tr.k[t], tr.v[t], out


def run_decoder(decoder, token_ids, policy: PolicyConfig | None = None) -> QKVTrace:
    """Decode a whole sequence through ``decoder`` under ``policy``."""
    tokens = np.asarray(token_ids, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("token_ids must be a non-empty sequence")
    n = tokens.size
    L, H, d = decoder.layers, decoder.heads, decoder.d_head
    caches = decoder.new_caches(capacity=n if policy is None or policy.budget is None else policy.budget + 1)
    policies = make_policies(policy, L, H)
    shape = (n, L, H, d)
    Q, K, V, O = (np.empty(shape) for _ in range(4))
    for t, tok in enumerate(tokens):
        Q[t], K[t], V[t], O[t] = decoder.decode_step(int(tok), t, caches, policies)
    events = {}
    if policies is not None:
        events = {(l, h): policies[l][h].events for l in range(L) for h in range(H)}
    return QKVTrace(Q, K, V, tokens, outputs=O, events=events)


def random_tokens(vocab: int, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 1]).integers(0, vocab, size=n)


def load_tokens(path: str | Path, vocab: int) -> np.ndarray:
    tokens = np.array([int(t) for t in Path(path).read_text().split()], dtype=np.int64)
    if tokens.size == 0:
        raise ValueError(f"no tokens in {path}")
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValueError(f"token id out of range [0, {vocab}) in {path}")
    return tokens


class SyntheticKind(str, enum.Enum):
    ISOTROPIC = "isotropic"
    LOW_RANK_VALUES = "lowrank"
    PEAKED_ATTENTION = "peaked"


def synthetic_qkv(
    kind,
    steps: int,
    d: int,
    seed: int,
    *,
    rank: int = 2,
    noise: float = 0.0,
    peak_token: int = 0,
) -> QKVTrace:
    """Single-layer, single-head synthetic trace.

    ``lowrank`` draws values from a random ``rank``-dimensional subspace plus
    ``noise`` times isotropic noise. ``peaked`` aligns every query with the
    key of ``peak_token`` strongly enough that, under full attention, that
    token takes at least half of the weight at every step from it onwards.
    """
    kind = SyntheticKind(kind)
    if steps < 1 or d < 1:
        raise ValueError("steps and d must be >= 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((steps, d))
    k = rng.standard_normal((steps, d))
    v = rng.standard_normal((steps, d))
    if kind is SyntheticKind.LOW_RANK_VALUES:
        if not 1 <= rank <= d or noise < 0:
            raise ValueError(f"need 1 <= rank <= d and noise >= 0, got rank={rank}, noise={noise}")
        basis = rng.standard_normal((rank, d))
        v = rng.standard_normal((steps, rank)) @ basis + noise * rng.standard_normal((steps, d))
    elif kind is SyntheticKind.PEAKED_ATTENTION:
        if d < 2 or not 0 <= peak_token < steps:
            raise ValueError("peaked attention needs d >= 2 and a peak_token inside the trace")
        u = np.zeros(d)
        u[0] = 1.0
        perp = np.eye(d) - np.outer(u, u)
        k = k @ perp
        q = 0.1 * (q @ perp)
        # peak logit beats the log of the token count with room to spare
        target = math.log(steps) + 2.0
        k[peak_token] = u * math.sqrt(target * math.sqrt(d))
        q += u * math.sqrt(target * math.sqrt(d))
    shape = (steps, 1, 1, d)
    return QKVTrace(
        q.reshape(shape), k.reshape(shape), v.reshape(shape), np.zeros(steps, dtype=np.int64)
    )


def _fmt(vec) -> str:
    return "[" + ",".join(f"{x:.17g}" for x in vec) + "]"


def write_trace(trace: QKVTrace, path: str | Path) -> None:
    """Write one JSON object per (step, layer, head) line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in range(trace.steps):
            tok = int(trace.token_ids[t])
            for layer in range(trace.layers):
                for head in range(trace.heads):
                    fh.write(
                        f'{{"step":{t},"layer":{layer},"head":{head},"token_id":{tok},'
                        f'"q":{_fmt(trace.q[t, layer, head])},'
                        f'"k":{_fmt(trace.k[t, layer, head])},'
                        f'"v":{_fmt(trace.v[t, layer, head])}}}\n'
                    )


def read_trace(path: str | Path) -> QKVTrace:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append(
                    (int(rec["step"]), int(rec["layer"]), int(rec["head"]), int(rec["token_id"]),
                     rec["q"], rec["k"], rec["v"])
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trace record ({exc})") from None
    if not records:
        raise ValueError(f"{path}: empty trace")
    steps = 1 + max(r[0] for r in records)
    layers = 1 + max(r[1] for r in records)
    heads = 1 + max(r[2] for r in records)
    d = len(records[0][4])
    if len(records) != steps * layers * heads:
        raise ValueError(f"{path}: trace is not rectangular over (step, layer, head)")
    shape = (steps, layers, heads, d)
    Q, K, V = (np.full(shape, np.nan) for _ in range(3))
    tokens = np.zeros(steps, dtype=np.int64)
    for t, layer, head, tok, q, k, v in records:
        Q[t, layer, head], K[t, layer, head], V[t, layer, head] = q, k, v
        tokens[t] = tok
    if np.isnan(Q).any() or np.isnan(K).any() or np.isnan(V).any():
        raise ValueError(f"{path}: missing (step, layer, head) records")
    return QKVTrace(Q, K, V, tokens)
