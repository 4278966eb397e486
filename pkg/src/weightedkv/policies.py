"""Cache-compression policies.

Every policy is driven the same way: after each ``attend`` the caller invokes
:func:`enforce_budget`, which performs at most one compression when the cache
holds ``budget + 1`` slots. Policies differ only in which slot they pick and
what happens to its value row:

========================  ==================================  ======================
policy                    slot picked                         value of picked slot
========================  ==================================  ======================
``weightedkv``            min average attention (acc/count)   merged into right slot
``eviction``              same as ``weightedkv``              dropped
``streamingllm``          oldest non-sink slot                dropped
``h2o``                   min cumulative attention            dropped
``tova``                  min weight at the latest step       dropped
``cam``                   same as ``h2o``                     maybe spread over next n
``fullkv``                never compresses                    n/a
========================  ==================================  ======================

The ``cam`` policy follows only the two-sentence description of CaM
(probabilistic merge, 1/n scaling onto the next n values); it is a comparison
baseline rather than a faithful port of that method.

Score-based policies choose among the *compressible* slots: everything except
the first ``sink_count`` slots and the last ``recent_count + 1`` slots (the
newest token is never a candidate). Ties go to the smallest slot index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .engine import CacheState
from .merge_math import MergeWeights, convex_combine


class PolicyKind(str, enum.Enum):
    FULLKV = "fullkv"
    STREAMINGLLM = "streamingllm"
    H2O = "h2o"
    TOVA = "tova"
    CAM = "cam"
    WEIGHTEDKV = "weightedkv"
    EVICTION = "eviction"

    def __str__(self) -> str:
        return self.value


class BudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    kind: PolicyKind
    budget: int | None = None  # None: unlimited
    sink_count: int = 4
    recent_count: int = 0
    rng_seed: int = 0
    cam_window: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.sink_count < 0 or self.recent_count < 0:
            raise ValueError("sink_count and recent_count must be non-negative")
        if self.cam_window < 1:
            raise ValueError(f"cam_window must be >= 1, got {self.cam_window}")
        if self.budget is None:
            return
        if self.budget < 2:
            raise ValueError(f"budget must be >= 2, got {self.budget}")
        if self.sink_count + self.recent_count + 1 > self.budget:
            raise ValueError(
                f"sink_count + recent_count + 1 = "
                f"{self.sink_count + self.recent_count + 1} exceeds budget {self.budget}"
            )

    @property
    def label(self) -> str:
        return self.kind.value


@dataclass(frozen=True)
class CompressionEvent:
    step: int
    evicted_slot: int
    evicted_position: int
    merged_into: int | None = None
    merged_position: int | None = None
    weights: MergeWeights | None = None

    def __post_init__(self):
        if self.merged_into is not None and self.merged_into != self.evicted_slot + 1:
            raise ValueError("merged_into must be the right neighbour of evicted_slot")

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "evicted_slot": self.evicted_slot,
            "evicted_position": self.evicted_position,
            "merged_into": self.merged_into,
            "merged_position": self.merged_position,
            "w_left": None if self.weights is None else self.weights.w_left,
            "w_right": None if self.weights is None else self.weights.w_right,
        }


def compressible_range(size: int, config: PolicyConfig) -> range:
    lo = config.sink_count
    hi = size - config.recent_count - 1
    if hi <= lo:
        raise BudgetError(
            f"no compressible slot in cache of size {size} "
            f"(sinks={config.sink_count}, recent={config.recent_count})"
        )
    return range(lo, hi)


def _argmin_in(scores: np.ndarray, allowed: range) -> int:
    return allowed.start + int(np.argmin(scores[allowed.start : allowed.stop]))


def _step(cache: CacheState) -> int:
    return cache.steps - 1


def weightedkv_select(cache: CacheState, config: PolicyConfig) -> int:
    """Slot with the lowest average attention among compressible slots."""
    return _argmin_in(cache.average_scores(), compressible_range(len(cache), config))


def weightedkv_compress(cache: CacheState, j: int) -> tuple[CacheState, CompressionEvent]:
    """Merge value ``j`` into value ``j + 1`` and drop everything else at ``j``.

    The pair is weighted by average attention; ``a_j / n_j : a_{j+1} / n_{j+1}``
    is evaluated as ``a_j n_{j+1} : a_{j+1} n_j`` to avoid two roundings. The
    surviving slot keeps its own bookkeeping.
    """
    if not 0 <= j < len(cache) - 1:
        raise IndexError(f"slot {j} has no right neighbour in cache of size {len(cache)}")
    a, n = cache.acc_scores, cache.counts
    w = MergeWeights.from_scores(a[j] * n[j + 1], a[j + 1] * n[j])
    vals = cache.values
    vals[j + 1] = convex_combine(w, vals[j], vals[j + 1])
    event = CompressionEvent(
        step=_step(cache),
        evicted_slot=j,
        evicted_position=int(cache.positions[j]),
        merged_into=j + 1,
        merged_position=int(cache.positions[j + 1]),
        weights=w,
    )
    cache.remove(j)
    return cache, event


def _evict(cache: CacheState, j: int) -> tuple[CacheState, CompressionEvent]:
    event = CompressionEvent(
        step=_step(cache), evicted_slot=j, evicted_position=int(cache.positions[j])
    )
    cache.remove(j)
    return cache, event


def eviction_variant_compress(cache: CacheState, j: int) -> tuple[CacheState, CompressionEvent]:
    """WeightedKV's selection with the merge replaced by plain eviction."""
    if not 0 <= j < len(cache) - 1:
        raise IndexError(f"slot {j} has no right neighbour in cache of size {len(cache)}")
    return _evict(cache, j)


def streamingllm_compress(cache: CacheState, config: PolicyConfig):
    compressible_range(len(cache), config)
    return _evict(cache, config.sink_count)


def h2o_compress(cache: CacheState, config: PolicyConfig):
    j = _argmin_in(cache.acc_scores, compressible_range(len(cache), config))
    return _evict(cache, j)


def tova_compress(cache: CacheState, config: PolicyConfig, last_step_weights):
    w = np.asarray(last_step_weights, dtype=np.float64)
    if w.shape != (len(cache),):
        raise ValueError(
            f"last_step_weights has {w.size} entries for a cache of {len(cache)}"
        )
    j = _argmin_in(w, compressible_range(len(cache), config))
    return _evict(cache, j)


def cam_compress(cache: CacheState, config: PolicyConfig, rng: np.random.Generator):
    """Evict the H2O choice; with probability equal to its average attention
    (clamped to [0, 1]) first add ``v_j / cam_window`` to the next
    ``cam_window`` value rows."""
    j = _argmin_in(cache.acc_scores, compressible_range(len(cache), config))
    prob = min(1.0, max(0.0, float(cache.average_scores()[j])))
    if rng.random() >= prob:
        return _evict(cache, j)
    vals = cache.values
    stop = min(j + 1 + config.cam_window, len(cache))
    vals[j + 1 : stop] += vals[j] / config.cam_window
    event = CompressionEvent(
        step=_step(cache),
        evicted_slot=j,
        evicted_position=int(cache.positions[j]),
        merged_into=j + 1,
        merged_position=int(cache.positions[j + 1]),
    )
    cache.remove(j)
    return cache, event


def enforce_budget(
    cache: CacheState,
    config: PolicyConfig,
    last_step_weights=None,
    rng: np.random.Generator | None = None,
) -> tuple[CacheState, CompressionEvent | None]:
    """Compress once if the cache is over budget; return the event taken."""
    m = config.budget
    if m is None or len(cache) <= m:
        return cache, None
    if len(cache) > m + 1:
        raise BudgetError(f"cache size {len(cache)} exceeds budget {m} by more than one")
    kind = config.kind
    if kind is PolicyKind.FULLKV:
        raise BudgetError("FullKV cannot enforce budget")
    if kind is PolicyKind.WEIGHTEDKV:
        return weightedkv_compress(cache, weightedkv_select(cache, config))
    if kind is PolicyKind.EVICTION:
        return eviction_variant_compress(cache, weightedkv_select(cache, config))
    if kind is PolicyKind.STREAMINGLLM:
        return streamingllm_compress(cache, config)
    if kind is PolicyKind.H2O:
        return h2o_compress(cache, config)
    if kind is PolicyKind.TOVA:
        if last_step_weights is None:
            raise ValueError("TOVA needs the weights of the step that overflowed")
        return tova_compress(cache, config, last_step_weights)
    if kind is PolicyKind.CAM:
        if rng is None:
            raise ValueError("CaM needs a random generator")
        return cam_compress(cache, config, rng)
    raise ValueError(f"unknown policy kind {kind!r}")


@dataclass
class Policy:
    """A configured policy bound to one cache stream, owning CaM's RNG.

    ``stream`` distinguishes independent caches (e.g. layer/head) that share
    a config so their random draws do not coincide.
    """

    config: PolicyConfig
    stream: tuple[int, ...] = ()
    events: list[CompressionEvent] = field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng([self.config.rng_seed, *self.stream])

    def enforce(self, cache: CacheState, last_step_weights=None) -> CompressionEvent | None:
        _, event = enforce_budget(cache, self.config, last_step_weights, self.rng)
        if event is not None:
            self.events.append(event)
        return event
