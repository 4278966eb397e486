import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_attention
from weightedkv.engine import CacheState, append, attend, full_attention_reference


def filled(K, V, start=0):
    cache = CacheState(len(K[0]))
    for i, (k, v) in enumerate(zip(K, V)):
        append(cache, k, v, start + i)
    return cache


def test_append_first_token():
    cache = append(CacheState(2), [1.0, 2.0], [3.0, 4.0], 0)
    assert len(cache) == 1
    assert cache.acc_scores.tolist() == [0.0] and cache.counts.tolist() == [0.0]


def test_append_third_token_positions():
    cache = filled([[1, 0], [0, 1], [1, 1]], [[0, 0]] * 3, start=5)
    assert len(cache) == 3 and cache.positions.tolist() == [5, 6, 7]


def test_append_guards():
    cache = filled([[1, 0]], [[0, 0]], start=3)
    with pytest.raises(ValueError, match="non-increasing"):
        append(cache, [0, 1], [0, 0], 3)
    with pytest.raises(ValueError, match="dimension mismatch"):
        append(cache, [0, 1, 2], [0, 0], 4)


def test_append_grows_past_capacity():
    cache = CacheState(1, capacity=1)
    for i in range(10):
        append(cache, [float(i)], [float(-i)], i)
    assert cache.keys[:, 0].tolist() == list(range(10))


def test_attend_singleton():
    cache = filled([[0.3, -2.0]], [[5.0, 6.0]])
    step = attend(cache, [10.0, 4.0])
    np.testing.assert_array_equal(step.weights, [1.0])
    np.testing.assert_array_equal(step.output, [5.0, 6.0])
    assert cache.acc_scores.tolist() == [1.0] and cache.counts.tolist() == [1.0]


def test_attend_identical_keys_average_values():
    v, w = np.array([1.0, 7.0]), np.array([3.0, -1.0])
    step = attend(filled([[1, 2], [1, 2]], [v, w]), [0.5, 0.5])
    np.testing.assert_allclose(step.output, (v + w) / 2, atol=1e-15)


def test_attend_empty():
    with pytest.raises(ValueError, match="empty cache"):
        attend(CacheState(3), [0, 0, 0])


def test_attend_matches_brute_force():
    rng = np.random.default_rng(11)
    K, V, q = rng.standard_normal((8, 4)), rng.standard_normal((8, 4)), rng.standard_normal(4)
    step = attend(filled(K, V), q)
    w, out = brute_attention(q.tolist(), K.tolist(), V.tolist())
    np.testing.assert_allclose(step.weights, w, rtol=0, atol=1e-14)
    np.testing.assert_allclose(step.output, out, rtol=0, atol=1e-14)
    assert abs(step.weights.sum() - 1) <= 1e-12


def test_reference_single_step():
    q, k, v = [0.2, 0.1], [1.0, -1.0], [4.0, 2.0]
    (o,) = full_attention_reference([q], [k], [v])
    np.testing.assert_array_equal(o, attend(filled([k], [v]), q).output)


def test_reference_constant_values():
    rng = np.random.default_rng(1)
    Q, K = rng.standard_normal((10, 3)), rng.standard_normal((10, 3))
    c = np.array([2.5, -1.0, 0.0])
    for o in full_attention_reference(Q, K, np.tile(c, (10, 1))):
        np.testing.assert_allclose(o, c, atol=1e-15)


def test_reference_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        full_attention_reference([[1.0]], [[1.0], [2.0]], [[1.0]])


def test_reference_matches_unlimited_cache():
    rng = np.random.default_rng(32)
    Q, K, V = (rng.standard_normal((32, 8)) for _ in range(3))
    ref = full_attention_reference(Q, K, V)
    cache = CacheState(8)
    for t in range(32):
        append(cache, K[t], V[t], t)
        step = attend(cache, Q[t])
        np.testing.assert_allclose(step.output, ref[t], rtol=0, atol=1e-12)
        assert step.step_index == t


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.integers(1, 6), st.floats(0.1, 20))
def test_output_in_convex_hull_and_average_in_unit_interval(seed, steps, d, scale):
    rng = np.random.default_rng(seed)
    cache = CacheState(d)
    for t in range(steps):
        append(cache, scale * rng.standard_normal(d), rng.standard_normal(d), t)
        step = attend(cache, scale * rng.standard_normal(d))
        vals = cache.values
        assert np.all(step.output >= vals.min(axis=0) - 1e-12)
        assert np.all(step.output <= vals.max(axis=0) + 1e-12)
        avg = cache.average_scores()
        assert np.all((avg >= 0) & (avg <= 1 + 1e-12))
        cache.check_invariants()


def test_remove_and_copy():
    cache = filled([[1.0], [2.0], [3.0]], [[10.0], [20.0], [30.0]])
    clone = cache.copy()
    cache.remove(1)
    assert cache.positions.tolist() == [0, 2] and cache.values[:, 0].tolist() == [10.0, 30.0]
    assert clone.positions.tolist() == [0, 1, 2]
    with pytest.raises(IndexError):
        cache.remove(2)
