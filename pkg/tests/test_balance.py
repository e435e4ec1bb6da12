import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hif4ptq.balance import (
    ChannelMask,
    StatKind,
    balance_activations,
    balance_weights,
    build_mask,
    weight_stat,
)
from hif4ptq.errors import ConfigError, InputError, MaskError
from hif4ptq.tensor import compare, matmul_bt


def test_weight_stat_examples():
    assert weight_stat([[1, -4], [-2, 3]]).tolist() == [2, 4]
    assert weight_stat(np.eye(3)).tolist() == [1, 1, 1]
    assert weight_stat([[0.0, 1.0], [0.0, -2.0]]).tolist() == [0.0, 2.0]


def test_build_mask_examples():
    assert build_mask([16.0], [4.0], 0.5, 1e-300).mask[0] == pytest.approx(2.0, rel=1e-15)
    a = np.array([0.5, 3.0, 10.0])
    np.testing.assert_allclose(build_mask(a, a, 0.5, 1e-12).mask, 1.0, rtol=1e-9)
    np.testing.assert_allclose(build_mask([1.0, 2.0, 3.0], a, 0.0, 1e-8).mask, 1.0 / (a + 1e-8), rtol=1e-15)


def test_zero_weight_channel_gets_neutral_mask():
    m = build_mask([0.0, 2.0], [5.0, 5.0], 0.5, 1e-8)
    assert m.mask[0] == 1.0
    assert np.all(m.mask > 0)


def test_build_mask_errors():
    with pytest.raises(InputError):
        build_mask([-1.0], [1.0])
    with pytest.raises(InputError):
        build_mask([1.0], [-1.0])
    with pytest.raises(ConfigError):
        build_mask([1.0], [1.0], alpha=1.5)
    with pytest.raises(ConfigError):
        build_mask([1.0], [1.0], epsilon=0.0)
    with pytest.raises(MaskError):
        build_mask([1.0, 2.0], [1.0])


def test_balance_examples():
    assert balance_weights([[4.0]], ChannelMask(np.array([2.0]))).tolist() == [[2.0]]
    assert balance_activations([[1.0, 1.0]], ChannelMask(np.array([2.0, 3.0]))).tolist() == [[2.0, 3.0]]
    w = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(balance_weights(w, ChannelMask.unit(2)), w)
    np.testing.assert_array_equal(balance_activations(w, ChannelMask.unit(2)), w)
    m = ChannelMask(np.array([0.01, 40.0]))
    np.testing.assert_allclose(balance_weights(w, m) * m.mask, w, rtol=1e-12)


def test_balance_length_mismatch():
    with pytest.raises(MaskError):
        balance_weights(np.ones((2, 3)), ChannelMask(np.ones(2)))
    with pytest.raises(MaskError):
        balance_activations(np.ones((2, 3)), ChannelMask(np.ones(4)))


def test_mask_rejects_non_positive():
    with pytest.raises(MaskError):
        ChannelMask(np.array([1.0, 0.0]))


stats = st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=16)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_balanced_product_equivalence(seed, alpha):
    rng = np.random.default_rng(seed)
    n, k, o = rng.integers(1, 10, size=3)
    x = rng.standard_normal((n, k)) * rng.lognormal(0, 1.5, k)
    w = rng.standard_normal((o, k))
    mask = build_mask(weight_stat(w), np.abs(x).max(axis=0), alpha)
    ref = matmul_bt(x, w)
    bal = matmul_bt(balance_activations(x, mask), balance_weights(w, mask))
    assert compare(ref, bal).max_abs_err <= 1e-9 * (1 + np.abs(ref).max())


@settings(max_examples=100, deadline=None)
@given(stats.flatmap(lambda w: st.tuples(st.just(w), st.lists(st.floats(0, 1e3), min_size=len(w), max_size=len(w)))))
def test_alpha_endpoints(pair):
    w, a = (np.array(v) for v in pair)
    np.testing.assert_allclose(build_mask(w, a, 1.0).mask, w, rtol=1e-12)
    np.testing.assert_allclose(build_mask(w, a, 0.0).mask, 1.0 / (a + 1e-8), rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.99))
def test_percentile_mask_dominates_max_mask(seed, alpha):
    rng = np.random.default_rng(seed)
    w = rng.lognormal(0, 1, 8)
    a_max = rng.lognormal(0, 1, 8)
    a_p = a_max * rng.uniform(0, 1, 8)
    assert np.all(build_mask(w, a_p, alpha).mask >= build_mask(w, a_max, alpha).mask)


@settings(max_examples=50, deadline=None)
@given(stats, st.floats(0, 1))
def test_mask_rebuild_is_bit_identical(w, alpha):
    w = np.array(w)
    a = w[::-1].copy()
    m1 = build_mask(w, a, alpha, 1e-8, StatKind.PERCENTILE, 99.9)
    m2 = build_mask(w, a, m1.alpha, m1.epsilon, m1.stat_kind, m1.percentile_p)
    assert m1 == m2
