import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hif4ptq.codec import (
    Axis,
    Hif4Format,
    QuantDescriptor,
    code_set,
    compute_scale,
    compute_scales,
    fake_quant,
    make_descriptor,
    quant_error,
)
from hif4ptq.errors import InputError, InvalidFormatError, ShapeError
from oracles import enumerate_minifloat, exhaustive_nearest

E2M1 = Hif4Format()
FORMATS = [Hif4Format(2, 1), Hif4Format(3, 0), Hif4Format(1, 2), Hif4Format(0, 3)]


def scalar_desc(scale=1.0, fmt=E2M1):
    return QuantDescriptor(Axis.PER_TENSOR, fmt, np.array([scale]))


def test_default_magnitudes():
    assert E2M1.magnitudes == (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
    assert E2M1.max_magnitude == 6.0


def test_default_code_set():
    assert code_set(E2M1) == (-6, -4, -3, -2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2, 3, 4, 6)
    assert len(code_set(E2M1)) == 15


def test_e3m0_is_power_of_two_ladder():
    mags = Hif4Format(3, 0).magnitudes
    assert len(mags) == 8
    assert mags[0] == 0.0
    assert all(b == 2 * a for a, b in zip(mags[1:], mags[2:]))


@pytest.mark.parametrize("fmt", FORMATS)
def test_code_set_matches_bitfield_enumeration(fmt):
    cs = code_set(fmt)
    assert list(cs) == enumerate_minifloat(fmt.exponent_bits, fmt.mantissa_bits)
    assert cs.count(0.0) == 1
    assert all(np.copysign(1.0, v) > 0 for v in cs if v == 0)
    assert len(fmt.magnitudes) == 2 ** (fmt.exponent_bits + fmt.mantissa_bits)
    assert all(a < b for a, b in zip(fmt.magnitudes, fmt.magnitudes[1:]))


@pytest.mark.parametrize("bits", [(2, 2), (1, 1), (4, 0), (-1, 4)])
def test_invalid_bit_split(bits):
    with pytest.raises(InvalidFormatError):
        Hif4Format(*bits)


def test_format_code_round_trip():
    for fmt in FORMATS:
        assert Hif4Format.from_code(fmt.code) == fmt


@pytest.mark.parametrize(
    "values, expected",
    [([3, -12, 0.5], 2.0), ([0, 0, 0], 1.0), ([6], 1.0)],
)
def test_compute_scale(values, expected):
    assert compute_scale(values, E2M1) == expected


def test_compute_scale_rejects_non_finite():
    with pytest.raises(InputError):
        compute_scale([1.0, np.inf], E2M1)
    with pytest.raises(InputError):
        compute_scale([np.nan], E2M1)


def test_fake_quant_examples():
    assert fake_quant([2.4], scalar_desc()).tolist() == [2.0]
    assert fake_quant([0.5, -6.0, 3.0], scalar_desc()).tolist() == [0.5, -6.0, 3.0]
    assert fake_quant([0.0], scalar_desc(123.0)).tolist() == [0.0]


@pytest.mark.parametrize(
    "y, expected",
    # Midpoints between neighbouring codes; the even-index neighbour wins.
    [(0.25, 0.5), (0.75, 0.5), (1.25, 1.5), (1.75, 1.5), (2.5, 3.0), (3.5, 3.0), (5.0, 6.0), (-0.25, -0.5), (-5.0, -6.0)],
)
def test_ties_to_even_index(y, expected):
    assert exhaustive_nearest([y], E2M1.codes)[0] == expected
    assert fake_quant([y], scalar_desc())[0] == expected


def test_values_beyond_range_saturate():
    assert fake_quant([100.0, -7.0], scalar_desc()).tolist() == [6.0, -6.0]


def test_quant_error_examples():
    assert quant_error([0.5, -6.0, 3.0], scalar_desc()) == 0.0
    assert quant_error([2.4], scalar_desc()) == pytest.approx(0.16, rel=1e-12)


def test_quant_error_scale_covariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(200)
    k = 3.7
    assert quant_error(k * x, scalar_desc(k * 0.5)) == pytest.approx(k * k * quant_error(x, scalar_desc(0.5)), rel=1e-9)


def test_per_axis_scales():
    w = np.array([[1.0, -12.0], [3.0, 0.0]])
    np.testing.assert_array_equal(compute_scales(w, Axis.PER_OUTPUT_CHANNEL, E2M1), [2.0, 0.5])
    np.testing.assert_array_equal(compute_scales(w, Axis.PER_FEATURE_CHANNEL, E2M1), [0.5, 2.0])
    np.testing.assert_array_equal(compute_scales(w, Axis.PER_TENSOR, E2M1), [2.0])
    np.testing.assert_array_equal(compute_scales(np.zeros((2, 2)), Axis.PER_OUTPUT_CHANNEL, E2M1), [1.0, 1.0])


def test_descriptor_shape_mismatch():
    d = QuantDescriptor(Axis.PER_OUTPUT_CHANNEL, E2M1, np.ones(3))
    with pytest.raises(ShapeError):
        fake_quant(np.ones((2, 4)), d)
    with pytest.raises(ShapeError):
        fake_quant(np.ones(4), d)


def test_descriptor_rejects_bad_scales():
    with pytest.raises(InputError):
        QuantDescriptor(Axis.PER_TENSOR, E2M1, np.array([0.0]))
    with pytest.raises(InputError):
        QuantDescriptor(Axis.PER_TENSOR, E2M1, np.array([np.inf]))


def test_dynamic_template_resolves_absmax():
    x = np.array([[1.0, -12.0], [3.0, 0.5]])
    template = QuantDescriptor(Axis.PER_FEATURE_CHANNEL, E2M1)
    assert template.is_dynamic
    np.testing.assert_array_equal(fake_quant(x, template), fake_quant(x, make_descriptor(x, Axis.PER_FEATURE_CHANNEL)))


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6), elements=finite)
axes = st.sampled_from(list(Axis))
fmts = st.sampled_from(FORMATS)


@settings(max_examples=200, deadline=None)
@given(matrices, axes, fmts)
def test_idempotent(t, axis, fmt):
    d = make_descriptor(t, axis, fmt)
    once = fake_quant(t, d)
    np.testing.assert_array_equal(fake_quant(once, d), once)


@settings(max_examples=200, deadline=None)
@given(matrices, axes, fmts)
def test_sign_symmetry(t, axis, fmt):
    d = make_descriptor(t, axis, fmt)
    np.testing.assert_array_equal(fake_quant(-t, d), -fake_quant(t, d))


@settings(max_examples=200, deadline=None)
@given(matrices, fmts)
def test_nearest_code_optimality(t, fmt):
    d = make_descriptor(t, Axis.PER_OUTPUT_CHANNEL, fmt)
    out = fake_quant(t, d)
    s = d.scales[:, None]
    candidates = s[..., None] * fmt.codes[None, None, :]
    best = np.abs(t[..., None] - candidates).min(axis=-1)
    assert np.all(np.abs(t - out) <= best)


@settings(max_examples=200, deadline=None)
@given(matrices, axes, fmts)
def test_range_safety(t, axis, fmt):
    d = make_descriptor(t, axis, fmt)
    out = fake_quant(t, d)
    bound = np.broadcast_to(d.scales[:, None] if axis == Axis.PER_OUTPUT_CHANNEL else d.scales[None, :] if axis == Axis.PER_FEATURE_CHANNEL else d.scales, t.shape)
    assert np.all(np.abs(out) <= bound * fmt.max_magnitude)
    assert np.max(np.abs(out)) <= np.max(np.abs(t)) * (1 + 1e-12) or np.max(np.abs(t)) == 0


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(1e-3, 1e3), fmts)
def test_monotone_within_slice(v, scale, fmt):
    v = np.sort(v)
    out = fake_quant(v, QuantDescriptor(Axis.PER_TENSOR, fmt, np.array([scale])))
    assert np.all(np.diff(out) >= 0)
