"""Signed 4-bit floating-point fake quantization.

The default format is E2M1 (1 sign, 2 exponent, 1 mantissa bit, exponent bias 1,
subnormals at exponent 0, no Inf/NaN codes), whose magnitudes are
``0, 0.5, 1, 1.5, 2, 3, 4, 6``. Other splits of the three non-sign bits give
alternative ladders. Every slice of a tensor (a row, a column, or the whole
tensor) shares one positive scale; a value ``v`` with scale ``s`` becomes
``s * c`` for the code ``c`` nearest to ``v / s``. Ties go to the code with the
even index in the sorted signed code list.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InputError, InvalidFormatError, ShapeError

NON_SIGN_BITS = 3
# Scale floor: absmax values in the subnormal range would otherwise underflow to a zero scale.
_TINY = float(np.finfo(np.float64).tiny)


class Axis(enum.IntEnum):
    """Which slices of a 2D tensor share a scale.

    ``PER_OUTPUT_CHANNEL`` gives one scale per row (weights ``[out, in]``),
    ``PER_FEATURE_CHANNEL`` one scale per column (activations ``[tokens, features]``).
    """

    PER_OUTPUT_CHANNEL = 0
    PER_FEATURE_CHANNEL = 1
    PER_TENSOR = 2


class Rounding(enum.IntEnum):
    NEAREST_TIES_TO_EVEN_INDEX = 0


@dataclass(frozen=True)
class Hif4Format:
    exponent_bits: int = 2
    mantissa_bits: int = 1

    def __post_init__(self):
        e, m = self.exponent_bits, self.mantissa_bits
        if not (isinstance(e, int) and isinstance(m, int)) or e < 0 or m < 0 or e + m != NON_SIGN_BITS:
            raise InvalidFormatError(
                f"exponent_bits + mantissa_bits must equal {NON_SIGN_BITS}, got ({e}, {m})"
            )

    @cached_property
    def magnitudes(self) -> tuple[float, ...]:
        e, m = self.exponent_bits, self.mantissa_bits
        if e == 0:
            # Pure integer ladder 0..7.
            return tuple(float(i) for i in range(1 << m))
        bias = (1 << (e - 1)) - 1
        out = []
        for exp in range(1 << e):
            for man in range(1 << m):
                frac = man / (1 << m)
                if exp == 0:
                    out.append(frac * 2.0 ** (1 - bias))
                else:
                    out.append((1.0 + frac) * 2.0 ** (exp - bias))
        return tuple(out)

    @property
    def max_magnitude(self) -> float:
        return self.magnitudes[-1]

    @property
    def code(self) -> int:
        """One-byte encoding ``exponent_bits << 4 | mantissa_bits``."""
        return (self.exponent_bits << 4) | self.mantissa_bits

    @classmethod
    def from_code(cls, code: int) -> Hif4Format:
        return cls(code >> 4, code & 0x0F)

    @cached_property
    def codes(self) -> np.ndarray:
        return np.array(code_set(self), dtype=np.float64)


def code_set(fmt: Hif4Format) -> tuple[float, ...]:
    """Sorted signed representable values, zero included once."""
    pos = [v for v in fmt.magnitudes if v > 0]
    return tuple([-v for v in reversed(pos)] + [0.0] + pos)


def compute_scale(values, fmt: Hif4Format) -> float:
    """Absmax scale of one slice; an all-zero slice gets scale 1.0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InputError("cannot compute a scale for an empty slice")
    if not np.all(np.isfinite(v)):
        raise InputError("non-finite value in slice")
    amax = float(np.max(np.abs(v)))
    if amax == 0.0:
        return 1.0
    return max(amax / fmt.max_magnitude, _TINY)


def _slice_absmax(t: np.ndarray, axis: Axis) -> np.ndarray:
    a = np.abs(t)
    if axis == Axis.PER_TENSOR:
        return np.array([a.max()]) if a.size else np.zeros(1)
    if t.ndim != 2:
        raise ShapeError(f"per-channel scaling needs a 2D tensor, got shape {t.shape}")
    if t.shape[0] == 0 or t.shape[1] == 0:
        raise InputError("cannot compute scales for an empty tensor")
    return a.max(axis=1) if axis == Axis.PER_OUTPUT_CHANNEL else a.max(axis=0)


def compute_scales(t: np.ndarray, axis: Axis, fmt: Hif4Format) -> np.ndarray:
    """Vectorised :func:`compute_scale` over every slice along ``axis``."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise InputError("non-finite value in tensor")
    amax = _slice_absmax(t, axis)
    return np.where(amax == 0.0, 1.0, np.maximum(amax / fmt.max_magnitude, _TINY))


@dataclass(eq=False)
class QuantDescriptor:
    """Axis, format and per-slice scales.

    ``scales=None`` marks a dynamic template: scales are recomputed from each
    tensor by absmax (see :meth:`resolve`).
    """

    axis: Axis
    format: Hif4Format = Hif4Format()
    scales: np.ndarray | None = None
    rounding: Rounding = Rounding.NEAREST_TIES_TO_EVEN_INDEX

    def __post_init__(self):
        self.axis = Axis(self.axis)
        if self.scales is not None:
            self.scales = np.ascontiguousarray(self.scales, dtype=np.float64).reshape(-1)
            if not (np.all(np.isfinite(self.scales)) and np.all(self.scales > 0)):
                raise InputError("scales must be strictly positive and finite")
            if self.axis == Axis.PER_TENSOR and self.scales.size != 1:
                raise ShapeError("per-tensor descriptor needs exactly one scale")

    @property
    def is_dynamic(self) -> bool:
        return self.scales is None

    def resolve(self, t: np.ndarray) -> QuantDescriptor:
        if not self.is_dynamic:
            return self
        return QuantDescriptor(self.axis, self.format, compute_scales(t, self.axis, self.format), self.rounding)

    def __eq__(self, other):
        if not isinstance(other, QuantDescriptor):
            return NotImplemented
        same_scales = (self.scales is None and other.scales is None) or (
            self.scales is not None and other.scales is not None and np.array_equal(self.scales, other.scales)
        )
        return (self.axis, self.format, self.rounding) == (other.axis, other.format, other.rounding) and same_scales


def make_descriptor(t: np.ndarray, axis: Axis, fmt: Hif4Format = Hif4Format()) -> QuantDescriptor:
    return QuantDescriptor(axis, fmt, compute_scales(t, axis, fmt))


def _broadcast_scales(t: np.ndarray, d: QuantDescriptor) -> np.ndarray:
    s = d.scales
    if d.axis == Axis.PER_TENSOR:
        return s.reshape((1,) * t.ndim)
    if t.ndim != 2:
        raise ShapeError(f"per-channel descriptor needs a 2D tensor, got shape {t.shape}")
    n = t.shape[0] if d.axis == Axis.PER_OUTPUT_CHANNEL else t.shape[1]
    if s.size != n:
        raise ShapeError(f"descriptor has {s.size} scales but tensor extent along {d.axis.name} is {n}")
    return s[:, None] if d.axis == Axis.PER_OUTPUT_CHANNEL else s[None, :]


def nearest_code(y: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Nearest entry of sorted ``codes`` for each ``y``, ties to the even index."""
    hi_idx = np.clip(np.searchsorted(codes, y), 1, codes.size - 1)
    lo = codes[hi_idx - 1]
    hi = codes[hi_idx]
    d_lo = np.abs(y - lo)
    d_hi = np.abs(y - hi)
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi_idx % 2 == 0))
    return np.where(take_hi, hi, lo)


def fake_quant(t, d: QuantDescriptor) -> np.ndarray:
    """Quantize-dequantize ``t`` under descriptor ``d`` (dynamic templates resolve first)."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise InputError("non-finite value in tensor")
    d = d.resolve(t)
    s = _broadcast_scales(t, d)
    c = nearest_code(t / s, d.format.codes)
    return s * c


def quant_error(t, d: QuantDescriptor) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.mean((t - fake_quant(t, d)) ** 2))
