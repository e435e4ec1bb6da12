"""SmoothQuant-style per-input-channel masks.

For input channel ``i`` with weight statistic ``w_i`` and activation statistic
``a_i`` the mask is ``m_i = w_i**alpha / (a_i + eps)**(1 - alpha)``. Activations
are multiplied by the mask and weights divided by it, so ``x @ W.T`` is
unchanged before quantization. Channels whose weight column is entirely zero
get ``m_i = 1`` to keep the diagonal invertible.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, MaskError
from .tensor import abs_max_over_axis, as_tensor, scale_columns

DEFAULT_ALPHA = 0.5
DEFAULT_EPSILON = 1e-8


class StatKind(enum.IntEnum):
    MAX = 0
    PERCENTILE = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> StatKind:
        if isinstance(value, StatKind):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown statistic {value!r}; expected 'max' or 'percentile'") from None
        return cls(value)


@dataclass(eq=False)
class ChannelMask:
    mask: np.ndarray
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    stat_kind: StatKind = StatKind.PERCENTILE
    percentile_p: float = 100.0

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(self.mask)) and np.all(self.mask > 0)):
            raise MaskError("mask entries must be finite and strictly positive")
        self.stat_kind = StatKind.parse(self.stat_kind)

    def __len__(self):
        return self.mask.size

    def __eq__(self, other):
        if not isinstance(other, ChannelMask):
            return NotImplemented
        return (self.alpha, self.epsilon, self.stat_kind, self.percentile_p) == (
            other.alpha,
            other.epsilon,
            other.stat_kind,
            other.percentile_p,
        ) and np.array_equal(self.mask, other.mask)

    @classmethod
    def unit(cls, k: int) -> ChannelMask:
        return cls(np.ones(k))


def weight_stat(w) -> np.ndarray:
    """Per-input-channel max |W[o, i]| over output channels."""
    w = as_tensor(w)
    if w.ndim != 2:
        raise InputError(f"weight must be 2D, got shape {w.shape}")
    return abs_max_over_axis(w, axis=0)


def mask_values(w_stat, a_stat, alpha: float, epsilon: float) -> np.ndarray:
    w_stat = as_tensor(w_stat).reshape(-1)
    a_stat = as_tensor(a_stat).reshape(-1)
    if w_stat.shape != a_stat.shape:
        raise MaskError(f"statistic lengths differ: {w_stat.size} vs {a_stat.size}")
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if np.any(w_stat < 0) or np.any(a_stat < 0):
        raise InputError("statistics must be non-negative")
    with np.errstate(divide="ignore"):
        m = np.power(w_stat, alpha) / np.power(a_stat + epsilon, 1.0 - alpha)
    return np.where(w_stat == 0.0, 1.0, m)


def build_mask(
    w_stat,
    a_stat,
    alpha: float = DEFAULT_ALPHA,
    epsilon: float = DEFAULT_EPSILON,
    stat_kind=StatKind.PERCENTILE,
    percentile_p: float = 100.0,
) -> ChannelMask:
    return ChannelMask(mask_values(w_stat, a_stat, alpha, epsilon), alpha, epsilon, stat_kind, percentile_p)


def _mask_array(mask) -> np.ndarray:
    return mask.mask if isinstance(mask, ChannelMask) else as_tensor(mask).reshape(-1)


def balance_weights(w, mask) -> np.ndarray:
    """``W diag(m)^-1``."""
    return scale_columns(w, _mask_array(mask), invert=True)


def balance_activations(x, mask) -> np.ndarray:
    """``x diag(m)``."""
    return scale_columns(x, _mask_array(mask))
