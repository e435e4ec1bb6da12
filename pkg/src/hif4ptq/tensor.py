"""Dense 2D float64 arithmetic used by the pipeline.

Tensors are plain ``numpy.ndarray`` objects. Products go through
``np.einsum(..., optimize=False)`` instead of BLAS so every output element is
reduced in the same order regardless of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, MaskError, ShapeError


def as_tensor(t) -> np.ndarray:
    return np.ascontiguousarray(t, dtype=np.float64)


def as_2d(t) -> np.ndarray:
    """Flatten leading dimensions into a (tokens x channels) view."""
    t = as_tensor(t)
    if t.ndim == 1:
        return t.reshape(1, -1)
    return t.reshape(-1, t.shape[-1])


def matmul_bt(x, w, bias=None) -> np.ndarray:
    """``x @ w.T + bias`` for ``x[n, k]``, ``w[o, k]``."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"cannot multiply {x.shape} by transpose of {w.shape}")
    y = np.einsum("nk,ok->no", x, w, optimize=False)
    if bias is not None:
        bias = as_tensor(bias).reshape(-1)
        if bias.size != w.shape[0]:
            raise ShapeError(f"bias length {bias.size} != out features {w.shape[0]}")
        y = y + bias
    return y


def scale_columns(t, m, invert: bool = False) -> np.ndarray:
    t = as_tensor(t)
    m = as_tensor(m).reshape(-1)
    if t.ndim != 2 or m.size != t.shape[1]:
        raise MaskError(f"mask of length {m.size} does not match tensor {t.shape}")
    if not np.all(m > 0) or not np.all(np.isfinite(m)):
        raise MaskError("mask entries must be finite and strictly positive")
    return t / m if invert else t * m


def abs_max_over_axis(t, axis: int) -> np.ndarray:
    """Maximum of ``|t|`` reducing over ``axis`` (axis=0 gives one value per column)."""
    t = as_tensor(t)
    if t.size == 0:
        raise InputError("empty tensor")
    return np.abs(t).max(axis=axis)


@dataclass(frozen=True)
class Comparison:
    mse: float
    max_abs_err: float
    cosine: float

    def as_dict(self) -> dict:
        return {"mse": self.mse, "max_abs_err": self.max_abs_err, "cosine": self.cosine}


def compare(a, b) -> Comparison:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    mse = float(np.mean(diff**2)) if diff.size else 0.0
    max_abs = float(np.max(np.abs(diff))) if diff.size else 0.0
    na = float(np.sqrt(np.sum(a * a)))
    nb = float(np.sqrt(np.sum(b * b)))
    if (na == 0.0 and nb == 0.0) or np.array_equal(a, b):
        # Identical inputs: exactly 1 rather than 1 - ulp from rounding.
        cosine = 1.0
    elif na == 0.0 or nb == 0.0:
        cosine = 0.0
    else:
        cosine = min(1.0, max(-1.0, float(np.sum(a * b)) / (na * nb)))
    return Comparison(mse, max_abs, cosine)


def sqnr_db(reference, approx) -> float | None:
    """Signal-to-quantization-noise ratio in dB; ``None`` when the error is exactly zero."""
    reference = as_tensor(reference)
    noise = float(np.sum((reference - as_tensor(approx)) ** 2))
    if noise == 0.0:
        return None
    signal = float(np.sum(reference**2))
    if signal == 0.0:
        return float("-inf")
    return 10.0 * float(np.log10(signal / noise))
