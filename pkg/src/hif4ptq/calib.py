"""Per-channel absolute-activation sample stores with max and percentile queries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AccumulatorError, ConfigError, CoverageError

LINEAR = "linear"
NEAREST_RANK = "nearest-rank"
PERCENTILE_METHODS = (LINEAR, NEAREST_RANK)


def _check_p(p: float) -> float:
    p = float(p)
    if not (0.0 < p <= 100.0):
        raise ConfigError(f"percentile must lie in (0, 100], got {p}")
    return p


def interpolated_rank(p: float, n: int) -> float:
    return (p / 100.0) * (n - 1)


def percentile_of_sorted(sorted_samples: np.ndarray, p: float, method: str = LINEAR) -> np.ndarray:
    """Percentile along axis 0 of samples already sorted ascending along that axis.

    ``linear`` interpolates between ranks ``floor(r)`` and ``ceil(r)`` with
    ``r = p/100 * (n-1)``; the result is clamped to that bracket so rounding can
    never break monotonicity in ``p``. ``nearest-rank`` returns the
    ``ceil(p/100 * n)``-th smallest sample.
    """
    n = sorted_samples.shape[0]
    if method == NEAREST_RANK:
        k = max(1, math.ceil(p / 100.0 * n))
        return sorted_samples[k - 1].copy()
    if method != LINEAR:
        raise ConfigError(f"unknown percentile method {method!r}")
    r = interpolated_rank(p, n)
    f = math.floor(r)
    c = min(math.ceil(r), n - 1)
    lo = sorted_samples[f]
    if c == f:
        return lo.copy()
    hi = sorted_samples[c]
    v = lo + (hi - lo) * (r - f)
    return np.minimum(np.maximum(v, lo), hi)


@dataclass(eq=False)
class ActivationAccumulator:
    """Absolute input activations of one layer, one column per input channel.

    Every observed batch contributes whole token rows, so all channels hold the
    same number of samples. With ``cap`` set, rows are kept by reservoir sampling
    (Algorithm R); the replacement draws for stream position ``t`` come from
    ``default_rng([seed, t])`` so results do not depend on how the stream was
    batched into ``observe`` calls.
    """

    layer_name: str
    num_channels: int
    cap: int | None = None
    seed: int = 0
    observed: int = 0
    _chunks: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.cap is not None and self.cap < 1:
            raise ConfigError("cap must be a positive integer or None")

    @property
    def observed_count(self) -> np.ndarray:
        return np.full(self.num_channels, self.observed, dtype=np.int64)

    @property
    def samples(self) -> np.ndarray:
        """Retained samples as a ``[n, num_channels]`` array."""
        if not self._chunks:
            return np.zeros((0, self.num_channels))
        if len(self._chunks) > 1:
            self._chunks = [np.concatenate(self._chunks, axis=0)]
        return self._chunks[0]

    @property
    def retained(self) -> int:
        return sum(c.shape[0] for c in self._chunks)

    def observe(self, batch) -> ActivationAccumulator:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch.reshape(1, -1)
        batch = batch.reshape(-1, batch.shape[-1])
        if batch.shape[1] != self.num_channels:
            raise AccumulatorError(
                f"{self.layer_name}: batch has {batch.shape[1]} channels, expected {self.num_channels}"
            )
        self._ingest(np.abs(batch))
        return self

    def _ingest(self, rows: np.ndarray) -> None:
        if self.cap is None:
            if rows.shape[0]:
                self._chunks.append(rows.copy())
            self.observed += rows.shape[0]
            return
        free = max(0, self.cap - self.retained)
        head = rows[:free]
        if head.shape[0]:
            self._chunks.append(head.copy())
        self.observed += head.shape[0]
        rest = rows[free:]
        if rest.shape[0] == 0:
            return
        store = self.samples.copy()
        for row in rest:
            j = int(np.random.default_rng([self.seed, self.observed]).integers(0, self.observed + 1))
            if j < self.cap:
                store[j] = row
            self.observed += 1
        self._chunks = [store]

    def sorted_samples(self) -> np.ndarray:
        s = self.samples
        if s.shape[0] == 0:
            raise CoverageError(f"layer {self.layer_name!r} has channels with no calibration samples", self.layer_name)
        return np.sort(s, axis=0)

    def max_stat(self) -> np.ndarray:
        s = self.samples
        if s.shape[0] == 0:
            raise CoverageError(f"layer {self.layer_name!r} has channels with no calibration samples", self.layer_name)
        return s.max(axis=0)

    def percentile(self, p: float, method: str = LINEAR) -> np.ndarray:
        p = _check_p(p)
        return percentile_of_sorted(self.sorted_samples(), p, method)

    def clipped_fraction(self, threshold) -> np.ndarray:
        """Per-channel fraction of retained samples strictly above ``threshold``."""
        s = self.samples
        if s.shape[0] == 0:
            raise CoverageError(f"layer {self.layer_name!r} has no samples", self.layer_name)
        return (s > np.asarray(threshold)).mean(axis=0)

    def copy(self) -> ActivationAccumulator:
        out = ActivationAccumulator(self.layer_name, self.num_channels, self.cap, self.seed, self.observed)
        if self._chunks:
            out._chunks = [self.samples.copy()]
        return out

    def __eq__(self, other):
        if not isinstance(other, ActivationAccumulator):
            return NotImplemented
        return (
            (self.layer_name, self.num_channels, self.cap, self.seed, self.observed)
            == (other.layer_name, other.num_channels, other.cap, other.seed, other.observed)
            and np.array_equal(self.samples, other.samples)
        )


def observe(acc: ActivationAccumulator, batch) -> ActivationAccumulator:
    return acc.observe(batch)


def max_stat(acc: ActivationAccumulator) -> np.ndarray:
    return acc.max_stat()


def percentile(acc: ActivationAccumulator, p: float, method: str = LINEAR) -> np.ndarray:
    return acc.percentile(p, method)


def merge(a: ActivationAccumulator, b: ActivationAccumulator) -> ActivationAccumulator:
    """Pool two accumulators of the same layer.

    Uncapped: concatenation. Capped: ``b``'s retained rows are streamed into a
    copy of ``a`` by the same reservoir rule; the observed count is the sum.
    """
    if (a.layer_name, a.num_channels) != (b.layer_name, b.num_channels):
        raise AccumulatorError(
            f"cannot merge {a.layer_name!r}[{a.num_channels}] with {b.layer_name!r}[{b.num_channels}]"
        )
    if a.cap != b.cap:
        raise AccumulatorError("cannot merge accumulators with different caps")
    out = a.copy()
    if b.retained:
        out._ingest(b.samples)
    out.observed = a.observed + b.observed
    return out
