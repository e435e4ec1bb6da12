"""PTQ run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .balance import DEFAULT_ALPHA, DEFAULT_EPSILON, StatKind
from .calib import LINEAR, PERCENTILE_METHODS
from .codec import Axis, Hif4Format
from .errors import ConfigError

MAX_RETAINED_BLOCKS = 2
# Dynamic activation scales are shared over the whole balanced activation tensor.
# Per-column scales would cancel the mask on the activation path.
DEFAULT_ACTIVATION_AXIS = Axis.PER_TENSOR


@dataclass(frozen=True)
class QuantConfig:
    percentile_p: float = 99.9
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    stat_kind: StatKind = StatKind.PERCENTILE
    format: Hif4Format = field(default_factory=Hif4Format)
    retained_block_budget: int = 0
    seed: int = 42
    percentile_method: str = LINEAR
    calib_cap: int | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stat_kind", StatKind.parse(self.stat_kind))
        object.__setattr__(self, "percentile_p", float(self.percentile_p))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if not (0.0 < self.percentile_p <= 100.0):
            raise ConfigError(f"percentile_p must lie in (0, 100], got {self.percentile_p}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not (0 <= self.retained_block_budget <= MAX_RETAINED_BLOCKS):
            raise ConfigError(
                f"retained_block_budget must be between 0 and {MAX_RETAINED_BLOCKS}, got {self.retained_block_budget}"
            )
        if self.percentile_method not in PERCENTILE_METHODS:
            raise ConfigError(f"percentile_method must be one of {PERCENTILE_METHODS}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def canonical(self) -> QuantConfig:
        """Collapse equivalent statistic settings.

        The max statistic is the 100th percentile under either percentile
        method, so both spellings map to ``stat_kind=max, percentile_p=100,
        percentile_method=linear``. Run-only knobs (``workers``) are reset.
        """
        cfg = replace(self, workers=1)
        if cfg.stat_kind == StatKind.MAX or cfg.percentile_p == 100.0:
            cfg = replace(cfg, stat_kind=StatKind.MAX, percentile_p=100.0, percentile_method=LINEAR)
        return cfg
