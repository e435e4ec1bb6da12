"""JSON run configuration shared by every CLI command."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, replace

from .codec import Axis, Hif4Format
from .config import QuantConfig
from .errors import ConfigError
from .synth import DistributionSpec

DEFAULTS = {
    "seed": 42,
    "model": {"blocks": 4, "width": 128, "boundary": 6, "cross_attention": True, "ffn_mult": 2},
    "data": {
        "kind": "gaussian-with-spikes",
        "scale": 1.0,
        "dof": 3.0,
        "sigma": 1.0,
        "spike_rate": 1e-3,
        "spike_magnitude": 20.0,
        "per_channel_scale": None,
    },
    "calibration": {"batches": 16, "tokens": 64, "cap": None},
    "evaluation": {"batches": 4, "tokens": 64, "spike_rate": 0.0},
    "quant": {
        "stat": "percentile",
        "percentile": 99.9,
        "percentile_method": "linear",
        "alpha": 0.5,
        "epsilon": 1e-8,
        "exponent_bits": 2,
        "mantissa_bits": 1,
        "retained_blocks": 0,
        "activation_axis": "per-tensor",
        "workers": 1,
    },
    "io": {"calib": "calib.taq4", "state": "state.taq4", "report": None},
    "report": "text",
}

AXES = {"per-output-channel": Axis.PER_OUTPUT_CHANNEL, "per-feature-channel": Axis.PER_FEATURE_CHANNEL, "per-tensor": Axis.PER_TENSOR}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> RunConfig:
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    user = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(user, dict):
                raise ConfigError("config file must hold a JSON object")
            cfg = _merge(cfg, user)
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.rpartition(".")
            target = cfg[section] if section else cfg
            target[key] = value
        rc = cls(cfg)
        rc.validate()
        return rc

    def validate(self) -> None:
        self.quant_config()
        self.distribution()
        for section in ("calibration", "evaluation"):
            if self.raw[section]["tokens"] <= 0 or self.raw[section]["batches"] < 0:
                raise ConfigError(f"{section}: tokens must be positive and batches non-negative")
        if self.raw["report"] not in ("text", "json"):
            raise ConfigError("report must be 'text' or 'json'")
        self.activation_axis()

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def model_kwargs(self) -> dict:
        return dict(self.raw["model"], seed=self.seed)

    def distribution(self, stream_overrides: dict | None = None) -> DistributionSpec:
        spec = DistributionSpec(**self.raw["data"], seed=self.seed)
        return replace(spec, **(stream_overrides or {}))

    def eval_distribution(self) -> DistributionSpec:
        rate = self.raw["evaluation"]["spike_rate"]
        return self.distribution({} if rate is None else {"spike_rate": rate})

    def activation_axis(self) -> Axis:
        name = self.raw["quant"]["activation_axis"]
        if name not in AXES:
            raise ConfigError(f"activation_axis must be one of {sorted(AXES)}")
        return AXES[name]

    def quant_config(self) -> QuantConfig:
        q = self.raw["quant"]
        try:
            return QuantConfig(
                percentile_p=q["percentile"],
                alpha=q["alpha"],
                epsilon=q["epsilon"],
                stat_kind=q["stat"],
                format=Hif4Format(q["exponent_bits"], q["mantissa_bits"]),
                retained_block_budget=q["retained_blocks"],
                seed=self.seed,
                percentile_method=q["percentile_method"],
                calib_cap=self.raw["calibration"]["cap"],
                workers=q["workers"],
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
