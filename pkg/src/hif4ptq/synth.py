"""Seeded generators for toy-model weights and heavy-tailed activations.

All randomness comes from numpy's PCG64 via ``np.random.default_rng`` seeded
with an integer list ``[seed, stream, index]``, so each batch or layer is a pure
function of its coordinates and can be generated in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import Block, Linear, ModelSpec, Role, Stack

KINDS = ("gaussian", "lognormal", "student-t", "gaussian-with-spikes")

# Stream ids keep weight, calibration and evaluation draws disjoint.
STREAM_WEIGHTS = 0
STREAM_CALIB = 1
STREAM_EVAL = 2

PATCH_NOISE = 0.1


@dataclass
class DistributionSpec:
    kind: str = "gaussian-with-spikes"
    scale: float = 1.0
    dof: float = 3.0
    sigma: float = 1.0  # lognormal shape
    spike_rate: float = 1e-3
    spike_magnitude: float = 20.0
    per_channel_scale: list[float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        if not self.scale > 0:
            raise ConfigError("scale must be positive")
        if not self.dof > 0:
            raise ConfigError("dof must be positive")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not (0.0 <= self.spike_rate <= 1.0):
            raise ConfigError("spike_rate must lie in [0, 1]")
        if self.spike_magnitude < 0:
            raise ConfigError("spike_magnitude must be non-negative")
        if self.per_channel_scale is not None:
            pcs = np.asarray(self.per_channel_scale, dtype=np.float64)
            if pcs.ndim != 1 or not np.all(pcs > 0):
                raise ConfigError("per_channel_scale must be a vector of positive reals")
            self.per_channel_scale = [float(v) for v in pcs]


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])


def gen_batch(spec: DistributionSpec, tokens: int, channels: int, index: int = 0, stream: int = STREAM_CALIB) -> np.ndarray:
    """One ``[tokens, channels]`` batch; deterministic in (spec, tokens, channels, index, stream)."""
    if tokens <= 0 or channels <= 0:
        raise ConfigError("tokens and channels must be positive")
    rng = _rng(spec.seed, stream, index)
    base = np.full(channels, spec.scale)
    if spec.per_channel_scale is not None:
        if len(spec.per_channel_scale) != channels:
            raise ConfigError(f"per_channel_scale has {len(spec.per_channel_scale)} entries, need {channels}")
        base = base * np.asarray(spec.per_channel_scale)
    shape = (tokens, channels)
    if spec.kind in ("gaussian", "gaussian-with-spikes"):
        x = rng.standard_normal(shape)
    elif spec.kind == "lognormal":
        x = rng.lognormal(0.0, spec.sigma, shape) * rng.choice([-1.0, 1.0], shape)
    else:
        x = rng.standard_t(spec.dof, shape)
    x = x * base
    if spec.kind == "gaussian-with-spikes" and spec.spike_rate > 0:
        hit = rng.random(shape) < spec.spike_rate
        sign = rng.choice([-1.0, 1.0], shape)
        x = np.where(hit, sign * spec.spike_magnitude * base, x)
    return x


def gen_batches(spec: DistributionSpec, count: int, tokens: int, channels: int, stream: int = STREAM_CALIB) -> list[np.ndarray]:
    return [gen_batch(spec, tokens, channels, i, stream) for i in range(count)]


def _linear(rng: np.random.Generator, name: str, out_f: int, in_f: int, role: Role) -> Linear:
    w = rng.standard_normal((out_f, in_f)) / np.sqrt(in_f)
    b = 0.02 * rng.standard_normal(out_f)
    return Linear(name, w, b, role)


def _gains(rng: np.random.Generator, width: int) -> np.ndarray:
    return rng.lognormal(0.0, 0.5, width)


def gen_toy_model(
    blocks: int = 4,
    width: int = 128,
    boundary: int = 6,
    seed: int = 42,
    cross_attention: bool = True,
    ffn_mult: int = 2,
    stacks: int = 2,
) -> ModelSpec:
    """Two transformer stacks with ``blocks`` blocks and ``boundary`` boundary layers each.

    A block has 10 projections (6 without cross attention); ``boundary`` must be
    at least 2 (patch embedding and head).
    """
    if blocks < 0 or width <= 0 or ffn_mult <= 0 or stacks <= 0:
        raise ConfigError("blocks must be >= 0; width, ffn_mult and stacks positive")
    if boundary < 2:
        raise ConfigError("boundary must be >= 2 (patch embedding and head)")
    hidden = ffn_mult * width
    out = []
    for s in range(stacks):
        prefix = f"transformer_{s + 1}"
        rng = _rng(seed, STREAM_WEIGHTS, s, 0)
        patch = _linear(rng, f"{prefix}.patch_embedding", width, width, Role.PATCH_EMBEDDING)
        # Near-identity embedding keeps input outliers channel-aligned in the residual stream.
        patch.weight = np.eye(width) + PATCH_NOISE * patch.weight
        bnd = {"patch_embedding": patch}
        for j in range(boundary - 2):
            name = f"condition_embedding.{j}"
            bnd[name] = _linear(rng, f"{prefix}.{name}", width, width, Role.CONDITION_EMBEDDING)
        bnd["head"] = _linear(rng, f"{prefix}.head", width, width, Role.OUTPUT_HEAD)
        condition = rng.standard_normal(width)
        output_gain = _gains(rng, width)
        blks = []
        for b in range(blocks):
            rng = _rng(seed, STREAM_WEIGHTS, s, b + 1)
            bp = f"{prefix}.blocks.{b}"
            layers = {}
            attn = ["self_attn"] + (["cross_attn"] if cross_attention else [])
            for a in attn:
                for p in "qkvo":
                    layers[f"{a}.{p}"] = _linear(rng, f"{bp}.{a}.{p}", width, width, Role.ATTENTION)
            layers["ffn.up"] = _linear(rng, f"{bp}.ffn.up", hidden, width, Role.FFN)
            layers["ffn.down"] = _linear(rng, f"{bp}.ffn.down", width, hidden, Role.FFN)
            gains = {n: _gains(rng, width) for n in ("norm1", "norm2", "norm3")}
            blks.append(Block(bp, layers, gains))
        out.append(Stack(prefix, blks, bnd, condition, output_gain))
    return ModelSpec(out)
