"""Toy two-stack transformer used as the base model.

Each stack mirrors the layout of a video diffusion transformer at tiny scale:

* boundary layers: ``patch_embedding``, ``condition_embedding.{j}`` (a chain
  applied to a fixed conditioning vector and added to the residual stream) and
  ``head``;
* blocks of pre-norm sublayers: self attention (``q, k, v, o``), cross attention
  (``q`` from the stream, ``k, v`` from the raw stack input, then ``o``) and a
  two-layer GELU feed-forward (``up``, ``down``).

Both stacks see every input batch; the model output is the two stack outputs
concatenated along the feature axis.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ShapeError
from .tensor import as_2d, matmul_bt


class Role(str, enum.Enum):
    ATTENTION = "attention-projection"
    FFN = "ffn-projection"
    PATCH_EMBEDDING = "patch-embedding"
    CONDITION_EMBEDDING = "condition-embedding"
    OUTPUT_HEAD = "output-head"


@dataclass(eq=False)
class Linear:
    name: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    role: Role = Role.ATTENTION

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"{self.name}: weight must be 2D")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.size != self.out_features:
                raise ShapeError(f"{self.name}: bias length {self.bias.size} != {self.out_features}")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class Block:
    name: str
    layers: dict[str, Linear]
    norm_gains: dict[str, np.ndarray]


@dataclass(eq=False)
class Stack:
    name: str
    blocks: list[Block]
    boundary: dict[str, Linear]
    condition: np.ndarray
    output_gain: np.ndarray


@dataclass(eq=False)
class ModelSpec:
    stacks: list[Stack] = field(default_factory=list)

    def __post_init__(self):
        names = [layer.name for layer in self.linear_layers()]
        if len(names) != len(set(names)):
            raise ValueError("layer names must be globally unique")

    def linear_layers(self) -> Iterator[Linear]:
        """All linear layers in model order: per stack, boundary then block layers."""
        for stack in self.stacks:
            yield from stack.boundary.values()
            for block in stack.blocks:
                yield from block.layers.values()

    def layer_map(self) -> dict[str, Linear]:
        return {layer.name: layer for layer in self.linear_layers()}

    def weight_bytes(self) -> int:
        return sum(layer.weight.nbytes for layer in self.linear_layers())

    def digest(self) -> int:
        """64-bit BLAKE2b digest over names, weights and biases of every linear layer."""
        h = hashlib.blake2b(digest_size=8)
        for layer in self.linear_layers():
            h.update(layer.name.encode("utf-8") + b"\0")
            h.update(layer.weight.astype("<f8").tobytes())
            if layer.bias is not None:
                h.update(layer.bias.astype("<f8").tobytes())
        return int.from_bytes(h.digest(), "little")

    def copy(self) -> ModelSpec:
        def cp(layer: Linear) -> Linear:
            return Linear(layer.name, layer.weight.copy(), None if layer.bias is None else layer.bias.copy(), layer.role)

        stacks = []
        for s in self.stacks:
            blocks = [
                Block(b.name, {k: cp(v) for k, v in b.layers.items()}, {k: v.copy() for k, v in b.norm_gains.items()})
                for b in s.blocks
            ]
            stacks.append(
                Stack(s.name, blocks, {k: cp(v) for k, v in s.boundary.items()}, s.condition.copy(), s.output_gain.copy())
            )
        return ModelSpec(stacks)


LinearFn = Callable[[Linear, np.ndarray], np.ndarray]


def fp_linear(layer: Linear, x: np.ndarray) -> np.ndarray:
    return matmul_bt(x, layer.weight, layer.bias)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    p = softmax(matmul_bt(q, k) / np.sqrt(q.shape[1]))
    return matmul_bt(p, np.ascontiguousarray(v.T))


def _block_forward(block: Block, h: np.ndarray, ctx: np.ndarray, linear: LinearFn) -> np.ndarray:
    L, g = block.layers, block.norm_gains
    n = rms_norm(h, g["norm1"])
    a = attention(linear(L["self_attn.q"], n), linear(L["self_attn.k"], n), linear(L["self_attn.v"], n))
    h = h + linear(L["self_attn.o"], a)
    if "cross_attn.q" in L:
        n = rms_norm(h, g["norm2"])
        a = attention(linear(L["cross_attn.q"], n), linear(L["cross_attn.k"], ctx), linear(L["cross_attn.v"], ctx))
        h = h + linear(L["cross_attn.o"], a)
    n = rms_norm(h, g["norm3"])
    return h + linear(L["ffn.down"], gelu(linear(L["ffn.up"], n)))


def stack_forward(stack: Stack, x: np.ndarray, linear: LinearFn = fp_linear) -> np.ndarray:
    x = as_2d(x)
    h = linear(stack.boundary["patch_embedding"], x)
    cond_layers = [l for l in stack.boundary.values() if l.role == Role.CONDITION_EMBEDDING]
    if cond_layers:
        c = stack.condition.reshape(1, -1)
        for layer in cond_layers:
            c = silu(linear(layer, c))
        h = h + c
    for block in stack.blocks:
        h = _block_forward(block, h, x, linear)
    return linear(stack.boundary["head"], rms_norm(h, stack.output_gain))


def forward(model: ModelSpec, x, linear: LinearFn = fp_linear) -> np.ndarray:
    """Full-precision (or, with a custom ``linear``, quantized) forward pass."""
    x = as_2d(x)
    return np.concatenate([stack_forward(s, x, linear) for s in model.stacks], axis=1)
