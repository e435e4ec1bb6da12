"""Compact PTQ state and calibration checkpoint files.

Both share one envelope: magic ``TAQ4``, a u32 version, a u8 record kind,
a kind-specific body, and a trailing u64 BLAKE2b-64 digest of every preceding
byte. All integers and floats are little-endian. The full byte layout is in
``docs/state_format.md``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .balance import ChannelMask, StatKind
from .calib import PERCENTILE_METHODS, ActivationAccumulator
from .codec import Axis, Hif4Format, QuantDescriptor, Rounding
from .config import DEFAULT_ACTIVATION_AXIS, QuantConfig
from .errors import CorruptionError, StateFormatError, UnsupportedVersionError

MAGIC = b"TAQ4"
VERSION = 1
KIND_PTQ = 0
KIND_CALIB = 1

_ENVELOPE = struct.Struct("<4sIB")
# base digest, p, alpha, eps, stat, method, format code, act axis, budget, seed
_PTQ_HEADER = struct.Struct("<QdddBBBBIq")
_CALIB_HEADER = struct.Struct("<QqI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DIGEST = struct.Struct("<Q")
_RECORD_DIMS = struct.Struct("<II")
_RECORD_TAIL = struct.Struct("<BBBQ")


def digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def weight_checksum(w: np.ndarray) -> int:
    """Digest of the canonical encoding: row-major little-endian float64."""
    return digest64(np.ascontiguousarray(w, dtype="<f8").tobytes())


@dataclass(eq=False)
class LayerQuantState:
    layer_name: str
    mask: ChannelMask
    weight_descriptor: QuantDescriptor
    activation_descriptor: QuantDescriptor
    checksum: int

    @property
    def in_features(self) -> int:
        return len(self.mask)

    @property
    def out_features(self) -> int:
        return self.weight_descriptor.scales.size

    def __eq__(self, other):
        if not isinstance(other, LayerQuantState):
            return NotImplemented
        return (
            self.layer_name == other.layer_name
            and self.mask == other.mask
            and self.weight_descriptor == other.weight_descriptor
            and self.activation_descriptor == other.activation_descriptor
            and self.checksum == other.checksum
        )


@dataclass(eq=False)
class PtqState:
    base_model_digest: int
    config: QuantConfig
    records: list[LayerQuantState] = field(default_factory=list)
    act_axis: Axis = DEFAULT_ACTIVATION_AXIS
    version: int = VERSION

    def __post_init__(self):
        self.records = sorted(self.records, key=lambda r: r.layer_name)
        names = [r.layer_name for r in self.records]
        if len(names) != len(set(names)):
            raise ValueError("duplicate layer records")
        if any(r.activation_descriptor.axis != self.act_axis for r in self.records):
            raise ValueError("record activation axis differs from the state's activation axis")

    def record_map(self) -> dict[str, LayerQuantState]:
        return {r.layer_name: r for r in self.records}

    def __eq__(self, other):
        if not isinstance(other, PtqState):
            return NotImplemented
        return (
            self.version == other.version
            and self.base_model_digest == other.base_model_digest
            and self.config == other.config
            and self.act_axis == other.act_axis
            and self.records == other.records
        )


def _f64(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _seal(kind: int, body: bytes) -> bytes:
    head = _ENVELOPE.pack(MAGIC, VERSION, kind) + body
    return head + _DIGEST.pack(digest64(head))


def serialize(state: PtqState) -> bytes:
    cfg = state.config
    parts = [
        _PTQ_HEADER.pack(
            state.base_model_digest,
            cfg.percentile_p,
            cfg.alpha,
            cfg.epsilon,
            int(cfg.stat_kind),
            PERCENTILE_METHODS.index(cfg.percentile_method),
            cfg.format.code,
            int(state.act_axis),
            cfg.retained_block_budget,
            cfg.seed,
        ),
        _U32.pack(len(state.records)),
    ]
    for r in state.records:
        name = r.layer_name.encode("utf-8")
        parts.append(_U32.pack(len(name)) + name)
        parts.append(_RECORD_DIMS.pack(r.in_features, r.out_features))
        parts.append(_f64(r.mask.mask))
        parts.append(_f64(r.weight_descriptor.scales))
        parts.append(
            _RECORD_TAIL.pack(r.weight_descriptor.format.code, int(r.weight_descriptor.rounding), int(r.mask.stat_kind), r.checksum)
        )
    return _seal(KIND_PTQ, b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptionError("file is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def _open(data: bytes, kind: int) -> _Reader:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise StateFormatError("bad magic: not a TAQ4 file")
    if len(data) < _ENVELOPE.size + _DIGEST.size:
        raise CorruptionError("file is truncated")
    _, version, file_kind = _ENVELOPE.unpack_from(data, 0)
    (stored,) = _DIGEST.unpack_from(data, len(data) - _DIGEST.size)
    if digest64(data[: -_DIGEST.size]) != stored:
        raise CorruptionError("file digest mismatch (corrupted or truncated)")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}; this build reads version {VERSION}")
    if file_kind != kind:
        raise StateFormatError(f"record kind {file_kind} where {kind} was expected")
    return _Reader(data[: -_DIGEST.size], _ENVELOPE.size)


def _enum(enum_cls, value, what):
    try:
        return enum_cls(value)
    except ValueError:
        raise StateFormatError(f"invalid {what} code {value}") from None


def _format(code: int) -> Hif4Format:
    try:
        return Hif4Format.from_code(code)
    except ValueError:
        raise StateFormatError(f"invalid format code {code:#x}") from None


def deserialize(data: bytes) -> PtqState:
    rd = _open(data, KIND_PTQ)
    digest, p, alpha, eps, stat, method, fmt_code, act_axis, budget, seed = rd.unpack(_PTQ_HEADER)
    if method >= len(PERCENTILE_METHODS):
        raise StateFormatError(f"invalid percentile method code {method}")
    try:
        cfg = QuantConfig(
            percentile_p=p,
            alpha=alpha,
            epsilon=eps,
            stat_kind=_enum(StatKind, stat, "statistic"),
            format=_format(fmt_code),
            retained_block_budget=budget,
            seed=seed,
            percentile_method=PERCENTILE_METHODS[method],
        )
    except ValueError as exc:
        raise StateFormatError(f"invalid config echo: {exc}") from None
    axis = _enum(Axis, act_axis, "axis")
    (count,) = rd.unpack(_U32)
    records = []
    for _ in range(count):
        (n,) = rd.unpack(_U32)
        try:
            name = rd.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise StateFormatError("layer name is not valid UTF-8") from None
        k, o = rd.unpack(_RECORD_DIMS)
        mask = rd.f64(k)
        scales = rd.f64(o)
        rec_fmt, rounding, rec_stat, checksum = rd.unpack(_RECORD_TAIL)
        fmt = _format(rec_fmt)
        try:
            records.append(
                LayerQuantState(
                    name,
                    ChannelMask(mask, alpha, eps, _enum(StatKind, rec_stat, "statistic"), p),
                    QuantDescriptor(Axis.PER_OUTPUT_CHANNEL, fmt, scales, _enum(Rounding, rounding, "rounding")),
                    QuantDescriptor(axis, fmt),
                    checksum,
                )
            )
        except ValueError as exc:
            raise StateFormatError(f"invalid record {name!r}: {exc}") from None
    if rd.pos != len(rd.data):
        raise StateFormatError("trailing bytes after last record")
    try:
        return PtqState(digest, cfg, records, axis)
    except ValueError as exc:
        raise StateFormatError(str(exc)) from None


@dataclass(eq=False)
class CalibrationCheckpoint:
    base_model_digest: int
    seed: int
    accumulators: dict[str, ActivationAccumulator]
    cap: int | None = None


def serialize_calibration(ckpt: CalibrationCheckpoint) -> bytes:
    for name, acc in ckpt.accumulators.items():
        if (acc.layer_name, acc.seed, acc.cap) != (name, ckpt.seed, ckpt.cap):
            raise ValueError(f"accumulator {name!r} does not match the checkpoint seed/cap")
    parts = [_CALIB_HEADER.pack(ckpt.base_model_digest, ckpt.seed, ckpt.cap or 0), _U32.pack(len(ckpt.accumulators))]
    for name in sorted(ckpt.accumulators):
        acc = ckpt.accumulators[name]
        raw = name.encode("utf-8")
        s = acc.samples
        parts.append(_U32.pack(len(raw)) + raw)
        parts.append(_RECORD_DIMS.pack(acc.num_channels, s.shape[0]))
        parts.append(_U64.pack(acc.observed))
        parts.append(_f64(s))
    return _seal(KIND_CALIB, b"".join(parts))


def deserialize_calibration(data: bytes) -> CalibrationCheckpoint:
    rd = _open(data, KIND_CALIB)
    digest, seed, cap = rd.unpack(_CALIB_HEADER)
    cap = cap or None
    (count,) = rd.unpack(_U32)
    accs = {}
    for _ in range(count):
        (n,) = rd.unpack(_U32)
        try:
            name = rd.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise StateFormatError("layer name is not valid UTF-8") from None
        k, rows = rd.unpack(_RECORD_DIMS)
        (observed,) = rd.unpack(_U64)
        samples = rd.f64(k * rows).reshape(rows, k)
        acc = ActivationAccumulator(name, k, cap, seed, observed)
        if rows:
            acc._chunks = [samples]
        accs[name] = acc
    if rd.pos != len(rd.data):
        raise StateFormatError("trailing bytes after last record")
    return CalibrationCheckpoint(digest, seed, accs, cap)


def write_bytes(path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)


def read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()
