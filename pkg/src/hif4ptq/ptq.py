"""Layer selection, calibration, layer-wise PTQ, state application and evaluation."""

from __future__ import annotations

import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .balance import StatKind, balance_activations, balance_weights, build_mask, weight_stat
from .calib import ActivationAccumulator
from .codec import Axis, QuantDescriptor, fake_quant, make_descriptor
from .config import DEFAULT_ACTIVATION_AXIS, QuantConfig
from .errors import ConfigError, CoverageError, IntegrityError, ShapeError, StateError
from .model import Linear, ModelSpec, Role, forward, fp_linear
from .state import LayerQuantState, PtqState, weight_checksum
from .tensor import as_2d, compare, matmul_bt, sqnr_db

BLOCK_ROLES = (Role.ATTENTION, Role.FFN)


@dataclass(frozen=True)
class Partition:
    quantize: tuple[str, ...]
    retain: tuple[str, ...]
    retained_blocks: tuple[str, ...] = ()

    def counts(self, model: ModelSpec) -> list[dict]:
        """Per-stack layer accounting: quantized linears, FP linears, FP blocks."""
        q = set(self.quantize)
        rows = []
        for stack in model.stacks:
            names = [l.name for l in stack.boundary.values()] + [l.name for b in stack.blocks for l in b.layers.values()]
            rows.append(
                {
                    "module": stack.name,
                    "quantized_linear": sum(n in q for n in names),
                    "fp_linear": sum(n not in q for n in names),
                    "fp_blocks": sum(b.name in self.retained_blocks for b in stack.blocks),
                }
            )
        return rows


def select_layers(model: ModelSpec, config: QuantConfig) -> Partition:
    """Quantize block projections, retain boundary layers and budgeted blocks.

    Retained blocks are taken stack by stack from the front of each block list
    until the budget runs out.
    """
    if not (0 <= config.retained_block_budget <= 2):
        raise ConfigError("retained_block_budget must be between 0 and 2")
    budget = config.retained_block_budget
    retained_blocks = []
    for stack in model.stacks:
        for block in stack.blocks:
            if len(retained_blocks) < budget:
                retained_blocks.append(block.name)
    keep = set(retained_blocks)
    quantize, retain = [], []
    for stack in model.stacks:
        retain.extend(l.name for l in stack.boundary.values())
        for block in stack.blocks:
            for layer in block.layers.values():
                if block.name in keep or layer.role not in BLOCK_ROLES:
                    retain.append(layer.name)
                else:
                    quantize.append(layer.name)
    return Partition(tuple(quantize), tuple(retain), tuple(retained_blocks))


def calibrate(
    model: ModelSpec,
    calib_batches: Iterable,
    config: QuantConfig,
    partition: Partition | None = None,
) -> dict[str, ActivationAccumulator]:
    """Run the full-precision model over ``calib_batches`` recording inputs of quantize-partition layers."""
    partition = partition or select_layers(model, config)
    layers = model.layer_map()
    accs = {
        name: ActivationAccumulator(name, layers[name].in_features, config.calib_cap, config.seed)
        for name in partition.quantize
    }

    def hooked(layer: Linear, x: np.ndarray) -> np.ndarray:
        acc = accs.get(layer.name)
        if acc is not None:
            acc.observe(x)
        return fp_linear(layer, x)

    for batch in calib_batches:
        forward(model, batch, hooked)
    for name, acc in accs.items():
        if acc.retained == 0:
            raise CoverageError(f"layer {name!r} received no calibration samples", name)
    return accs


def activation_stat(acc: ActivationAccumulator, config: QuantConfig) -> np.ndarray:
    cfg = config.canonical()
    if cfg.stat_kind == StatKind.MAX:
        return acc.max_stat()
    return acc.percentile(cfg.percentile_p, cfg.percentile_method)


@dataclass(eq=False)
class QuantizedLinear:
    layer: Linear
    state: LayerQuantState
    weight_hat: np.ndarray

    @property
    def name(self) -> str:
        return self.layer.name


def quantize_layer(layer: Linear, acc: ActivationAccumulator, config: QuantConfig, act_axis: Axis) -> QuantizedLinear:
    cfg = config.canonical()
    mask = build_mask(weight_stat(layer.weight), activation_stat(acc, cfg), cfg.alpha, cfg.epsilon, cfg.stat_kind, cfg.percentile_p)
    w_bal = balance_weights(layer.weight, mask)
    desc = make_descriptor(w_bal, Axis.PER_OUTPUT_CHANNEL, cfg.format)
    w_hat = fake_quant(w_bal, desc)
    record = LayerQuantState(layer.name, mask, desc, QuantDescriptor(act_axis, cfg.format), weight_checksum(w_hat))
    return QuantizedLinear(layer, record, w_hat)


def ptq_pipeline(
    model: ModelSpec,
    stats: dict[str, ActivationAccumulator],
    config: QuantConfig,
    act_axis: Axis = DEFAULT_ACTIVATION_AXIS,
) -> tuple[PtqState, QuantizedModel]:
    """Layer-wise PTQ returning the compact state and the in-memory quantized view."""
    partition = select_layers(model, config)
    wanted = set(partition.quantize)
    missing = wanted - set(stats)
    extra = set(stats) - wanted
    if missing:
        name = sorted(missing)[0]
        raise CoverageError(f"no calibration statistics for layer {name!r}", name)
    if extra:
        name = sorted(extra)[0]
        raise CoverageError(f"statistics for layer {name!r} outside the quantize partition", name)
    layers = model.layer_map()
    jobs = [(layers[name], stats[name]) for name in partition.quantize]

    def work(job):
        return quantize_layer(job[0], job[1], config, act_axis)

    if config.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            qlayers = list(pool.map(work, jobs))
    else:
        qlayers = [work(j) for j in jobs]
    state = PtqState(model.digest(), config.canonical(), [q.state for q in qlayers], act_axis)
    return state, QuantizedModel(model, {q.name: q for q in qlayers})


def run_ptq(model: ModelSpec, stats: dict[str, ActivationAccumulator], config: QuantConfig, act_axis: Axis = DEFAULT_ACTIVATION_AXIS) -> PtqState:
    return ptq_pipeline(model, stats, config, act_axis)[0]


def apply_state(model: ModelSpec, state: PtqState) -> QuantizedModel:
    """Rebuild quantized weights from the base model and a PTQ state, verifying every checksum."""
    layers = model.layer_map()
    qlayers = {}
    for rec in state.records:
        layer = layers.get(rec.layer_name)
        if layer is None:
            raise StateError(f"state names layer {rec.layer_name!r} which is not in the model")
        if (layer.in_features, layer.out_features) != (rec.in_features, rec.out_features):
            raise StateError(
                f"layer {rec.layer_name!r} is {layer.out_features}x{layer.in_features}, "
                f"state expects {rec.out_features}x{rec.in_features}"
            )
        w_hat = fake_quant(balance_weights(layer.weight, rec.mask), rec.weight_descriptor)
        if weight_checksum(w_hat) != rec.checksum:
            raise IntegrityError(f"checksum mismatch for layer {rec.layer_name!r}", rec.layer_name)
        qlayers[rec.layer_name] = QuantizedLinear(layer, rec, w_hat)
    if model.digest() != state.base_model_digest:
        raise IntegrityError("base model digest does not match the state")
    return QuantizedModel(model, qlayers)


def quantized_linear_forward(x, qlayer: QuantizedLinear) -> np.ndarray:
    """Balance, fake-quantize with dynamic absmax scales, multiply by the cached quantized weight."""
    x = as_2d(x)
    if x.shape[1] != qlayer.layer.in_features:
        raise ShapeError(f"{qlayer.name}: input width {x.shape[1]} != in_features {qlayer.layer.in_features}")
    xq = fake_quant(balance_activations(x, qlayer.state.mask), qlayer.state.activation_descriptor)
    return matmul_bt(xq, qlayer.weight_hat, qlayer.layer.bias)


class QuantizedModel:
    """Base model plus quantized replacements for the recorded layers."""

    def __init__(self, model: ModelSpec, qlayers: dict[str, QuantizedLinear]):
        self.model = model
        self.qlayers = qlayers

    def linear(self, layer: Linear, x: np.ndarray) -> np.ndarray:
        q = self.qlayers.get(layer.name)
        if q is None:
            return fp_linear(layer, x)
        return quantized_linear_forward(x, q)

    def forward(self, x) -> np.ndarray:
        return forward(self.model, x, self.linear)

    def effective_weight(self, name: str) -> np.ndarray:
        q = self.qlayers.get(name)
        return q.weight_hat if q is not None else self.model.layer_map()[name].weight


def _finite_or_none(v):
    if v is None or not np.isfinite(v):
        return None
    return float(v)


def evaluate(
    model: ModelSpec,
    state: PtqState,
    eval_batches: Iterable,
    stats: dict[str, ActivationAccumulator] | None = None,
) -> dict:
    """Layer-wise and end-to-end fidelity of the quantized model against the FP model.

    Per-layer errors compare each quantized layer with its FP counterpart on the
    FP model's own input to that layer. With ``stats``, the report also gives the
    fraction of calibration activations above the calibration statistic.
    """
    qm = apply_state(model, state)
    batches = [as_2d(b) for b in eval_batches]
    per_layer = {name: {"ref_sq": 0.0, "err_sq": 0.0, "count": 0} for name in qm.qlayers}
    e2e_ref, e2e_q, per_batch = [], [], []

    for batch in batches:

        def probe(layer: Linear, x: np.ndarray) -> np.ndarray:
            y = fp_linear(layer, x)
            q = qm.qlayers.get(layer.name)
            if q is not None:
                d = y - quantized_linear_forward(x, q)
                acc = per_layer[layer.name]
                acc["ref_sq"] += float(np.sum(y * y))
                acc["err_sq"] += float(np.sum(d * d))
                acc["count"] += y.size
            return y

        ref = forward(model, batch, probe)
        out = qm.forward(batch)
        e2e_ref.append(ref)
        e2e_q.append(out)
        per_batch.append(compare(ref, out).as_dict())

    layers = []
    for name in sorted(per_layer):
        acc = per_layer[name]
        entry = {
            "name": name,
            "mse": acc["err_sq"] / acc["count"] if acc["count"] else 0.0,
            "sqnr_db": None if acc["err_sq"] == 0.0 else _finite_or_none(10.0 * np.log10(acc["ref_sq"] / acc["err_sq"]) if acc["ref_sq"] > 0 else None),
        }
        if stats is not None and name in stats:
            threshold = activation_stat(stats[name], state.config)
            entry["calib_clip_fraction"] = float(np.mean(stats[name].clipped_fraction(threshold)))
        layers.append(entry)

    if batches:
        e2e = compare(np.concatenate(e2e_ref), np.concatenate(e2e_q)).as_dict()
        e2e["sqnr_db"] = _finite_or_none(sqnr_db(np.concatenate(e2e_ref), np.concatenate(e2e_q)))
    else:
        e2e = {"mse": 0.0, "max_abs_err": 0.0, "cosine": 1.0, "sqnr_db": None}
    return {
        "config": config_echo(state),
        "base_model_digest": f"{state.base_model_digest:016x}",
        "quantized_layers": len(state.records),
        "eval_batches": len(batches),
        "end_to_end": e2e,
        "per_batch": per_batch,
        "layers": layers,
    }


def config_echo(state: PtqState) -> dict:
    cfg = state.config
    return {
        "stat_kind": cfg.stat_kind.label,
        "percentile_p": cfg.percentile_p,
        "percentile_method": cfg.percentile_method,
        "alpha": cfg.alpha,
        "epsilon": cfg.epsilon,
        "format": {"exponent_bits": cfg.format.exponent_bits, "mantissa_bits": cfg.format.mantissa_bits},
        "retained_block_budget": cfg.retained_block_budget,
        "seed": cfg.seed,
        "activation_axis": state.act_axis.name.lower().replace("_", "-"),
    }


def ab_evaluate(
    model: ModelSpec,
    stats: dict[str, ActivationAccumulator],
    config: QuantConfig,
    eval_batches: Iterable,
    act_axis: Axis = DEFAULT_ACTIVATION_AXIS,
) -> dict:
    """Max-statistic versus percentile-statistic PTQ on the same calibration data."""
    from dataclasses import replace

    batches = [as_2d(b) for b in eval_batches]
    max_cfg = replace(config, stat_kind=StatKind.MAX)
    pct_cfg = replace(config, stat_kind=StatKind.PERCENTILE)
    rep_max = evaluate(model, run_ptq(model, stats, max_cfg, act_axis), batches, stats)
    rep_pct = evaluate(model, run_ptq(model, stats, pct_cfg, act_axis), batches, stats)
    layer_deltas = []
    layer_wins = 0
    for lm, lp in zip(rep_max["layers"], rep_pct["layers"]):
        layer_deltas.append({"name": lm["name"], "mse_max": lm["mse"], "mse_percentile": lp["mse"], "delta": lp["mse"] - lm["mse"]})
        layer_wins += lp["mse"] < lm["mse"]
    batch_wins = sum(p["mse"] < m["mse"] for m, p in zip(rep_max["per_batch"], rep_pct["per_batch"]))
    n_layers = len(layer_deltas)
    return {
        "max": rep_max,
        "percentile": rep_pct,
        "end_to_end_delta_mse": rep_pct["end_to_end"]["mse"] - rep_max["end_to_end"]["mse"],
        "layer_deltas": layer_deltas,
        "win_rate": {
            "layers": layer_wins / n_layers if n_layers else 0.0,
            "batches": batch_wins / len(batches) if batches else 0.0,
            "median_layer_delta": statistics.median([d["delta"] for d in layer_deltas]) if layer_deltas else 0.0,
        },
    }
