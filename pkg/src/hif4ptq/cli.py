"""Command-line entry point: ``hif4ptq {calibrate,quantize,eval,inspect}``.

Exit codes: 0 success, 1 other failure (including I/O), 2 configuration error,
3 calibration coverage error, 4 file format / version error, 5 corruption,
6 state integrity error.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from dataclasses import replace

import numpy as np

from . import state as state_io
from .errors import Hif4PtqError, StateError
from .ptq import ab_evaluate, apply_state, calibrate, config_echo, evaluate, ptq_pipeline, select_layers
from .runconfig import RunConfig
from .synth import STREAM_CALIB, STREAM_EVAL, gen_batches, gen_toy_model

# flag dest -> dotted config key
FLAG_KEYS = {
    "percentile": "quant.percentile",
    "alpha": "quant.alpha",
    "stat": "quant.stat",
    "retained_blocks": "quant.retained_blocks",
    "workers": "quant.workers",
    "seed": "seed",
    "report": "report",
    "calib_batches": "calibration.batches",
    "calib": "io.calib",
    "state": "io.state",
}
OUT_KEYS = {"calibrate": "io.calib", "quantize": "io.state", "eval": "io.report"}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--percentile", type=float, help="percentile p in (0, 100]")
    common.add_argument("--alpha", type=float, help="balancing coefficient in [0, 1]")
    common.add_argument("--stat", choices=["max", "percentile"], help="activation statistic")
    common.add_argument("--retained-blocks", type=int, help="blocks kept in full precision (0-2)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--report", choices=["text", "json"], help="report format")
    common.add_argument("--calib-batches", type=int, help="number of calibration batches")
    common.add_argument("--workers", type=int, help="threads for layer-wise PTQ")
    common.add_argument("--out", help="output path of this command")

    p = argparse.ArgumentParser(prog="hif4ptq", description="Tail-aware 4-bit float W4A4 PTQ on a toy transformer")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="collect activation statistics")
    q = sub.add_parser("quantize", parents=[common], help="build the compact PTQ state")
    q.add_argument("--calib", help="calibration checkpoint path")
    e = sub.add_parser("eval", parents=[common], help="evaluate a PTQ state against the FP model")
    e.add_argument("--state", help="PTQ state path")
    e.add_argument("--calib", help="calibration checkpoint path (needed for --ab)")
    e.add_argument("--ab", action="store_true", help="compare max and percentile calibration")
    i = sub.add_parser("inspect", help="print a state or calibration file")
    i.add_argument("path")
    return p


def _load_config(args) -> RunConfig:
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if args.out is not None:
        overrides[OUT_KEYS[args.command]] = args.out
    return RunConfig.load(args.config, overrides)


def _model(rc: RunConfig):
    return gen_toy_model(**rc.model_kwargs())


def _channels(model) -> int:
    return model.stacks[0].boundary["patch_embedding"].in_features


def _calib_batches(rc: RunConfig, model):
    c = rc.raw["calibration"]
    return gen_batches(rc.distribution(), c["batches"], c["tokens"], _channels(model), STREAM_CALIB)


def _eval_batches(rc: RunConfig, model):
    e = rc.raw["evaluation"]
    return gen_batches(rc.eval_distribution(), e["batches"], e["tokens"], _channels(model), STREAM_EVAL)


def _g(x) -> str:
    return "n/a" if x is None else f"{x:.6g}"


def _counts_table(partition, model) -> list[str]:
    rows = partition.counts(model)
    lines = [f"{'module':<16}{'HiF4 linear':>12}{'FP linear':>11}{'FP blocks':>11}"]
    for r in rows:
        lines.append(f"{r['module']:<16}{r['quantized_linear']:>12}{r['fp_linear']:>11}{r['fp_blocks']:>11}")
    tot = {k: sum(r[k] for r in rows) for k in ("quantized_linear", "fp_linear", "fp_blocks")}
    lines.append(f"{'total':<16}{tot['quantized_linear']:>12}{tot['fp_linear']:>11}{tot['fp_blocks']:>11}")
    return lines


def _load_checkpoint(path, model) -> state_io.CalibrationCheckpoint:
    ckpt = state_io.deserialize_calibration(state_io.read_bytes(path))
    if ckpt.base_model_digest != model.digest():
        raise StateError(f"calibration checkpoint {path} was recorded on a different base model")
    return ckpt


def cmd_calibrate(rc: RunConfig, out=None) -> int:
    out = out or sys.stdout
    model = _model(rc)
    cfg = rc.quant_config()
    accs = calibrate(model, _calib_batches(rc, model), cfg)
    ckpt = state_io.CalibrationCheckpoint(model.digest(), cfg.seed, accs, cfg.calib_cap)
    path = rc.raw["io"]["calib"]
    state_io.write_bytes(path, state_io.serialize_calibration(ckpt))
    print(f"calibration checkpoint: {path}", file=out)
    print(f"layers instrumented: {len(accs)}", file=out)
    print(f"{'layer':<44}{'channels':>9}{'retained':>10}{'observed':>10}", file=out)
    for name in sorted(accs):
        a = accs[name]
        print(f"{name:<44}{a.num_channels:>9}{a.retained:>10}{a.observed:>10}", file=out)
    return 0


def cmd_quantize(rc: RunConfig, out=None) -> int:
    out = out or sys.stdout
    model = _model(rc)
    cfg = rc.quant_config()
    ckpt = _load_checkpoint(rc.raw["io"]["calib"], model)
    state, _ = ptq_pipeline(model, ckpt.accumulators, cfg, rc.activation_axis())
    path = rc.raw["io"]["state"]
    data = state_io.serialize(state)
    state_io.write_bytes(path, data)
    canon = cfg.canonical()
    print(f"ptq state: {path} ({len(data)} bytes, base model weights {model.weight_bytes()} bytes)", file=out)
    print(f"statistic: {canon.stat_kind.label} p={canon.percentile_p:g} alpha={canon.alpha:g} eps={canon.epsilon:g}", file=out)
    for line in _counts_table(select_layers(model, cfg), model):
        print(line, file=out)
    print(f"{'layer':<44}{'mask min':>12}{'median':>12}{'max':>12}", file=out)
    for r in state.records:
        m = r.mask.mask
        print(f"{r.layer_name:<44}{_g(m.min()):>12}{_g(float(np.median(m))):>12}{_g(m.max()):>12}", file=out)
    return 0


def _text_report(rep: dict) -> list[str]:
    e = rep["end_to_end"]
    lines = [
        f"config: {json.dumps(rep['config'], sort_keys=True)}",
        f"base model digest: {rep['base_model_digest']}",
        f"quantized layers: {rep['quantized_layers']}  eval batches: {rep['eval_batches']}",
        f"end-to-end: mse={_g(e['mse'])} max_abs_err={_g(e['max_abs_err'])} cosine={_g(e['cosine'])} sqnr_db={_g(e['sqnr_db'])}",
    ]
    for layer in rep["layers"]:
        clip = layer.get("calib_clip_fraction")
        extra = f" calib_clip={_g(clip)}" if clip is not None else ""
        lines.append(f"  {layer['name']:<44} mse={_g(layer['mse'])} sqnr_db={_g(layer['sqnr_db'])}{extra}")
    return lines


def cmd_eval(rc: RunConfig, ab: bool = False, out=None) -> int:
    out = out or sys.stdout
    model = _model(rc)
    st = state_io.deserialize(state_io.read_bytes(rc.raw["io"]["state"]))
    apply_state(model, st)
    batches = _eval_batches(rc, model)
    if ab:
        ckpt = _load_checkpoint(rc.raw["io"]["calib"], model)
        cfg = replace(st.config, percentile_p=rc.quant_config().percentile_p)
        rep = ab_evaluate(model, ckpt.accumulators, cfg, batches, st.act_axis)
        rep = {"mode": "ab", **rep}
    else:
        rep = {"mode": "single", **evaluate(model, st, batches)}
    report_path = rc.raw["io"]["report"]
    if rc.raw["report"] == "json":
        text = json.dumps(rep, sort_keys=True, indent=2) + "\n"
        if report_path:
            with open(report_path, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            out.write(text)
        return 0
    if ab:
        lines = ["== max calibration =="] + _text_report(rep["max"])
        lines += ["== percentile calibration =="] + _text_report(rep["percentile"])
        lines.append("== per-layer deltas (percentile - max) ==")
        for d in rep["layer_deltas"]:
            lines.append(f"  {d['name']:<44} {_g(d['mse_max'])} -> {_g(d['mse_percentile'])} delta={_g(d['delta'])}")
        w = rep["win_rate"]
        lines.append(
            f"end-to-end mse delta: {_g(rep['end_to_end_delta_mse'])}"
        )
        lines.append(
            f"percentile win rate: layers={w['layers']:.3f} batches={w['batches']:.3f} median layer delta={_g(w['median_layer_delta'])}"
        )
    else:
        lines = _text_report(rep)
    text = "\n".join(lines) + "\n"
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)
    return 0


def cmd_inspect(path, out=None) -> int:
    out = out or sys.stdout
    data = state_io.read_bytes(path)
    if len(data) > state_io._ENVELOPE.size and data[8] == state_io.KIND_CALIB and data[:4] == state_io.MAGIC:
        ckpt = state_io.deserialize_calibration(data)
        print(f"kind: calibration checkpoint  version: {state_io.VERSION}", file=out)
        print(f"base model digest: {ckpt.base_model_digest:016x}  seed: {ckpt.seed}  cap: {ckpt.cap}", file=out)
        print(f"records: {len(ckpt.accumulators)}", file=out)
        for name in sorted(ckpt.accumulators):
            a = ckpt.accumulators[name]
            print(f"  {name:<44} channels={a.num_channels} retained={a.retained} observed={a.observed}", file=out)
        return 0
    st = state_io.deserialize(data)
    print(f"kind: ptq state  version: {st.version}  bytes: {len(data)}", file=out)
    print(f"base model digest: {st.base_model_digest:016x}", file=out)
    print(f"config: {json.dumps(config_echo(st), sort_keys=True)}", file=out)
    print(f"records: {len(st.records)}", file=out)
    for r in st.records:
        m = r.mask.mask
        s = r.weight_descriptor.scales
        print(
            f"  {r.layer_name:<44} in={r.in_features} out={r.out_features} "
            f"mask=[{_g(m.min())}, {_g(statistics.median(m.tolist()))}, {_g(m.max())}] "
            f"wscale=[{_g(s.min())}, {_g(s.max())}] checksum={r.checksum:016x}",
            file=out,
        )
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "inspect":
            return cmd_inspect(args.path)
        rc = _load_config(args)
        if args.command == "calibrate":
            return cmd_calibrate(rc)
        if args.command == "quantize":
            return cmd_quantize(rc)
        return cmd_eval(rc, ab=args.ab)
    except Hif4PtqError as exc:
        layer = getattr(exc, "layer", None)
        where = f" [layer {layer}]" if layer else ""
        print(f"error: {type(exc).__name__}{where}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
