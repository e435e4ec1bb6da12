"""Max vs percentile calibration over many seeds on spiky synthetic data.

    python scripts/ab_sweep.py --width 64 --seeds 20 --axis per-tensor
"""

import argparse
import dataclasses
import time

import numpy as np

from hif4ptq.balance import StatKind
from hif4ptq.config import QuantConfig
from hif4ptq.ptq import calibrate, evaluate, run_ptq
from hif4ptq.runconfig import AXES
from hif4ptq.synth import STREAM_EVAL, DistributionSpec, gen_batches, gen_toy_model


def trial(seed, args, axis):
    model = gen_toy_model(blocks=args.blocks, width=args.width, boundary=6, seed=seed)
    spec = DistributionSpec(spike_rate=args.spike_rate, spike_magnitude=args.spike_magnitude, seed=seed)
    calib = gen_batches(spec, args.calib_batches, args.tokens, args.width)
    evals = {
        "clean": gen_batches(dataclasses.replace(spec, spike_rate=0.0), 4, args.tokens, args.width, STREAM_EVAL),
        "spiky": gen_batches(spec, 4, args.tokens, args.width, STREAM_EVAL),
    }
    cfg = QuantConfig(seed=seed, percentile_p=args.percentile, alpha=args.alpha)
    stats = calibrate(model, calib, cfg)
    states = {k: run_ptq(model, stats, dataclasses.replace(cfg, stat_kind=k), axis) for k in StatKind}
    return {
        name: tuple(evaluate(model, states[k], ev)["end_to_end"]["mse"] for k in (StatKind.MAX, StatKind.PERCENTILE))
        for name, ev in evals.items()
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--blocks", type=int, default=4)
    ap.add_argument("--tokens", type=int, default=64)
    ap.add_argument("--calib-batches", type=int, default=16)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--seed-offset", type=int, default=0)
    ap.add_argument("--axis", choices=sorted(AXES), default="per-tensor")
    ap.add_argument("--percentile", type=float, default=99.9)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--spike-rate", type=float, default=1e-3)
    ap.add_argument("--spike-magnitude", type=float, default=20.0)
    args = ap.parse_args()

    start = time.perf_counter()
    rows = [trial(s, args, AXES[args.axis]) for s in range(args.seed_offset, args.seed_offset + args.seeds)]
    for regime in ("clean", "spiky"):
        a = np.array([r[regime] for r in rows])
        wins = int(np.sum(a[:, 1] < a[:, 0]))
        print(
            f"{args.axis:<20} eval={regime:<6} wins {wins}/{len(a)} ({wins / len(a):.0%})  "
            f"median mse max={np.median(a[:, 0]):.5g} percentile={np.median(a[:, 1]):.5g}"
        )
    print(f"elapsed {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
