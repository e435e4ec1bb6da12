"""Print the layer partition table for a grid of toy configurations."""

import argparse

from hif4ptq.config import QuantConfig
from hif4ptq.ptq import select_layers
from hif4ptq.synth import gen_toy_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--blocks", type=int, nargs="+", default=[0, 2, 4])
    ap.add_argument("--budgets", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--boundary", type=int, default=6)
    args = ap.parse_args()

    print(f"{'blocks':>6} {'budget':>6} {'module':<15}{'HiF4 linear':>12}{'FP linear':>11}{'FP blocks':>11}")
    for blocks in args.blocks:
        model = gen_toy_model(blocks=blocks, width=8, boundary=args.boundary, seed=0)
        for budget in args.budgets:
            part = select_layers(model, QuantConfig(retained_block_budget=budget))
            for row in part.counts(model):
                print(
                    f"{blocks:>6} {budget:>6} {row['module']:<15}"
                    f"{row['quantized_linear']:>12}{row['fp_linear']:>11}{row['fp_blocks']:>11}"
                )


if __name__ == "__main__":
    main()
