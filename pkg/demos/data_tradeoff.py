"""Sweep the data-protection weight and plot accuracy against KA reconstruction quality.

    python demos/data_tradeoff.py --seeds 0 --out runs/data_tradeoff

Takes about 30 s per (lambda_d, seed) on one CPU core.
"""

import argparse
from pathlib import Path

import torch

from splitmi.experiment import AttackSpec, ExperimentSpec, sweep
from splitmi.plotting import emit_plots


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", default="0")
    parser.add_argument("--values", default="0,0.05,0.1,0.2,0.4")
    parser.add_argument("--out", default="runs/data_tradeoff")
    args = parser.parse_args()
    torch.set_num_threads(1)

    spec = ExperimentSpec(attacks=[AttackSpec("KA")])
    out = Path(args.out)
    records = sweep(
        spec, "lambda_d", [float(v) for v in args.values.split(",")], [int(s) for s in args.seeds.split(",")],
        out=out / "records.jsonl",
    )
    for r in records:
        print(f"seed {r.spec['seed']}  lambda_d {r.spec['defense']['lambda_d']:<5}  "
              f"accuracy {r.clean_accuracy:.3f}  KA SSIM {r.attack('KA')['ssim']:.3f}")
    print("plots:", *emit_plots(records, "acc_vs_ssim", out))


if __name__ == "__main__":
    main()
