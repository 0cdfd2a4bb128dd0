"""Teacher learning rate / time-sampling sweep: held-out error vs the oracle on the logSNR grid.

    python3 scripts/teacher_sweep.py --lr 3e-4 1e-3 --p-t uniform edm_grid --out teacher_sweep.csv
"""

import argparse
import csv
import itertools
from dataclasses import replace

import numpy as np

from mmdistill.experiments import Setup, denoiser_grid_error, reference_teacher_config, teacher_checkpoint
from mmdistill.schedule import TimeWeighting, logsnr_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lr", type=float, nargs="+", default=[1e-3])
    ap.add_argument("--p-t", nargs="+", default=["uniform"], choices=["uniform", "edm_grid"])
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--cache", default="runs/cache")
    ap.add_argument("--out", default="teacher_sweep.csv")
    args = ap.parse_args()
    setup = Setup()
    grid = logsnr_grid()
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lr", "p_t", "logsnr", "mse", "train_seconds"])
        for lr, p_t in itertools.product(args.lr, args.p_t):
            base = reference_teacher_config(args.steps)
            cfg = replace(base, adam=replace(base.adam, lr=lr),
                          time=TimeWeighting(p_s=p_t, sigma_data=setup.gmm.std()))
            ck = teacher_checkpoint(setup, cfg, args.cache)
            mse = denoiser_grid_error(ck.params, setup)
            for lam, m in zip(grid, mse):
                w.writerow([lr, p_t, lam, m, round(ck.meta["seconds"], 1)])
            print(f"lr={lr:g} p_t={p_t}: mean MSE {np.mean(mse):.5f}")


if __name__ == "__main__":
    main()
