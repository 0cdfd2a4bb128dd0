"""Moment residual of a distilled generator, the oracle floor and the teacher used as a generator.

    python3 scripts/moment_table.py --k 8 --steps 20000 --w-s flat --out moment_table.csv
"""

import argparse
import csv
from dataclasses import replace

from mmdistill.experiments import (
    Setup,
    distill_config,
    distill_run,
    moment_table,
    reference_teacher_config,
    sample_quality,
    teacher_checkpoint,
)
from mmdistill.schedule import TimeWeighting, logsnr_grid


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="alternating", choices=["alternating", "instant"])
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--transition", default="conditional", choices=["conditional", "marginal"])
    ap.add_argument("--p-s", default="edm_grid", choices=["uniform", "edm_grid"])
    ap.add_argument("--w-s", default="flat", choices=["flat", "edm"])
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--cache", default="runs/cache")
    ap.add_argument("--out", default="moment_table.csv")
    args = ap.parse_args()
    setup = Setup()
    teacher = teacher_checkpoint(setup, reference_teacher_config(), args.cache)
    cfg = distill_config(args.variant, args.k, args.transition, args.steps, args.seed, args.lr)
    cfg = replace(cfg, time=TimeWeighting(p_s=args.p_s, w_s=args.w_s, sigma_data=setup.gmm.std()))
    run = distill_run(setup, teacher, cfg, args.cache)
    mr, floor = moment_table(run.eta, setup, k=args.k, mode=args.transition, seed=7)
    as_gen, _ = moment_table(teacher.params, setup, k=args.k, mode=args.transition, seed=7)
    ed, cov = sample_quality(run.eta, setup, k=args.k, seed=5)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["logsnr", "residual", "floor", "teacher_as_generator", "ratio"])
        for row in zip(logsnr_grid(), mr, floor, as_gen, mr / floor):
            w.writerow(row)
    print(f"ED {ed:.5f}  coverage {cov:.3f}  {run.seconds:.0f}s")
    print("residual/floor", " ".join(f"{r:.2f}" for r in mr / floor))


if __name__ == "__main__":
    main()
