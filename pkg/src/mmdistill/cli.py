"""Command-line entry point: train, distill, sample, eval, check.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure (including divergence).
Output file paths are printed to stdout, one per line; logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mmdistill.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mmdistill.checks import run_checks
from mmdistill.config import ConfigError, RunConfig, load_config, override, save_config
from mmdistill.data import DatasetSpec, read_samples_csv, write_samples_csv
from mmdistill.denoiser import ConditioningError, GuidanceConfig
from mmdistill.distill import distill
from mmdistill.evaluate import (
    EvalReport,
    energy_distance,
    mode_coverage,
    moment_residual,
    network_generator,
    permutation_test,
    reference_samples,
)
from mmdistill.optim import Preconditioner
from mmdistill.params import LayoutError
from mmdistill.sampler import SamplerConfig, sample
from mmdistill.schedule import Schedule
from mmdistill.teacher import DivergenceError, fallback_preconditioner, train_teacher

log = logging.getLogger("mmdistill")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else v for v in r])


def _out_dir(cfg: RunConfig, arg) -> Path:
    d = Path(arg or cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_ckpt(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (LayoutError, ValueError, OSError) as e:
        raise UsageError(f"{path}: unreadable checkpoint ({e})") from e


# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config).resolved()
    out = _out_dir(cfg, args.out_dir)
    res = train_teacher(cfg.dataset, cfg.arch, cfg.schedule, cfg.teacher,
                        progress=lambda s, l: log.info("teacher step %d loss %.5f", s, l)
                        if s % max(cfg.teacher.steps // 20, 1) == 0 else None)
    ckpt = out / "teacher.ckpt"
    save_checkpoint(ckpt, Checkpoint(cfg.arch, res.params, res.second_moment,
                                     {"role": "teacher", "steps": cfg.teacher.steps, "seed": cfg.teacher.seed,
                                      "schedule": asdict(cfg.schedule)}))
    metrics = out / "teacher_metrics.csv"
    _write_rows(metrics, ["step", "loss", "lr"], res.metrics)
    snap = out / "train.resolved.json"
    save_config(snap, cfg)
    for p in (ckpt, metrics, snap):
        print(p)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    try:
        dcfg = override(cfg.distill, variant=args.variant, k=args.k, transition=args.transition,
                        total_steps=args.steps)
    except ValueError as e:
        raise UsageError(str(e)) from e
    cfg = override(cfg, distill=dcfg).resolved()
    out = _out_dir(cfg, args.out_dir)
    teacher = _load_ckpt(args.teacher or out / "teacher.ckpt")
    if teacher.arch != cfg.arch:
        raise UsageError("teacher checkpoint architecture differs from the config")
    lam = None
    if dcfg.variant == "instant":
        if teacher.second_moment is None:
            log.warning("teacher checkpoint has no Adam second moment; estimating the preconditioner "
                        "with a fresh warm-up pass")
            lam = fallback_preconditioner(teacher.params, cfg.dataset, cfg.arch, cfg.schedule, cfg.teacher,
                                          seed=cfg.distill.seed)
        else:
            lam = Preconditioner.from_second_moment(teacher.second_moment, cfg.teacher.adam.eps)

    eval_fn = None
    if dcfg.eval_every:
        g = cfg.dataset.gmm()

        def eval_fn(eta):
            gen = network_generator(eta, cfg.arch, cfg.schedule)
            return np.mean(moment_residual(gen, cfg.schedule, g, n=cfg.eval.moment_n, k=dcfg.k,
                                           rng=np.random.default_rng(cfg.eval.seed), knn=cfg.eval.knn,
                                           mode=dcfg.transition))

    res = distill(teacher.params, lam, cfg.dataset, cfg.arch, cfg.schedule, cfg.distill, eval_fn,
                  progress=lambda s, l: log.info("distill step %d loss %.5g", s, l)
                  if s % max(dcfg.total_steps // 20, 1) == 0 else None)
    tag = f"{dcfg.variant}_k{dcfg.k}_{dcfg.transition}"
    ckpt = out / f"distilled_{tag}.ckpt"
    save_checkpoint(ckpt, Checkpoint(cfg.arch, res.eta, None, {"role": "generator", "variant": dcfg.variant,
                                                               "k": dcfg.k, "transition": dcfg.transition,
                                                               "seed": dcfg.seed,
                                                               "schedule": asdict(cfg.schedule)}))
    cols = ["step", "loss", "loss_phi", "grad_norm_eta", "moment_residual"]
    if dcfg.variant == "instant":
        cols.append("loss_instant")
    metrics = out / f"distill_{tag}_metrics.csv"
    _write_rows(metrics, cols, ([m.get(c) for c in cols] for m in res.metrics))
    snap = out / f"distill_{tag}.resolved.json"
    save_config(snap, cfg)
    for p in (ckpt, metrics, snap):
        print(p)
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    ck = _load_ckpt(args.ckpt)
    k = args.k if args.k is not None else int(ck.meta.get("k", 8))
    try:
        guidance = GuidanceConfig(args.guidance or 0.0, tuple(args.clip) if args.clip else None)
        scfg = SamplerConfig(k=k, mode=args.mode, noise_multiplier=args.noise, guidance=guidance, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.class_id is not None and ck.arch.num_classes == 0:
        raise UsageError("--class-id given for an unconditional checkpoint")
    try:
        x = sample(ck.params, ck.arch, _schedule(args, ck), scfg, args.n, class_id=args.class_id)
    except (ConditioningError, ValueError) as e:
        raise UsageError(str(e)) from e
    labels = np.full(args.n, -1 if args.class_id is None else args.class_id)
    out = Path(args.out or f"samples_k{k}_{args.mode}_seed{args.seed}.csv")
    write_samples_csv(out, x, labels, {"seed": args.seed, "k": k, "mode": args.mode})
    print(out)
    return EXIT_OK


def _schedule(args, ck: Checkpoint | None = None) -> Schedule:
    """--config wins, then the schedule recorded in the checkpoint, then the default."""
    if getattr(args, "config", None):
        return load_config(args.config).schedule
    if ck is not None and "schedule" in ck.meta:
        return Schedule(**ck.meta["schedule"])
    return Schedule()


def _read_samples(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"samples file not found: {path}")
    try:
        x, _ = read_samples_csv(path)
    except (ValueError, IndexError) as e:
        raise UsageError(f"{path}: malformed samples CSV ({e})") from e
    if len(x) < 2:
        raise UsageError(f"{path}: need at least 2 samples")
    return x


def _reference(spec_arg: str, n: int, seed: int):
    """``spec_arg`` is a samples CSV, a run config JSON, or a dataset JSON object."""
    p = Path(spec_arg)
    if p.suffix == ".csv":
        return _read_samples(p), None
    if p.is_file():
        d = json.loads(p.read_text())
        dataset = load_config(p).dataset if "dataset" in d else DatasetSpec(**d)
    else:
        try:
            dataset = DatasetSpec(**json.loads(spec_arg))
        except (json.JSONDecodeError, TypeError) as e:
            raise UsageError(f"not a samples file or dataset spec: {spec_arg}") from e
    return reference_samples(dataset, n, seed), (dataset.gmm() if dataset.kind == "gmm" else None)


def cmd_eval(args) -> int:
    a = _read_samples(args.samples)
    b, spec = _reference(args.reference, args.n_reference, args.seed)
    extra = {}
    if args.perm:
        res = permutation_test(a, b, n_perm=args.perm, rng=np.random.default_rng(args.seed))
        extra["permutation"] = {"threshold": res.threshold, "p_value": res.p_value, "passed": res.passed}
    mr = None
    if args.ckpt:
        if spec is None:
            raise UsageError("moment residual needs a GMM dataset reference")
        ck = _load_ckpt(args.ckpt)
        k = int(ck.meta.get("k", 8))
        sched = _schedule(args, ck)
        mr = moment_residual(network_generator(ck.params, ck.arch, sched), sched, spec, k=k,
                             rng=np.random.default_rng(args.seed), mode=ck.meta.get("transition", "conditional")).tolist()
    report = EvalReport(energy_distance(a, b), mode_coverage(a, spec) if spec is not None else None, len(a),
                        args.seed, mr, extra)
    out = Path(args.out or Path(args.samples).with_suffix(".eval.json"))
    out.write_text(report.to_json() + "\n")
    print(out)
    return EXIT_OK


def cmd_check(args) -> int:
    return EXIT_OK if run_checks() else EXIT_RUNTIME


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the teacher denoiser")
    t.add_argument("config")
    t.add_argument("--out-dir")
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("distill", help="distill a few-step generator from a teacher checkpoint")
    d.add_argument("config")
    d.add_argument("--variant", choices=["alternating", "instant"])
    d.add_argument("--k", type=int)
    d.add_argument("--transition", choices=["conditional", "marginal"])
    d.add_argument("--steps", type=int)
    d.add_argument("--teacher", help="teacher checkpoint (default: <out_dir>/teacher.ckpt)")
    d.add_argument("--out-dir")
    d.set_defaults(fn=cmd_distill)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("ckpt")
    s.add_argument("--k", type=int)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--mode", choices=["ancestral", "ddim"], default="ancestral")
    s.add_argument("--noise", type=float, default=1.0, help="ancestral noise multiplier")
    s.add_argument("--guidance", type=float)
    s.add_argument("--clip", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--class-id", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="run config supplying the noise schedule")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="compare samples against samples or a dataset spec")
    e.add_argument("samples")
    e.add_argument("reference", help="samples CSV, run config JSON, or inline dataset JSON")
    e.add_argument("--n-reference", type=int, default=5000)
    e.add_argument("--perm", type=int, default=0, help="permutation-test rounds (0 = off)")
    e.add_argument("--ckpt", help="also report the moment residual of this generator")
    e.add_argument("--config", help="run config supplying the noise schedule")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("check", help="run the built-in identity checks")
    c.set_defaults(fn=cmd_check)
    return p


def _configure_logging(verbose: bool) -> None:
    root = logging.getLogger("mmdistill")
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return int(e.code or 0)
    _configure_logging(args.verbose)
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e} (step {e.step})", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
