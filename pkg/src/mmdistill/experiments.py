"""Reference runs on the 8-mode ring: teacher, distillations and their evaluation.

Shared by the acceptance suite and the scripts in ``scripts/``. Every run is
keyed by a hash of its configuration and can be cached in a directory, so a
teacher trained once is reused by all distillations that need it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from mmdistill.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mmdistill.data import DatasetSpec, GmmSpec, oracle_denoise, sample_data
from mmdistill.denoiser import ArchDescriptor, denoise
from mmdistill.distill import DistillConfig, DistillResult, distill
from mmdistill.evaluate import (
    energy_distance,
    mode_coverage,
    moment_residual,
    network_generator,
    oracle_generator,
)
from mmdistill.optim import AdamConfig, Preconditioner
from mmdistill.sampler import SamplerConfig, sample
from mmdistill.schedule import Schedule, logsnr_grid
from mmdistill.teacher import TeacherConfig, train_teacher

log = logging.getLogger(__name__)

REFERENCE_SEED = 12345  # data reference set, disjoint from every training seed


@dataclass(frozen=True)
class Setup:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: ArchDescriptor = field(default_factory=ArchDescriptor)
    schedule: Schedule = field(default_factory=Schedule)

    @property
    def gmm(self) -> GmmSpec:
        return self.dataset.gmm()


def reference_teacher_config(steps: int = 20000, seed: int = 0) -> TeacherConfig:
    return TeacherConfig(steps=steps, batch_size=256, seed=seed,
                         adam=AdamConfig(lr=1e-3, warmup_steps=1000, total_steps=steps))


def distill_config(variant: str = "alternating", k: int = 8, transition: str = "conditional", steps: int = 20000,
                   seed: int = 1, lr: float = 3e-4) -> DistillConfig:
    opt = AdamConfig(lr=lr, warmup_steps=min(500, steps))
    return DistillConfig(variant=variant, k=k, transition=transition, total_steps=steps, batch_size=256, seed=seed,
                         opt_eta=opt, opt_phi=opt if variant == "alternating" else None)


def _key(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts], sort_keys=True,
                      default=str)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def teacher_checkpoint(setup: Setup, cfg: TeacherConfig, cache_dir=None) -> Checkpoint:
    """Train (or load from ``cache_dir``) a teacher; ``meta["seconds"]`` is the training time."""
    path = Path(cache_dir) / f"teacher_{_key(setup, cfg)}.ckpt" if cache_dir else None
    if path is not None and path.is_file():
        return load_checkpoint(path)
    t0 = time.perf_counter()
    res = train_teacher(setup.dataset, setup.arch, setup.schedule, cfg)
    ck = Checkpoint(setup.arch, res.params, res.second_moment,
                    {"role": "teacher", "seconds": time.perf_counter() - t0, "steps": cfg.steps})
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, ck)
    return ck


@dataclass
class DistillRun:
    eta: object
    metrics: list[dict]
    seconds: float


def distill_run(setup: Setup, teacher: Checkpoint, cfg: DistillConfig, cache_dir=None) -> DistillRun:
    """Distil ``teacher`` with ``cfg`` (or load the cached result)."""
    key = _key(setup, cfg, hashlib.sha1(teacher.params.data.tobytes()).hexdigest())
    stem = f"{cfg.variant}_k{cfg.k}_{cfg.transition}_{key}"
    if cache_dir is not None:
        ck_path = Path(cache_dir) / f"{stem}.ckpt"
        js_path = Path(cache_dir) / f"{stem}.json"
        if ck_path.is_file() and js_path.is_file():
            info = json.loads(js_path.read_text())
            return DistillRun(load_checkpoint(ck_path).params, info["metrics"], info["seconds"])
    lam = None
    if cfg.variant == "instant":
        lam = Preconditioner.from_second_moment(teacher.second_moment, AdamConfig().eps)
    t0 = time.perf_counter()
    res: DistillResult = distill(teacher.params, lam, setup.dataset, setup.arch, setup.schedule, cfg)
    run = DistillRun(res.eta, res.metrics, time.perf_counter() - t0)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck_path, Checkpoint(setup.arch, res.eta, None, {"role": "generator"}))
        js_path.write_text(json.dumps({"metrics": run.metrics, "seconds": run.seconds}))
    return run


def reference_data(setup: Setup, n: int = 5000) -> np.ndarray:
    return sample_data(setup.gmm, n, np.random.default_rng(REFERENCE_SEED))[0]


def sample_quality(params, setup: Setup, k: int, n: int = 5000, seed: int = 0) -> tuple[float, float]:
    """(energy distance to the reference set, mode coverage) of ``n`` k-step samples."""
    x = sample(params, setup.arch, setup.schedule, SamplerConfig(k=k, seed=seed), n)
    return energy_distance(x, reference_data(setup)), mode_coverage(x, setup.gmm)


def moment_table(params, setup: Setup, k: int = 8, mode: str = "conditional", n: int = 20000, seed: int = 0):
    """Moment residual of ``params`` and the oracle-vs-oracle floor on the logSNR grid.

    Both use the same data, z_t and transition noise streams.
    """
    grid = setup.schedule.t_from_logsnr(logsnr_grid())
    mr = moment_residual(network_generator(params, setup.arch, setup.schedule), setup.schedule, setup.gmm, grid,
                         n=n, k=k, rng=np.random.default_rng(seed), mode=mode)
    floor = moment_residual(oracle_generator(setup.gmm, setup.schedule, np.random.default_rng(seed + 1)),
                            setup.schedule, setup.gmm, grid, n=n, k=k, rng=np.random.default_rng(seed), mode=mode)
    return mr, floor


def denoiser_grid_error(params, setup: Setup, n: int = 5000, seed: int = 1) -> np.ndarray:
    """Held-out mean ||g(z_t) - E[x | z_t]||^2 at each logSNR grid point."""
    rng = np.random.default_rng(seed)
    out = []
    for t in setup.schedule.t_from_logsnr(logsnr_grid()):
        x, _ = sample_data(setup.gmm, n, rng)
        z = setup.schedule.diffuse(x, float(t), rng.standard_normal(x.shape))
        d = denoise(params, setup.arch, setup.schedule, z, float(t)) - oracle_denoise(setup.gmm, setup.schedule, z,
                                                                                     float(t))
        out.append(float((d**2).sum(axis=1).mean()))
    return np.array(out)


def smoothed_peak_and_tail(values, window: int = 20, tail: float = 0.1) -> tuple[float, float]:
    """(max of the moving average, plain mean of the last ``tail`` fraction)."""
    v = np.asarray(values, dtype=np.float64)
    w = min(window, len(v))
    smooth = np.convolve(v, np.ones(w) / w, mode="valid")
    n_tail = max(1, int(round(tail * len(v))))
    return float(smooth.max()), float(v[-n_tail:].mean())


__all__ = [
    "DistillRun", "Setup", "denoiser_grid_error", "distill_config", "distill_run", "moment_table",
    "reference_data", "reference_teacher_config", "sample_quality", "smoothed_peak_and_tail", "teacher_checkpoint",
]
