"""Teacher training with the weighted denoising loss, and the Adam preconditioner."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mmdistill import autodiff as ad
from mmdistill.data import DatasetSpec, sample_data
from mmdistill.denoiser import ArchDescriptor, init_params, make_net
from mmdistill.optim import Adam, AdamConfig, Preconditioner
from mmdistill.params import ParamVector
from mmdistill.schedule import Schedule, TimeWeighting, loss_weight, sample_time

log = logging.getLogger(__name__)

FALLBACK_STEPS = 100


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int | None = None, t=None):
        super().__init__(message)
        self.step = step
        self.t = t


@dataclass(frozen=True)
class TeacherConfig:
    steps: int = 20000
    batch_size: int = 256
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-3, warmup_steps=1000, total_steps=20000))
    time: TimeWeighting = field(default_factory=TimeWeighting)
    cond_dropout: float = 0.1
    seed: int = 0
    log_every: int = 10


def drop_labels(labels, num_classes: int, p: float, rng) -> np.ndarray | None:
    if num_classes == 0:
        return None
    labels = np.asarray(labels, dtype=np.int64).copy()
    labels[rng.random(labels.shape) < p] = -1
    return labels


def diffusion_loss(params: ParamVector, arch: ArchDescriptor, sched: Schedule, tw: TimeWeighting, batch, rng,
                   t=None, eps=None):
    """Mean of w(t) ||x - g(z_t, t, c)||^2 over the batch, and its parameter gradient.

    ``t`` and ``eps`` may be given explicitly; otherwise they are drawn from
    p(t) and N(0, I).
    """
    x, labels = batch
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    n = x.shape[0]
    if t is None:
        t, _ = sample_time(tw, sched, 1, rng, n)
    if eps is None:
        eps = rng.standard_normal(x.shape)
    z = sched.diffuse(x, t, eps)
    w = np.broadcast_to(loss_weight(tw, sched, t), (n,))
    net = make_net(arch, sched, t, n, labels)
    pred, pullback = ad.linearize_params(net, params, z)
    resid = pred - x
    per = w * (resid**2).sum(axis=1)
    loss = float(per.mean())
    if not np.isfinite(loss):
        bad = np.atleast_1d(t)[~np.isfinite(per)] if np.ndim(t) else t
        raise DivergenceError("non-finite diffusion loss", t=bad)
    grad = pullback(2.0 * w[:, None] * resid / n)
    return loss, grad


@dataclass
class TeacherResult:
    params: ParamVector
    precond: Preconditioner
    second_moment: ParamVector  # bias-corrected Adam v
    metrics: list[tuple[int, float, float]]


def train_teacher(dataset: DatasetSpec, arch: ArchDescriptor, sched: Schedule, cfg: TeacherConfig,
                  init: ParamVector | None = None, progress=None) -> TeacherResult:
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, rng) if init is None else init.copy()
    opt = Adam(params, cfg.adam)
    metrics = []
    for step in range(1, cfg.steps + 1):
        x, labels = sample_data(dataset, cfg.batch_size, rng)
        labels = drop_labels(labels, arch.num_classes, cfg.cond_dropout, rng)
        try:
            loss, grad = diffusion_loss(params, arch, sched, cfg.time, (x, labels), rng)
        except DivergenceError as e:
            e.step = step
            raise
        lr = cfg.adam.lr_at(step)
        opt.update(params, grad, lr)
        if not np.all(np.isfinite(params.data)):
            raise DivergenceError("non-finite parameters", step=step)
        if step % cfg.log_every == 0 or step == cfg.steps:
            metrics.append((step, loss, lr))
            if progress is not None:
                progress(step, loss)
    if cfg.steps == 0:
        log.info("no training steps; estimating preconditioner with %d warm-up passes", FALLBACK_STEPS)
        v_hat = estimate_second_moment(params, dataset, arch, sched, cfg, rng)
    else:
        v_hat = params.like(opt.v_hat())
    return TeacherResult(params, Preconditioner.from_second_moment(v_hat, cfg.adam.eps), v_hat, metrics)


def estimate_second_moment(params, dataset, arch, sched, cfg: TeacherConfig, rng, n_steps: int = FALLBACK_STEPS):
    """Populate Adam's v with ``n_steps`` gradient evaluations at learning rate 0."""
    probe = params.copy()
    opt = Adam(probe, cfg.adam)
    for _ in range(n_steps):
        x, labels = sample_data(dataset, cfg.batch_size, rng)
        labels = drop_labels(labels, arch.num_classes, cfg.cond_dropout, rng)
        _, grad = diffusion_loss(probe, arch, sched, cfg.time, (x, labels), rng)
        opt.update(probe, grad, lr=0.0)
    return params.like(opt.v_hat())


def fallback_preconditioner(params, dataset, arch, sched, cfg: TeacherConfig, seed: int = 0) -> Preconditioner:
    v_hat = estimate_second_moment(params, dataset, arch, sched, cfg, np.random.default_rng(seed))
    return Preconditioner.from_second_moment(v_hat, cfg.adam.eps)
