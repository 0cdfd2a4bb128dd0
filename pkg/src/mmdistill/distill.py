"""Moment-matching distillation: alternating generator/auxiliary updates and the instant variant.

Both variants train a generator g_eta (initialised at the teacher) whose
outputs x~ = g_eta(z_t, t) should be samples from q(x | z_t) rather than its
mean. The generator loss is always of the form ``w(s) x~^T sg[c]`` so its
gradient is the generator pullback applied to a fixed cotangent ``w(s) c``;
z_s is drawn from x~ without tracking its dependence on eta.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from mmdistill import autodiff as ad
from mmdistill.data import DatasetSpec, sample_data
from mmdistill.denoiser import ArchDescriptor, GuidanceConfig, make_net
from mmdistill.optim import Adam, AdamConfig, Preconditioner, precondition
from mmdistill.params import DualParamVector, LayoutError, ParamVector
from mmdistill.sampler import TRANSITIONS, transition_moments
from mmdistill.schedule import Schedule, TimeWeighting, loss_weight, sample_time
from mmdistill.teacher import DivergenceError

log = logging.getLogger(__name__)

VARIANTS = ("alternating", "instant")


def default_time_weighting(k: int, sigma_data: float = 1.0) -> TimeWeighting:
    """EDM-grid p(s) with flat w(s) for every k.

    ``w_s="edm"`` stays available, but without c_skip/c_out preconditioning in
    the network its weight reaches ~1e5 at the smallest noise levels and the
    generator drifts at high noise; flat weighting was better at every noise
    level in pilots.
    """
    del k  # the policy no longer depends on the step count
    return TimeWeighting(p_s="edm_grid", w_s="flat", sigma_data=sigma_data)


@dataclass(frozen=True)
class DistillConfig:
    variant: str = "alternating"
    k: int = 8
    transition: str = "conditional"
    time: TimeWeighting | None = None  # None -> default_time_weighting(k)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    opt_eta: AdamConfig = field(default_factory=lambda: AdamConfig(lr=3e-4, warmup_steps=500))
    opt_phi: AdamConfig | None = field(default_factory=lambda: AdamConfig(lr=3e-4, warmup_steps=500))
    total_steps: int = 20000
    batch_size: int = 256
    eval_every: int = 0
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.transition not in TRANSITIONS:
            raise ValueError(f"unknown transition {self.transition!r}")
        if self.variant == "alternating" and self.opt_phi is None:
            raise ValueError("alternating distillation needs opt_phi")

    def time_weighting(self, sigma_data: float = 1.0) -> TimeWeighting:
        return self.time if self.time is not None else default_time_weighting(self.k, sigma_data)


@dataclass
class GenBatch:
    """Inputs of one generator pass: noisy data z_t at times t, targets s, weights w.

    ``eps`` is the transition noise, so the same batch always yields the same z_s.
    """

    z_t: np.ndarray
    t: np.ndarray
    s: np.ndarray
    w: np.ndarray
    labels: np.ndarray | None
    eps: np.ndarray

    def __len__(self):
        return self.z_t.shape[0]


def draw_batch(dataset: DatasetSpec, sched: Schedule, tw: TimeWeighting, k: int, n: int, rng,
               conditional_labels: bool) -> GenBatch:
    """Data -> forward diffusion to z_t, with (s, t) from p(s) and the 1/k delta."""
    x, labels = sample_data(dataset, n, rng)
    s, t = sample_time(tw, sched, k, rng, n)
    z_t = sched.diffuse(x, t, rng.standard_normal(x.shape))
    w = loss_weight(tw, sched, s)
    return GenBatch(z_t, t, s, w, labels if conditional_labels else None, rng.standard_normal(x.shape))


def _transition(sched, batch: GenBatch, x_tilde, mode):
    mean, std = transition_moments(sched, batch.t, batch.s, batch.z_t, x_tilde, mode)
    return mean + std * batch.eps


def _check_finite(*values, what="loss"):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite {what}")


def _teacher_net(arch, sched, s, n, labels, guidance):
    # guidance is only ever applied to the teacher
    g = guidance if guidance is not None and guidance.active else None
    return make_net(arch, sched, s, n, labels, g)


# ---------------------------------------------------------------------------
# alternating variant


def aux_loss_grad(phi: ParamVector, theta: ParamVector, arch: ArchDescriptor, sched: Schedule, x_tilde, z_s, s, w,
                  labels=None, guidance: GuidanceConfig | None = None):
    """L(phi) = mean w(s) { ||x~ - g_phi(z_s)||^2 + ||g_theta(z_s) - g_phi(z_s)||^2 } and its phi-gradient."""
    n = z_s.shape[0]
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
    g_phi, pullback = ad.linearize_params(make_net(arch, sched, s, n, labels), phi, z_s)
    g_theta = ad.forward(_teacher_net(arch, sched, s, n, labels, guidance), theta, z_s)
    r1 = x_tilde - g_phi
    r2 = g_theta - g_phi
    loss = float(np.mean(w * ((r1**2).sum(1) + (r2**2).sum(1))))
    _check_finite(loss)
    grad = pullback(-2.0 * w[:, None] * (r1 + r2) / n)
    return loss, grad


def gen_loss_grad_alternating(eta, phi, theta, arch, sched, batch: GenBatch, mode: str = "conditional",
                              guidance: GuidanceConfig | None = None):
    """L(eta) = mean w(s) x~^T sg[g_phi(z_s) - g_theta(z_s)] and its eta-gradient.

    Returns ``(loss, grad, x_tilde, z_s, cotangent)``.
    """
    n = len(batch)
    x_tilde, pullback = ad.linearize_params(make_net(arch, sched, batch.t, n, batch.labels), eta, batch.z_t)
    z_s = _transition(sched, batch, x_tilde, mode)
    g_phi = ad.forward(make_net(arch, sched, batch.s, n, batch.labels), phi, z_s)
    g_theta = ad.forward(_teacher_net(arch, sched, batch.s, n, batch.labels, guidance), theta, z_s)
    bracket = g_phi - g_theta
    loss = float(np.mean(batch.w * (x_tilde * bracket).sum(1)))
    _check_finite(loss)
    cot = batch.w[:, None] * bracket / n
    return loss, pullback(cot), x_tilde, z_s, cot


# ---------------------------------------------------------------------------
# instant variant


def teacher_gradient(theta, arch, sched, x_tilde, z_s, s, w, labels=None, guidance=None):
    """grad_theta of mean w(s) ||x~ - g_theta(z_s)||^2 (guided value, straight-through derivative)."""
    n = z_s.shape[0]
    w = np.broadcast_to(np.asarray(w, dtype=np.float64), (n,))
    pred, pullback = ad.linearize_params(_teacher_net(arch, sched, s, n, labels, guidance), theta, z_s)
    return pullback(2.0 * w[:, None] * (pred - x_tilde) / n)


@dataclass
class InstantResult:
    loss: float            # L_instant = mean -w x~^T sg(J nu)
    matching_loss: float   # 1/2 grad_A^T Lambda grad_B, unbiased for 1/2 ||E grad||^2_Lambda
    grad: ParamVector
    nu: ParamVector
    cotangent: np.ndarray


def instant_loss_grad(eta, theta, lam: Preconditioner, arch, sched, batch_a: GenBatch, batch_b: GenBatch,
                      mode: str = "conditional", guidance: GuidanceConfig | None = None) -> InstantResult:
    """Two-batch parameter-space moment matching step.

    nu = Lambda grad_theta L_theta(x~', z_s') on batch B. On batch A the
    auxiliary model is the limit of theta - lambda nu, so
    (g_phi(z_s) - g_theta(z_s)) / lambda -> -J_theta(z_s) nu, and the
    generator cotangent is ``-w(s) J nu``.
    """
    theta.check_layout(lam.diag)
    theta.check_layout(eta)
    nb = len(batch_b)
    x_b = ad.forward(make_net(arch, sched, batch_b.t, nb, batch_b.labels), eta, batch_b.z_t)
    z_sb = _transition(sched, batch_b, x_b, mode)
    nu = precondition(lam, teacher_gradient(theta, arch, sched, x_b, z_sb, batch_b.s, batch_b.w, batch_b.labels,
                                            guidance))

    na = len(batch_a)
    x_a, pullback = ad.linearize_params(make_net(arch, sched, batch_a.t, na, batch_a.labels), eta, batch_a.z_t)
    z_sa = _transition(sched, batch_a, x_a, mode)
    teacher_a = _teacher_net(arch, sched, batch_a.s, na, batch_a.labels, guidance)
    g_theta, jv = ad.value_and_jvp(teacher_a, DualParamVector(theta, nu), z_sa)
    w = batch_a.w[:, None]
    loss = float(np.mean(-(w * x_a * jv).sum(1)))
    matching = float(np.mean((w * (g_theta - x_a) * jv).sum(1)))
    _check_finite(loss, matching)
    cot = -w * jv / na
    return InstantResult(loss, matching, pullback(cot), nu, cot)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class DistillResult:
    eta: ParamVector
    metrics: list[dict]
    phi: ParamVector | None = None


def _log_row(metrics, step, loss, loss_phi, gnorm, eval_fn, cfg, eta, extra=None):
    row = {"step": step, "loss": loss, "loss_phi": loss_phi, "grad_norm_eta": gnorm, "moment_residual": None}
    if extra:
        row.update(extra)
    if eval_fn is not None and cfg.eval_every and step % cfg.eval_every == 0:
        row["moment_residual"] = float(eval_fn(eta))
    metrics.append(row)


def distill_alternating(theta: ParamVector, dataset: DatasetSpec, arch: ArchDescriptor, sched: Schedule,
                        cfg: DistillConfig, eval_fn: Callable | None = None, progress=None) -> DistillResult:
    """Even steps fit the auxiliary model, odd steps update the generator."""
    rng = np.random.default_rng(cfg.seed)
    tw = cfg.time_weighting(_sigma_data(dataset))
    eta, phi = theta.copy(), theta.copy()
    n_eta = cfg.total_steps // 2
    n_phi = cfg.total_steps - n_eta
    opt_eta = Adam(eta, _with_total(cfg.opt_eta, n_eta))
    opt_phi = Adam(phi, _with_total(cfg.opt_phi, n_phi))
    cond = arch.num_classes > 0
    metrics: list[dict] = []
    last_eta = last_phi = float("nan")
    gnorm = 0.0
    for n in range(cfg.total_steps):
        batch = draw_batch(dataset, sched, tw, cfg.k, cfg.batch_size, rng, cond)
        try:
            if n % 2 == 0:
                x_tilde = ad.forward(make_net(arch, sched, batch.t, len(batch), batch.labels), eta, batch.z_t)
                z_s = _transition(sched, batch, x_tilde, cfg.transition)
                last_phi, grad = aux_loss_grad(phi, theta, arch, sched, x_tilde, z_s, batch.s, batch.w,
                                               batch.labels, cfg.guidance)
                opt_phi.update(phi, grad)
            else:
                last_eta, grad, *_ = gen_loss_grad_alternating(eta, phi, theta, arch, sched, batch, cfg.transition,
                                                               cfg.guidance)
                gnorm = opt_eta.update(eta, grad)
        except DivergenceError as e:
            e.step = n
            raise
        if not (np.all(np.isfinite(eta.data)) and np.all(np.isfinite(phi.data))):
            raise DivergenceError("non-finite parameters", step=n)
        step = n + 1
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            _log_row(metrics, step, last_eta, last_phi, gnorm, eval_fn, cfg, eta)
            if progress is not None:
                progress(step, last_eta)
    return DistillResult(eta, metrics, phi)


def distill_instant(theta: ParamVector, lam: Preconditioner, dataset: DatasetSpec, arch: ArchDescriptor,
                    sched: Schedule, cfg: DistillConfig, eval_fn: Callable | None = None, progress=None) -> DistillResult:
    rng = np.random.default_rng(cfg.seed)
    tw = cfg.time_weighting(_sigma_data(dataset))
    if not lam.diag.same_layout(theta):
        raise LayoutError("preconditioner layout differs from teacher")
    eta = theta.copy()
    opt = Adam(eta, _with_total(cfg.opt_eta, cfg.total_steps))
    cond = arch.num_classes > 0
    metrics: list[dict] = []
    for n in range(cfg.total_steps):
        a = draw_batch(dataset, sched, tw, cfg.k, cfg.batch_size, rng, cond)
        b = draw_batch(dataset, sched, tw, cfg.k, cfg.batch_size, rng, cond)
        try:
            res = instant_loss_grad(eta, theta, lam, arch, sched, a, b, cfg.transition, cfg.guidance)
        except DivergenceError as e:
            e.step = n
            raise
        gnorm = opt.update(eta, res.grad)
        if not np.all(np.isfinite(eta.data)):
            raise DivergenceError("non-finite parameters", step=n)
        step = n + 1
        if step % cfg.log_every == 0 or step == cfg.total_steps:
            _log_row(metrics, step, res.matching_loss, None, gnorm, eval_fn, cfg, eta, {"loss_instant": res.loss})
            if progress is not None:
                progress(step, res.matching_loss)
    return DistillResult(eta, metrics)


def distill(theta, lam, dataset, arch, sched, cfg: DistillConfig, eval_fn=None, progress=None) -> DistillResult:
    if cfg.variant == "alternating":
        return distill_alternating(theta, dataset, arch, sched, cfg, eval_fn, progress)
    if lam is None:
        raise ValueError("instant distillation needs a preconditioner")
    return distill_instant(theta, lam, dataset, arch, sched, cfg, eval_fn, progress)


def _with_total(cfg: AdamConfig, total: int) -> AdamConfig:
    return replace(cfg, total_steps=max(total, 1), warmup_steps=min(cfg.warmup_steps, max(total, 1)))


def _sigma_data(dataset: DatasetSpec) -> float:
    return dataset.gmm().std() if dataset.kind == "gmm" else 1.0
