"""k-step ancestral / DDIM sampling and the generator-side transitions used in distillation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mmdistill.denoiser import ArchDescriptor, GuidanceConfig, denoise, denoise_guided
from mmdistill.params import ParamVector
from mmdistill.schedule import Schedule, ScheduleError

TRANSITIONS = ("conditional", "marginal")


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 8
    mode: str = "ancestral"
    noise_multiplier: float = 1.0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in ("ancestral", "ddim"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be >= 0")


def time_grid(k: int) -> list[tuple[float, float]]:
    """(t, s) pairs for t in {1, (k-1)/k, ..., 1/k}, s = t - 1/k."""
    return [((k - i) / k, (k - i - 1) / k) for i in range(k)]


def sample_with(denoise_fn: Callable, sched: Schedule, cfg: SamplerConfig, n: int, rng: np.random.Generator,
                dim: int = 2) -> np.ndarray:
    """Run the sampler with an arbitrary ``denoise_fn(z_t, t) -> x_hat``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.standard_normal((n, dim))
    x_hat = None
    for t, s in time_grid(cfg.k):
        x_hat = denoise_fn(z, t)
        if cfg.mode == "ancestral":
            p = sched.posterior(t, s)
            z = p.mean_coeff_zt * z + p.mean_coeff_x * x_hat
            if p.std > 0 and cfg.noise_multiplier > 0:
                z = z + cfg.noise_multiplier * p.std * rng.standard_normal(z.shape)
        else:
            a_t, sig_t = sched.alpha_sigma(t)
            a_s, sig_s = sched.alpha_sigma(s)
            z = a_s * x_hat + sig_s * (z - a_t * x_hat) / sig_t
    return x_hat


def sample(params: ParamVector, arch: ArchDescriptor, sched: Schedule, cfg: SamplerConfig, n: int,
           class_id=None, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if class_id is not None:
        class_id = np.broadcast_to(np.asarray(class_id), (n,))
    elif cfg.guidance.scale > 0:
        raise ValueError("guided sampling needs class labels")

    def fn(z, t):
        return denoise_guided(params, arch, sched, z, t, class_id, cfg.guidance)

    return sample_with(fn, sched, cfg, n, rng, arch.input_dim)


def transition(sched: Schedule, t, s, z_t, x_tilde, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Draw z_s given the generator output: q(z_s | z_t, x~) or q(z_s | x~)."""
    if mode not in TRANSITIONS:
        raise ValueError(f"unknown transition mode {mode!r}")
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s > t):
        raise ScheduleError("transition requires s <= t")
    eps = rng.standard_normal(np.shape(z_t))
    mean, std = transition_moments(sched, t, s, z_t, x_tilde, mode)
    return mean + std * eps


def transition_moments(sched: Schedule, t, s, z_t, x_tilde, mode: str):
    """Mean and per-row std of the transition distribution."""
    col = (lambda v: np.reshape(v, (-1, 1))) if np.ndim(t) or np.ndim(s) else (lambda v: v)
    if mode == "conditional":
        p = sched.posterior(t, s)
        return col(p.mean_coeff_zt) * z_t + col(p.mean_coeff_x) * x_tilde, col(p.std)
    a_s, sig_s = sched.alpha_sigma(s)
    return col(a_s) * x_tilde, col(sig_s)


def generator_transition(params_eta: ParamVector, arch: ArchDescriptor, sched: Schedule, t, s, z_t, mode: str,
                         rng: np.random.Generator, class_id=None):
    """x~ = g_eta(z_t, t); z_s from the chosen transition. Returns (x~, z_s)."""
    x_tilde = denoise(params_eta, arch, sched, z_t, t, class_id)
    return x_tilde, transition(sched, t, s, z_t, x_tilde, mode, rng)
