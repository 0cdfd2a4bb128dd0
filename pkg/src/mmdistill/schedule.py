"""Variance-preserving cosine schedule, ancestral posteriors, and time weighting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ScheduleError(ValueError):
    pass


def _check_time(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ScheduleError(f"diffusion time must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class Schedule:
    """alpha_t = cos(pi t / 2) with an additive log-SNR shift (nats)."""

    kind: str = "cosine"
    logsnr_shift: float = 0.0

    def __post_init__(self):
        if self.kind != "cosine":
            raise ScheduleError(f"unsupported schedule kind {self.kind!r}")

    def alpha_sigma(self, t):
        t = _check_time(t)
        # sin(pi(1-t)/2) rather than cos(pi t/2) so that alpha_1 == 0 exactly
        c = np.sin(0.5 * np.pi * (1.0 - t))
        s = np.sin(0.5 * np.pi * t)
        if self.logsnr_shift != 0.0:
            g = np.exp(0.5 * self.logsnr_shift)
            norm = np.sqrt((g * c) ** 2 + s**2)
            c, s = g * c / norm, s / norm
        return c, s

    def logsnr(self, t):
        a, s = self.alpha_sigma(t)
        with np.errstate(divide="ignore"):
            return 2.0 * (np.log(a) - np.log(s))

    def t_from_logsnr(self, logsnr):
        lam = np.asarray(logsnr, dtype=np.float64) - self.logsnr_shift
        return 2.0 / np.pi * np.arctan(np.exp(-0.5 * lam))

    def posterior(self, t, s) -> "PosteriorParams":
        """Coefficients of q(z_s | z_t, x) = N(a z_t + b x, std^2 I).

        Uses the algebraically reduced forms
        ``var = sigma_s^2 sigma_{t|s}^2 / sigma_t^2``,
        ``a = sigma_s^2 alpha_{t|s} / sigma_t^2``,
        ``b = alpha_s sigma_{t|s}^2 / sigma_t^2``,
        which stay finite at s = 0 and t = 1.
        """
        t = _check_time(t)
        s = _check_time(s)
        t, s = np.broadcast_arrays(t, s)
        if np.any(s > t):
            raise ScheduleError("posterior requires s <= t")
        a_t, sig_t = self.alpha_sigma(t)
        a_s, sig_s = self.alpha_sigma(s)
        same = s == t
        with np.errstate(divide="ignore", invalid="ignore"):
            a_ts = np.where(same, 1.0, a_t / np.where(a_s == 0.0, 1.0, a_s))
            var_ts = np.maximum(sig_t**2 - a_ts**2 * sig_s**2, 0.0)
            sig_ts = np.sqrt(var_ts)
            inv = np.where(same, 1.0, 1.0 / np.where(sig_t == 0.0, 1.0, sig_t))
            coeff_zt = np.where(same, 1.0, sig_s**2 * a_ts * inv**2)
            coeff_x = np.where(same, 0.0, a_s * var_ts * inv**2)
            std = np.where(same, 0.0, sig_s * sig_ts * inv)
        if coeff_zt.ndim == 0:
            return PosteriorParams(float(coeff_zt), float(coeff_x), float(std))
        return PosteriorParams(coeff_zt, coeff_x, std)

    def diffuse(self, x, t, eps):
        """Forward diffusion z_t = alpha_t x + sigma_t eps (t broadcast per row)."""
        a, s = self.alpha_sigma(t)
        a = np.reshape(a, (-1, 1)) if np.ndim(a) else a
        s = np.reshape(s, (-1, 1)) if np.ndim(s) else s
        return a * x + s * eps


class PosteriorParams(NamedTuple):
    mean_coeff_zt: float | np.ndarray
    mean_coeff_x: float | np.ndarray
    std: float | np.ndarray


def posterior(sched: Schedule, t, s, z_t=None, x=None):
    """Posterior parameters; with ``z_t`` and ``x`` also returns the mean."""
    p = sched.posterior(t, s)
    if z_t is None:
        return p
    a = np.reshape(p.mean_coeff_zt, (-1, 1)) if np.ndim(p.mean_coeff_zt) else p.mean_coeff_zt
    b = np.reshape(p.mean_coeff_x, (-1, 1)) if np.ndim(p.mean_coeff_x) else p.mean_coeff_x
    return p, a * np.asarray(z_t) + b * np.asarray(x)


def posterior_var_reference(sched: Schedule, t, s):
    """Literal (1/sigma_s^2 + alpha_{t|s}^2 / sigma_{t|s}^2)^-1 and the mean weights.

    Only valid for 0 < s < t, where nothing divides by zero. Kept separate
    from :meth:`Schedule.posterior` so the two forms can be cross-checked.
    """
    a_t, sig_t = sched.alpha_sigma(t)
    a_s, sig_s = sched.alpha_sigma(s)
    a_ts = a_t / a_s
    var_ts = sig_t**2 - a_ts**2 * sig_s**2
    var = 1.0 / (1.0 / sig_s**2 + a_ts**2 / var_ts)
    return var, var * a_ts / var_ts, var * a_s / sig_s**2


@dataclass(frozen=True)
class TimeWeighting:
    """Distribution p(s) over target times and loss weight w(s).

    ``p_s="edm_grid"`` draws noise levels from the EDM sampling schedule
    ``(smax^(1/rho) + u (smin^(1/rho) - smax^(1/rho)))^rho`` and maps them to
    times; ``grid_size > 0`` restricts u to that many grid points.
    """

    p_s: str = "uniform"
    w_s: str = "flat"
    rho: float = 7.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    grid_size: int = 0

    def __post_init__(self):
        if self.p_s not in ("uniform", "edm_grid"):
            raise ScheduleError(f"unknown p_s {self.p_s!r}")
        if self.w_s not in ("flat", "edm"):
            raise ScheduleError(f"unknown w_s {self.w_s!r}")


def sample_time(tw: TimeWeighting, sched: Schedule, k: int, rng: np.random.Generator, size=None):
    """Draw target times s ~ p(s) and t = min(s + delta, 1), delta ~ U[0, 1/k]."""
    if k < 1:
        raise ScheduleError("k must be >= 1")
    if tw.p_s == "uniform":
        s = 1.0 - rng.random(size)  # (0, 1]
    else:
        if tw.grid_size > 0:
            u = rng.integers(0, tw.grid_size, size) / max(tw.grid_size - 1, 1)
        else:
            u = rng.random(size)
        lo, hi = tw.sigma_min ** (1.0 / tw.rho), tw.sigma_max ** (1.0 / tw.rho)
        sig = (hi + u * (lo - hi)) ** tw.rho
        s = sched.t_from_logsnr(-2.0 * np.log(sig))
    delta = rng.random(size) / k
    t = np.minimum(s + delta, 1.0)
    return s, t


def loss_weight(tw: TimeWeighting, sched: Schedule, s):
    """w(s): 1 for flat; (sig^2 + sd^2) / (sig sd)^2 with sig = sigma_s / alpha_s for edm."""
    s = _check_time(s)
    if tw.w_s == "flat":
        return np.ones_like(s)
    if np.any(s == 0.0):
        raise ScheduleError("edm weight is infinite at s = 0")
    a, sig = sched.alpha_sigma(s)
    # (sig~^2 + sd^2)/(sig~ sd)^2 == SNR + 1/sd^2, finite at s = 1
    return (a / sig) ** 2 + 1.0 / tw.sigma_data**2


def logsnr_grid(n: int = 8, lo: float = -6.0, hi: float = 6.0) -> np.ndarray:
    return np.linspace(lo, hi, n)
