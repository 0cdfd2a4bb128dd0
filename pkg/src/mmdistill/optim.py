"""Adam over flat parameter vectors, with warmup/anneal schedule and norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmdistill.params import ParamVector


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-12
    clip_norm: float | None = 1.0
    warmup_steps: int = 1000
    total_steps: int = 20000

    def lr_at(self, step: int) -> float:
        """Learning rate for the 1-based update ``step``: linear warmup, then linear decay to 0."""
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        rest = self.total_steps - self.warmup_steps
        if rest <= 0:
            return self.lr
        return self.lr * max(self.total_steps - step, 0) / rest


def clip_by_norm(g: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    """Return the clipped gradient and the pre-clip norm."""
    norm = float(np.linalg.norm(g))
    if max_norm is None or norm <= max_norm:
        return g, norm
    c = max_norm / norm
    out = g * c
    while np.linalg.norm(out) > max_norm:
        c = np.nextafter(c, 0.0)
        out = g * c
    return out, norm


class Adam:
    """Adam state (m, v) over a flat ParamVector. With beta1 = 0 it reduces to RMS scaling."""

    def __init__(self, params: ParamVector, cfg: AdamConfig):
        self.cfg = cfg
        self.step = 0
        self.m = params.like(np.zeros(len(params)))
        self.v = params.like(np.zeros(len(params)))

    def update(self, params: ParamVector, grad: ParamVector, lr: float | None = None) -> float:
        """In-place update of ``params``; returns the pre-clip gradient norm."""
        params.check_layout(grad)
        cfg = self.cfg
        self.step += 1
        g, norm = clip_by_norm(grad.data, cfg.clip_norm)
        self.m.data *= cfg.beta1
        self.m.data += (1.0 - cfg.beta1) * g
        self.v.data *= cfg.beta2
        self.v.data += (1.0 - cfg.beta2) * g * g
        lr = cfg.lr_at(self.step) if lr is None else lr
        if lr != 0.0:
            m_hat = self.m.data / (1.0 - cfg.beta1**self.step)
            params.data -= lr * m_hat / (np.sqrt(self.v_hat()) + cfg.eps)
        return norm

    def v_hat(self) -> np.ndarray:
        if self.step == 0:
            return np.zeros_like(self.v.data)
        return self.v.data / (1.0 - self.cfg.beta2**self.step)


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """Frozen positive diagonal scaling Lambda = 1 / (sqrt(v_hat) + eps)."""

    diag: ParamVector

    def __post_init__(self):
        d = self.diag.data
        if not (np.all(np.isfinite(d)) and np.all(d > 0)):
            raise ValueError("preconditioner entries must be positive and finite")
        frozen = self.diag.like(d)
        frozen.data.setflags(write=False)
        object.__setattr__(self, "diag", frozen)

    @classmethod
    def from_second_moment(cls, v_hat: ParamVector, eps: float) -> "Preconditioner":
        return cls(v_hat.like(1.0 / (np.sqrt(v_hat.data) + eps)))

    @classmethod
    def identity(cls, like: ParamVector) -> "Preconditioner":
        return cls(like.like(np.ones(len(like))))


def precondition(lam: Preconditioner, g: ParamVector) -> ParamVector:
    lam.diag.check_layout(g)
    return g.like(lam.diag.data * g.data)
