"""Toy 2-D datasets and the closed-form diffused Gaussian-mixture oracle."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from mmdistill.schedule import Schedule


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture sum_i pi_i N(mu_i, s_i^2 I)."""

    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.scales, dtype=np.float64)
        if w.ndim != 1 or m.shape[0] != w.size or s.shape != w.shape:
            raise ValueError("weights, means and scales must agree in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(s <= 0):
            raise ValueError("component scales must be positive")
        object.__setattr__(self, "weights", tuple(map(float, w)))
        object.__setattr__(self, "means", tuple(tuple(map(float, r)) for r in m))
        object.__setattr__(self, "scales", tuple(map(float, s)))

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights)

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.means)

    @property
    def s(self) -> np.ndarray:
        return np.asarray(self.scales)

    @property
    def n_modes(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def mean(self) -> np.ndarray:
        return self.w @ self.mu

    def std(self) -> float:
        """Root mean per-coordinate variance of the mixture."""
        m = self.mean()
        var = self.w @ (self.s**2 + ((self.mu - m) ** 2).mean(axis=1))
        return float(np.sqrt(var))


def ring_gmm(n_modes: int = 8, radius: float = np.sqrt(2.0), scale: float = 0.1) -> GmmSpec:
    """Equal-weight modes on a circle; the default has roughly unit variance per coordinate."""
    ang = 2 * np.pi * np.arange(n_modes) / n_modes
    means = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    return GmmSpec(tuple(np.full(n_modes, 1.0 / n_modes)), tuple(map(tuple, means)), tuple(np.full(n_modes, scale)))


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "gmm"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("gmm", "ring", "checkerboard"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")

    def gmm(self) -> GmmSpec:
        if self.kind != "gmm":
            raise ValueError(f"dataset {self.kind!r} has no analytic oracle")
        p = self.params
        if "means" in p:
            return GmmSpec(tuple(p["weights"]), tuple(map(tuple, p["means"])), tuple(p["scales"]))
        return ring_gmm(p.get("n_modes", 8), p.get("radius", float(np.sqrt(2.0))), p.get("scale", 0.1))

    @property
    def num_classes(self) -> int:
        return self.gmm().n_modes if self.kind == "gmm" else 0

    def bounds(self) -> tuple[float, float]:
        return (-self.params.get("half_width", 2.0), self.params.get("half_width", 2.0))


def sample_data(spec, n: int, rng: np.random.Generator):
    """Draw ``n`` points; returns ``(x[n, 2], labels[n])``. Labels are -1 where undefined."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(spec, GmmSpec):
        return _sample_gmm(spec, n, rng)
    if spec.kind == "gmm":
        return _sample_gmm(spec.gmm(), n, rng)
    if spec.kind == "ring":
        r = spec.params.get("radius", 1.0) + spec.params.get("noise", 0.05) * rng.standard_normal(n)
        ang = rng.uniform(0.0, 2 * np.pi, n)
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1), np.full(n, -1)
    # checkerboard: 4x4 cells on [-h, h]^2, only cells with even (i + j) are populated
    h = spec.params.get("half_width", 2.0)
    cell = h / 2.0
    cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
    pick = rng.integers(0, len(cells), n)
    x = (cells[pick] + rng.random((n, 2))) * cell - h
    return x, pick


def _sample_gmm(g: GmmSpec, n, rng):
    labels = rng.choice(g.n_modes, size=n, p=g.w)
    x = g.mu[labels] + g.s[labels, None] * rng.standard_normal((n, g.dim))
    return x, labels


def _diffused(g: GmmSpec, sched: Schedule, t):
    a, s = sched.alpha_sigma(t)
    a = np.reshape(a, (-1, 1))
    s = np.reshape(s, (-1, 1))
    var = a**2 * g.s[None, :] ** 2 + s**2  # (B or 1, K)
    return a, s, var


def log_responsibilities(g: GmmSpec, sched: Schedule, z_t, t, class_id=None) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    a, _, var = _diffused(g, sched, t)
    d = g.dim
    sq = ((z[:, None, :] - a[:, :, None] * g.mu[None, :, :]) ** 2).sum(-1)
    logp = np.log(g.w)[None, :] - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
    if class_id is not None:
        mask = np.arange(g.n_modes)[None, :] == np.reshape(class_id, (-1, 1))
        logp = np.where(mask, logp, -np.inf)
    return logp - logsumexp(logp, axis=1, keepdims=True)


def log_density(g: GmmSpec, sched: Schedule, z_t, t) -> np.ndarray:
    """log q(z_t), only used to cross-check the score."""
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    a, _, var = _diffused(g, sched, t)
    sq = ((z[:, None, :] - a[:, :, None] * g.mu[None, :, :]) ** 2).sum(-1)
    logp = np.log(g.w)[None, :] - 0.5 * g.dim * np.log(2 * np.pi * var) - 0.5 * sq / var
    return logsumexp(logp, axis=1)


def _component_posterior(g: GmmSpec, sched, z, t):
    a, s, var = _diffused(g, sched, t)
    gain = a * g.s[None, :] ** 2 / var  # (B, K)
    means = g.mu[None] + gain[:, :, None] * (z[:, None, :] - a[:, :, None] * g.mu[None])
    post_var = g.s[None, :] ** 2 * s**2 / var
    return means, post_var


def oracle_denoise(g: GmmSpec, sched: Schedule, z_t, t, class_id=None) -> np.ndarray:
    """E_q[x | z_t] (optionally also conditioned on the mode label)."""
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    if np.all(t == 0):
        return z.copy()
    r = np.exp(log_responsibilities(g, sched, z, t, class_id))
    means, _ = _component_posterior(g, sched, z, t)
    out = np.einsum("bk,bkd->bd", r, means)
    if np.any(t == 0):
        out = np.where(np.reshape(t == 0, (-1, 1)), z, out)
    return out


def oracle_score(g: GmmSpec, sched: Schedule, z_t, t) -> np.ndarray:
    """grad log q(z_t) = (alpha_t E[x|z_t] - z_t) / sigma_t^2."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t == 0):
        raise ValueError("score is undefined at t = 0")
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    a, s = sched.alpha_sigma(t)
    a = np.reshape(a, (-1, 1))
    s = np.reshape(s, (-1, 1))
    return (a * oracle_denoise(g, sched, z, t) - z) / s**2


def oracle_sample_posterior(g: GmmSpec, sched: Schedule, z_t, t, rng: np.random.Generator, class_id=None):
    """Exact draw x ~ q(x | z_t): a component by responsibility, then its Gaussian posterior."""
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    r = np.exp(log_responsibilities(g, sched, z, t, class_id))
    cdf = np.cumsum(r, axis=1)
    u = rng.random((z.shape[0], 1))
    comp = np.minimum((u > cdf).sum(axis=1), g.n_modes - 1)
    means, post_var = _component_posterior(g, sched, z, t)
    rows = np.arange(z.shape[0])
    pv = np.broadcast_to(post_var, r.shape)
    return means[rows, comp] + np.sqrt(pv[rows, comp])[:, None] * rng.standard_normal(z.shape)


def write_samples_csv(path, x, labels=None, extra: dict | None = None) -> None:
    """CSV with header x0,x1,label[,extra columns]."""
    x = np.asarray(x)
    labels = np.full(len(x), -1) if labels is None else np.asarray(labels)
    extra = extra or {}
    cols = ["x0", "x1", "label", *extra]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for i in range(len(x)):
            row = [repr(float(x[i, 0])), repr(float(x[i, 1])), str(int(labels[i]))]
            row += [str(v) for v in extra.values()]
            f.write(",".join(row) + "\n")


def read_samples_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header[:2] != ["x0", "x1"]:
            raise ValueError(f"{path}: expected header starting with x0,x1")
        rows = [line.strip().split(",") for line in f if line.strip()]
    if not rows:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
    x = np.array([[float(r[0]), float(r[1])] for r in rows])
    li = header.index("label") if "label" in header else None
    labels = np.array([int(r[li]) for r in rows]) if li is not None else np.full(len(rows), -1)
    return x, labels
