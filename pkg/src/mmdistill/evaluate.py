"""Energy distance with a permutation null, mode coverage, and the moment-condition residual."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from mmdistill.data import GmmSpec, oracle_denoise, oracle_sample_posterior, sample_data
from mmdistill.denoiser import ArchDescriptor, denoise
from mmdistill.sampler import transition
from mmdistill.schedule import Schedule, logsnr_grid

_CHUNK = 2048


def _mean_dist(a: np.ndarray, b: np.ndarray) -> tuple[float, int]:
    total = 0.0
    for i in range(0, len(a), _CHUNK):
        total += cdist(a[i:i + _CHUNK], b).sum()
    return total, len(a) * len(b)


def energy_distance(a, b, unbiased: bool = False) -> float:
    """2 E||a - b|| - E||a - a'|| - E||b - b'||.

    The default plug-in (V-statistic) value is the energy distance between the
    two empirical measures: exactly 0 for identical sets and never negative.
    ``unbiased=True`` drops the i == j terms of the within-set means.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("energy distance needs at least 2 points per set")
    sab, nab = _mean_dist(a, b)
    saa, naa = _mean_dist(a, a)
    sbb, nbb = _mean_dist(b, b)
    if unbiased:
        naa -= len(a)
        nbb -= len(b)
    return float(2 * sab / nab - saa / naa - sbb / nbb)


@dataclass
class PermutationResult:
    statistic: float
    threshold: float
    p_value: float

    @property
    def passed(self) -> bool:
        return self.statistic <= self.threshold


def permutation_test(a, b, n_perm: int = 200, quantile: float = 0.99, rng=None, max_n: int = 2000) -> PermutationResult:
    """Energy-distance two-sample test; ``max_n`` caps each set by subsampling."""
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) > max_n:
        a = a[rng.choice(len(a), max_n, replace=False)]
    if len(b) > max_n:
        b = b[rng.choice(len(b), max_n, replace=False)]
    pooled = np.concatenate([a, b])
    d = cdist(pooled, pooled)
    na, nb = len(a), len(b)

    def stat(mask):
        l = mask.astype(np.float64)
        dl = d @ l
        s_aa = l @ dl
        s_ab = (1.0 - l) @ dl
        s_bb = d.sum() - 2 * s_ab - s_aa
        return 2 * s_ab / (na * nb) - s_aa / na**2 - s_bb / nb**2

    labels = np.zeros(na + nb, dtype=bool)
    labels[:na] = True
    observed = stat(labels)
    null = np.array([stat(rng.permutation(labels)) for _ in range(n_perm)])
    return PermutationResult(float(observed), float(np.quantile(null, quantile)),
                             float((1 + np.sum(null >= observed)) / (n_perm + 1)))


def mode_coverage(samples, spec: GmmSpec, radius_mult: float = 3.0, min_count: int | None = None,
                  min_fraction: float = 0.2) -> float:
    """Fraction of modes with at least ``min_count`` samples within radius_mult * s_i of mu_i.

    When ``min_count`` is None it is ``min_fraction`` of the mode's expected
    count n * pi_i (at least 1).
    """
    if not isinstance(spec, GmmSpec):
        raise TypeError("mode coverage needs a GmmSpec")
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    d = np.linalg.norm(x[:, None, :] - spec.mu[None], axis=-1)
    inside = (d <= radius_mult * spec.s[None, :]).sum(axis=0)
    if min_count is None:
        need = np.maximum(np.ceil(min_fraction * len(x) * spec.w), 1)
    else:
        need = np.full(spec.n_modes, min_count)
    return float(np.mean(inside >= need))


# ---------------------------------------------------------------------------
# moment residual


def network_generator(params, arch: ArchDescriptor, sched: Schedule) -> Callable:
    def gen(z_t, t):
        return denoise(params, arch, sched, z_t, t)

    return gen


def oracle_generator(spec: GmmSpec, sched: Schedule, rng) -> Callable:
    """Exact x~ ~ q(x | z_t): the ideal distilled generator."""

    def gen(z_t, t):
        return oracle_sample_posterior(spec, sched, z_t, t, rng)

    return gen


def knn_regress(z, x, k: int = 32) -> np.ndarray:
    """Leave-one-out k-nearest-neighbour mean of x at each point of z."""
    tree = cKDTree(z)
    _, idx = tree.query(z, k=k + 1)
    return x[idx[:, 1:]].mean(axis=1)


def moment_residual(generator: Callable, sched: Schedule, spec: GmmSpec, s_grid=None, n: int = 20000, k: int = 8,
                    rng=None, knn: int = 32, mode: str = "conditional") -> np.ndarray:
    """Mean || E_g[x~ | z_s] - E_q[x | z_s] || at each target time in ``s_grid``.

    ``s_grid`` is in times; by default 8 points uniform in log-SNR on [-6, 6].
    The generator sees t = min(s + 1/k, 1) and z_t from diffused data.
    """
    if n < 10 * knn:
        raise ValueError(f"n={n} too small for {knn}-NN regression (need >= {10 * knn})")
    rng = np.random.default_rng(0) if rng is None else rng
    if s_grid is None:
        s_grid = sched.t_from_logsnr(logsnr_grid())
    out = []
    for s in np.atleast_1d(s_grid):
        t = min(float(s) + 1.0 / k, 1.0)
        x, _ = sample_data(spec, n, rng)
        z_t = sched.diffuse(x, t, rng.standard_normal(x.shape))
        x_tilde = generator(z_t, t)
        z_s = transition(sched, t, float(s), z_t, x_tilde, mode, rng)
        est = knn_regress(z_s, x_tilde, knn)
        out.append(float(np.linalg.norm(est - oracle_denoise(spec, sched, z_s, float(s)), axis=1).mean()))
    return np.array(out)


@dataclass
class EvalReport:
    energy_distance: float
    mode_coverage: float | None
    n_samples: int
    seed: int
    moment_residual: list[float] | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_samples(samples, reference, spec: GmmSpec | None = None, seed: int = 0) -> EvalReport:
    cov = mode_coverage(samples, spec) if spec is not None else None
    return EvalReport(energy_distance(samples, reference), cov, len(samples), seed)


def reference_samples(spec, n, seed):
    return sample_data(spec, n, np.random.default_rng(seed))[0]
