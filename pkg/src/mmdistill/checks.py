"""Fast self-checks of the core identities, runnable without the test suite."""

from __future__ import annotations

from typing import Callable

import numpy as np

from mmdistill import autodiff as ad
from mmdistill.autodiff import MLP
from mmdistill.params import DualParamVector
from mmdistill.sampler import transition_moments
from mmdistill.schedule import Schedule, posterior_var_reference


def check_autodiff(n_nets: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst_fd = worst_tr = 0.0
    for _ in range(n_nets):
        dims = (int(rng.integers(1, 5)), int(rng.integers(2, 24)), int(rng.integers(2, 24)), int(rng.integers(1, 4)))
        net = MLP(dims)
        p = net.init(rng)
        p.data += 0.1 * rng.standard_normal(len(p))
        x = rng.normal(size=(4, dims[0]))
        c = rng.normal(size=(4, dims[-1]))
        v = p.like(rng.normal(size=len(p)))
        g = ad.vjp(net, p, x, c).data @ v.data
        jv = np.sum(c * ad.jvp(net, DualParamVector(p, v), x))
        h = 1e-5
        fd = (np.sum(ad.forward(net, p.like(p.data + h * v.data), x) * c)
              - np.sum(ad.forward(net, p.like(p.data - h * v.data), x) * c)) / (2 * h)
        worst_fd = max(worst_fd, abs(g - fd) / max(abs(fd), 1e-3), abs(jv - fd) / max(abs(fd), 1e-3))
        worst_tr = max(worst_tr, abs(g - jv) / max(1.0, abs(jv)))
    return worst_fd < 1e-6 and worst_tr < 1e-10, f"fd rel err {worst_fd:.1e}, transpose err {worst_tr:.1e}"


def check_schedule(sched: Schedule | None = None) -> tuple[bool, str]:
    sched = sched or Schedule()
    a, s = sched.alpha_sigma(np.linspace(0, 1, 1000))
    vp = float(np.max(np.abs(a**2 + s**2 - 1)))
    ident = tuple(sched.posterior(0.4, 0.4)) == (1.0, 0.0, 0.0)
    return vp < 1e-12 and ident, f"max |a^2+s^2-1| = {vp:.1e}, s=t identity {ident}"


def check_one_step(sched: Schedule | None = None, seed: int = 0) -> tuple[bool, str]:
    sched = sched or Schedule()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s in rng.random(50):
        z, xt = rng.normal(size=(2, 3, 2))
        m1, s1 = transition_moments(sched, 1.0, s, z, xt, "conditional")
        m2, s2 = transition_moments(sched, 1.0, s, z, xt, "marginal")
        a_s, sg_s = sched.alpha_sigma(s)
        worst = max(worst, float(np.max(np.abs(m1 - m2))), abs(s1 - s2), float(np.max(np.abs(m1 - a_s * xt))),
                    abs(s1 - sg_s))
    return worst <= 1e-12, f"max deviation {worst:.1e}"


def check_multistep_score(sched: Schedule | None = None, n: int = 1000, seed: int = 0) -> tuple[bool, str]:
    sched = sched or Schedule()
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.01, 0.98, n)
    t = s + rng.uniform(0.01, 1.0, n) * (1 - s)
    xt, zs = rng.normal(size=(2, n)) * 2
    var, ca, cb = posterior_var_reference(sched, t, s)
    a_t, _ = sched.alpha_sigma(t)
    a_s, sg_s = sched.alpha_sigma(s)
    lhs = (ca * (a_t / a_s) * zs + cb * xt - zs) / var
    rhs = (a_s * xt - zs) / sg_s**2
    err = float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(rhs))))
    return err <= 1e-10, f"max rel err {err:.1e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "autodiff": check_autodiff,
    "schedule": check_schedule,
    "one_step_equivalence": check_one_step,
    "multistep_score": check_multistep_score,
}


def run_checks(out=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        ok, detail = fn()
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok_all
