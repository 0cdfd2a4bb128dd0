import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdistill.data import DatasetSpec, GmmSpec, oracle_denoise, sample_data
from mmdistill.denoiser import ArchDescriptor, init_params
from mmdistill.optim import Adam, AdamConfig, Preconditioner, clip_by_norm, precondition
from mmdistill.params import LayoutError, ParamVector
from mmdistill.schedule import Schedule, TimeWeighting
from mmdistill.teacher import (
    FALLBACK_STEPS,
    DivergenceError,
    TeacherConfig,
    diffusion_loss,
    drop_labels,
    train_teacher,
)

SCHED = Schedule()
SMALL = ArchDescriptor(hidden_dims=(12, 12), time_embed_dim=8)
ORIGIN = DatasetSpec("gmm", {"weights": [1.0], "means": [[0.0, 0.0]], "scales": [1.0]})


class TestAdam:
    def test_beta1_zero_is_rms_scaling(self):
        p = ParamVector(np.array([2.0]), [("x", (1,))])
        cfg = AdamConfig(lr=0.1, beta1=0.0, beta2=0.99, eps=1e-12, clip_norm=None, warmup_steps=0, total_steps=10**9)
        opt = Adam(p, cfg)
        grads = [0.5, -0.3, 0.8]
        x, v = 2.0, 0.0
        for i, g in enumerate(grads, start=1):
            opt.update(p, p.like(np.array([g])))
            v = 0.99 * v + 0.01 * g * g
            v_hat = v / (1 - 0.99**i)
            x -= cfg.lr_at(i) * g / (np.sqrt(v_hat) + 1e-12)
            assert p.data[0] == pytest.approx(x, rel=1e-14)

    def test_first_step_is_sign(self):
        p = ParamVector(np.zeros(3), [("x", (3,))])
        cfg = AdamConfig(lr=1.0, clip_norm=None, warmup_steps=0)
        Adam(p, cfg).update(p, p.like(np.array([3.0, -1e-3, 0.2])))
        np.testing.assert_allclose(p.data, cfg.lr_at(1) * np.array([-1, 1, -1]), rtol=1e-9)

    def test_layout_mismatch(self):
        p = ParamVector(np.zeros(3), [("x", (3,))])
        with pytest.raises(LayoutError):
            Adam(p, AdamConfig()).update(p, ParamVector(np.zeros(3), [("y", (3,))]))

    def test_lr_schedule(self):
        cfg = AdamConfig(lr=1.0, warmup_steps=10, total_steps=30)
        assert cfg.lr_at(5) == 0.5
        assert cfg.lr_at(10) == 1.0
        assert cfg.lr_at(20) == 0.5
        assert cfg.lr_at(30) == 0.0
        assert cfg.lr_at(40) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e6), max_norm=st.floats(1e-2, 10))
    def test_clip(self, seed, scale, max_norm):
        g = np.random.default_rng(seed).normal(size=17) * scale
        out, norm = clip_by_norm(g, max_norm)
        assert np.linalg.norm(out) <= max_norm
        assert norm == np.linalg.norm(g)
        if norm <= max_norm:
            assert out is g


class TestPreconditioner:
    def test_identity_and_zero(self):
        g = ParamVector(np.array([1.0, -2.0]), [("x", (2,))])
        assert precondition(Preconditioner.identity(g), g) == g
        assert np.all(precondition(Preconditioner.identity(g), g.like(np.zeros(2))).data == 0)

    def test_entrywise_scalar_loop(self):
        rng = np.random.default_rng(0)
        g = ParamVector(rng.normal(size=9), [("x", (3, 3))])
        d = np.abs(rng.normal(size=9)) + 0.1
        out = precondition(Preconditioner(g.like(d)), g)
        for i in range(9):
            assert out.data[i] == d[i] * g.data[i]

    def test_frozen_and_validated(self):
        g = ParamVector(np.ones(2), [("x", (2,))])
        lam = Preconditioner(g.like(np.ones(2)))
        with pytest.raises(ValueError):
            lam.diag.data[0] = 5.0
        with pytest.raises(ValueError):
            Preconditioner(g.like(np.array([1.0, 0.0])))
        with pytest.raises(LayoutError):
            precondition(lam, ParamVector(np.ones(2), [("y", (2,))]))

    def test_from_second_moment(self):
        v = ParamVector(np.array([4.0, 0.0]), [("x", (2,))])
        lam = Preconditioner.from_second_moment(v, 1e-12)
        np.testing.assert_allclose(lam.diag.data, [0.5, 1e12])


class TestDiffusionLoss:
    def test_zero_predictor(self):
        rng = np.random.default_rng(0)
        p = init_params(SMALL, rng)
        x, _ = sample_data(ORIGIN, 20_000, rng)
        loss, _ = diffusion_loss(p, SMALL, SCHED, TimeWeighting(), (x, None), rng)
        assert loss == pytest.approx(np.mean((x**2).sum(1)), rel=1e-12)

    def test_finite_differences_500_params(self):
        arch = ArchDescriptor(hidden_dims=(14,), time_embed_dim=4)
        rng = np.random.default_rng(1)
        p = init_params(arch, rng)
        p.data += 0.2 * rng.normal(size=len(p))
        assert 100 <= len(p) <= 600
        x, _ = sample_data(ORIGIN, 32, rng)
        t = rng.random(32) * 0.9 + 0.05
        eps = rng.standard_normal(x.shape)
        tw = TimeWeighting()
        loss, grad = diffusion_loss(p, arch, SCHED, tw, (x, None), rng, t=t, eps=eps)
        v = rng.normal(size=len(p))
        h = 1e-5
        lp, _ = diffusion_loss(p.like(p.data + h * v), arch, SCHED, tw, (x, None), rng, t=t, eps=eps)
        lm, _ = diffusion_loss(p.like(p.data - h * v), arch, SCHED, tw, (x, None), rng, t=t, eps=eps)
        fd = (lp - lm) / (2 * h)
        assert abs(grad.data @ v - fd) <= 1e-5 * abs(fd)

    def test_oracle_is_irreducible(self):
        rng = np.random.default_rng(2)
        g = GmmSpec((1.0,), ((0.0, 0.0),), (1.0,))
        n, t = 200_000, 0.5
        x, _ = sample_data(g, n, rng)
        z = SCHED.diffuse(x, t, rng.standard_normal(x.shape))
        a, s = SCHED.alpha_sigma(t)
        resid = ((x - oracle_denoise(g, SCHED, z, t)) ** 2).sum(1)
        # posterior variance per coordinate is s^2 / (a^2 + s^2) = sigma^2 for unit data
        assert abs(resid.mean() - 2 * s**2) < 4 * resid.std() / np.sqrt(n)
        pert = ((x - 1.05 * oracle_denoise(g, SCHED, z, t)) ** 2).sum(1)
        d = pert - resid
        assert d.mean() > 3 * d.std() / np.sqrt(n)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")

    def test_divergence_reports_t(self):
        rng = np.random.default_rng(3)
        p = init_params(SMALL, rng)
        x = np.array([[np.inf, 0.0]])
        with pytest.raises((DivergenceError, ValueError)):
            diffusion_loss(p, SMALL, SCHED, TimeWeighting(), (x, None), rng, t=np.array([0.5]), eps=np.zeros((1, 2)))

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            diffusion_loss(init_params(SMALL, np.random.default_rng(0)), SMALL, SCHED, TimeWeighting(),
                           (np.zeros((0, 2)), None), np.random.default_rng(0))


def test_drop_labels():
    rng = np.random.default_rng(0)
    out = drop_labels(np.zeros(10_000, dtype=int), 8, 0.1, rng)
    assert abs(np.mean(out == -1) - 0.1) < 0.015
    assert drop_labels(np.zeros(3), 0, 0.1, rng) is None


class TestTrain:
    def test_zero_steps_fallback(self):
        cfg = TeacherConfig(steps=0, batch_size=16)
        init = init_params(SMALL, np.random.default_rng(0))
        res = train_teacher(ORIGIN, SMALL, SCHED, cfg, init=init)
        assert res.params == init
        assert FALLBACK_STEPS == 100
        assert np.all(res.precond.diag.data > 0) and np.all(np.isfinite(res.precond.diag.data))
        assert res.metrics == []

    def test_short_run_reduces_loss(self):
        cfg = TeacherConfig(steps=400, batch_size=64, log_every=1,
                            adam=AdamConfig(lr=3e-3, warmup_steps=20, total_steps=400), seed=1)
        res = train_teacher(DatasetSpec("gmm", {"n_modes": 4}), SMALL, SCHED, cfg)
        losses = np.array([m[1] for m in res.metrics])
        assert losses[-100:].mean() < losses[:100].mean()
        assert [m[0] for m in res.metrics] == list(range(1, 401))
        assert res.metrics[-1][2] == 0.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")

    def test_divergence_carries_step(self):
        cfg = TeacherConfig(steps=5, batch_size=8, adam=AdamConfig(lr=1e308, warmup_steps=0, total_steps=5,
                                                                   clip_norm=None))
        with pytest.raises(DivergenceError) as err:
            train_teacher(ORIGIN, SMALL, SCHED, cfg)
        assert err.value.step is not None and err.value.step >= 1
