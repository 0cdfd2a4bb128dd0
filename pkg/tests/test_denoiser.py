import numpy as np
import pytest

from mmdistill import autodiff as ad
from mmdistill.denoiser import (
    ArchDescriptor,
    ConditioningError,
    GuidanceConfig,
    denoise,
    denoise_guided,
    init_params,
    make_net,
)
from mmdistill.params import DualParamVector
from mmdistill.schedule import Schedule

SCHED = Schedule()
ARCH = ArchDescriptor(hidden_dims=(16, 16), time_embed_dim=8, num_classes=3)


@pytest.fixture
def params():
    p = init_params(ARCH, np.random.default_rng(0))
    p.data += 0.3 * np.random.default_rng(1).normal(size=len(p))
    return p


def test_zero_init_output():
    p0 = init_params(ArchDescriptor(hidden_dims=(8,)), np.random.default_rng(0))
    z = np.random.default_rng(2).normal(size=(5, 2))
    assert np.all(denoise(p0, ArchDescriptor(hidden_dims=(8,)), SCHED, z, 0.4) == 0.0)


def test_null_class_row():
    assert dict(ARCH.layout())["class_embed"] == (4, 16)


def test_deterministic_and_shape(params):
    z = np.random.default_rng(3).normal(size=(7, 2))
    a = denoise(params, ARCH, SCHED, z, 0.3, 1)
    b = denoise(params, ARCH, SCHED, z, 0.3, 1)
    assert a.shape == z.shape and a.tobytes() == b.tobytes()


def test_per_example_times(params):
    z = np.random.default_rng(4).normal(size=(3, 2))
    t = np.array([0.1, 0.5, 0.9])
    full = denoise(params, ARCH, SCHED, z, t)
    for i in range(3):
        np.testing.assert_allclose(full[i], denoise(params, ARCH, SCHED, z[i], t[i])[0], rtol=1e-14)


def test_conditioning_errors(params):
    plain = ArchDescriptor(hidden_dims=(8,))
    p = init_params(plain, np.random.default_rng(0))
    with pytest.raises(ConditioningError):
        denoise(p, plain, SCHED, np.zeros((1, 2)), 0.5, class_id=0)
    with pytest.raises(ConditioningError):
        denoise_guided(p, plain, SCHED, np.zeros((1, 2)), 0.5, None, GuidanceConfig(1.0))
    with pytest.raises(ConditioningError):
        denoise(params, ARCH, SCHED, np.zeros((1, 2)), 0.5, class_id=3)


def test_nonfinite_input(params):
    with pytest.raises(ValueError):
        denoise(params, ARCH, SCHED, np.array([[np.nan, 0.0]]), 0.5)


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(1.0, (1.0, -1.0))


def test_zero_guidance_is_plain(params):
    z = np.random.default_rng(5).normal(size=(4, 2))
    a = denoise_guided(params, ARCH, SCHED, z, 0.6, 2, GuidanceConfig(0.0))
    assert np.array_equal(a, denoise(params, ARCH, SCHED, z, 0.6, 2))


def test_guidance_definition(params):
    z = np.random.default_rng(6).normal(size=(4, 2))
    cond = denoise(params, ARCH, SCHED, z, 0.6, 1)
    uncond = denoise(params, ARCH, SCHED, z, 0.6, None)
    np.testing.assert_allclose(denoise_guided(params, ARCH, SCHED, z, 0.6, 1, GuidanceConfig(1.0)),
                               2 * cond - uncond, rtol=1e-13, atol=1e-14)
    clipped = denoise_guided(params, ARCH, SCHED, z, 0.6, 1, GuidanceConfig(1.0, (-0.1, 0.1)))
    np.testing.assert_allclose(clipped, np.clip(2 * cond - uncond, -0.1, 0.1), rtol=1e-13)


@pytest.mark.parametrize("g", [GuidanceConfig(0.5), GuidanceConfig(3.0, (-0.2, 0.2)), GuidanceConfig(0.0, (-1, 1))])
def test_straight_through_invariance(params, g):
    rng = np.random.default_rng(7)
    z = rng.normal(size=(6, 2))
    labels = np.array([0, 1, 2, 0, 1, 2])
    v = params.like(rng.normal(size=len(params)))
    c = rng.normal(size=z.shape)
    plain = make_net(ARCH, SCHED, 0.4, 6, labels)
    guided = make_net(ARCH, SCHED, 0.4, 6, labels, g)
    jv0 = ad.jvp(plain, DualParamVector(params, v), z)
    jv1 = ad.jvp(guided, DualParamVector(params, v), z)
    np.testing.assert_allclose(jv1, jv0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(ad.vjp(guided, params, z, c).data, ad.vjp(plain, params, z, c).data, rtol=0, atol=1e-12)


def test_linear_in_final_layer(params):
    z = np.random.default_rng(8).normal(size=(5, 2))
    last = f"w{len(ARCH.dims) - 2}"
    p2 = params.copy()
    p2[last] = 3.0 * params[last]
    p2[f"b{len(ARCH.dims) - 2}"] = 3.0 * params[f"b{len(ARCH.dims) - 2}"]
    np.testing.assert_allclose(denoise(p2, ARCH, SCHED, z, 0.2, 0), 3 * denoise(params, ARCH, SCHED, z, 0.2, 0),
                               rtol=1e-12)


def test_arch_dict_roundtrip():
    assert ArchDescriptor.from_dict(ARCH.to_dict()) == ARCH
    with pytest.raises(ValueError):
        ArchDescriptor(hidden_dims=(0,))
