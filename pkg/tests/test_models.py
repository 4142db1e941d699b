import math

import numpy as np
import pytest
import torch

from hetreg.models import (
    BackboneSpec,
    ConfigurationError,
    DisplacementEstimator,
    DisplacementPosterior,
    VarianceEstimator,
    backbone_parameter_count,
    estimator_parameter_count,
    sample_displacement,
)

from helpers import relative_error, smooth_image

TINY = BackboneSpec(encoder=(4, 8), decoder=(8, 4))


def n_params(module):
    return sum(p.numel() for p in module.parameters())


def test_2d_output_shape():
    torch.manual_seed(0)
    net = DisplacementEstimator(BackboneSpec())
    x = torch.rand(1, 1, 128, 128)
    post = net(x, x)
    assert post.mean.shape == (1, 2, 128, 128)
    assert post.log_variance_z is None


def test_3d_output_shape():
    torch.manual_seed(0)
    spec = BackboneSpec(encoder=(4, 8, 8), decoder=(8, 8, 4), ndim=3)
    net = DisplacementEstimator(spec)
    x = torch.rand(1, 1, 64, 64, 64)
    with torch.no_grad():
        post = net(x, x)
    assert post.mean.shape == (1, 3, 64, 64, 64)


def test_forward_is_deterministic():
    torch.manual_seed(0)
    net = DisplacementEstimator(TINY, z_uncertainty=True)
    a, b = torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16)
    p1, p2 = net(a, b), net(a, b)
    assert torch.equal(p1.mean, p2.mean)
    assert torch.equal(p1.log_variance_z, p2.log_variance_z)
    var = VarianceEstimator(TINY)
    assert torch.equal(var(a, b), var(a, b))


def test_indivisible_shape_rejected():
    net = DisplacementEstimator(BackboneSpec())
    x = torch.rand(1, 1, 20, 20)
    with pytest.raises(ConfigurationError):
        net(x, x)


def test_mismatched_inputs_rejected():
    with pytest.raises(ConfigurationError):
        DisplacementEstimator(TINY)(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 4))
    with pytest.raises(ConfigurationError):
        VarianceEstimator(TINY)(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 4))


def test_variance_estimator_shape_and_init():
    torch.manual_seed(0)
    net = VarianceEstimator(BackboneSpec())
    with torch.no_grad():
        lv = net(torch.rand(2, 1, 128, 128), torch.rand(2, 1, 128, 128))
        assert lv.shape == (2, 1, 128, 128)
        lv0 = net(torch.zeros(1, 1, 32, 32), torch.zeros(1, 1, 32, 32))
    assert float(lv0.abs().max()) < 1e-3


def test_initial_displacement_near_zero():
    torch.manual_seed(0)
    net = DisplacementEstimator(BackboneSpec())
    with torch.no_grad():
        post = net(torch.rand(1, 1, 64, 64), torch.rand(1, 1, 64, 64))
    assert float(post.mean.abs().max()) < 1e-2


@pytest.mark.parametrize("spec", [
    BackboneSpec(),
    TINY,
    BackboneSpec(encoder=(3, 5, 7), decoder=(6, 4, 2), ndim=3, skip=False),
])
def test_parameter_count_formula(spec):
    assert n_params(DisplacementEstimator(spec).backbone) == backbone_parameter_count(spec, 2)
    assert n_params(DisplacementEstimator(spec)) == estimator_parameter_count(spec, 2, [spec.ndim])
    assert n_params(DisplacementEstimator(spec, z_uncertainty=True)) == estimator_parameter_count(spec, 2, [spec.ndim, 1])
    assert n_params(VarianceEstimator(spec)) == estimator_parameter_count(spec, 2, [1])


def test_parameter_count_by_hand():
    # 2 levels, widths 4/8 -> 8/4, 2 inputs, 3x3 kernels
    expected = (9 * 2 * 4 + 4) + (9 * 4 * 8 + 8) + (9 * 8 * 8 + 8) + (9 * (8 + 4) * 4 + 4)
    assert backbone_parameter_count(TINY, 2) == expected


@pytest.mark.parametrize("kwargs", [
    dict(encoder=(8,), decoder=(8,)),
    dict(encoder=(8, 8), decoder=(8,)),
    dict(encoder=(8, 0), decoder=(8, 8)),
    dict(ndim=4),
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigurationError):
        BackboneSpec(**kwargs)


def test_spec_round_trip():
    spec = BackboneSpec(encoder=(3, 5, 7), decoder=(6, 4, 2), ndim=3)
    assert BackboneSpec.from_dict(spec.to_dict()) == spec


# --- sampling -----------------------------------------------------------------

def test_zero_sigma_returns_mean():
    mu = torch.randn(1, 2, 4, 4)
    post = DisplacementPosterior(mu, torch.full((1, 1, 4, 4), -math.inf))
    assert torch.equal(sample_displacement(post, torch.Generator().manual_seed(0)), mu)


def test_sampling_reproducible():
    post = DisplacementPosterior(torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 4, 4))
    a = sample_displacement(post, torch.Generator().manual_seed(7))
    b = sample_displacement(post, torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


def test_sample_mean_converges():
    n = 10_000
    mu = torch.tensor([1.0, 2.0], dtype=torch.float64).reshape(1, 2, 1, 1).expand(n, 2, 1, 1)
    lv = torch.full((n, 1, 1, 1), math.log(0.25), dtype=torch.float64)
    z = sample_displacement(DisplacementPosterior(mu, lv), torch.Generator().manual_seed(3))
    means = z.mean(dim=0).flatten()
    bound = 3 * 0.5 / math.sqrt(n)
    assert abs(float(means[0]) - 1.0) < bound
    assert abs(float(means[1]) - 2.0) < bound
    # components use independent draws
    assert not torch.equal(z[:, 0] - 1.0, z[:, 1] - 2.0)


def test_sampling_requires_head():
    with pytest.raises(RuntimeError):
        sample_displacement(DisplacementPosterior(torch.zeros(1, 2, 4, 4)))


def test_sampling_differentiable():
    mu = torch.zeros(1, 2, 3, 3, requires_grad=True)
    lv = torch.zeros(1, 1, 3, 3, requires_grad=True)
    z = sample_displacement(DisplacementPosterior(mu, lv), torch.Generator().manual_seed(0))
    z.sum().backward()
    assert torch.equal(mu.grad, torch.ones_like(mu))
    assert lv.grad.abs().sum() > 0


def test_end_to_end_gradient_finite_differences():
    """Single-precision autograd through estimator, warp and loss vs double-precision differences."""
    import copy

    from hetreg.losses import adaptive_displacement_loss
    from hetreg.warp import warp_image

    torch.manual_seed(1)
    net = DisplacementEstimator(TINY)
    with torch.no_grad():
        net.flow.weight.normal_(0, 0.05)
        # keep sample points away from grid nodes, where interpolation has kinks
        net.flow.bias.fill_(0.35)
    rng = np.random.default_rng(0)
    moving = torch.from_numpy(smooth_image(rng, (8, 8))[None, None])
    fixed = torch.from_numpy(smooth_image(rng, (8, 8))[None, None])

    def loss_fn(model, dtype):
        m, f = moving.to(dtype), fixed.to(dtype)
        z = model(m, f).mean
        return adaptive_displacement_loss(f, warp_image(m, z), None, z, 0.5, 0.01).total

    net.zero_grad()
    loss_fn(net, torch.float32).backward()
    ref = copy.deepcopy(net).double()
    for name in ("flow.weight", "backbone.encoder.0.weight", "backbone.decoder.1.bias"):
        param = dict(net.named_parameters())[name]
        flat = dict(ref.named_parameters())[name].data.view(-1)
        idx = torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(0))[:6]
        analytic = param.grad.view(-1)[idx]
        numeric = torch.zeros(len(idx), dtype=torch.float64)
        for k, i in enumerate(idx):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + 1e-5
                hi = float(loss_fn(ref, torch.float64))
                flat[i] = orig - 1e-5
                lo = float(loss_fn(ref, torch.float64))
                flat[i] = orig
            numeric[k] = (hi - lo) / 2e-5
        assert relative_error(analytic, numeric) <= 1e-2, name
