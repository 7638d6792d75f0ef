import numpy as np
import pytest
import torch

from vdn.networks import (
    DNet, DNetConfig, SNetConfig, VDN, count_convs, count_params, desk_configs, init_params,
    load_checkpoint, pad_to_multiple, params_checksum, save_checkpoint,
)
from vdn.objective import VariationalPosterior, negative_elbo
from vdn.prior import PriorSpec, compute_xi


@pytest.fixture(scope="module")
def full_model():
    return init_params(DNetConfig(), SNetConfig(), seed=0)


@pytest.fixture(scope="module")
def desk_model():
    return init_params(*desk_configs(in_channels=1), seed=0)


def test_shapes_default_config(full_model):
    y = torch.rand(1, 3, 64, 64)
    with torch.no_grad():
        outs = full_model(y)
    assert all(o.shape == (1, 3, 64, 64) for o in outs)


def test_odd_size_padding(full_model):
    y = torch.rand(1, 3, 65, 63)
    padded, size = pad_to_multiple(y, full_model.dnet.cfg.divisor)
    assert padded.shape[-2:] == (72, 64) and size == (65, 63)
    with torch.no_grad():
        mu, m_sq, alpha, beta = full_model(y)
    assert mu.shape == m_sq.shape == alpha.shape == beta.shape == (1, 3, 65, 63)


def test_residual_identity_and_prior_targets_at_init(full_model):
    y = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        mu, m_sq, alpha, beta = full_model(y)
    assert torch.equal(mu, y)
    a0 = 7**2 / 2 - 1
    np.testing.assert_allclose(alpha.numpy(), a0, rtol=1e-5)
    np.testing.assert_allclose((beta / (alpha + 1)).numpy(), (25 / 255) ** 2, rtol=1e-4)
    np.testing.assert_allclose(m_sq.numpy(), 5e-5, rtol=1e-4)


def test_positivity_random_weights():
    model = init_params(*desk_configs(in_channels=3), seed=1, zero_heads=False)
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(100):
            y = torch.rand(1, 3, 16, 16, generator=gen)
            _, m_sq, alpha, beta = model(y)
            assert m_sq.min() > 0 and alpha.min() > 0 and beta.min() > 0
            assert all(torch.isfinite(t).all() for t in (m_sq, alpha, beta))


def test_he_init_variance():
    model = init_params(DNetConfig(), SNetConfig(), seed=2, zero_heads=False)
    w = model.dnet.encoders[1][0].weight.detach().double()
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert w.numel() >= 10_000
    assert abs(w.var().item() / (2 / fan_in) - 1) < 0.10


def test_snet_has_five_convs_by_default(full_model):
    assert count_convs(full_model.snet) == 5
    assert count_params(full_model) > count_params(init_params(*desk_configs(3), seed=0))


def test_init_determinism():
    a = init_params(*desk_configs(1), seed=5)
    b = init_params(*desk_configs(1), seed=5)
    c = init_params(*desk_configs(1), seed=6)
    assert params_checksum(a) == params_checksum(b) != params_checksum(c)


def test_init_leaves_global_rng_alone():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    init_params(*desk_configs(1), seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_gradients_reach_every_parameter(desk_model):
    model = init_params(*desk_configs(1), seed=3)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(1)
    x = torch.rand(4, 1, 32, 32, generator=gen)
    y = (x + 0.1 * torch.randn(x.shape, generator=gen)).clamp(0, 1)
    prior = PriorSpec(5e-5, 7, xi=compute_xi(y, x, 7))

    def loss():
        return negative_elbo(VariationalPosterior(*model(y)), y, x, prior).total

    # heads start at zero, so trunk gradients vanish until one step moves them
    opt.zero_grad()
    loss().backward()
    opt.step()
    opt.zero_grad()
    loss().backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or torch.all(p.grad == 0)]
    assert dead == []


def test_translation_covariance():
    model = init_params(*desk_configs(1), seed=4, zero_heads=False).double()
    div = model.dnet.cfg.divisor
    n, m = 96, 26  # crop size, and a margin wider than the receptive radius
    gen = torch.Generator().manual_seed(2)
    big = torch.rand(1, 1, n + 2 * div, n + 2 * div, generator=gen, dtype=torch.float64)
    a = big[..., :n, :n]
    b = big[..., div:n + div, 2 * div:n + 2 * div]
    with torch.no_grad():
        mu_a, _ = model.dnet(a)
        mu_b, _ = model.dnet(b)
    inner_a = mu_a[..., div + m:n - m, 2 * div + m:n - m]
    inner_b = mu_b[..., m:n - div - m, m:n - 2 * div - m]
    assert inner_a.numel() > 0
    torch.testing.assert_close(inner_a, inner_b, rtol=1e-9, atol=1e-9)


def test_finite_outputs_at_init(desk_model):
    with torch.no_grad():
        for y in (torch.zeros(1, 1, 24, 24), torch.ones(1, 1, 24, 24), torch.rand(1, 1, 24, 24)):
            assert all(torch.isfinite(o).all() for o in desk_model(y))


def test_checkpoint_roundtrip(tmp_path):
    model = init_params(*desk_configs(1), seed=8, zero_heads=False)
    y = torch.rand(1, 1, 40, 40)
    with torch.no_grad():
        before = model(y)
    save_checkpoint(tmp_path / "ck", model, extra={"step": 3, "seed": 8})
    loaded, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 3 and manifest["seed"] == 8
    assert {e["name"] for e in manifest["tensors"]} == set(model.state_dict())
    with torch.no_grad():
        after = loaded(y)
    assert all(torch.equal(u, v) for u, v in zip(before, after))
    loaded2, _ = load_checkpoint(tmp_path / "ck" / "manifest.json")
    assert params_checksum(loaded2) == params_checksum(model)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def test_config_validation():
    with pytest.raises(ValueError):
        DNetConfig(depth=0)
    with pytest.raises(ValueError):
        SNetConfig(layers=1)
    with pytest.raises(ValueError):
        VDN(DNetConfig(in_channels=1), SNetConfig(in_channels=3))
    assert isinstance(init_params(*desk_configs(1), seed=0).dnet, DNet)
