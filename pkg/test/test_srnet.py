from __future__ import annotations
import attr
import numpy as np
import pytest
import torch
from dacesr.config import CfmPlacement, NetworkConfig
from dacesr.errors import ConfigError, InternalError, ParameterError, UnsupportedFormatError
from dacesr.gradcheck import check_net_backward, desk_network_config
from dacesr.srnet import (
    Cfm,
    SRNet,
    batch_to_image,
    image_to_batch,
    net_backward,
    net_forward,
    pixel_shuffle,
    pixel_unshuffle,
)
from dacesr.util import torch_seeded


def desk_model(**kwargs: object) -> SRNet:
    with torch_seeded(0, "test-model"):
        return SRNet(attr.evolve(desk_network_config(), **kwargs))


def perturb_cfm(model: SRNet) -> None:
    with torch.no_grad():
        for block in model.blocks:
            assert block.cfm is not None
            block.cfm.alpha.weight.normal_(0, 0.5)
            block.cfm.beta.weight.normal_(0, 0.5)


def test_pixel_shuffle_layout() -> None:
    x = torch.arange(4.0).reshape(1, 4, 1, 1)
    assert pixel_shuffle(x, 2).tolist() == [[[[0.0, 1.0], [2.0, 3.0]]]]


def test_pixel_shuffle_inverse() -> None:
    x = torch.randn(2, 12, 3, 5)
    assert torch.equal(pixel_unshuffle(pixel_shuffle(x, 2), 2), x)
    y = torch.randn(1, 3, 8, 4)
    assert torch.equal(pixel_shuffle(pixel_unshuffle(y, 4), 4), y)


def test_pixel_shuffle_bad_factor() -> None:
    with pytest.raises(ConfigError):
        pixel_shuffle(torch.zeros(1, 6, 2, 2), 2)
    with pytest.raises(ConfigError):
        pixel_unshuffle(torch.zeros(1, 3, 5, 4), 2)


def test_cfm_starts_as_identity() -> None:
    cfm = Cfm(4, 8)
    x = torch.randn(2, 8, 5, 7)
    cond = torch.randn(2, 4, 1, 1)
    assert torch.equal(cfm(x, cond), x)


def test_cfm_resizes_condition() -> None:
    cfm = Cfm(4, 8)
    with torch.no_grad():
        cfm.beta.weight.fill_(1.0)
    cond = torch.ones(1, 4, 2, 2)
    out = cfm(torch.zeros(1, 8, 6, 6), cond)
    assert torch.allclose(out, torch.full((1, 8, 6, 6), 4.0))


def test_cfm_channel_mismatch() -> None:
    cfm = Cfm(4, 8)
    with pytest.raises(ConfigError):
        cfm(torch.zeros(1, 8, 3, 3), torch.zeros(1, 5, 1, 1))
    with pytest.raises(ConfigError):
        cfm(torch.zeros(1, 6, 3, 3), torch.zeros(1, 4, 1, 1))


@pytest.mark.parametrize("scale", [2, 4])
def test_output_shape_and_range(scale: int) -> None:
    model = desk_model(scale=scale)
    lr = torch.rand(2, 3, 6, 5)
    with torch.no_grad():
        sr = model(lr, torch.randn(2, 4, 1, 1))
    assert sr.shape == (2, 3, 6 * scale, 5 * scale)
    assert float(sr.min()) >= 0.0
    assert float(sr.max()) <= 1.0


def test_bad_scale_rejected() -> None:
    with pytest.raises(ConfigError):
        attr.evolve(desk_network_config(), scale=3)


def test_bad_input_rejected() -> None:
    with pytest.raises(ParameterError):
        desk_model()(torch.zeros(3, 6, 6))


@pytest.mark.parametrize("placement", list(CfmPlacement))
def test_fresh_modulation_ignores_condition(placement: CfmPlacement) -> None:
    model = desk_model(cfm_placement=placement)
    lr = torch.rand(1, 3, 6, 6)
    with torch.no_grad():
        assert torch.equal(model(lr, torch.randn(1, 4, 1, 1)), model(lr, None))


@pytest.mark.parametrize("placement", list(CfmPlacement))
def test_trained_modulation_uses_condition(placement: CfmPlacement) -> None:
    model = desk_model(cfm_placement=placement)
    perturb_cfm(model)
    lr = torch.rand(1, 3, 6, 6)
    with torch.no_grad():
        a = model(lr, torch.randn(1, 4, 1, 1))
        b = model(lr, torch.randn(1, 4, 1, 1))
    assert not torch.equal(a, b)


def test_unconditioned_network_ignores_condition() -> None:
    model = desk_model(conditioned=False)
    assert all(block.cfm is None for block in model.blocks)
    lr = torch.rand(1, 3, 6, 6)
    with torch.no_grad():
        assert torch.equal(model(lr, torch.randn(1, 4, 1, 1)), model(lr, torch.randn(1, 4, 1, 1)))


@pytest.mark.parametrize("residual", [True, False])
def test_global_residual(residual: bool) -> None:
    model = desk_model(global_residual=residual)
    with torch.no_grad():
        model.body_conv.weight.zero_()
        model.body_conv.bias.zero_()
        lr = torch.rand(1, 3, 6, 6)
        feats = model.features(lr, None)
        expected = model.shallow(lr) if residual else torch.zeros_like(feats)
    assert torch.equal(feats, expected)


def test_net_forward_on_image() -> None:
    model = desk_model()
    img = np.random.default_rng(0).uniform(size=(7, 9, 3))
    out = net_forward(img, None, model)
    assert out.shape == (14, 18, 3)
    assert out.dtype == np.float64
    assert np.array_equal(out, net_forward(img, None, model))


def test_net_forward_rejects_grayscale() -> None:
    with pytest.raises(UnsupportedFormatError):
        net_forward(np.zeros((6, 6)), None, desk_model())


def test_image_batch_conversion() -> None:
    img = np.random.default_rng(1).uniform(size=(4, 5, 3))
    batch = image_to_batch(img, torch.float64)
    assert batch.shape == (1, 3, 4, 5)
    assert np.array_equal(batch_to_image(batch), img)


def test_net_backward_matches_autograd() -> None:
    model = desk_model().double()
    perturb_cfm(model)
    lr = torch.rand(1, 3, 5, 5, dtype=torch.float64)
    cond = torch.randn(1, 4, 1, 1, dtype=torch.float64)
    out = model.head(model.features(lr, cond))
    g = torch.randn_like(out)
    grads = net_backward(out, g, model)
    assert set(grads) == {n for n, _ in model.named_parameters()}
    (out * g).sum().backward()
    for name, p in model.named_parameters():
        assert p.grad is not None
        assert torch.allclose(grads[name], p.grad, atol=1e-12)
    cfm_grad = grads["blocks.0.cfm.alpha.weight"]
    assert float(cfm_grad.abs().max()) > 0


def test_net_backward_errors() -> None:
    model = desk_model()
    with pytest.raises(InternalError):
        net_backward(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), model)
    out = model(torch.rand(1, 3, 4, 4))
    with pytest.raises(InternalError):
        net_backward(out, torch.zeros(1, 3, 4, 5), model)


def test_net_backward_matches_finite_differences() -> None:
    result = check_net_backward(instances=3, seed=2)
    assert result.ok, result.max_rel_error


def test_default_config_builds() -> None:
    model = SRNet(NetworkConfig())
    assert len(model.blocks) == 4
    assert all(len(b.vimms) == 2 for b in model.blocks)
