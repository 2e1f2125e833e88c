from __future__ import annotations
import math
from pathlib import Path
import attr
import numpy as np
import pytest
import torch
from dacesr.checkpoint import save_module
from dacesr.config import NetworkConfig, Stage, TrainConfig
from dacesr.errors import ConfigError, ParameterError, TrainingError
from dacesr.imgproc import ImageTensor
from dacesr.ree import Encoder
from dacesr.training import (
    Batch,
    Conditioner,
    Discriminator,
    Trainer,
    adversarial_losses,
    l1_pixel_loss,
    new_model,
    perceptual_proxy_loss,
    synthesize_batch,
    train_stage,
)

TINY_NET = NetworkConfig(
    n_rssb=1, vimm_per_rssb=1, channels=8, state_size=4, cond_channels=8, scale=4
)

TINY_TRAIN = TrainConfig(
    patch_size=32, batch_size=2, iterations=3, gan_iterations=2, prefetch=2, log_every=1, seed=5
)


def tiny_conditioner() -> Conditioner:
    torch.manual_seed(1)
    enc = Encoder(embed_dim=8)
    enc.requires_grad_(False)
    return Conditioner(enc)


def test_l1_pixel_loss() -> None:
    sr = torch.zeros(1, 3, 2, 2)
    hr = torch.full((1, 3, 2, 2), 0.25)
    assert float(l1_pixel_loss(sr, hr)) == 0.25
    with pytest.raises(ParameterError):
        l1_pixel_loss(sr, torch.zeros(1, 3, 2, 3))


def test_adversarial_losses_at_zero_logits() -> None:
    g, d = adversarial_losses(torch.zeros(4, 1), torch.zeros(4, 1))
    assert float(d) == pytest.approx(2 * math.log(2))
    assert float(g) == pytest.approx(math.log(2))


def test_adversarial_losses_confident_discriminator() -> None:
    g, d = adversarial_losses(torch.full((2,), 30.0), torch.full((2,), -30.0))
    assert float(d) < 1e-12
    assert float(g) == pytest.approx(30.0)


def test_perceptual_proxy_loss() -> None:
    torch.manual_seed(0)
    enc = Encoder(embed_dim=8)
    enc.requires_grad_(False)
    hr = torch.rand(1, 3, 32, 32)
    assert float(perceptual_proxy_loss(hr.clone(), hr, enc)) == 0.0
    sr = torch.rand(1, 3, 32, 32, requires_grad=True)
    perceptual_proxy_loss(sr, hr, enc).backward()
    assert sr.grad is not None
    assert float(sr.grad.abs().max()) > 0
    with pytest.raises(ParameterError):
        perceptual_proxy_loss(sr, torch.rand(1, 3, 16, 32), enc)


def test_discriminator_shape() -> None:
    assert Discriminator(width=4)(torch.rand(2, 3, 32, 32)).shape == (2, 1, 4, 4)


def test_conditioner_output() -> None:
    cond = tiny_conditioner()(torch.rand(2, 3, 8, 8))
    assert cond.shape == (2, 8, 2, 2)
    assert not cond.requires_grad


def test_trainer_uses_configured_adam() -> None:
    trainer = Trainer(model=new_model(TINY_NET, 0), config=attr.evolve(TINY_TRAIN, lr=1e-3))
    (group,) = trainer.opt_g.param_groups
    assert group["lr"] == 1e-3
    assert group["betas"] == (0.9, 0.99)
    assert trainer.opt_d is None


def test_adam_update_rule() -> None:
    # f(x) = (x - 3)²; compare torch's Adam with the update rule written out
    lr, b1, b2, eps = 0.1, 0.9, 0.99, 1e-8
    x = torch.tensor([0.0], requires_grad=True)
    opt = torch.optim.Adam([x], lr=lr, betas=(b1, b2), eps=eps)
    ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 21):
        opt.zero_grad()
        ((x - 3) ** 2).sum().backward()
        opt.step()
        g = 2 * (ref - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert float(x) == pytest.approx(ref, rel=1e-5, abs=1e-6)


def test_synthesize_batch(corpus: list[ImageTensor]) -> None:
    a = synthesize_batch(corpus, TINY_TRAIN, 4)
    assert a.iteration == 4
    assert a.hr.shape == (2, 3, 32, 32)
    assert a.lr.shape == (2, 3, 8, 8)
    assert a.hr.dtype == torch.float32
    b = synthesize_batch(corpus, TINY_TRAIN, 4)
    assert torch.equal(a.hr, b.hr)
    assert torch.equal(a.lr, b.lr)
    c = synthesize_batch(corpus, TINY_TRAIN, 5)
    assert not torch.equal(a.hr, c.hr)


def test_synthesize_batch_flip(corpus: list[ImageTensor]) -> None:
    plain = synthesize_batch(corpus, attr.evolve(TINY_TRAIN, flip_prob=0.0), 2)
    flipped = synthesize_batch(corpus, attr.evolve(TINY_TRAIN, flip_prob=1.0), 2)
    assert torch.equal(flipped.hr, plain.hr.flip(-1))


def test_train_psnr_stage(corpus: list[ImageTensor], tmp_path: Path) -> None:
    result = train_stage(new_model(TINY_NET, 0), corpus, TINY_TRAIN, tiny_conditioner())
    assert [r.iteration for r in result.rows] == [0, 1, 2]
    assert all(r.perceptual == 0.0 and r.adversarial == 0.0 for r in result.rows)
    assert all(np.isfinite(r.pixel) for r in result.rows)
    assert not result.model.training
    ckpt = result.checkpoint
    assert ckpt.meta["stage"] == "psnr"
    assert ckpt.meta["train"]["iterations"] == 3
    result.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,pixel,perceptual,adversarial,discriminator,wall_time"
    assert len(lines) == 4


def test_train_is_reproducible(corpus: list[ImageTensor]) -> None:
    a = train_stage(new_model(TINY_NET, 0), corpus, TINY_TRAIN)
    b = train_stage(new_model(TINY_NET, 0), corpus, TINY_TRAIN)
    assert [r.pixel for r in a.rows] == pytest.approx([r.pixel for r in b.rows], rel=1e-5)
    for (name, p), q in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.allclose(p, q, atol=1e-6), name


def test_train_gan_stage(corpus: list[ImageTensor], tmp_path: Path) -> None:
    init = new_model(TINY_NET, 0)
    save_module(init, tmp_path / "psnr")
    cond = tiny_conditioner()
    config = attr.evolve(TINY_TRAIN, stage=Stage.GAN)
    result = train_stage(
        new_model(TINY_NET, 9), corpus, config, cond, cond.encoder, tmp_path / "psnr.json"
    )
    assert len(result.rows) == 2
    assert result.discriminator is not None
    assert all(p.requires_grad for p in result.discriminator.parameters())
    assert all(r.discriminator > 0 for r in result.rows)
    assert result.checkpoint.meta["stage"] == "gan"


def test_gan_stage_requirements(corpus: list[ImageTensor], tmp_path: Path) -> None:
    config = attr.evolve(TINY_TRAIN, stage=Stage.GAN)
    with pytest.raises(ConfigError):
        train_stage(new_model(TINY_NET, 0), corpus, config, perceptual=Encoder(8))
    with pytest.raises(ConfigError):
        train_stage(new_model(TINY_NET, 0), corpus, config, init_from=tmp_path / "x.json")


def test_bad_datasets(corpus: list[ImageTensor]) -> None:
    with pytest.raises(ConfigError):
        train_stage(new_model(TINY_NET, 0), [], TINY_TRAIN)
    with pytest.raises(ConfigError):
        train_stage(new_model(TINY_NET, 0), [np.zeros((20, 64, 3))], TINY_TRAIN)


def test_train_rejects_x2_network(corpus: list[ImageTensor]) -> None:
    model = new_model(attr.evolve(TINY_NET, scale=2), 0)
    with pytest.raises(ConfigError):
        train_stage(model, corpus, TINY_TRAIN)


@pytest.mark.slow
def test_psnr_stage_loss_decreases(corpus: list[ImageTensor]) -> None:
    config = attr.evolve(TINY_TRAIN, iterations=200, batch_size=4, lr=1e-3, log_every=50)
    result = train_stage(new_model(TINY_NET, 0), corpus, config)
    pixel = [r.pixel for r in result.rows]
    k = len(pixel) // 10
    assert np.mean(pixel[-k:]) < np.mean(pixel[:k])


def test_non_finite_loss_stops_training(corpus: list[ImageTensor]) -> None:
    model = new_model(TINY_NET, 0)
    with torch.no_grad():
        model.head.bias.fill_(math.nan)
    with pytest.raises(TrainingError) as excinfo:
        train_stage(model, corpus, TINY_TRAIN)
    assert excinfo.value.iteration == 0


def test_step_logs_rows(corpus: list[ImageTensor]) -> None:
    trainer = Trainer(model=new_model(TINY_NET, 0), config=TINY_TRAIN)
    batch = synthesize_batch(corpus, TINY_TRAIN, 0)
    row = trainer.step(Batch(iteration=7, lr=batch.lr, hr=batch.hr))
    assert row.iteration == 7
    assert trainer.rows == [row]
