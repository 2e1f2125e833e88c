from __future__ import annotations
from collections.abc import Sequence
import csv
import math
from pathlib import Path
import time
from typing import Optional
from anyio import create_memory_object_stream, create_task_group, to_thread
from anyio.streams.memory import MemoryObjectSendStream
import anyio
import attr
import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F
from .checkpoint import Checkpoint, load_module
from .config import NetworkConfig, Stage, TrainConfig, unstructure
from .consts import CHAIN_SCALE
from .errors import ConfigError, ParameterError, TrainingError
from .imgproc import ImageTensor, apply_chain, sample_degradation
from .ree import Encoder, LoraAdapter, rep_mse_loss
from .srnet import SRNet
from .util import TRACE, log, substream, torch_seeded


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ParameterError(f"Shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_pixel_loss(sr: Tensor, hr: Tensor) -> Tensor:
    _same_shape(sr, hr)
    return F.l1_loss(sr, hr)


def perceptual_proxy_loss(sr: Tensor, hr: Tensor, ree_base: Encoder) -> Tensor:
    """
    Feature-space fidelity under the frozen embedding encoder, standing in
    for a pretrained perceptual network.  Only ``sr`` receives gradients.
    """
    _same_shape(sr, hr)
    with torch.no_grad():
        target = ree_base.embed(hr)
    return rep_mse_loss(target, ree_base.embed(sr))


def adversarial_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating logistic GAN losses: ``(generator, discriminator)``"""
    d_loss = F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    g_loss = F.softplus(-d_fake).mean()
    return g_loss, d_loss


class Discriminator(nn.Module):
    """Patch discriminator: three stride-2 convs and a 1×1 logit head"""

    def __init__(self, width: int = 32) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Conv2d(4 * width, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.body(x))


@attr.define(eq=False)
class Conditioner:
    """Turns a low-resolution batch into condition embeddings"""

    encoder: Encoder
    adapter: Optional[LoraAdapter] = None
    scale: int = 4

    def __call__(self, lr: Tensor) -> Tensor:
        up = F.interpolate(lr, scale_factor=self.scale, mode="bicubic", align_corners=False)
        with torch.no_grad():
            return self.encoder.embed(up.clamp(0, 1), self.adapter)


@attr.define
class Batch:
    iteration: int
    lr: Tensor
    hr: Tensor


def synthesize_batch(
    dataset: Sequence[ImageTensor], config: TrainConfig, iteration: int
) -> Batch:
    """
    Crop HR patches, flip some horizontally, and degrade each through its
    own sampled chain.  Depends only on the seed and the iteration index.
    """
    rng = substream(config.seed, "batch", iteration)
    size = config.patch_size
    hrs: list[ImageTensor] = []
    lrs: list[ImageTensor] = []
    for _ in range(config.batch_size):
        img = dataset[int(rng.integers(len(dataset)))]
        h, w = img.shape[:2]
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        patch = img[y : y + size, x : x + size]
        if rng.random() < config.flip_prob:
            patch = patch[:, ::-1]
        patch = np.ascontiguousarray(patch)
        hrs.append(patch)
        lrs.append(apply_chain(patch, sample_degradation(rng)))

    def stack(imgs: list[ImageTensor]) -> Tensor:
        return torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy()).float()

    return Batch(iteration=iteration, lr=stack(lrs), hr=stack(hrs))


@attr.define
class LogRow:
    iteration: int
    pixel: float
    perceptual: float
    adversarial: float
    discriminator: float
    wall_time: float


@attr.define(eq=False)
class TrainResult:
    model: SRNet
    config: TrainConfig
    rows: list[LogRow]
    discriminator: Optional[Discriminator] = None

    @property
    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            tensors={k: v.clone() for k, v in self.model.state_dict().items()},
            meta={"stage": self.config.stage.value, "train": unstructure(self.config)},
        )

    def write_log(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            writer.writerow([f.name for f in attr.fields(LogRow)])
            for r in self.rows:
                writer.writerow(attr.astuple(r))


@attr.define(eq=False)
class Trainer:
    model: SRNet
    config: TrainConfig
    conditioner: Optional[Conditioner] = None
    #: Frozen encoder for the perceptual term
    perceptual: Optional[Encoder] = None
    discriminator: Optional[Discriminator] = None
    opt_g: torch.optim.Optimizer = attr.field(init=False)
    opt_d: Optional[torch.optim.Optimizer] = attr.field(init=False, default=None)
    rows: list[LogRow] = attr.Factory(list)
    start: float = attr.Factory(time.monotonic)

    def __attrs_post_init__(self) -> None:
        betas = (self.config.beta1, self.config.beta2)
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=self.config.lr, betas=betas)
        if self.discriminator is not None:
            self.opt_d = torch.optim.Adam(
                self.discriminator.parameters(), lr=self.config.lr, betas=betas
            )

    def _check(self, it: int, name: str, value: Tensor) -> float:
        v = value.item()
        if not math.isfinite(v):
            raise TrainingError(it, f"{name} loss is {v}")
        return v

    def step(self, batch: Batch) -> LogRow:
        it = batch.iteration
        cond = self.conditioner(batch.lr) if self.conditioner is not None else None
        if self.config.stage is Stage.PSNR:
            sr = self.model(batch.lr, cond)
            loss = l1_pixel_loss(sr, batch.hr)
            pixel = self._check(it, "pixel", loss)
            self.opt_g.zero_grad()
            loss.backward()
            self.opt_g.step()
            row = LogRow(it, pixel, 0.0, 0.0, 0.0, time.monotonic() - self.start)
        else:
            row = self._gan_step(batch, cond)
        self.rows.append(row)
        if it % self.config.log_every == 0:
            log.info(
                "Iteration %d: pixel %.5f perceptual %.5f adversarial %.5f",
                it,
                row.pixel,
                row.perceptual,
                row.adversarial,
            )
        else:
            log.log(TRACE, "Iteration %d: %s", it, row)
        return row

    def _gan_step(self, batch: Batch, cond: Optional[Tensor]) -> LogRow:
        assert self.discriminator is not None and self.opt_d is not None
        assert self.perceptual is not None
        it = batch.iteration
        # Discriminator first, on a detached generator output
        sr = self.model(batch.lr, cond)
        _, d_loss = adversarial_losses(
            self.discriminator(batch.hr), self.discriminator(sr.detach())
        )
        d_val = self._check(it, "discriminator", d_loss)
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()
        # Generator against fresh logits from the updated discriminator
        self.discriminator.requires_grad_(False)
        try:
            pixel = l1_pixel_loss(sr, batch.hr)
            perceptual = perceptual_proxy_loss(sr, batch.hr, self.perceptual)
            g_adv, _ = adversarial_losses(
                self.discriminator(batch.hr), self.discriminator(sr)
            )
            total = pixel + self.config.lambda1 * perceptual + self.config.lambda2 * g_adv
            self._check(it, "generator", total)
            self.opt_g.zero_grad()
            total.backward()
            self.opt_g.step()
        finally:
            self.discriminator.requires_grad_(True)
        return LogRow(
            it,
            pixel.item(),
            perceptual.item(),
            g_adv.item(),
            d_val,
            time.monotonic() - self.start,
        )


async def _produce(
    dataset: Sequence[ImageTensor],
    config: TrainConfig,
    iterations: int,
    sender: MemoryObjectSendStream[Batch],
    failures: list[Exception],
) -> None:
    async with sender:
        try:
            for it in range(iterations):
                batch = await to_thread.run_sync(synthesize_batch, dataset, config, it)
                await sender.send(batch)
        except Exception as e:
            failures.append(e)


async def _run(trainer: Trainer, dataset: Sequence[ImageTensor], iterations: int) -> None:
    # The first failure is re-raised unwrapped once the task group exits.
    failures: list[Exception] = []
    sender, receiver = create_memory_object_stream[Batch](trainer.config.prefetch)
    async with create_task_group() as tg:
        tg.start_soon(_produce, dataset, trainer.config, iterations, sender, failures)
        async with receiver:
            async for batch in receiver:
                try:
                    await to_thread.run_sync(trainer.step, batch)
                except Exception as e:
                    failures.insert(0, e)
                    tg.cancel_scope.cancel()
                    break
    if failures:
        raise failures[0]


def train_stage(
    model: SRNet,
    dataset: Sequence[ImageTensor],
    config: TrainConfig,
    conditioner: Optional[Conditioner] = None,
    perceptual: Optional[Encoder] = None,
    init_from: Optional[str | Path] = None,
) -> TrainResult:
    """
    Train ``model`` for one stage.  The PSNR stage minimizes the pixel loss
    alone; the GAN stage starts from the PSNR checkpoint ``init_from`` and
    adds the weighted perceptual and adversarial terms, alternating
    discriminator and generator updates.
    """
    if not dataset:
        raise ConfigError("Training dataset is empty")
    if model.config.scale != round(1 / CHAIN_SCALE):
        raise ConfigError(
            f"Training pairs are downscaled by {round(1 / CHAIN_SCALE)}, but the network"
            f" upscales by {model.config.scale}"
        )
    small = [im.shape for im in dataset if min(im.shape[:2]) < config.patch_size]
    if small:
        raise ConfigError(
            f"{len(small)} training image(s) smaller than the {config.patch_size}px patch"
        )
    discriminator: Optional[Discriminator] = None
    if config.stage is Stage.GAN:
        if init_from is None:
            raise ConfigError("The GAN stage must start from a PSNR-stage checkpoint")
        if perceptual is None:
            raise ConfigError("The GAN stage needs a frozen encoder for the perceptual loss")
        load_module(model, init_from)
        with torch_seeded(config.seed, "discriminator"):
            discriminator = Discriminator()
        iterations = config.gan_iterations
    else:
        iterations = config.iterations
    log.info(
        "Training %s stage for %d iterations (batch %d, patch %d)",
        config.stage.value,
        iterations,
        config.batch_size,
        config.patch_size,
    )
    trainer = Trainer(
        model=model,
        config=config,
        conditioner=conditioner,
        perceptual=perceptual,
        discriminator=discriminator,
    )
    model.train()
    anyio.run(_run, trainer, dataset, iterations)
    model.eval()
    return TrainResult(model=model, config=config, rows=trainer.rows, discriminator=discriminator)


def new_model(config: NetworkConfig, seed: int) -> SRNet:
    with torch_seeded(seed, "srnet"):
        return SRNet(config)
