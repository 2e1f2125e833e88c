"""
Real Embedding Extractor: a compact strided CNN encoder, pretrained as an
autoencoder on clean crops, then adapted with LoRA so that embeddings of
degraded images match the frozen embeddings of their clean originals.
"""

from __future__ import annotations
from collections.abc import Sequence
import copy
import math
from pathlib import Path
from typing import Any, Optional
import attr
import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F
from .checkpoint import Checkpoint
from .config import FinetuneStrategy, ReeConfig
from .consts import ENCODER_STRIDE
from .errors import CheckpointError, ConfigError, ParameterError, TrainingError
from .imgproc import DegradationSpec, ImageTensor, apply_chain, as_image, resize
from .imgproc.resize import ResizeMethod
from .srnet import image_to_batch
from .tagging import Selection, TagSet, tagset
from .util import TRACE, amap_ordered, log, substream, torch_seeded

#: Channel widths of the first three encoder stages
STAGE_CHANNELS = (16, 32, 64)


class Encoder(nn.Module):
    """Four stride-2 3×3 conv stages; output is (B, d, H/16, W/16)"""

    def __init__(self, embed_dim: int = 64) -> None:
        super().__init__()
        widths = (3, *STAGE_CHANNELS, embed_dim)
        self.embed_dim = embed_dim
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            for cin, cout in zip(widths[:-1], widths[1:])
        )

    def forward(self, x: Tensor, adapter: Optional[LoraAdapter] = None) -> Tensor:
        for i, conv in enumerate(self.convs):
            weight = conv.weight if adapter is None else conv.weight + adapter.delta(i)
            x = F.conv2d(x, weight, conv.bias, stride=2, padding=1)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, 0.2)
        return x

    def embed(self, batch: Tensor, adapter: Optional[LoraAdapter] = None) -> Tensor:
        """
        Encode a (B, 3, H, W) batch of any size: reflect-pad to a multiple of
        16, encode, then crop the embedding to ``ceil(H/16) × ceil(W/16)``
        """
        h, w = batch.shape[-2:]
        ph = -h % ENCODER_STRIDE
        pw = -w % ENCODER_STRIDE
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            batch = F.pad(batch, (0, pw, 0, ph), mode=mode)
        emb = self(batch, adapter)
        return emb[:, :, : math.ceil(h / ENCODER_STRIDE), : math.ceil(w / ENCODER_STRIDE)]


class Decoder(nn.Module):
    """Mirror of `Encoder` used only while pretraining"""

    def __init__(self, embed_dim: int = 64) -> None:
        super().__init__()
        widths = (embed_dim, *reversed(STAGE_CHANNELS), 3)
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
            for cin, cout in zip(widths[:-1], widths[1:])
        )

    def forward(self, z: Tensor) -> Tensor:
        for i, deconv in enumerate(self.deconvs):
            z = deconv(z)
            if i < len(self.deconvs) - 1:
                z = F.leaky_relu(z, 0.2)
        return torch.sigmoid(z)


class LoraAdapter(nn.Module):
    """
    Low-rank weight updates for every conv of an `Encoder`.  For a conv with
    weight ``(out, in, k, k)`` the update is ``scale · down @ up`` reshaped,
    with ``down`` of shape ``(out, r)`` (zero-initialized) and ``up`` of shape
    ``(r, in·k·k)``.
    """

    def __init__(self, base: Encoder, rank: int, scale: Optional[float] = None) -> None:
        super().__init__()
        if rank < 1:
            raise ParameterError(f"LoRA rank must be at least 1, got {rank}")
        self.rank = rank
        self.scale = scale if scale is not None else 1.0 / rank
        self.shapes = [tuple(c.weight.shape) for c in base.convs]
        self.downs = nn.ParameterList()
        self.ups = nn.ParameterList()
        for out_c, in_c, kh, kw in self.shapes:
            fan_in = in_c * kh * kw
            self.downs.append(nn.Parameter(torch.zeros(out_c, rank)))
            up = torch.empty(rank, fan_in)
            nn.init.kaiming_uniform_(up, a=math.sqrt(5))
            self.ups.append(nn.Parameter(up))

    def delta(self, i: int) -> Tensor:
        return (self.scale * (self.downs[i] @ self.ups[i])).view(self.shapes[i])


def new_encoder(config: ReeConfig) -> Encoder:
    with torch_seeded(config.seed, "encoder"):
        return Encoder(config.embed_dim)


def new_adapter(base: Encoder, config: ReeConfig) -> LoraAdapter:
    with torch_seeded(config.seed, "adapter"):
        adapter = LoraAdapter(base, config.rank, config.effective_scale)
    return adapter.to(next(base.parameters()).dtype)


def encode(
    img: ImageTensor, base: Encoder, adapter: Optional[LoraAdapter] = None
) -> Tensor:
    """Embedding of one image as a (1, d, h, w) tensor"""
    img = as_image(img)
    dtype = next(base.parameters()).dtype
    with torch.no_grad():
        return base.embed(image_to_batch(img, dtype), adapter)


def rep_mse_loss(f_x: Tensor, f_y: Tensor) -> Tensor:
    if f_x.shape != f_y.shape:
        raise ParameterError(
            f"Embedding shapes differ: {tuple(f_x.shape)} vs {tuple(f_y.shape)}"
        )
    return F.mse_loss(f_y, f_x)


def merge_adapter(base: Encoder, adapter: LoraAdapter) -> Encoder:
    """A standalone encoder with the adapter folded into its weights"""
    merged = copy.deepcopy(base)
    with torch.no_grad():
        for i, conv in enumerate(merged.convs):
            conv.weight += adapter.delta(i)
    return merged


def random_crops(
    images: Sequence[ImageTensor], size: int, count: int, rng: np.random.Generator
) -> list[ImageTensor]:
    crops: list[ImageTensor] = []
    for k in range(count):
        img = images[k % len(images)]
        h, w = img.shape[:2]
        if h < size or w < size:
            raise ParameterError(f"Image of size {h}×{w} is smaller than crop size {size}")
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        crops.append(img[y : y + size, x : x + size].copy())
    return crops


def _stack(imgs: Sequence[ImageTensor], dtype: torch.dtype) -> Tensor:
    return torch.cat([image_to_batch(im, dtype) for im in imgs])


@attr.define
class PretrainResult:
    encoder: Encoder
    losses: list[float]


#: Minimum number of clean crops needed to pretrain the encoder
MIN_PRETRAIN_CROPS = 64


def pretrain_base(clean_crops: Sequence[ImageTensor], config: ReeConfig) -> PretrainResult:
    """
    Train encoder and decoder as an autoencoder under L1 reconstruction
    loss, then discard the decoder and freeze the encoder.  Returns the
    mean loss of each epoch.
    """
    if len(clean_crops) < MIN_PRETRAIN_CROPS:
        raise ConfigError(
            f"Pretraining needs at least {MIN_PRETRAIN_CROPS} clean crops, got"
            f" {len(clean_crops)}"
        )
    encoder = new_encoder(config)
    with torch_seeded(config.seed, "decoder"):
        decoder = Decoder(config.embed_dim)
    data = _stack(clean_crops, torch.float32)
    params = [*encoder.parameters(), *decoder.parameters()]
    opt = torch.optim.Adam(params, lr=config.pretrain_lr)
    losses: list[float] = []
    for epoch in range(config.pretrain_epochs):
        order = substream(config.seed, "pretrain", epoch).permutation(len(data))
        total = 0.0
        for start in range(0, len(order), config.pretrain_batch_size):
            batch = data[torch.from_numpy(order[start : start + config.pretrain_batch_size])]
            loss = F.l1_loss(decoder(encoder(batch)), batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        losses.append(total / len(order))
        log.debug("Pretrain epoch %d: L1 %.6f", epoch, losses[-1])
    encoder.requires_grad_(False)
    encoder.eval()
    return PretrainResult(encoder=encoder, losses=losses)


def select_specs(
    specs: Sequence[DegradationSpec],
    selection: Selection,
    strategy: FinetuneStrategy,
    spec_ids: Optional[Sequence[int]] = None,
) -> list[DegradationSpec]:
    """Degradations to train on under a grouped-training strategy"""
    if spec_ids is None:
        spec_ids = list(range(len(specs)))
    if strategy is FinetuneStrategy.SEVERE:
        chosen = selection.severe
    elif strategy is FinetuneStrategy.MILD:
        chosen = selection.mild
    else:
        chosen = selection.mild | selection.severe
    if not chosen:
        hint = "lower tau1" if strategy is FinetuneStrategy.MILD else "raise tau2"
        raise ConfigError(
            f"No degradations selected for {strategy.value} fine-tuning; {hint}"
            " or score more degradations"
        )
    return [s for i, s in zip(spec_ids, specs) if i in chosen]


def degrade_for_encoder(img: ImageTensor, spec: DegradationSpec) -> ImageTensor:
    """Degrade ``img`` and bring it back to its original size (bicubic)"""
    h, w = img.shape[:2]
    lr = apply_chain(img, spec)
    return resize(lr, h / lr.shape[0], ResizeMethod.BICUBIC, size=(h, w))


def make_pairs(
    clean_crops: Sequence[ImageTensor],
    specs: Sequence[DegradationSpec],
    seed: int,
    jobs: Optional[int] = None,
) -> list[tuple[ImageTensor, ImageTensor]]:
    """Pair each clean crop with a degraded copy under a randomly drawn spec"""
    if not specs:
        raise ConfigError("No degradations to build training pairs from")
    rng = substream(seed, "pairs")
    picks = [specs[int(rng.integers(len(specs)))] for _ in clean_crops]

    def degrade(k: int) -> ImageTensor:
        return degrade_for_encoder(clean_crops[k], picks[k])

    degraded = amap_ordered(degrade, list(range(len(clean_crops))), jobs)
    return list(zip(clean_crops, degraded))


@attr.define
class FinetuneResult:
    adapter: LoraAdapter
    losses: list[float]


def finetune_ree(
    pairs: Sequence[tuple[ImageTensor, ImageTensor]], base: Encoder, config: ReeConfig
) -> FinetuneResult:
    """
    Optimize only a LoRA adapter so that ``base + adapter`` maps each
    degraded image close to the frozen base embedding of its clean original
    """
    if not pairs:
        raise ConfigError("Fine-tuning needs at least one (clean, degraded) pair")
    base.requires_grad_(False)
    adapter = new_adapter(base, config)
    dtype = next(base.parameters()).dtype
    clean = _stack([c for c, _ in pairs], dtype)
    degraded = _stack([d for _, d in pairs], dtype)
    with torch.no_grad():
        targets = base.embed(clean)
    opt = torch.optim.Adam(adapter.parameters(), lr=config.lr)
    losses: list[float] = []
    for it in range(config.iterations):
        idx = substream(config.seed, "finetune", it).integers(
            0, len(pairs), size=min(config.batch_size, len(pairs))
        )
        sel = torch.from_numpy(idx)
        loss = rep_mse_loss(targets[sel], base.embed(degraded[sel], adapter))
        if not math.isfinite(loss.item()):
            raise TrainingError(it, "embedding loss is not finite")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        log.log(TRACE, "REE iteration %d: loss %.6g", it, losses[-1])
    log.info(
        "Fine-tuned REE adapter for %d iterations; final loss %.6g",
        config.iterations,
        losses[-1],
    )
    return FinetuneResult(adapter=adapter, losses=losses)


def heldout_pair_mse(
    pairs: Sequence[tuple[ImageTensor, ImageTensor]],
    base: Encoder,
    adapter: Optional[LoraAdapter] = None,
) -> float:
    """Mean embedding MSE between clean (base) and degraded (base + adapter)"""
    dtype = next(base.parameters()).dtype
    with torch.no_grad():
        clean = base.embed(_stack([c for c, _ in pairs], dtype))
        degraded = base.embed(_stack([d for _, d in pairs], dtype), adapter)
        return float(rep_mse_loss(clean, degraded))


@attr.define(eq=False)
class EmbeddingTagger:
    """
    Tags from an embedding: the sign of each channel's mean, and the
    strongest channel of each spatial cell
    """

    encoder: Encoder
    adapter: Optional[LoraAdapter] = None
    name: str = "embedding"

    def tag(self, img: ImageTensor) -> TagSet:
        emb = encode(img, self.encoder, self.adapter)[0]
        tags = {
            f"emb_{k}_{'pos' if m > 0 else 'neg'}"
            for k, m in enumerate(emb.mean(dim=(1, 2)).tolist())
        }
        strongest = emb.argmax(dim=0)
        for r in range(strongest.shape[0]):
            for c in range(strongest.shape[1]):
                tags.add(f"cell_{r}_{c}_ch_{int(strongest[r, c])}")
        return tagset(tags)


def save_ree(
    path: str | Path, base: Encoder, adapter: Optional[LoraAdapter] = None
) -> Path:
    """Store the base encoder and (if given) its adapter in one checkpoint"""
    tensors = {f"base.{k}": v for k, v in base.state_dict().items()}
    meta: dict[str, Any] = {"embed_dim": base.embed_dim, "rank": None, "lora_scale": None}
    if adapter is not None:
        tensors.update({f"adapter.{k}": v for k, v in adapter.state_dict().items()})
        meta["rank"] = adapter.rank
        meta["lora_scale"] = adapter.scale
    return Checkpoint(tensors, meta).save(path)


def load_ree(path: str | Path) -> tuple[Encoder, Optional[LoraAdapter]]:
    ckpt = Checkpoint.load(path)
    try:
        base = Encoder(int(ckpt.meta["embed_dim"]))
        base.load_state_dict(
            {k[5:]: v.float() for k, v in ckpt.tensors.items() if k.startswith("base.")}
        )
        adapter: Optional[LoraAdapter] = None
        if ckpt.meta.get("rank") is not None:
            adapter = LoraAdapter(base, int(ckpt.meta["rank"]), ckpt.meta["lora_scale"])
            adapter.load_state_dict(
                {
                    k[8:]: v.float()
                    for k, v in ckpt.tensors.items()
                    if k.startswith("adapter.")
                }
            )
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"{path} is not a usable embedding extractor checkpoint: {e}") from e
    base.requires_grad_(False)
    return base, adapter
