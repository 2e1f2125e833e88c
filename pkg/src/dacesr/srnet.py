from __future__ import annotations
from typing import Optional
import numpy as np
import torch
from torch import Tensor, nn
import torch.nn.functional as F
from .config import CfmPlacement, NetworkConfig
from .errors import ConfigError, InternalError, ParameterError
from .imgproc import ImageTensor, as_image
from .imgproc.image import require_rgb
from .ssm import VimmBlock, from_tokens, to_tokens


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """
    Rearrange (…, r²·C, H, W) to (…, C, rH, rW); channel ``c·r² + i·r + j``
    lands at sub-pixel ``(i, j)`` of output channel ``c``.
    """
    if r < 1 or x.shape[-3] % (r * r):
        raise ConfigError(
            f"Cannot pixel-shuffle {x.shape[-3]} channels by a factor of {r}"
        )
    return F.pixel_shuffle(x, r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    if r < 1 or x.shape[-1] % r or x.shape[-2] % r:
        raise ConfigError(f"Cannot pixel-unshuffle {tuple(x.shape[-2:])} by {r}")
    return F.pixel_unshuffle(x, r)


class Cfm(nn.Module):
    """
    Conditional feature modulator: ``α·x + β`` with ``α`` and ``β`` produced by
    two 1×1 convolutions from the condition map after bilinear resizing to
    the feature size.  Starts as the identity (``α ≡ 1``, ``β ≡ 0``).
    """

    def __init__(self, cond_channels: int, channels: int) -> None:
        super().__init__()
        self.alpha = nn.Conv2d(cond_channels, channels, 1)
        self.beta = nn.Conv2d(cond_channels, channels, 1)
        nn.init.zeros_(self.alpha.weight)
        nn.init.ones_(self.alpha.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        if cond.shape[1] != self.alpha.in_channels:
            raise ConfigError(
                f"Condition has {cond.shape[1]} channels, modulator expects"
                f" {self.alpha.in_channels}"
            )
        c = F.interpolate(cond, size=x.shape[-2:], mode="bilinear", align_corners=False)
        alpha = self.alpha(c)
        beta = self.beta(c)
        if alpha.shape[1] != x.shape[1]:
            raise ConfigError(
                f"Modulation has {alpha.shape[1]} channels but features have {x.shape[1]}"
            )
        return alpha * x + beta


class Rssb(nn.Module):
    """Residual state space block: ViMM chain, modulation, 3×3 conv, residual"""

    def __init__(self, config: NetworkConfig) -> None:
        super().__init__()
        c = config.channels
        self.placement = config.cfm_placement
        self.vimms = nn.ModuleList(
            VimmBlock(
                c,
                config.state_size,
                expand=config.lambda_expand,
                conv_width=config.conv_width,
                selective=config.selective,
            )
            for _ in range(config.vimm_per_rssb)
        )
        self.cfm = Cfm(config.cond_channels, c) if config.conditioned else None
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x: Tensor, cond: Optional[Tensor]) -> Tensor:
        h, w = x.shape[-2:]
        tokens = to_tokens(x)
        for vimm in self.vimms:
            tokens = vimm(tokens)
        feats = from_tokens(tokens, h, w)
        if self.cfm is not None and cond is not None:
            if self.placement is CfmPlacement.INNER:
                return x + self.conv(self.cfm(feats, cond))
            return self.cfm(x + self.conv(feats), cond)
        return x + self.conv(feats)


class SRNet(nn.Module):
    """
    Conditional super-resolution network: shallow conv, RSSB stack with
    per-block modulation, global residual sum, pixel-shuffle head
    """

    def __init__(self, config: NetworkConfig) -> None:
        super().__init__()
        self.config = config
        c = config.channels
        self.shallow = nn.Conv2d(3, c, 3, padding=1)
        self.blocks = nn.ModuleList(Rssb(config) for _ in range(config.n_rssb))
        self.body_conv = nn.Conv2d(c, c, 3, padding=1)
        self.head = nn.Conv2d(c, 3 * config.scale**2, 3, padding=1)

    def features(self, lr: Tensor, cond: Optional[Tensor]) -> Tensor:
        shallow = self.shallow(lr)
        deep = shallow
        for block in self.blocks:
            deep = block(deep, cond)
        body = self.body_conv(deep)
        return shallow + body if self.config.global_residual else body

    def forward(self, lr: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        """(B, 3, H, W) in [0, 1] → (B, 3, sH, sW) in [0, 1]"""
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ParameterError(f"Expected a (B, 3, H, W) batch, got {tuple(lr.shape)}")
        out = pixel_shuffle(self.head(self.features(lr, cond)), self.config.scale)
        return out.clamp(0.0, 1.0)


def image_to_batch(img: ImageTensor, dtype: torch.dtype = torch.float32) -> Tensor:
    """H×W×C image to a (1, C, H, W) tensor"""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype)[None]


def batch_to_image(t: Tensor) -> ImageTensor:
    return t.detach().cpu().to(torch.float64).numpy()[0].transpose(1, 2, 0).copy()


def net_forward(
    lr: ImageTensor, cond: Optional[Tensor], model: SRNet
) -> ImageTensor:
    """Super-resolve one image; ``cond`` is a (1, d, h, w) embedding or None"""
    lr = as_image(lr)
    require_rgb(lr, "Super-resolution")
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        sr = model(image_to_batch(lr, dtype), None if cond is None else cond.to(dtype))
    return batch_to_image(sr)


def net_backward(output: Tensor, grad_output: Tensor, model: nn.Module) -> dict[str, Tensor]:
    """
    Gradients of every trainable parameter of ``model`` given the upstream
    gradient of ``output``, which must come from a forward pass recorded by
    autograd
    """
    if output.grad_fn is None:
        raise InternalError("Output carries no saved forward graph")
    if grad_output.shape != output.shape:
        raise InternalError(
            f"Gradient shape {tuple(grad_output.shape)} does not match output"
            f" shape {tuple(output.shape)}"
        )
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(
        output,
        [p for _, p in named],
        grad_outputs=grad_output,
        retain_graph=True,
        allow_unused=True,
    )
    return {
        n: (g if g is not None else torch.zeros_like(p))
        for (n, p), g in zip(named, grads)
    }
