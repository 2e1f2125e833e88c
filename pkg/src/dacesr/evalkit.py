"""
Benchmark scoring: PSNR on the luminance channel, the frozen-encoder
embedding distance used in place of a learned perceptual metric, and
per-level reports written as JSON and CSV.
"""

from __future__ import annotations
from collections.abc import Sequence
import csv
import json
import math
from pathlib import Path
from typing import Any, ClassVar, Optional, Protocol
import attr
import numpy as np
import torch
from .config import EvalConfig
from .consts import CROP_BORDER, EVAL_SCHEMA_VERSION
from .errors import ConfigError, DacesrError, ParameterError, UnsupportedFormatError
from .imgproc import (
    DegradationSpec,
    ImageTensor,
    apply_chain,
    as_image,
    bicubic_downsample,
    bicubic_upsample,
    read_png,
)
from .ree import Encoder, encode
from .srnet import SRNet, batch_to_image, image_to_batch
from .tagging import SeverityClasses
from .training import Conditioner
from .util import amap_ordered, log, substream

#: Level names in report order
LEVELS = ("bicubic", "I", "II", "III")

#: Severity classes (1-based) making up each degradation level
LEVEL_CLASSES: dict[str, tuple[int, ...]] = {"I": (1,), "II": (2, 3), "III": (4,)}


def rgb_to_y(img: ImageTensor) -> ImageTensor:
    """BT.601 studio-swing luma of an RGB image in [0, 1]"""
    img = as_image(img)
    if img.shape[2] == 1:
        return img
    y = (
        65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0
    ) / 255.0
    return y[..., None]


def psnr_y(sr: ImageTensor, hr: ImageTensor, crop_border: int = CROP_BORDER) -> float:
    """
    PSNR in dB between the Y channels of two images after cropping
    ``crop_border`` pixels from every side.  Identical images give ``inf``.
    """
    sr = as_image(sr)
    hr = as_image(hr)
    if sr.shape != hr.shape:
        raise ParameterError(f"Cannot compare images of shapes {sr.shape} and {hr.shape}")
    h, w = sr.shape[:2]
    if 2 * crop_border >= min(h, w):
        raise ParameterError(f"Border crop of {crop_border} leaves nothing of a {h}×{w} image")
    a = rgb_to_y(sr)
    b = rgb_to_y(hr)
    if crop_border:
        a = a[crop_border:-crop_border, crop_border:-crop_border]
        b = b[crop_border:-crop_border, crop_border:-crop_border]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def proxy_distance(sr: ImageTensor, hr: ImageTensor, encoder: Encoder) -> float:
    """Embedding MSE under the frozen base encoder (lower is closer)"""
    return float(torch.mean((encode(sr, encoder) - encode(hr, encoder)) ** 2))


def modcrop(img: ImageTensor, scale: int) -> ImageTensor:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


@attr.define
class Level:
    name: str
    #: Empty for the plain bicubic level
    specs: list[DegradationSpec] = attr.Factory(list)

    def degrade(self, hr: ImageTensor, index: int, scale: int) -> ImageTensor:
        if not self.specs:
            return bicubic_downsample(hr, scale)
        return apply_chain(hr, self.specs[index % len(self.specs)])


def build_levels(
    names: Sequence[str],
    classes: Optional[SeverityClasses],
    specs: Sequence[DegradationSpec],
    config: EvalConfig,
    seed: int,
) -> list[Level]:
    """
    Materialize each named level as a fixed list of degradations drawn (with
    a per-level seed) from the severity classes that make it up
    """
    levels: list[Level] = []
    for name in names:
        if name == "bicubic":
            levels.append(Level(name))
            continue
        if name not in LEVEL_CLASSES:
            raise ConfigError(f"Unknown evaluation level {name!r}")
        if classes is None:
            raise ConfigError(f"Level {name} needs severity classes from a score run")
        pool = sorted(i for c in LEVEL_CLASSES[name] for i in classes.as_list()[c - 1])
        if not pool:
            raise ConfigError(f"Level {name} has no degradations")
        rng = substream(seed, "level", name)
        k = min(config.specs_per_level, len(pool))
        picked = sorted(int(i) for i in rng.choice(pool, size=k, replace=False))
        levels.append(Level(name, [specs[i] for i in picked]))
        log.debug("Level %s: degradations %s", name, picked)
    return levels


class Upscaler(Protocol):
    name: str
    scale: int

    def upscale(self, lr: ImageTensor) -> ImageTensor: ...


@attr.define
class BicubicUpscaler:
    scale: int = 4
    name: str = "bicubic"

    def upscale(self, lr: ImageTensor) -> ImageTensor:
        return bicubic_upsample(lr, self.scale)


@attr.define(eq=False)
class NetworkUpscaler:
    model: SRNet
    conditioner: Optional[Conditioner] = None
    name: str = "network"

    @property
    def scale(self) -> int:
        return self.model.config.scale

    def upscale(self, lr: ImageTensor) -> ImageTensor:
        dtype = next(self.model.parameters()).dtype
        batch = image_to_batch(as_image(lr), dtype)
        with torch.no_grad():
            cond = self.conditioner(batch) if self.conditioner is not None else None
            return batch_to_image(self.model(batch, cond))


@attr.define
class EvalRow:
    method: str
    level: str
    psnr_y_mean: float
    proxy_mean: float
    n_images: int

    def to_json(self) -> dict[str, Any]:
        d = attr.asdict(self)
        # JSON has no infinity
        if math.isinf(self.psnr_y_mean):
            d["psnr_y_mean"] = "inf"
        return d

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> EvalRow:
        return cls(**{**data, "psnr_y_mean": float(data["psnr_y_mean"])})


@attr.define
class EvalReport:
    SCHEMA: ClassVar[int] = EVAL_SCHEMA_VERSION

    rows: list[EvalRow]
    crop_border: int
    #: Number of dataset files that could not be read
    n_missing: int = 0

    def get(self, method: str, level: str) -> EvalRow:
        for r in self.rows:
            if r.method == method and r.level == level:
                return r
        raise KeyError((method, level))

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": self.SCHEMA,
            "crop_border": self.crop_border,
            "n_missing": self.n_missing,
            "rows": [r.to_json() for r in self.rows],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> EvalReport:
        if data.get("schema_version") != cls.SCHEMA:
            raise UnsupportedFormatError(
                f"Unsupported report schema version {data.get('schema_version')!r}"
            )
        return cls(
            rows=[EvalRow.from_json(r) for r in data["rows"]],
            crop_border=data["crop_border"],
            n_missing=data.get("n_missing", 0),
        )

    def write_json(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.to_json(), fp, indent=2, sort_keys=True)
            fp.write("\n")

    @classmethod
    def read_json(cls, path: str | Path) -> EvalReport:
        with open(path, encoding="utf-8") as fp:
            return cls.from_json(json.load(fp))

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fp:
            writer = csv.writer(fp)
            writer.writerow([f.name for f in attr.fields(EvalRow)])
            for r in self.rows:
                writer.writerow(attr.astuple(r))


def load_dataset(paths: Sequence[str | Path]) -> tuple[list[ImageTensor], int]:
    """Read HR images, logging and counting the ones that cannot be read"""
    images: list[ImageTensor] = []
    missing = 0
    for p in paths:
        try:
            images.append(read_png(p))
        except (OSError, DacesrError) as e:
            log.error("Skipping %s: %s", p, e)
            missing += 1
    return images, missing


def benchmark(
    upscalers: Sequence[Upscaler],
    hr_images: Sequence[ImageTensor],
    levels: Sequence[Level],
    proxy_encoder: Encoder,
    crop_border: int = CROP_BORDER,
    jobs: Optional[int] = None,
    n_missing: int = 0,
) -> EvalReport:
    """
    Score every upscaler on every level.  Each image is degraded once per
    level, so all methods see the same inputs; means are summed in image
    order.
    """
    if not hr_images:
        raise ConfigError("No readable evaluation images")
    if not upscalers:
        raise ConfigError("Nothing to evaluate")
    scales = {u.scale for u in upscalers}
    if len(scales) != 1:
        raise ConfigError(f"Upscalers disagree on scale: {sorted(scales)}")
    scale = scales.pop()
    hrs = [modcrop(as_image(im), scale) for im in hr_images]
    rows: list[EvalRow] = []
    for level in levels:
        lrs = amap_ordered(
            lambda i: level.degrade(hrs[i], i, scale), list(range(len(hrs))), jobs
        )
        for up in upscalers:

            def score(i: int, up: Upscaler = up) -> tuple[float, float]:
                sr = up.upscale(lrs[i])
                if sr.shape != hrs[i].shape:
                    raise ParameterError(
                        f"{up.name} produced {sr.shape} for a {hrs[i].shape} target"
                    )
                return (
                    psnr_y(sr, hrs[i], crop_border),
                    proxy_distance(sr, hrs[i], proxy_encoder),
                )

            scores = amap_ordered(score, list(range(len(hrs))), jobs)
            n = len(scores)
            row = EvalRow(
                method=up.name,
                level=level.name,
                psnr_y_mean=math.fsum(p for p, _ in scores) / n,
                proxy_mean=math.fsum(q for _, q in scores) / n,
                n_images=n,
            )
            log.info(
                "%s on level %s: PSNR-Y %.3f dB, proxy %.5f over %d images",
                row.method,
                row.level,
                row.psnr_y_mean,
                row.proxy_mean,
                n,
            )
            rows.append(row)
    return EvalReport(rows=rows, crop_border=crop_border, n_missing=n_missing)
