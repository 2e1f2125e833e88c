"""Seeded procedural image corpus so that everything runs without downloads"""

from __future__ import annotations
from collections.abc import Callable
from pathlib import Path
import numpy as np
from scipy import ndimage
from .errors import ParameterError
from .imgproc import ImageTensor, read_png, write_png
from .util import log, substream


def _grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    t = (np.arange(side) + 0.5) / side
    return np.meshgrid(t, t, indexing="ij")


def _palette(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(k, 3))


def gradient(side: int, rng: np.random.Generator) -> ImageTensor:
    yy, xx = _grid(side)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.5) / 3.0
    a, b = _palette(rng, 2)
    return (1 - t)[..., None] * a + t[..., None] * b


def checkerboard(side: int, rng: np.random.Generator) -> ImageTensor:
    yy, xx = _grid(side)
    cells = int(rng.integers(3, 13))
    mask = (np.floor(yy * cells) + np.floor(xx * cells)) % 2
    a, b = _palette(rng, 2)
    return np.where(mask[..., None] > 0, a, b)


def stripes(side: int, rng: np.random.Generator) -> ImageTensor:
    yy, xx = _grid(side)
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(3, 16)
    phase = np.cos(angle) * xx + np.sin(angle) * yy
    t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * phase)
    a, b = _palette(rng, 2)
    return (1 - t)[..., None] * a + t[..., None] * b


def blobs(side: int, rng: np.random.Generator) -> ImageTensor:
    yy, xx = _grid(side)
    img = np.broadcast_to(_palette(rng, 1)[0], (side, side, 3)).copy()
    for color in _palette(rng, int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        img[inside] = color
    return img


def texture(side: int, rng: np.random.Generator) -> ImageTensor:
    noise = rng.standard_normal((side, side, 3))
    sigma = rng.uniform(1.0, 4.0)
    smooth = np.stack(
        [ndimage.gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(3)],
        axis=-1,
    )
    smooth -= smooth.min()
    smooth /= max(float(smooth.max()), 1e-12)
    base = _palette(rng, 1)[0]
    return 0.5 * base + 0.5 * smooth


#: Generators cycled through in corpus order
KINDS: dict[str, Callable[[int, np.random.Generator], ImageTensor]] = {
    "gradient": gradient,
    "checkerboard": checkerboard,
    "stripes": stripes,
    "blobs": blobs,
    "texture": texture,
}


def generate_corpus(n: int, side: int, seed: int) -> list[ImageTensor]:
    """
    ``n`` RGB images of ``side × side`` pixels, already quantized to 8 bits
    so that writing and rereading them is lossless
    """
    if n < 1 or side < 16:
        raise ParameterError(f"Corpus needs n ≥ 1 and side ≥ 16, got n={n} side={side}")
    kinds = list(KINDS.values())
    images = []
    for i in range(n):
        rng = substream(seed, "fixture", i)
        img = np.clip(kinds[i % len(kinds)](side, rng), 0.0, 1.0)
        images.append(np.rint(img * 255) / 255)
    return images


def write_corpus(out_dir: str | Path, images: list[ImageTensor]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out / f"fixture_{i:03d}.png"
        write_png(p, img)
        paths.append(p)
    log.info("Wrote %d fixture images to %s", len(paths), out)
    return paths


def list_images(data_dir: str | Path) -> list[Path]:
    return sorted(Path(data_dir).glob("*.png"))


def load_or_generate(
    data_dir: str | Path, n: int, side: int, seed: int
) -> list[ImageTensor]:
    """Images from ``data_dir``, writing the procedural corpus there first if it has none"""
    paths = list_images(data_dir)
    if not paths:
        log.info("No PNG images in %s; generating the fixture corpus", data_dir)
        paths = write_corpus(data_dir, generate_corpus(n, side, seed))
    return [read_png(p) for p in paths]
