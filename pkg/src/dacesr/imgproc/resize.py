from __future__ import annotations
from enum import Enum
import math
from typing import Optional
import numpy as np
from numpy.typing import NDArray
from .image import ImageTensor, as_image, clamp
from ..consts import BICUBIC_A
from ..errors import ParameterError


class ResizeMethod(Enum):
    BICUBIC = "bicubic"
    BILINEAR = "bilinear"
    NEAREST = "nearest"


def cubic(x: NDArray[np.float64], a: float = BICUBIC_A) -> NDArray[np.float64]:
    ax = np.abs(x)
    ax2 = ax**2
    ax3 = ax**3
    return np.where(
        ax <= 1,
        (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax < 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )


def triangle(x: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.maximum(0.0, 1.0 - np.abs(x))


def resample_matrix(
    in_len: int, out_len: int, method: ResizeMethod
) -> NDArray[np.float64]:
    """
    Dense ``out_len × in_len`` matrix mapping a line of samples to its resized
    version.  Borders replicate the edge sample.  Bicubic downscaling widens
    the kernel by the inverse scale (antialiasing, as MATLAB's ``imresize``
    does).
    """
    scale = out_len / in_len
    # Sample centres of the output in input coordinates
    x = (np.arange(out_len, dtype=np.float64) + 0.5) / scale - 0.5
    weights = np.zeros((out_len, in_len))
    if method is ResizeMethod.NEAREST:
        idx = np.clip(np.floor((np.arange(out_len) + 0.5) / scale), 0, in_len - 1)
        weights[np.arange(out_len), idx.astype(np.intp)] = 1.0
        return weights
    if method is ResizeMethod.BICUBIC:
        support = 2.0
        stretch = scale if scale < 1 else 1.0
        kernel = cubic
    else:
        support = 1.0
        stretch = 1.0
        kernel = triangle
    width = support / stretch
    left = np.floor(x - width).astype(np.intp)
    taps = int(math.ceil(2 * width)) + 2
    idx = left[:, np.newaxis] + np.arange(taps)[np.newaxis, :]
    w = kernel((x[:, np.newaxis] - idx) * stretch) * stretch
    w /= w.sum(axis=1, keepdims=True)
    np.add.at(
        weights,
        (np.repeat(np.arange(out_len), taps), np.clip(idx, 0, in_len - 1).ravel()),
        w.ravel(),
    )
    return weights


def output_size(length: int, scale: float) -> int:
    return int(round(length * scale))


def resize(
    img: ImageTensor,
    scale: float,
    method: ResizeMethod | str = ResizeMethod.BICUBIC,
    size: Optional[tuple[int, int]] = None,
) -> ImageTensor:
    """
    Resize ``img`` by ``scale`` along both axes.  ``size`` (height, width)
    overrides the dimensions computed from the scale.
    """
    img = as_image(img)
    method = ResizeMethod(method)
    if not scale > 0:
        raise ParameterError(f"Resize scale must be positive, got {scale}")
    h, w = img.shape[:2]
    if size is None:
        size = (output_size(h, scale), output_size(w, scale))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ParameterError(
            f"Resizing {h}×{w} by {scale} yields an empty {oh}×{ow} image"
        )
    if (oh, ow) == (h, w):
        return img.copy()
    rows = resample_matrix(h, oh, method)
    cols = resample_matrix(w, ow, method)
    out = np.einsum("ij,jkc,lk->ilc", rows, img, cols)
    return clamp(out)


def bicubic_downsample(img: ImageTensor, factor: int = 4) -> ImageTensor:
    img = as_image(img)
    h, w = img.shape[:2]
    return resize(img, 1 / factor, ResizeMethod.BICUBIC, size=(h // factor, w // factor))


def bicubic_upsample(img: ImageTensor, factor: int = 4) -> ImageTensor:
    img = as_image(img)
    h, w = img.shape[:2]
    return resize(img, factor, ResizeMethod.BICUBIC, size=(h * factor, w * factor))
