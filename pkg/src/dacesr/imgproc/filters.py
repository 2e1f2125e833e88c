from __future__ import annotations
import math
import numpy as np
from numpy.typing import NDArray
from scipy import ndimage
from .image import ImageTensor, as_image, clamp
from ..errors import ParameterError


def gaussian_kernel(sigma: float, size: int) -> NDArray[np.float64]:
    """
    Isotropic 2-D Gaussian kernel of side ``size`` (odd, at least 3),
    normalized to sum to 1
    """
    if size < 3 or size % 2 == 0:
        raise ParameterError(f"Kernel size must be odd and at least 3, got {size}")
    if not sigma > 0:
        raise ParameterError(f"Blur sigma must be positive, got {sigma}")
    r = size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")
    k = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return k / k.sum()


def kernel_size_for(sigma: float) -> int:
    return max(3, 2 * math.ceil(3.0 * sigma) + 1)


def apply_blur(img: ImageTensor, kernel: NDArray[np.float64]) -> ImageTensor:
    img = as_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ParameterError(f"Invalid blur kernel shape {kernel.shape}")
    # Convolution proper: the kernel is flipped before correlating.
    flipped = kernel[::-1, ::-1]
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.correlate(img[:, :, c], flipped, mode="nearest")
    return clamp(out)


def add_gaussian_noise(
    img: ImageTensor, sigma255: float, rng: np.random.Generator
) -> ImageTensor:
    img = as_image(img)
    if sigma255 < 0:
        raise ParameterError(f"Noise sigma must be nonnegative, got {sigma255}")
    if sigma255 == 0:
        return img.copy()
    noise = rng.standard_normal(img.shape) * (sigma255 / 255.0)
    return clamp(img + noise)
