"""
Deterministic JPEG-style codec: colour transform, 8×8 block DCT, table
quantization and the inverse path.  No entropy coding is done, since only
the quantization loss matters for degradation.
"""

from __future__ import annotations
import numpy as np
from numpy.typing import NDArray
from scipy.fft import dctn, idctn
from .image import ImageTensor, as_image, clamp, require_rgb
from ..errors import ParameterError

BLOCK = 8

LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

CHROMINANCE_TABLE = np.full((BLOCK, BLOCK), 99, dtype=np.float64)
CHROMINANCE_TABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]

# Full-range JFIF colour transform
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def scaled_table(table: NDArray[np.float64], quality: int) -> NDArray[np.float64]:
    """Scale a base quantization table by the IJG quality convention"""
    if not 1 <= quality <= 100:
        raise ParameterError(f"JPEG quality must be in 1..100, got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((table * scale + 50) / 100), 1, 255)


def _to_blocks(plane: NDArray[np.float64]) -> NDArray[np.float64]:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2)


def _from_blocks(blocks: NDArray[np.float64]) -> NDArray[np.float64]:
    bh, bw = blocks.shape[:2]
    return blocks.swapaxes(1, 2).reshape(bh * BLOCK, bw * BLOCK)


def _quantize_plane(
    plane: NDArray[np.float64], table: NDArray[np.float64]
) -> NDArray[np.float64]:
    coeffs = dctn(_to_blocks(plane), type=2, axes=(2, 3), norm="ortho")
    coeffs = np.round(coeffs / table) * table
    return _from_blocks(idctn(coeffs, type=2, axes=(2, 3), norm="ortho"))


def jpeg_degrade(img: ImageTensor, quality: int) -> ImageTensor:
    img = as_image(img)
    require_rgb(img, "JPEG degradation")
    h, w = img.shape[:2]
    ph = -h % BLOCK
    pw = -w % BLOCK
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="edge") * 255.0
    ycc = padded @ _RGB2YCC.T
    ycc[:, :, 0] -= 128.0
    tables = (
        scaled_table(LUMINANCE_TABLE, quality),
        scaled_table(CHROMINANCE_TABLE, quality),
        scaled_table(CHROMINANCE_TABLE, quality),
    )
    decoded = np.empty_like(ycc)
    for c, table in enumerate(tables):
        decoded[:, :, c] = _quantize_plane(ycc[:, :, c], table)
    decoded[:, :, 0] += 128.0
    rgb = decoded @ _YCC2RGB.T
    # Decoders emit 8-bit samples.
    rgb = np.clip(np.round(rgb), 0, 255) / 255.0
    return clamp(rgb[:h, :w, :])
