from __future__ import annotations
from pathlib import Path
from typing import Any
import numpy as np
from numpy.typing import NDArray
from PIL import Image
from ..errors import ParameterError, UnsupportedFormatError

#: H×W×C float64 array with values in [0, 1]
ImageTensor = NDArray[np.float64]


def as_image(data: Any) -> ImageTensor:
    """
    Coerce ``data`` to a float64 H×W×C array, adding a channel axis to 2-D
    input, and check it against the image invariants.
    """
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, np.newaxis]
    if img.ndim != 3:
        raise ParameterError(f"Expected an H×W×C image, got shape {img.shape}")
    h, w, c = img.shape
    if h < 1 or w < 1:
        raise ParameterError(f"Image has empty dimension: {img.shape}")
    if c not in (1, 3):
        raise UnsupportedFormatError(f"Images must have 1 or 3 channels, not {c}")
    if not np.isfinite(img).all():
        raise ParameterError("Image contains non-finite values")
    return img


def clamp(img: ImageTensor) -> ImageTensor:
    return np.clip(img, 0.0, 1.0)


def require_rgb(img: ImageTensor, what: str) -> None:
    if img.shape[2] != 3:
        raise UnsupportedFormatError(
            f"{what} requires a 3-channel image, got {img.shape[2]} channel(s)"
        )


def read_png(path: str | Path) -> ImageTensor:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return rgb / 255.0


def write_png(path: str | Path, img: ImageTensor) -> None:
    img = as_image(img)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    data = np.rint(clamp(img) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, format="PNG")
