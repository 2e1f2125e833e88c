from .chain import (
    Blur,
    DegradationSpec,
    DegradationStep,
    GaussianNoise,
    Jpeg,
    Resize,
    apply_chain,
    read_specs,
    sample_degradation,
    sample_degradations,
    sweep_specs,
    write_specs,
)
from .filters import add_gaussian_noise, apply_blur, gaussian_kernel, kernel_size_for
from .image import ImageTensor, as_image, read_png, write_png
from .jpeg import jpeg_degrade
from .resize import ResizeMethod, bicubic_downsample, bicubic_upsample, resize

__all__ = [
    "Blur",
    "DegradationSpec",
    "DegradationStep",
    "GaussianNoise",
    "ImageTensor",
    "Jpeg",
    "Resize",
    "ResizeMethod",
    "add_gaussian_noise",
    "apply_blur",
    "apply_chain",
    "as_image",
    "bicubic_downsample",
    "bicubic_upsample",
    "gaussian_kernel",
    "jpeg_degrade",
    "kernel_size_for",
    "read_png",
    "read_specs",
    "resize",
    "sample_degradation",
    "sample_degradations",
    "sweep_specs",
    "write_png",
    "write_specs",
]
