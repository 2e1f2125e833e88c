# NOTE: Avoid using slotted classes here, as combining them with attrs and
# `__subclasses__` can lead to Heisenbugs depending on when garbage collection
# happens.
from __future__ import annotations
from abc import ABC, abstractmethod
from collections.abc import Sequence
import json
from pathlib import Path
from typing import Any, ClassVar
import attr
import numpy as np
from .filters import add_gaussian_noise, apply_blur, gaussian_kernel, kernel_size_for
from .image import ImageTensor, as_image
from .jpeg import jpeg_degrade
from .resize import ResizeMethod, output_size, resize
from ..consts import (
    BLUR_SIGMA_RANGE,
    CHAIN_SCALE,
    JPEG_QUALITY_RANGE,
    NOISE_SIGMA_RANGE,
    RESIZE_SCALE_RANGE,
)
from ..errors import ParameterError
from ..util import MASK64, draw_seed, substream


@attr.define(slots=False)
class DegradationStep(ABC):
    KIND: ClassVar[str]

    @abstractmethod
    def apply(
        self, img: ImageTensor, rng: np.random.Generator, target: tuple[int, int]
    ) -> ImageTensor: ...

    @abstractmethod
    def params(self) -> dict[str, Any]: ...

    def spatial_scale(self) -> float:
        return 1.0

    def to_json(self) -> dict[str, Any]:
        return {"kind": self.KIND, **self.params()}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> DegradationStep:
        params = dict(data)
        kind = params.pop("kind", None)
        for klass in DegradationStep.__subclasses__():
            if klass.KIND == kind:
                try:
                    return klass(**params)
                except TypeError as e:
                    raise ParameterError(f"Invalid {kind} step {data!r}: {e}") from e
        raise ParameterError(f"Unknown degradation kind: {kind!r}")


def _positive(_inst: Any, attribute: attr.Attribute, value: float) -> None:
    if not value > 0:
        raise ParameterError(f"{attribute.name} must be positive, got {value}")


def _nonnegative(_inst: Any, attribute: attr.Attribute, value: float) -> None:
    if not value >= 0:
        raise ParameterError(f"{attribute.name} must be nonnegative, got {value}")


def _quality(_inst: Any, _attribute: attr.Attribute, value: int) -> None:
    if not 1 <= value <= 100:
        raise ParameterError(f"JPEG quality must be in 1..100, got {value}")


@attr.define(slots=False)
class Blur(DegradationStep):
    KIND = "blur"
    sigma: float = attr.field(converter=float, validator=_positive)

    def __str__(self) -> str:
        return f"blur_{self.sigma:g}"

    def apply(
        self, img: ImageTensor, _rng: np.random.Generator, _target: tuple[int, int]
    ) -> ImageTensor:
        kernel = gaussian_kernel(self.sigma, kernel_size_for(self.sigma))
        return apply_blur(img, kernel)

    def params(self) -> dict[str, Any]:
        return {"sigma": self.sigma}


@attr.define(slots=False)
class GaussianNoise(DegradationStep):
    KIND = "noise"
    #: Standard deviation in 0–255 units
    sigma255: float = attr.field(converter=float, validator=_nonnegative)

    def __str__(self) -> str:
        return f"noise_{self.sigma255:g}"

    def apply(
        self, img: ImageTensor, rng: np.random.Generator, _target: tuple[int, int]
    ) -> ImageTensor:
        return add_gaussian_noise(img, self.sigma255, rng)

    def params(self) -> dict[str, Any]:
        return {"sigma255": self.sigma255}


@attr.define(slots=False)
class Jpeg(DegradationStep):
    KIND = "jpeg"
    quality: int = attr.field(converter=int, validator=_quality)

    def __str__(self) -> str:
        return f"jpeg_{self.quality}"

    def apply(
        self, img: ImageTensor, _rng: np.random.Generator, _target: tuple[int, int]
    ) -> ImageTensor:
        return jpeg_degrade(img, self.quality)

    def params(self) -> dict[str, Any]:
        return {"quality": self.quality}


@attr.define(slots=False)
class Resize(DegradationStep):
    KIND = "resize"
    scale: float = attr.field(converter=float, validator=_positive)
    method: ResizeMethod = attr.field(
        default=ResizeMethod.BICUBIC, converter=ResizeMethod
    )

    def __str__(self) -> str:
        return f"resize_{self.scale:g}_{self.method.value}"

    def spatial_scale(self) -> float:
        return self.scale

    def apply(
        self, img: ImageTensor, _rng: np.random.Generator, target: tuple[int, int]
    ) -> ImageTensor:
        return resize(img, self.scale, self.method, size=target)

    def params(self) -> dict[str, Any]:
        return {"scale": self.scale, "method": self.method.value}


@attr.define
class DegradationSpec:
    steps: list[DegradationStep] = attr.Factory(list)
    seed: int = attr.field(default=0, converter=lambda s: int(s) & MASK64)

    def __str__(self) -> str:
        return " > ".join(map(str, self.steps)) or "<identity>"

    @property
    def total_scale(self) -> float:
        s = 1.0
        for step in self.steps:
            s *= step.spatial_scale()
        return s

    def to_json(self) -> dict[str, Any]:
        return {"seed": self.seed, "steps": [s.to_json() for s in self.steps]}

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> DegradationSpec:
        steps = [DegradationStep.from_json(s) for s in data.get("steps", [])]
        return cls(steps=steps, seed=data.get("seed", 0))

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        return (
            max(1, output_size(height, self.total_scale)),
            max(1, output_size(width, self.total_scale)),
        )


def apply_chain(img: ImageTensor, spec: DegradationSpec) -> ImageTensor:
    """
    Apply the steps of ``spec`` in order.  Step ``i`` draws its randomness
    from sub-stream ``i`` of the spec's seed.  Each resize targets the source
    size times the cumulative scale so far, so a chain's total scale is
    subject to a single rounding.
    """
    img = as_image(img)
    h0, w0 = img.shape[:2]
    cumulative = 1.0
    for i, step in enumerate(spec.steps):
        cumulative *= step.spatial_scale()
        target = (output_size(h0, cumulative), output_size(w0, cumulative))
        if isinstance(step, Resize) and (target[0] < 1 or target[1] < 1):
            raise ParameterError(
                f"Step {i} ({step}) shrinks {h0}×{w0} to an empty image"
            )
        img = step.apply(img, substream(spec.seed, i), target)
    return img


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(*bounds))


def sample_round(rng: np.random.Generator) -> list[DegradationStep]:
    return [
        Blur(_uniform(rng, BLUR_SIGMA_RANGE)),
        Resize(_uniform(rng, RESIZE_SCALE_RANGE), ResizeMethod.BICUBIC),
        GaussianNoise(_uniform(rng, NOISE_SIGMA_RANGE)),
        Jpeg(int(rng.integers(JPEG_QUALITY_RANGE[0], JPEG_QUALITY_RANGE[1] + 1))),
    ]


def sample_degradation(rng: np.random.Generator) -> DegradationSpec:
    """
    Draw a second-order degradation chain: two rounds of blur, resize, noise
    and JPEG, then a final bicubic resize bringing the total scale to
    `CHAIN_SCALE`.
    """
    first = sample_round(rng)
    second = sample_round(rng)
    so_far = first[1].spatial_scale() * second[1].spatial_scale()
    final = Resize(CHAIN_SCALE / so_far, ResizeMethod.BICUBIC)
    return DegradationSpec(steps=[*first, *second, final], seed=draw_seed(rng))


def sample_degradations(n: int, seed: int) -> list[DegradationSpec]:
    return [sample_degradation(substream(seed, "degradations", i)) for i in range(n)]


def sweep_specs(kind: str, levels: Sequence[float], seed: int) -> list[DegradationSpec]:
    """Single-step specs varying one degradation type over ``levels``"""
    klass: type[DegradationStep]
    if kind == Blur.KIND:
        klass = Blur
    elif kind == GaussianNoise.KIND:
        klass = GaussianNoise
    elif kind == Jpeg.KIND:
        klass = Jpeg
    else:
        raise ParameterError(f"Cannot sweep degradation kind {kind!r}")
    return [
        DegradationSpec(steps=[klass(lv)], seed=draw_seed(substream(seed, kind, i)))
        for i, lv in enumerate(levels)
    ]


def write_specs(path: str | Path, specs: Sequence[DegradationSpec]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        for s in specs:
            print(json.dumps(s.to_json(), sort_keys=True), file=fp)


def read_specs(path: str | Path) -> list[DegradationSpec]:
    specs: list[DegradationSpec] = []
    with open(path, encoding="utf-8") as fp:
        text = fp.read()
    stripped = text.strip()
    if stripped.startswith("["):
        return [DegradationSpec.from_json(d) for d in json.loads(stripped)]
    for line in stripped.splitlines():
        line = line.strip()
        if line:
            specs.append(DegradationSpec.from_json(json.loads(line)))
    return specs
