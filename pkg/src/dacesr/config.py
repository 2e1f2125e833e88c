from __future__ import annotations
from enum import Enum
import json
from pathlib import Path
from typing import Any, Optional, TypeVar
import attr
from .consts import (
    ADAM_BETAS,
    CONV1D_WIDTH,
    CROP_BORDER,
    LAMBDA_ADVERSARIAL,
    LAMBDA_PERCEPTUAL,
    LORA_RANK,
    N_DEGRADATIONS,
    N_PROFILE_IMAGES,
    TAU1,
    TAU2,
)
from .errors import ConfigError

C = TypeVar("C")


def _positive(_inst: Any, attribute: attr.Attribute, value: Any) -> None:
    if not value > 0:
        raise ConfigError(f"{attribute.name} must be positive, got {value!r}")


def _nonnegative(_inst: Any, attribute: attr.Attribute, value: Any) -> None:
    if not value >= 0:
        raise ConfigError(f"{attribute.name} must be nonnegative, got {value!r}")


class Stage(Enum):
    PSNR = "psnr"
    GAN = "gan"


class CfmPlacement(Enum):
    #: Modulate the ViMM-chain output before the block convolution
    INNER = "inner"
    #: Modulate the block output after its residual sum
    OUTER = "outer"


class FinetuneStrategy(Enum):
    SEVERE = "severe"
    MILD = "mild"
    MIXED = "mixed"


@attr.define
class TaggingConfig:
    tau1: float = TAU1
    tau2: float = TAU2
    n_degradations: int = attr.field(default=N_DEGRADATIONS, validator=_positive)
    n_images: int = attr.field(default=N_PROFILE_IMAGES, validator=_positive)
    tagger: str = "surrogate"

    def __attrs_post_init__(self) -> None:
        if not self.tau1 > self.tau2:
            raise ConfigError(f"tau1 ({self.tau1}) must exceed tau2 ({self.tau2})")


@attr.define
class NetworkConfig:
    n_rssb: int = attr.field(default=4, validator=_positive)
    vimm_per_rssb: int = attr.field(default=2, validator=_positive)
    channels: int = attr.field(default=32, validator=_positive)
    scale: int = attr.field(default=4)
    lambda_expand: int = attr.field(default=2, validator=_positive)
    state_size: int = attr.field(default=8, validator=_positive)
    conv_width: int = attr.field(default=CONV1D_WIDTH, validator=_positive)
    #: Channels of the condition embedding
    cond_channels: int = attr.field(default=64, validator=_positive)
    selective: bool = True
    conditioned: bool = True
    global_residual: bool = True
    cfm_placement: CfmPlacement = attr.field(
        default=CfmPlacement.INNER, converter=CfmPlacement
    )

    @scale.validator
    def _check_scale(self, _attribute: attr.Attribute, value: int) -> None:
        if value not in (2, 4):
            raise ConfigError(f"Upscaling factor must be 2 or 4, got {value}")


@attr.define
class ReeConfig:
    embed_dim: int = attr.field(default=64, validator=_positive)
    rank: int = attr.field(default=LORA_RANK, validator=_positive)
    #: LoRA output scale; None means 1/rank
    lora_scale: Optional[float] = None
    lr: float = attr.field(default=1e-4, validator=_positive)
    batch_size: int = attr.field(default=8, validator=_positive)
    iterations: int = attr.field(default=300, validator=_positive)
    crop_size: int = attr.field(default=64, validator=_positive)
    pretrain_epochs: int = attr.field(default=20, validator=_positive)
    pretrain_lr: float = attr.field(default=1e-3, validator=_positive)
    pretrain_batch_size: int = attr.field(default=16, validator=_positive)
    strategy: FinetuneStrategy = attr.field(
        default=FinetuneStrategy.SEVERE, converter=FinetuneStrategy
    )
    seed: int = 0

    @property
    def effective_scale(self) -> float:
        return self.lora_scale if self.lora_scale is not None else 1.0 / self.rank


@attr.define
class TrainConfig:
    patch_size: int = attr.field(default=64, validator=_positive)
    batch_size: int = attr.field(default=16, validator=_positive)
    iterations: int = attr.field(default=2000, validator=_positive)
    gan_iterations: int = attr.field(default=1000, validator=_positive)
    lr: float = attr.field(default=2e-4, validator=_positive)
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    lambda1: float = attr.field(default=LAMBDA_PERCEPTUAL, validator=_nonnegative)
    lambda2: float = attr.field(default=LAMBDA_ADVERSARIAL, validator=_nonnegative)
    flip_prob: float = 0.5
    #: Batches synthesized ahead of the optimizer
    prefetch: int = attr.field(default=4, validator=_positive)
    log_every: int = attr.field(default=50, validator=_positive)
    seed: int = 0
    stage: Stage = attr.field(default=Stage.PSNR, converter=Stage)

    def __attrs_post_init__(self) -> None:
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")


@attr.define
class EvalConfig:
    levels: list[str] = attr.Factory(lambda: ["bicubic", "I", "II", "III"])
    crop_border: int = attr.field(default=CROP_BORDER, validator=_nonnegative)
    #: Degradations drawn per level
    specs_per_level: int = attr.field(default=8, validator=_positive)
    #: Fraction of the corpus held out for evaluation
    holdout: float = 0.25
    #: Also train a PSNR network without the condition branch and score it alongside
    unconditioned_baseline: bool = True


@attr.define
class ProjectConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 0
    jobs: Optional[int] = None
    #: Number of procedural images generated when data_dir is empty
    corpus_size: int = attr.field(default=64, validator=_positive)
    corpus_side: int = attr.field(default=96, validator=_positive)
    tagging: TaggingConfig = attr.Factory(TaggingConfig)
    network: NetworkConfig = attr.Factory(NetworkConfig)
    ree: ReeConfig = attr.Factory(ReeConfig)
    train: TrainConfig = attr.Factory(TrainConfig)
    eval: EvalConfig = attr.Factory(EvalConfig)

    def seeded(self) -> ProjectConfig:
        """Copy with the project seed pushed down into every seeded section"""
        return attr.evolve(
            self,
            ree=attr.evolve(self.ree, seed=self.seed),
            train=attr.evolve(self.train, seed=self.seed),
        )

    def check_paths(self) -> None:
        """Missing directories are created later; existing ones must be directories"""
        for name, value in [("data_dir", self.data_dir), ("out_dir", self.out_dir)]:
            if Path(value).exists() and not Path(value).is_dir():
                raise ConfigError(f"{name} {value!r} is not a directory")

    @classmethod
    def load(cls, path: str | Path) -> ProjectConfig:
        try:
            with open(path, encoding="utf-8") as fp:
                data = json.load(fp)
        except (OSError, ValueError) as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
        return structure(cls, data)

    def dump(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(unstructure(self), fp, indent=2, sort_keys=True)
            fp.write("\n")


def structure(cls: type[C], data: Any) -> C:
    """Build an attrs config class from parsed JSON, recursing into sections"""
    if not isinstance(data, dict):
        raise ConfigError(f"Expected a JSON object for {cls.__name__}")
    attr.resolve_types(cls)
    fields = {f.name: f for f in attr.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"Unknown {cls.__name__} setting {key!r}")
        ftype = fields[key].type
        if isinstance(ftype, type) and attr.has(ftype):
            value = structure(ftype, value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def unstructure(obj: Any) -> Any:
    return attr.asdict(
        obj,
        value_serializer=lambda _inst, _field, v: v.value if isinstance(v, Enum) else v,
    )
