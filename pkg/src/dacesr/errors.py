from __future__ import annotations
from typing import Optional
import attr


class DacesrError(Exception):
    pass


class ParameterError(DacesrError, ValueError):
    pass


class UnsupportedFormatError(DacesrError, ValueError):
    pass


class ConfigError(DacesrError):
    pass


class InternalError(DacesrError):
    pass


class CheckpointError(DacesrError):
    pass


@attr.define
class DegradationError(DacesrError):
    spec_id: int
    image_index: int
    msg: str

    def __str__(self) -> str:
        return (
            f"Error applying degradation {self.spec_id} to image"
            f" {self.image_index}: {self.msg}"
        )


@attr.define
class TrainingError(DacesrError):
    iteration: int
    msg: str

    def __str__(self) -> str:
        return f"Training failed at iteration {self.iteration}: {self.msg}"


@attr.define
class StageError(DacesrError):
    stage: str
    artifact: Optional[str]
    msg: str

    def __str__(self) -> str:
        where = f" (artifact: {self.artifact})" if self.artifact is not None else ""
        return f"Stage {self.stage!r} failed{where}: {self.msg}"
