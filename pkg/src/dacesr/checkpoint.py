"""
Tensor checkpoints: a JSON manifest naming each tensor's shape, dtype and
byte range, next to one binary blob holding the raw little-endian data.
"""

from __future__ import annotations
from collections.abc import Mapping
import json
from pathlib import Path
from typing import Any, Optional
import attr
import numpy as np
import torch
from torch import Tensor
from .consts import CHECKPOINT_FORMAT, CHECKPOINT_VERSION, CLIENT
from .errors import CheckpointError

DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4"), "i64": np.dtype("<i8")}


def _dtype_name(dt: np.dtype) -> str:
    for name, known in DTYPES.items():
        if dt == known:
            return name
    raise CheckpointError(f"Cannot store tensors of dtype {dt}")


@attr.define
class TensorEntry:
    name: str
    shape: list[int]
    dtype: str
    offset: int
    nbytes: int


@attr.define
class Checkpoint:
    tensors: dict[str, Tensor]
    meta: dict[str, Any] = attr.Factory(dict)

    @staticmethod
    def paths(path: str | Path) -> tuple[Path, Path]:
        """Manifest and blob paths for a checkpoint stem"""
        p = Path(path)
        if p.suffix == ".json":
            p = p.with_suffix("")
        return p.with_suffix(".json"), p.with_suffix(".bin")

    def save(self, path: str | Path) -> Path:
        manifest_path, blob_path = self.paths(path)
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        entries: list[TensorEntry] = []
        offset = 0
        with open(blob_path, "wb") as fp:
            for name in sorted(self.tensors):
                arr = self.tensors[name].detach().cpu().numpy()
                dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
                blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
                entries.append(
                    TensorEntry(
                        name=name,
                        shape=list(arr.shape),
                        dtype=_dtype_name(dt),
                        offset=offset,
                        nbytes=len(blob),
                    )
                )
                fp.write(blob)
                offset += len(blob)
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "created_by": CLIENT,
            "blob": blob_path.name,
            "meta": self.meta,
            "tensors": [attr.asdict(e) for e in entries],
        }
        with open(manifest_path, "w", encoding="utf-8") as fp:
            json.dump(manifest, fp, indent=2, sort_keys=True)
            fp.write("\n")
        return manifest_path

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        manifest_path, _ = cls.paths(path)
        try:
            with open(manifest_path, encoding="utf-8") as fp:
                manifest = json.load(fp)
        except (OSError, ValueError) as e:
            raise CheckpointError(f"Cannot read checkpoint manifest {manifest_path}: {e}") from e
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"Unsupported checkpoint version {manifest.get('version')!r}"
            )
        blob_path = manifest_path.parent / manifest["blob"]
        try:
            blob = blob_path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"Cannot read checkpoint blob {blob_path}: {e}") from e
        tensors: dict[str, Tensor] = {}
        for raw in manifest.get("tensors", []):
            try:
                e = TensorEntry(**raw)
                dt = DTYPES[e.dtype]
            except (TypeError, KeyError) as exc:
                raise CheckpointError(f"Malformed tensor entry {raw!r}: {exc}") from exc
            if e.offset + e.nbytes > len(blob):
                raise CheckpointError(f"Tensor {e.name!r} extends past end of blob")
            arr = np.frombuffer(blob, dtype=dt, count=e.nbytes // dt.itemsize, offset=e.offset)
            if int(np.prod(e.shape, dtype=np.int64)) != arr.size:
                raise CheckpointError(f"Tensor {e.name!r} has inconsistent shape")
            tensors[e.name] = torch.from_numpy(arr.reshape(e.shape).copy())
        return cls(tensors=tensors, meta=manifest.get("meta", {}))


def save_module(
    module: torch.nn.Module, path: str | Path, meta: Optional[Mapping[str, Any]] = None
) -> Path:
    return Checkpoint(dict(module.state_dict()), dict(meta or {})).save(path)


def load_module(module: torch.nn.Module, path: str | Path) -> dict[str, Any]:
    """Load a checkpoint into ``module`` in place and return its metadata"""
    ckpt = Checkpoint.load(path)
    state = module.state_dict()
    missing = set(state) - set(ckpt.tensors)
    unexpected = set(ckpt.tensors) - set(state)
    if missing or unexpected:
        raise CheckpointError(
            f"Checkpoint {path} does not match model: missing {sorted(missing)},"
            f" unexpected {sorted(unexpected)}"
        )
    module.load_state_dict(
        {k: v.to(state[k].dtype) for k, v in ckpt.tensors.items()}
    )
    return ckpt.meta
