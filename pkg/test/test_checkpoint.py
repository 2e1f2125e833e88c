from __future__ import annotations
import json
from pathlib import Path
import pytest
import torch
from dacesr.checkpoint import Checkpoint, load_module, save_module
from dacesr.consts import CHECKPOINT_FORMAT
from dacesr.errors import CheckpointError


def sample_tensors() -> dict[str, torch.Tensor]:
    return {
        "w": torch.randn(3, 4, dtype=torch.float64),
        "b": torch.randn(4, dtype=torch.float32),
        "steps": torch.tensor([7, -2], dtype=torch.int64),
        "scalar": torch.tensor(1.5, dtype=torch.float32),
    }


def test_save_and_load(tmp_path: Path) -> None:
    tensors = sample_tensors()
    manifest = Checkpoint(tensors, {"stage": "psnr"}).save(tmp_path / "model")
    assert manifest == tmp_path / "model.json"
    assert (tmp_path / "model.bin").exists()
    loaded = Checkpoint.load(tmp_path / "model")
    assert loaded.meta == {"stage": "psnr"}
    assert set(loaded.tensors) == set(tensors)
    for name, t in tensors.items():
        assert loaded.tensors[name].dtype == t.dtype
        assert torch.equal(loaded.tensors[name], t)


def test_manifest_layout(tmp_path: Path) -> None:
    Checkpoint(sample_tensors()).save(tmp_path / "m.json")
    manifest = json.loads((tmp_path / "m.json").read_text())
    assert manifest["format"] == CHECKPOINT_FORMAT
    assert manifest["blob"] == "m.bin"
    entries = manifest["tensors"]
    assert [e["name"] for e in entries] == ["b", "scalar", "steps", "w"]
    assert [e["dtype"] for e in entries] == ["f32", "f32", "i64", "f64"]
    offsets = [e["offset"] for e in entries]
    assert offsets == [0, 16, 20, 36]
    assert (tmp_path / "m.bin").stat().st_size == 36 + 96


def test_unsupported_dtype(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        Checkpoint({"x": torch.zeros(2, dtype=torch.int8)}).save(tmp_path / "x")


@pytest.mark.parametrize(
    "edit",
    [
        pytest.param(lambda m: m.update(format="other"), id="format"),
        pytest.param(lambda m: m.update(version=99), id="version"),
        pytest.param(lambda m: m["tensors"][0].update(dtype="f16"), id="dtype"),
        pytest.param(lambda m: m["tensors"][0].update(nbytes=10_000), id="overrun"),
        pytest.param(lambda m: m["tensors"][3].update(shape=[5, 4]), id="shape"),
        pytest.param(lambda m: m.update(blob="gone.bin"), id="blob"),
    ],
)
def test_corrupt_manifest(tmp_path: Path, edit: object) -> None:
    Checkpoint(sample_tensors()).save(tmp_path / "m")
    manifest = json.loads((tmp_path / "m.json").read_text())
    edit(manifest)  # type: ignore[operator]
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "m")


def test_unreadable_manifest(tmp_path: Path) -> None:
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "none")
    (tmp_path / "junk.json").write_text("][")
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "junk")


def test_module_round_trip(tmp_path: Path) -> None:
    torch.manual_seed(0)
    src = torch.nn.Linear(3, 2)
    save_module(src, tmp_path / "lin", {"note": 1})
    dest = torch.nn.Linear(3, 2)
    assert load_module(dest, tmp_path / "lin") == {"note": 1}
    assert torch.equal(dest.weight, src.weight)
    assert torch.equal(dest.bias, src.bias)


def test_module_mismatch(tmp_path: Path) -> None:
    save_module(torch.nn.Linear(3, 2), tmp_path / "lin")
    with pytest.raises(CheckpointError) as excinfo:
        load_module(torch.nn.Linear(3, 2, bias=False), tmp_path / "lin")
    assert "bias" in str(excinfo.value)
