from __future__ import annotations
import json
from pathlib import Path
import pytest
from dacesr.config import (
    CfmPlacement,
    FinetuneStrategy,
    NetworkConfig,
    ProjectConfig,
    ReeConfig,
    Stage,
    TaggingConfig,
    TrainConfig,
    structure,
    unstructure,
)
from dacesr.consts import TAU1, TAU2
from dacesr.errors import ConfigError


def test_defaults() -> None:
    cfg = ProjectConfig()
    assert cfg.tagging.tau1 == TAU1
    assert cfg.tagging.tau2 == TAU2
    assert cfg.network.scale == 4
    assert cfg.ree.strategy is FinetuneStrategy.SEVERE
    assert cfg.train.stage is Stage.PSNR
    assert cfg.eval.levels == ["bicubic", "I", "II", "III"]


def test_dump_and_load(tmp_path: Path) -> None:
    cfg = ProjectConfig(
        seed=9,
        network=NetworkConfig(channels=16, cfm_placement="outer"),
        ree=ReeConfig(strategy="mixed"),
    )
    cfg.dump(tmp_path / "cfg" / "config.json")
    data = json.loads((tmp_path / "cfg" / "config.json").read_text())
    assert data["network"]["cfm_placement"] == "outer"
    assert data["ree"]["strategy"] == "mixed"
    assert ProjectConfig.load(tmp_path / "cfg" / "config.json") == cfg


def test_partial_config_keeps_defaults() -> None:
    cfg = structure(ProjectConfig, {"seed": 4, "train": {"iterations": 10}})
    assert cfg.seed == 4
    assert cfg.train.iterations == 10
    assert cfg.train.batch_size == TrainConfig().batch_size
    assert cfg.network == NetworkConfig()


def test_seeded_pushes_seed_down() -> None:
    cfg = ProjectConfig(seed=17).seeded()
    assert cfg.ree.seed == 17
    assert cfg.train.seed == 17


@pytest.mark.parametrize(
    "data",
    [
        pytest.param({"colour": "red"}, id="unknown-key"),
        pytest.param({"network": {"scale": 3}}, id="bad-scale"),
        pytest.param({"network": {"channels": 0}}, id="nonpositive"),
        pytest.param({"network": "big"}, id="section-not-object"),
        pytest.param({"tagging": {"tau1": 0.2, "tau2": 0.5}}, id="tau-order"),
        pytest.param({"train": {"stage": "warmup"}}, id="bad-stage"),
        pytest.param({"train": {"beta1": 1.0}}, id="bad-beta"),
        pytest.param({"train": {"lambda1": -1}}, id="negative-weight"),
        pytest.param({"ree": {"strategy": "random"}}, id="bad-strategy"),
    ],
)
def test_invalid_config(data: dict) -> None:
    with pytest.raises(ConfigError):
        structure(ProjectConfig, data)


def test_load_unreadable(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        ProjectConfig.load(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        ProjectConfig.load(bad)


def test_check_paths(tmp_path: Path) -> None:
    ProjectConfig(data_dir=str(tmp_path), out_dir=str(tmp_path / "missing")).check_paths()
    (tmp_path / "file").write_text("x")
    with pytest.raises(ConfigError):
        ProjectConfig(data_dir=str(tmp_path / "file")).check_paths()
    with pytest.raises(ConfigError):
        ProjectConfig(data_dir=str(tmp_path), out_dir=str(tmp_path / "file")).check_paths()


def test_unstructure_enums() -> None:
    assert unstructure(NetworkConfig(cfm_placement=CfmPlacement.INNER))["cfm_placement"] == "inner"
    assert unstructure(TaggingConfig()) == {
        "tau1": TAU1,
        "tau2": TAU2,
        "n_degradations": 1000,
        "n_images": 30,
        "tagger": "surrogate",
    }


def test_effective_lora_scale() -> None:
    assert ReeConfig(rank=4).effective_scale == 0.25
    assert ReeConfig(rank=4, lora_scale=1.0).effective_scale == 1.0
