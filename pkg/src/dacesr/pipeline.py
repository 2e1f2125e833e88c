from __future__ import annotations
from collections.abc import Callable, Sequence
import json
from pathlib import Path
from typing import Any, Optional
import attr
from .checkpoint import load_module
from .config import NetworkConfig, ProjectConfig, ReeConfig, Stage, TrainConfig, unstructure
from .consts import CHAIN_SCALE
from .errors import CheckpointError, ConfigError, DacesrError, StageError
from .evalkit import (
    BicubicUpscaler,
    EvalReport,
    NetworkUpscaler,
    Upscaler,
    benchmark,
    build_levels,
)
from .fixtures import load_or_generate
from .imgproc import DegradationSpec, ImageTensor, read_specs, sample_degradations, write_specs
from .ree import (
    MIN_PRETRAIN_CROPS,
    EmbeddingTagger,
    Encoder,
    LoraAdapter,
    finetune_ree,
    load_ree,
    make_pairs,
    pretrain_base,
    random_crops,
    save_ree,
    select_specs,
)
from .srnet import SRNet
from .tagging import (
    Selection,
    SeverityClasses,
    SimilarityReport,
    SurrogateTagger,
    Tagger,
    classify_four,
    select_by_threshold,
    severity_profile,
)
from .training import Conditioner, TrainResult, new_model, train_stage
from .util import log, substream

#: Evaluation method name of the network trained without the condition branch
PLAIN_METHOD = "psnr-plain"


def read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as fp:
        return json.load(fp)


def write_json(path: str | Path, data: Any) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(data, fp, indent=2, sort_keys=True)
        fp.write("\n")


def split_corpus(
    images: Sequence[ImageTensor], holdout: float
) -> tuple[list[ImageTensor], list[ImageTensor]]:
    """Training images first, the last ``holdout`` fraction (at least one) for evaluation"""
    if len(images) < 2:
        raise ConfigError("Need at least two images to hold some out for evaluation")
    n_eval = min(len(images) - 1, max(1, round(len(images) * holdout)))
    return list(images[:-n_eval]), list(images[-n_eval:])


def make_tagger(name: str, ree_path: Optional[str | Path] = None) -> Tagger:
    if name == "surrogate":
        return SurrogateTagger()
    elif name == "embedding":
        if ree_path is None:
            raise ConfigError("The embedding tagger needs an embedding extractor checkpoint")
        base, adapter = load_ree(ree_path)
        return EmbeddingTagger(base, adapter)
    else:
        raise ConfigError(f"Unknown tagger {name!r}")


def score_degradations(
    images: Sequence[ImageTensor],
    specs: Sequence[DegradationSpec],
    tagger: Tagger,
    jobs: Optional[int] = None,
) -> tuple[SimilarityReport, SeverityClasses]:
    report = severity_profile(images, specs, tagger, jobs=jobs)
    return report, classify_four(report)


def train_ree(
    images: Sequence[ImageTensor],
    specs: Sequence[DegradationSpec],
    selection: Selection,
    config: ReeConfig,
    jobs: Optional[int] = None,
) -> tuple[Encoder, LoraAdapter]:
    """Pretrain the base encoder on clean crops, then fine-tune its adapter"""
    rng = substream(config.seed, "ree-crops")
    n_crops = max(MIN_PRETRAIN_CROPS, 4 * len(images))
    crops = random_crops(images, config.crop_size, n_crops, rng)
    base = pretrain_base(crops, config).encoder
    chosen = select_specs(specs, selection, config.strategy)
    log.info(
        "Fine-tuning embedding extractor on %d %s degradations",
        len(chosen),
        config.strategy.value,
    )
    pairs = make_pairs(crops, chosen, config.seed, jobs)
    result = finetune_ree(pairs, base, config)
    return base, result.adapter


def make_conditioner(
    network: NetworkConfig, ree_path: Optional[str | Path]
) -> Optional[Conditioner]:
    if not network.conditioned:
        return None
    if ree_path is None:
        raise ConfigError("A conditioned network needs an embedding extractor checkpoint")
    base, adapter = load_ree(ree_path)
    if base.embed_dim != network.cond_channels:
        raise ConfigError(
            f"Embedding has {base.embed_dim} channels but the network expects"
            f" {network.cond_channels}"
        )
    return Conditioner(base, adapter, network.scale)


def train_sr(
    images: Sequence[ImageTensor],
    network: NetworkConfig,
    config: TrainConfig,
    ree_path: Optional[str | Path],
    init_from: Optional[str | Path] = None,
) -> TrainResult:
    conditioner = make_conditioner(network, ree_path)
    perceptual: Optional[Encoder] = None
    if config.stage is Stage.GAN:
        if ree_path is None:
            raise ConfigError("The GAN stage needs an embedding extractor checkpoint")
        perceptual, _ = load_ree(ree_path)
    model = new_model(network, config.seed)
    return train_stage(
        model,
        images,
        config,
        conditioner=conditioner,
        perceptual=perceptual,
        init_from=init_from,
    )


def load_network(
    path: str | Path, network: NetworkConfig, ree_path: Optional[str | Path], name: str
) -> NetworkUpscaler:
    model = SRNet(network)
    load_module(model, path)
    model.eval()
    return NetworkUpscaler(model, make_conditioner(network, ree_path), name=name)


def evaluate(
    upscalers: Sequence[Upscaler],
    images: Sequence[ImageTensor],
    config: ProjectConfig,
    specs: Sequence[DegradationSpec],
    classes: Optional[SeverityClasses],
    ree_path: str | Path,
    n_missing: int = 0,
) -> EvalReport:
    levels = build_levels(config.eval.levels, classes, specs, config.eval, config.seed)
    proxy, _ = load_ree(ree_path)
    return benchmark(
        upscalers,
        images,
        levels,
        proxy,
        crop_border=config.eval.crop_border,
        jobs=config.jobs,
        n_missing=n_missing,
    )


@attr.define
class Layout:
    """Where every pipeline artifact lives under the output directory"""

    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def specs(self) -> Path:
        return self.root / "score" / "specs.jsonl"

    @property
    def report(self) -> Path:
        return self.root / "score" / "report.jsonl"

    @property
    def report_csv(self) -> Path:
        return self.root / "score" / "report.csv"

    @property
    def classes(self) -> Path:
        return self.root / "score" / "classes.json"

    @property
    def selection(self) -> Path:
        return self.root / "select" / "selection.json"

    @property
    def ree(self) -> Path:
        return self.root / "ree" / "ree.json"

    def sr(self, stage: Stage) -> Path:
        return self.root / "sr" / f"{stage.value}.json"

    def train_log(self, stage: Stage) -> Path:
        return self.root / "sr" / f"{stage.value}_log.csv"

    @property
    def sr_plain(self) -> Path:
        return self.root / "sr" / "psnr_plain.json"

    @property
    def plain_log(self) -> Path:
        return self.root / "sr" / "psnr_plain_log.csv"

    @property
    def eval_json(self) -> Path:
        return self.root / "eval" / "report.json"

    @property
    def eval_csv(self) -> Path:
        return self.root / "eval" / "report.csv"


@attr.define
class PipelineStage:
    name: str
    #: Written last by the stage; its presence marks the stage as done
    artifact: Path
    run: Callable[[], None]


@attr.define
class Pipeline:
    config: ProjectConfig
    layout: Layout = attr.field(init=False)
    _images: Optional[list[ImageTensor]] = attr.field(init=False, default=None)

    def __attrs_post_init__(self) -> None:
        self.config = self.config.seeded()
        self.config.check_paths()
        self.layout = Layout(Path(self.config.out_dir))
        if self.config.network.scale != round(1 / CHAIN_SCALE):
            raise ConfigError(
                f"Degradation chains downscale by {round(1 / CHAIN_SCALE)}, but the"
                f" network upscales by {self.config.network.scale}"
            )

    @property
    def images(self) -> list[ImageTensor]:
        if self._images is None:
            self._images = load_or_generate(
                self.config.data_dir,
                self.config.corpus_size,
                self.config.corpus_side,
                self.config.seed,
            )
        return self._images

    def split(self) -> tuple[list[ImageTensor], list[ImageTensor]]:
        return split_corpus(self.images, self.config.eval.holdout)

    def stages(self) -> list[PipelineStage]:
        L = self.layout
        stages = [
            PipelineStage("score", L.classes, self.score),
            PipelineStage("select", L.selection, self.select),
            PipelineStage("train-ree", L.ree, self.train_ree),
            PipelineStage("train-sr-psnr", L.sr(Stage.PSNR), self.train_psnr),
            PipelineStage("train-sr-gan", L.sr(Stage.GAN), self.train_gan),
        ]
        if self.config.eval.unconditioned_baseline:
            stages.append(PipelineStage("train-sr-plain", L.sr_plain, self.train_plain))
        stages.append(PipelineStage("eval", L.eval_json, self.evaluate))
        return stages

    def plan(self) -> list[tuple[PipelineStage, bool]]:
        """Each stage and whether it will run; everything after a stage that runs reruns"""
        out: list[tuple[PipelineStage, bool]] = []
        stale = False
        for st in self.stages():
            stale = stale or not st.artifact.exists()
            out.append((st, stale))
        return out

    def run(self) -> None:
        write_json(self.layout.config, unstructure(self.config))
        for st, needed in self.plan():
            if not needed:
                log.info("Stage %s: %s exists; skipping", st.name, st.artifact)
                continue
            log.info("Stage %s: running", st.name)
            try:
                st.run()
            except (DacesrError, OSError) as e:
                if isinstance(e, StageError):
                    raise
                raise StageError(st.name, str(st.artifact), str(e)) from e
            log.info("Stage %s: wrote %s", st.name, st.artifact)

    def _require(self, stage: str, path: Path) -> Path:
        if not path.exists():
            raise StageError(stage, str(path), "required artifact is missing")
        return path

    def _specs(self, stage: str) -> list[DegradationSpec]:
        return read_specs(self._require(stage, self.layout.specs))

    def score(self) -> None:
        tc = self.config.tagging
        specs = sample_degradations(tc.n_degradations, self.config.seed)
        write_specs(self.layout.specs, specs)
        train, _ = self.split()
        profile = train[: tc.n_images]
        if tc.tagger != "surrogate":
            raise ConfigError("The pipeline scores with the surrogate tagger only")
        report, classes = score_degradations(
            profile, specs, make_tagger(tc.tagger), self.config.jobs
        )
        report.write_jsonl(self.layout.report)
        report.write_csv(self.layout.report_csv)
        write_json(self.layout.classes, classes.to_json())

    def select(self) -> None:
        tc = self.config.tagging
        report = SimilarityReport.read_jsonl(self._require("select", self.layout.report))
        selection = select_by_threshold(report, tc.tau1, tc.tau2)
        write_json(self.layout.selection, selection.to_json())

    def train_ree(self) -> None:
        specs = self._specs("train-ree")
        selection = Selection.from_json(
            read_json(self._require("train-ree", self.layout.selection))
        )
        train, _ = self.split()
        base, adapter = train_ree(train, specs, selection, self.config.ree, self.config.jobs)
        save_ree(self.layout.ree, base, adapter)

    def _train_sr(self, stage: Stage, init_from: Optional[Path]) -> None:
        ree = self._require(f"train-sr-{stage.value}", self.layout.ree)
        train, _ = self.split()
        config = attr.evolve(self.config.train, stage=stage)
        result = train_sr(train, self.config.network, config, ree, init_from)
        result.write_log(self.layout.train_log(stage))
        result.checkpoint.save(self.layout.sr(stage))

    def train_psnr(self) -> None:
        self._train_sr(Stage.PSNR, None)

    def train_gan(self) -> None:
        self._train_sr(Stage.GAN, self._require("train-sr-gan", self.layout.sr(Stage.PSNR)))

    def train_plain(self) -> None:
        train, _ = self.split()
        config = attr.evolve(self.config.train, stage=Stage.PSNR)
        network = attr.evolve(self.config.network, conditioned=False)
        result = train_sr(train, network, config, None)
        result.write_log(self.layout.plain_log)
        result.checkpoint.save(self.layout.sr_plain)

    def evaluate(self) -> None:
        L = self.layout
        specs = self._specs("eval")
        classes = SeverityClasses.from_json(read_json(self._require("eval", L.classes)))
        ree = self._require("eval", L.ree)
        upscalers: list[Upscaler] = [BicubicUpscaler(self.config.network.scale)]
        for stage in Stage:
            try:
                upscalers.append(
                    load_network(
                        self._require("eval", L.sr(stage)), self.config.network, ree, stage.value
                    )
                )
            except CheckpointError as e:
                raise StageError("eval", str(L.sr(stage)), str(e)) from e
        if self.config.eval.unconditioned_baseline:
            network = attr.evolve(self.config.network, conditioned=False)
            try:
                upscalers.append(
                    load_network(self._require("eval", L.sr_plain), network, None, PLAIN_METHOD)
                )
            except CheckpointError as e:
                raise StageError("eval", str(L.sr_plain), str(e)) from e
        _, held_out = self.split()
        report = evaluate(upscalers, held_out, self.config, specs, classes, ree)
        report.write_csv(L.eval_csv)
        report.write_json(L.eval_json)
