from __future__ import annotations
from collections.abc import Callable
import functools
import logging
from pathlib import Path
import sys
from typing import Any, Optional, TypeVar
import attr
import click
from click_loglevel import LogLevel
import colorlog
from .config import FinetuneStrategy, ProjectConfig, Stage
from .errors import DacesrError
from .evalkit import BicubicUpscaler, Upscaler, load_dataset
from .fixtures import generate_corpus, list_images, write_corpus
from .gradcheck import CHECKS, run_checks
from .imgproc import (
    DegradationSpec,
    apply_chain,
    read_png,
    read_specs,
    sample_degradations,
    write_png,
    write_specs,
)
from .pipeline import (
    Pipeline,
    evaluate,
    load_network,
    make_tagger,
    read_json,
    score_degradations,
    train_ree,
    train_sr,
    write_json,
)
from .ree import save_ree
from .tagging import Selection, SeverityClasses, SimilarityReport, select_by_threshold
from .util import TRACE, ImageReport, log

F = TypeVar("F", bound=Callable[..., Any])


def reports_errors(func: F) -> F:
    """Log library errors and exit nonzero instead of printing a traceback"""

    @functools.wraps(func)
    def wrapped(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except DacesrError as e:
            log.error("%s", e)
            click.get_current_context().exit(1)

    return wrapped  # type: ignore[return-value]


def out_dir(config: ProjectConfig) -> Path:
    p = Path(config.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option(
    "-l",
    "--log-level",
    type=LogLevel(extra={"TRACE": TRACE}),
    default="INFO",
    envvar="DACESR_LOG",
    help="Set logging level",
    show_default=True,
)
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="JSON project configuration",
)
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Master random seed")
@click.option("--jobs", type=click.IntRange(min=1), help="Maximum worker threads")
@click.option("--out", "out", type=click.Path(file_okay=False), help="Output directory")
@click.pass_context
def main(
    ctx: click.Context,
    log_level: int,
    config_file: Optional[Path],
    seed: Optional[int],
    jobs: Optional[int],
    out: Optional[str],
) -> None:
    """Degradation-aware super-resolution toolkit"""
    log.setLevel(log_level)
    colorlog.basicConfig(
        format="%(log_color)s%(asctime)s [%(levelname)-8s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
        log_colors={
            "TRACE": "green",
            "DEBUG": "cyan",
            "INFO": "bold",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "bold_red",
        },
        level="INFO",
        stream=sys.stderr,
    )
    logging.addLevelName(TRACE, "TRACE")
    try:
        config = ProjectConfig.load(config_file) if config_file else ProjectConfig()
    except DacesrError as e:
        log.error("%s", e)
        ctx.exit(1)
    overrides: dict[str, Any] = {}
    if seed is not None:
        overrides["seed"] = seed
    if jobs is not None:
        overrides["jobs"] = jobs
    if out is not None:
        overrides["out_dir"] = out
    ctx.obj = attr.evolve(config, **overrides).seeded()


@main.command()
@click.option(
    "--spec-file",
    type=click.Path(exists=True, dir_okay=False),
    help="Replay saved degradations instead of sampling",
)
@click.option("--sample", type=click.IntRange(min=1), help="Sample this many degradations")
@click.argument("input_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.pass_context
@reports_errors
def degrade(
    ctx: click.Context, input_dir: Path, spec_file: Optional[str], sample: Optional[int]
) -> None:
    """Apply degradation chains to every PNG in a directory"""
    config: ProjectConfig = ctx.obj
    if (spec_file is None) == (sample is None):
        raise click.UsageError("Give exactly one of --spec-file and --sample")
    specs: list[DegradationSpec]
    if spec_file is not None:
        specs = read_specs(spec_file)
    else:
        assert sample is not None
        specs = sample_degradations(sample, config.seed)
    out = out_dir(config)
    write_specs(out / "specs.jsonl", specs)
    for k, spec in enumerate(specs):
        write_json(out / f"spec_{k:03d}.json", spec.to_json())
    report = ImageReport()
    for p in list_images(input_dir):
        try:
            img = read_png(p)
        except (OSError, DacesrError) as e:
            log.error("Cannot read %s: %s", p, e)
            report.failed(str(p), str(e))
            continue
        for k, spec in enumerate(specs):
            target = out / f"spec_{k:03d}" / p.name
            try:
                target.parent.mkdir(parents=True, exist_ok=True)
                write_png(target, apply_chain(img, spec))
            except (OSError, DacesrError) as e:
                log.error("Degradation %d of %s failed: %s", k, p, e)
                report.failed(str(p), str(e))
            else:
                report.wrote(str(p), str(target))
    log.info("%s", report.summary("degraded images"))
    if report.n_written == 0:
        ctx.exit(1)


@main.command()
@click.option(
    "--tagger", type=click.Choice(["surrogate", "embedding"]), default="surrogate", show_default=True
)
@click.option("--ree", type=click.Path(exists=True, dir_okay=False), help="Embedding extractor checkpoint")
@click.argument("hr_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("specs_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@reports_errors
def score(
    ctx: click.Context, hr_dir: Path, specs_file: str, tagger: str, ree: Optional[str]
) -> None:
    """Score how strongly each degradation disturbs image tags"""
    config: ProjectConfig = ctx.obj
    images, _ = load_dataset(list_images(hr_dir)[: config.tagging.n_images])
    report, classes = score_degradations(
        images, read_specs(specs_file), make_tagger(tagger, ree), config.jobs
    )
    out = out_dir(config)
    report.write_jsonl(out / "report.jsonl")
    report.write_csv(out / "report.csv")
    write_json(out / "classes.json", classes.to_json())


@main.command()
@click.option("--tau1", type=float, help="Mild threshold")
@click.option("--tau2", type=float, help="Severe threshold")
@click.argument("report_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@reports_errors
def select(
    ctx: click.Context, report_file: str, tau1: Optional[float], tau2: Optional[float]
) -> None:
    """Split scored degradations into mild and severe sets"""
    config: ProjectConfig = ctx.obj
    selection = select_by_threshold(
        SimilarityReport.read_jsonl(report_file),
        config.tagging.tau1 if tau1 is None else tau1,
        config.tagging.tau2 if tau2 is None else tau2,
    )
    write_json(out_dir(config) / "selection.json", selection.to_json())


@main.command("train-ree")
@click.option(
    "--strategy", type=click.Choice([s.value for s in FinetuneStrategy]), help="Degradations to fine-tune on"
)
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("specs_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("selection_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@reports_errors
def train_ree_cmd(
    ctx: click.Context,
    data_dir: Path,
    specs_file: str,
    selection_file: str,
    strategy: Optional[str],
) -> None:
    """Pretrain the embedding extractor and fine-tune its LoRA adapter"""
    config: ProjectConfig = ctx.obj
    ree_config = config.ree
    if strategy is not None:
        ree_config = attr.evolve(ree_config, strategy=FinetuneStrategy(strategy))
    images, _ = load_dataset(list_images(data_dir))
    base, adapter = train_ree(
        images,
        read_specs(specs_file),
        Selection.from_json(read_json(selection_file)),
        ree_config,
        config.jobs,
    )
    save_ree(out_dir(config) / "ree.json", base, adapter)


@main.command("train-sr")
@click.option("--ree", type=click.Path(exists=True, dir_okay=False), help="Embedding extractor checkpoint")
@click.option(
    "--stage", type=click.Choice([s.value for s in Stage]), default="psnr", show_default=True
)
@click.option(
    "--init", "init_from", type=click.Path(exists=True, dir_okay=False), help="PSNR-stage checkpoint"
)
@click.argument("data_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.pass_context
@reports_errors
def train_sr_cmd(
    ctx: click.Context,
    data_dir: Path,
    ree: Optional[str],
    stage: str,
    init_from: Optional[str],
) -> None:
    """Train the super-resolution network for one stage"""
    config: ProjectConfig = ctx.obj
    train_config = attr.evolve(config.train, stage=Stage(stage))
    images, _ = load_dataset(list_images(data_dir))
    result = train_sr(images, config.network, train_config, ree, init_from)
    out = out_dir(config)
    result.write_log(out / f"{stage}_log.csv")
    result.checkpoint.save(out / f"{stage}.json")


@main.command()
@click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ree", type=click.Path(exists=True, dir_okay=False), help="Embedding extractor checkpoint")
@click.argument("inputs", type=click.Path(exists=True, dir_okay=False, path_type=Path), nargs=-1)
@click.pass_context
@reports_errors
def infer(ctx: click.Context, model: str, ree: Optional[str], inputs: tuple[Path, ...]) -> None:
    """Super-resolve images"""
    config: ProjectConfig = ctx.obj
    upscaler = load_network(model, config.network, ree, "network")
    out = out_dir(config)
    report = ImageReport()
    for p in inputs:
        try:
            sr = upscaler.upscale(read_png(p))
            write_png(out / p.name, sr)
        except (OSError, DacesrError) as e:
            log.error("Cannot super-resolve %s: %s", p, e)
            report.failed(str(p), str(e))
        else:
            report.wrote(str(p), str(out / p.name))
    log.info("%s", report.summary("super-resolved images"))
    if not report.ok:
        ctx.exit(1)


def parse_levels(
    _ctx: click.Context, _param: click.Parameter, value: Optional[str]
) -> Optional[list[str]]:
    if value is None:
        return None
    return [v.strip() for v in value.split(",") if v.strip()]


@main.command("eval")
@click.option("--model", type=click.Path(exists=True, dir_okay=False), help="Network checkpoint")
@click.option("--ree", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--levels", callback=parse_levels, help="Comma-separated levels, e.g. I,II,III")
@click.option("--specs", "specs_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--classes", "classes_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_context
@reports_errors
def eval_cmd(
    ctx: click.Context,
    model: Optional[str],
    ree: str,
    data: Path,
    levels: Optional[list[str]],
    specs_file: Optional[str],
    classes_file: Optional[str],
) -> None:
    """Benchmark the bicubic baseline and a network over degradation levels"""
    config: ProjectConfig = ctx.obj
    if levels is not None:
        config = attr.evolve(config, eval=attr.evolve(config.eval, levels=levels))
    upscalers: list[Upscaler] = [BicubicUpscaler(config.network.scale)]
    if model is not None:
        upscalers.append(load_network(model, config.network, ree, "network"))
    specs = read_specs(specs_file) if specs_file is not None else []
    classes = (
        SeverityClasses.from_json(read_json(classes_file)) if classes_file is not None else None
    )
    images, missing = load_dataset(list_images(data))
    if missing:
        log.warning("%d dataset file(s) could not be read", missing)
    report = evaluate(upscalers, images, config, specs, classes, ree, n_missing=missing)
    out = out_dir(config)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")


@main.command()
@click.option("--instances", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--check", "checks", type=click.Choice(list(CHECKS)), multiple=True)
@click.pass_context
@reports_errors
def gradcheck(ctx: click.Context, instances: int, checks: tuple[str, ...]) -> None:
    """Compare every analytic gradient with central differences"""
    config: ProjectConfig = ctx.obj
    results = run_checks(list(checks) or None, instances, config.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        click.echo(
            f"{r.name:<{width}}  {r.max_rel_error:10.3e}  {'ok' if r.ok else 'FAIL'}"
        )
    if not all(r.ok for r in results):
        ctx.exit(1)


@main.command()
@click.option("--dry-run", is_flag=True, help="Print the stage plan and exit")
@click.pass_context
@reports_errors
def pipeline(ctx: click.Context, dry_run: bool) -> None:
    """Run every stage from scoring to evaluation, resuming from saved artifacts"""
    config: ProjectConfig = ctx.obj
    pl = Pipeline(config)
    if dry_run:
        for st, needed in pl.plan():
            click.echo(f"{st.name:<14} {'run' if needed else 'skip'}  {st.artifact}")
        return
    pl.run()


@main.command()
@click.option("--count", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--side", type=click.IntRange(min=16), default=96, show_default=True)
@click.pass_context
@reports_errors
def fixtures(ctx: click.Context, count: int, side: int) -> None:
    """Write the procedural image corpus"""
    config: ProjectConfig = ctx.obj
    write_corpus(out_dir(config), generate_corpus(count, side, config.seed))


if __name__ == "__main__":
    main()
