"""Command-line entry point: ``sprvad <stage> [--config FILE] [overrides]``."""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .config import BASELINES, MODES, PARADIGMS, RunConfig, apply_overrides, parse_config
from .cubes import cube_labels
from .errors import ConfigurationError, SprError
from .synth import CorpusSpec, describe, generate, read_objects


def _config_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key = value file"),
        click.option("--dataset", help="test-split dataset root"),
        click.option("--train-dataset", help="training-split root (merge mode)"),
        click.option("--mode", type=click.Choice(MODES)),
        click.option("--paradigm", type=click.Choice(PARADIGMS)),
        click.option("--baseline", type=click.Choice(BASELINES)),
        click.option("--motion/--no-motion", "motion_enhanced", default=None, help="motion enhancement"),
        click.option("--seed", type=int),
        click.option("--out", type=click.Path(file_okay=False)),
        click.option("--set", "extra", multiple=True, metavar="KEY=VALUE", help="any other config key"),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _load_config(config_path, extra, **flags) -> RunConfig:
    try:
        config = parse_config(config_path) if config_path else RunConfig()
        pairs = {}
        for item in extra:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
            pairs[key.strip()] = value.strip()
        apply_overrides(config, pairs)
        for key, value in flags.items():
            if value is not None:
                setattr(config, key, value)
        if not config.dataset:
            raise ConfigurationError("no dataset given (--dataset or 'dataset = ...' in the config)")
        return config.validate()
    except (ConfigurationError, OSError) as exc:
        raise click.UsageError(str(exc)) from None


def _stage(name: str):
    """Turn library failures into a nonzero exit that names the stage."""
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except pipeline.StageError as exc:
                click.echo(f"error: {exc}", err=True)
                sys.exit(2)
            except (SprError, OSError) as exc:
                click.echo(f"error: stage {name!r} failed: {exc}", err=True)
                sys.exit(2)
        return wrapper
    return deco


@click.group()
@click.option("-v", "--verbose", count=True, help="-v info, -vv debug")
def main(verbose: int) -> None:
    """Unsupervised video anomaly detection with self-paced refinement."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("dest", type=click.Path(file_okay=False))
@click.option("--videos", "n_videos", type=int, default=CorpusSpec.n_videos, show_default=True)
@click.option("--frames", "frames_per_video", type=int, default=CorpusSpec.frames_per_video, show_default=True)
@click.option("--anomaly-fraction", type=float, default=CorpusSpec.anomaly_fraction, show_default=True)
@click.option("--speed-only", is_flag=True, help="anomalies share the normal motif, differ by speed")
@click.option("--seed", type=int, default=0, show_default=True)
@_stage("synth")
def synth(dest, n_videos, frames_per_video, anomaly_fraction, speed_only, seed):
    """Generate a synthetic corpus with planted anomalies."""
    kw = dict(n_videos=n_videos, frames_per_video=frames_per_video,
              anomaly_fraction=anomaly_fraction, seed=seed)
    spec = CorpusSpec.speed_only(**kw) if speed_only else CorpusSpec(**kw)
    try:
        spec.validate()
    except ConfigurationError as exc:
        raise click.UsageError(str(exc)) from None
    generate(spec, dest)
    click.echo(json.dumps(describe(dest), default=str, sort_keys=True))


@main.command()
@_config_options
@_stage("extract")
def extract(config_path, extra, **flags):
    """Localize foreground and cache spatio-temporal cubes."""
    config = _load_config(config_path, extra, **flags)
    test, train_split = pipeline.stage_extract(config)
    msg = f"test cubes: {len(test)}"
    if train_split is not None:
        msg += f", train cubes: {len(train_split)}"
    click.echo(msg)


@main.command()
@_config_options
@_stage("train")
def train(config_path, extra, **flags):
    """Train the appearance (and motion) autoencoders."""
    config = _load_config(config_path, extra, **flags)
    test, train_split = pipeline.stage_extract(config)
    objects = read_objects(config.dataset)
    app, mot = pipeline.stage_train(config, test, train_split,
                                    cube_labels(test, objects) if objects else None)
    Path(config.out, "config.txt").write_text(config.to_text())
    pipeline.write_curves_svg(Path(config.out) / "curves.svg", app.epochs)
    click.echo(f"trained {config.T} epochs; final mean loss {app.epochs[-1]['mean_loss']:.6g}")


@main.command()
@_config_options
@_stage("score")
def score(config_path, extra, **flags):
    """Score test cubes with trained checkpoints and write scores.csv."""
    config = _load_config(config_path, extra, **flags)
    test, _ = pipeline.stage_extract(config)
    app, mot = pipeline.load_models(config)
    records, _ = pipeline.stage_score(config, test, app, mot)
    click.echo(f"scored {len(records)} frames -> {Path(config.out) / 'scores.csv'}")


@main.command("eval")
@_config_options
@_stage("eval")
def evaluate(config_path, extra, **flags):
    """Frame-level AUROC / EER of scores.csv against labels.csv."""
    config = _load_config(config_path, extra, **flags)
    metrics = pipeline.stage_eval(config)
    click.echo((Path(config.out) / "metrics.txt").read_text().strip())
    return metrics


@main.command()
@_config_options
@_stage("run")
def run(config_path, extra, **flags):
    """Full pipeline: extract, train, score, evaluate."""
    config = _load_config(config_path, extra, **flags)
    result = pipeline.run_experiment(config)
    click.echo((Path(config.out) / "metrics.txt").read_text().strip())
    return result


if __name__ == "__main__":  # pragma: no cover
    main()
