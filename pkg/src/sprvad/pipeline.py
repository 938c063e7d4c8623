"""End-to-end stages: extract -> train -> score -> evaluate, with artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .cubes import CubeSet, cube_labels, extract, read_cubes, write_cubes
from .errors import ConfigurationError, SprError
from .ingest import FlowParams, LocalizeParams, load_dataset, read_labels
from .nn import Adam, Autoencoder, build_autoencoder, load_checkpoint, save_checkpoint
from .scoring import (FusionConfig, ScoreRecord, auroc, frame_scores, fuse, metrics_report,
                      read_scores_csv, score_cubes, write_metrics, write_scores_csv)
from .spr import TrainingSet, TrainResult, evaluate_losses, train
from .synth import read_objects

log = logging.getLogger(__name__)


class StageError(SprError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunResult:
    config: RunConfig
    metrics: dict
    appearance: TrainResult
    motion: TrainResult | None
    records: list[ScoreRecord]
    cube_scores: dict[str, np.ndarray]
    cube_labels: np.ndarray | None = None
    artifacts: dict[str, Path] = field(default_factory=dict)

    @property
    def auroc(self) -> float:
        return self.metrics["auroc"]


# -- extraction ----------------------------------------------------------------

def _extract_key(config: RunConfig, root: str) -> str:
    payload = {
        "root": str(Path(root).resolve()), "frame_based": config.baseline == "FBR",
        "flow": config.motion_enhanced, "D": config.D, "size": config.cube_size,
        "thr": config.diff_threshold, "min_box": config.min_box,
        "block": config.flow_block, "radius": config.flow_radius,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def extract_dataset(config: RunConfig, root: str) -> CubeSet:
    return extract(
        load_dataset(root), frame_based=config.baseline == "FBR",
        with_flow=config.motion_enhanced,
        loc=LocalizeParams(threshold=config.diff_threshold, min_box=config.min_box),
        flow=FlowParams(block=config.flow_block, radius=config.flow_radius),
        depth=config.D, size=config.cube_size)


def cached_cubes(config: RunConfig, root: str, out: Path, name: str) -> CubeSet:
    """Extract once per (dataset, extraction settings); later stages and
    reruns read the cube container from the output directory."""
    key = _extract_key(config, root)
    path = out / f"cubes_{name}_{key}.bin"
    if path.exists():
        return read_cubes(path)
    cubes = extract_dataset(config, root)
    out.mkdir(parents=True, exist_ok=True)
    write_cubes(path, cubes)
    return cubes


def stage_extract(config: RunConfig) -> tuple[CubeSet, CubeSet | None]:
    out = Path(config.out)
    test = cached_cubes(config, config.dataset, out, "test")
    train_split = cached_cubes(config, config.train_dataset, out, "train") if config.mode == "merge" else None
    return test, train_split


# -- training ------------------------------------------------------------------

def _frame_labels(root: str, n_frames: dict[str, int]):
    labels = read_labels(root)
    if labels is None:
        return None, None
    keys = sorted((vid, t) for vid, n in n_frames.items() for t in range(n))
    missing = [k for k in keys if k not in labels]
    if missing:
        raise ConfigurationError(f"labels.csv lacks {len(missing)} frames, e.g. {missing[0]}")
    return keys, np.array([labels[k] for k in keys])


def _monitor(config: RunConfig, test: CubeSet, score_set: TrainingSet, cube_y):
    keys, y = _frame_labels(config.dataset, test.n_frames)
    if keys is None or not config.eval_every_epoch or y.min() == y.max():
        return None

    def on_epoch_end(epoch: int, model: Autoencoder) -> dict:
        s = evaluate_losses(model, score_set)
        fmap = frame_scores(test.video_ids, test.frames, s, test.n_frames)
        fs = np.array([fmap[k] for k in keys])
        row = {
            "mean_rl_normal": float(fs[y == 0].mean()),
            "mean_rl_abnormal": float(fs[y == 1].mean()),
            "auroc": auroc(fs, y),
        }
        if cube_y is not None and 0 < cube_y.sum() < len(cube_y):
            row["cube_rl_normal"] = float(s[cube_y == 0].mean())
            row["cube_rl_abnormal"] = float(s[cube_y == 1].mean())
        return row

    return on_epoch_end


def _train_sets(config: RunConfig, test: CubeSet, train_split: CubeSet | None, motion: bool):
    """(training set, scoring set); the scoring set covers the test split only."""
    def build(cubes: CubeSet) -> TrainingSet:
        if motion:
            return TrainingSet.from_volumes(cubes.ofc, config.paradigm, config.seed, sources=cubes.stc)
        return TrainingSet.from_volumes(cubes.stc, config.paradigm, config.seed)

    score_set = build(test)
    if train_split is None:
        return score_set, score_set
    merged = build(CubeSet.concat([train_split, test]))
    return merged, score_set


def stage_train(config: RunConfig, test: CubeSet, train_split: CubeSet | None,
                cube_y: np.ndarray | None = None):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = config.train_config()
    data, score_set = _train_sets(config, test, train_split, motion=False)
    model = build_autoencoder(data.inputs.shape[1], data.targets.shape[1], config.widths, seed=config.seed)
    opt = Adam(lr=config.lr, weight_decay=config.weight_decay)
    app = train(data, tc, model, opt, _monitor(config, test, score_set, cube_y))
    save_checkpoint(out / "appearance.ckpt", app.model, app.optimizer)
    _write_rows(out / "telemetry.csv", app.batches,
                ["epoch", "batch", "t", "lambda", "lambda_prime", "mean_loss", "drop_fraction"])
    _write_rows(out / "epochs.csv", app.epochs)
    mot = None
    if config.motion_enhanced:
        if test.ofc is None:
            raise ConfigurationError("motion enhancement needs optical-flow cubes; re-extract with flow")
        mdata, _ = _train_sets(config, test, train_split, motion=True)
        mmodel = build_autoencoder(mdata.inputs.shape[1], mdata.targets.shape[1], config.widths,
                                   seed=config.seed + 1)
        mot = train(mdata, tc, mmodel, Adam(lr=config.lr, weight_decay=config.weight_decay))
        save_checkpoint(out / "motion.ckpt", mot.model, mot.optimizer)
        _write_rows(out / "telemetry_motion.csv", mot.batches,
                    ["epoch", "batch", "t", "lambda", "lambda_prime", "mean_loss", "drop_fraction"])
    return app, mot


def _write_rows(path: Path, rows: list[dict], header: list[str] | None = None) -> None:
    if header is None:
        header = []
        for row in rows:
            header += [k for k in row if k not in header]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n", restval="")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in header})


# -- scoring -------------------------------------------------------------------

def stage_score(config: RunConfig, test: CubeSet, app_model: Autoencoder,
                mot_model: Autoencoder | None = None) -> tuple[list[ScoreRecord], dict]:
    app_set = TrainingSet.from_volumes(test.stc, config.paradigm, config.seed)
    s_app = score_cubes(app_model, app_set.inputs, app_set.targets, app_set.channel_mask)
    s_mot = None
    if mot_model is not None:
        mot_set = TrainingSet.from_volumes(test.ofc, config.paradigm, config.seed, sources=test.stc)
        s_mot = score_cubes(mot_model, mot_set.inputs, mot_set.targets, mot_set.channel_mask)
    fusion = FusionConfig.from_scores(s_app, s_mot, config.omega_a, config.omega_m)
    s_fused = fuse(s_app, s_mot, fusion)
    vids, frames = test.video_ids, test.frames
    f_app = frame_scores(vids, frames, s_app, test.n_frames, config.smoothing)
    f_mot = frame_scores(vids, frames, s_mot, test.n_frames, config.smoothing) if s_mot is not None else None
    f_fused = frame_scores(vids, frames, s_fused, test.n_frames, config.smoothing)
    records = [ScoreRecord(vid, t, f_app[(vid, t)], None if f_mot is None else f_mot[(vid, t)], s)
               for (vid, t), s in f_fused.items()]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out / "scores.csv", records)
    with open(out / "cube_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame_index", "x0", "y0", "x1", "y1", "s_app", "s_mot", "s_fused"])
        for i in range(len(test)):
            w.writerow([test.video_ids[i], int(test.frames[i]), *(int(v) for v in test.boxes[i]),
                        repr(float(s_app[i])), "" if s_mot is None else repr(float(s_mot[i])),
                        repr(float(s_fused[i]))])
    return records, {"s_app": s_app, "s_mot": s_mot, "s_fused": s_fused}


def stage_eval(config: RunConfig, scores_path: Path | None = None) -> dict:
    scores_path = scores_path or Path(config.out) / "scores.csv"
    records = read_scores_csv(scores_path)
    labels = read_labels(config.dataset)
    if labels is None:
        raise ConfigurationError(f"{config.dataset}: labels.csv required for evaluation")
    missing = [(r.video_id, r.frame_index) for r in records if (r.video_id, r.frame_index) not in labels]
    if missing:
        raise ConfigurationError(f"no label for {len(missing)} scored frames, e.g. {missing[0]}")
    y = np.array([labels[(r.video_id, r.frame_index)] for r in records])
    metrics = metrics_report([r.s_fused for r in records], y)
    write_metrics(Path(config.out) / "metrics.txt", metrics)
    return metrics


# -- curves --------------------------------------------------------------------

def write_curves_svg(path: Path, epochs: list[dict]) -> None:
    """Mean RL of normal/abnormal frames and frame AUROC against epoch."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sprvad"
    ep = [r["epoch"] for r in epochs]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    if epochs and "mean_rl_normal" in epochs[0]:
        ax1.semilogy(ep, [r["mean_rl_normal"] for r in epochs], label="normal")
        ax1.semilogy(ep, [r["mean_rl_abnormal"] for r in epochs], label="abnormal")
        ax1.legend()
        ax2.plot(ep, [r["auroc"] for r in epochs])
    else:
        ax1.semilogy(ep, [r["mean_loss"] for r in epochs], label="all")
        ax1.legend()
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean reconstruction loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("frame AUROC")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- full run ------------------------------------------------------------------

def run_experiment(config: RunConfig, test: CubeSet | None = None,
                   train_split: CubeSet | None = None) -> RunResult:
    """Run every stage; pre-extracted cube sets skip the extraction stage."""
    config.validate()
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    stage = "extract"
    try:
        if test is None:
            test, train_split = stage_extract(config)
        objects = read_objects(config.dataset)
        cube_y = cube_labels(test, objects) if objects is not None else None
        stage = "train"
        app, mot = stage_train(config, test, train_split, cube_y)
        stage = "score"
        records, cube_scores = stage_score(config, test, app.model, mot.model if mot else None)
        stage = "eval"
        metrics = stage_eval(config)
        write_curves_svg(out / "curves.svg", app.epochs)
    except SprError as exc:
        raise StageError(stage, exc) from exc
    artifacts = {name: out / name for name in
                 ("scores.csv", "cube_scores.csv", "telemetry.csv", "epochs.csv", "metrics.txt",
                  "appearance.ckpt", "curves.svg")}
    if mot is not None:
        artifacts["motion.ckpt"] = out / "motion.ckpt"
    return RunResult(config, metrics, app, mot, records, cube_scores, cube_y, artifacts)


def load_models(config: RunConfig) -> tuple[Autoencoder, Autoencoder | None]:
    out = Path(config.out)
    app, _ = load_checkpoint(out / "appearance.ckpt")
    mot = load_checkpoint(out / "motion.ckpt")[0] if config.motion_enhanced else None
    return app, mot
