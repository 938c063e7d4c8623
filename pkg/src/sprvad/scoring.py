"""Anomaly scores, appearance/motion fusion, frame aggregation and
frame-level AUROC / EER."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError
from .nn import Autoencoder, per_sample_loss


@dataclass
class ScoreRecord:
    video_id: str
    frame_index: int
    s_app: float
    s_mot: float | None
    s_fused: float


@dataclass
class FusionConfig:
    omega_a: float = 0.5
    omega_m: float = 1.0
    mu_a: float = 0.0
    sigma_a: float = 1.0
    mu_m: float = 0.0
    sigma_m: float = 1.0

    @classmethod
    def from_scores(cls, s_app, s_mot=None, omega_a: float = 0.5, omega_m: float = 1.0) -> "FusionConfig":
        """Transductive statistics over every scored cube."""
        s_app = np.asarray(s_app, dtype=np.float64)
        cfg = cls(omega_a, omega_m, float(s_app.mean()), float(s_app.std()))
        if s_mot is not None:
            s_mot = np.asarray(s_mot, dtype=np.float64)
            cfg.mu_m, cfg.sigma_m = float(s_mot.mean()), float(s_mot.std())
        return cfg


def score_cubes(model: Autoencoder, inputs: np.ndarray, targets: np.ndarray | None = None,
                channel_mask=None, batch_size: int = 512) -> np.ndarray:
    """Per-cube mean squared reconstruction error (targets default to inputs)."""
    targets = inputs if targets is None else targets
    if len(inputs) != len(targets):
        raise ConfigurationError(f"{len(inputs)} inputs but {len(targets)} targets")
    out = np.empty(len(inputs))
    for start in range(0, len(inputs), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = per_sample_loss(model.forward(inputs[sl]), targets[sl], channel_mask)
    return out


def _standardize(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.zeros_like(x)
    return (x - mu) / sigma


def fuse(s_app, s_mot=None, config: FusionConfig | None = None) -> np.ndarray:
    """Weighted sum of standardized appearance and motion scores.  Without a
    motion channel only the weighted appearance term remains; a channel with
    zero spread contributes zero."""
    s_app = np.asarray(s_app, dtype=np.float64)
    config = config or FusionConfig.from_scores(s_app, s_mot)
    fused = config.omega_a * _standardize(s_app, config.mu_a, config.sigma_a)
    if s_mot is not None:
        fused = fused + config.omega_m * _standardize(np.asarray(s_mot, dtype=np.float64),
                                                      config.mu_m, config.sigma_m)
    return fused


def frame_scores(video_ids, frame_index, scores, n_frames: dict[str, int] | None = None,
                 smoothing: int = 0) -> dict[tuple[str, int], float]:
    """Max cube score per frame.

    Frames listed in ``n_frames`` that carry no cube receive the global
    minimum score.  ``smoothing`` > 1 applies a centred moving average along
    each video.
    """
    scores = np.asarray(scores, dtype=np.float64)
    best: dict[tuple[str, int], float] = {}
    for vid, t, s in zip(video_ids, frame_index, scores):
        key = (str(vid), int(t))
        if key not in best or s > best[key]:
            best[key] = float(s)
    floor = float(scores.min()) if scores.size else 0.0
    if n_frames:
        for vid, count in n_frames.items():
            for t in range(count):
                best.setdefault((vid, t), floor)
    if smoothing and smoothing > 1:
        best = _smooth(best, smoothing)
    return dict(sorted(best.items()))


def _smooth(frame_map: dict, window: int) -> dict:
    by_video: dict[str, list[tuple[int, float]]] = {}
    for (vid, t), s in frame_map.items():
        by_video.setdefault(vid, []).append((t, s))
    out = {}
    kernel = np.ones(window) / window
    for vid, items in by_video.items():
        items.sort()
        vals = np.array([s for _, s in items])
        padded = np.pad(vals, (window // 2, window - 1 - window // 2), mode="edge")
        sm = np.convolve(padded, kernel, mode="valid")
        out.update({(vid, t): float(v) for (t, _), v in zip(items, sm)})
    return out


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ConfigurationError(f"{scores.shape} scores vs {labels.shape} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ConfigurationError("labels must be 0 or 1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ConfigurationError("AUROC/EER need both positive and negative labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count
    one half), via the Mann-Whitney rank sum."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct threshold, starting from (0, 0)."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    return fpr, tpr


def eer(scores, labels) -> float:
    """Rate where false-positive and false-negative rates meet, linearly
    interpolated between adjacent ROC points."""
    fpr, tpr = roc_points(scores, labels)
    fnr = 1.0 - tpr
    gap = fpr - fnr
    k = int(np.nonzero(gap >= 0)[0][0])
    if gap[k] == 0 or k == 0:
        return float(fpr[k])
    g0, g1 = gap[k - 1], gap[k]
    alpha = -g0 / (g1 - g0)
    return float(fpr[k - 1] + alpha * (fpr[k] - fpr[k - 1]))


# -- files -------------------------------------------------------------------

def write_scores_csv(path, records: list[ScoreRecord]) -> None:
    has_mot = any(r.s_mot is not None for r in records)
    header = ["video_id", "frame_index", "s_app"] + (["s_mot"] if has_mot else []) + ["s_fused"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [r.video_id, r.frame_index, repr(float(r.s_app))]
            if has_mot:
                row.append(repr(float(r.s_mot)))
            row.append(repr(float(r.s_fused)))
            w.writerow(row)


def read_scores_csv(path) -> list[ScoreRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            mot = row.get("s_mot")
            out.append(ScoreRecord(row["video_id"], int(row["frame_index"]), float(row["s_app"]),
                                   None if mot in (None, "") else float(mot), float(row["s_fused"])))
    return out


def metrics_report(scores, labels) -> dict:
    labels = np.asarray(labels)
    return {
        "auroc": auroc(scores, labels),
        "eer": eer(scores, labels),
        "n_frames": int(labels.size),
        "n_anomalous": int(labels.sum()),
    }


def format_metrics(m: dict) -> str:
    return f"auroc={m['auroc']:.6f} eer={m['eer']:.6f} n_frames={m['n_frames']} n_anomalous={m['n_anomalous']}\n"


def parse_metrics(text: str) -> dict:
    out = {}
    for token in text.split():
        key, _, value = token.partition("=")
        out[key] = int(value) if key.startswith("n_") else float(value)
    return out


def write_metrics(path, m: dict) -> None:
    Path(path).write_text(format_metrics(m))
