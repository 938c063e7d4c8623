"""Seeded synthetic surveillance corpus with planted anomalies.

Normal events are slow checkerboard sprites; anomalies are sprites with a
different motif (striped texture, square shape) moving three times faster.
Every anomaly sprite stays fully inside the frame, so a frame is labelled 1
exactly when it shows one.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError
from .ingest import frame_files, read_labels, worker_threads

log = logging.getLogger(__name__)

DIRECTIONS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]


@dataclass
class CorpusSpec:
    n_videos: int = 10
    frames_per_video: int = 200
    height: int = 96
    width: int = 128
    anomaly_fraction: float = 0.1
    normal_count: tuple[int, int] = (1, 4)
    normal_size: tuple[int, int] = (18, 10)  # (height, width)
    normal_speed: int = 1
    normal_texture: str = "checker"
    normal_levels: tuple[float, float] = (0.45, 0.85)
    anomaly_size: tuple[int, int] = (14, 14)
    anomaly_speed_factor: int = 3
    anomaly_texture: str = "stripes"
    anomaly_levels: tuple[float, float] = (0.3, 0.95)
    event_length: tuple[int, int] = (12, 30)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.anomaly_fraction < 0.5:
            raise ConfigurationError("anomaly_fraction must lie in [0, 0.5): anomalies are the minority")
        lo, hi = self.normal_count
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"normal_count {self.normal_count} must satisfy 1 <= lo <= hi")
        for name in ("normal_size", "anomaly_size"):
            h, w = getattr(self, name)
            if h >= self.height or w >= self.width:
                raise ConfigurationError(f"{name} {h}x{w} does not fit a {self.height}x{self.width} frame")
        if self.n_videos < 1 or self.frames_per_video < 2:
            raise ConfigurationError("need at least one video of two frames")

    @classmethod
    def speed_only(cls, **kw) -> "CorpusSpec":
        """Anomalies share the normal motif and differ by speed alone."""
        kw.setdefault("anomaly_texture", "checker")
        kw.setdefault("anomaly_levels", cls.normal_levels)
        kw.setdefault("anomaly_size", cls.normal_size)
        return cls(**kw)


@dataclass
class Sprite:
    kind: str
    x: int
    y: int
    vx: int
    vy: int
    h: int
    w: int
    texture: np.ndarray = field(repr=False)

    def step(self, width: int, height: int) -> None:
        for _ in range(2):
            nx = self.x + self.vx
            if 0 <= nx <= width - self.w:
                break
            self.vx = -self.vx
        for _ in range(2):
            ny = self.y + self.vy
            if 0 <= ny <= height - self.h:
                break
            self.vy = -self.vy
        self.x = int(np.clip(self.x + self.vx, 0, width - self.w))
        self.y = int(np.clip(self.y + self.vy, 0, height - self.h))


def _texture(kind: str, h: int, w: int, levels: tuple[float, float]) -> np.ndarray:
    lo, hi = levels
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "checker":
        pattern = ((yy // 3) + (xx // 3)) % 2
    elif kind == "stripes":
        pattern = (yy // 2) % 2
    elif kind == "flat":
        pattern = np.ones((h, w), dtype=int)
    else:
        raise ConfigurationError(f"unknown texture {kind!r}")
    return np.where(pattern == 1, hi, lo).astype(np.float32)


def _spawn(rng, kind, size, speed, texture, levels, width, height) -> Sprite:
    h, w = size
    dx, dy = DIRECTIONS[rng.integers(len(DIRECTIONS))]
    return Sprite(kind, int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1)),
                  dx * speed, dy * speed, h, w, _texture(texture, h, w, levels))


def _event_spans(rng, n_frames: int, fraction: float, length: tuple[int, int]) -> list[tuple[int, int]]:
    """Non-overlapping [start, stop) spans covering round(fraction*n) frames."""
    target = int(round(fraction * n_frames))
    if target == 0:
        return []
    lengths = []
    while sum(lengths) < target:
        lengths.append(int(rng.integers(length[0], length[1] + 1)))
    lengths[-1] -= sum(lengths) - target
    if lengths[-1] < 2 and len(lengths) > 1:
        tail = lengths.pop()
        lengths[-1] += tail
    free = n_frames - target - (len(lengths) - 1)
    if free < 0:
        raise ConfigurationError("anomaly events do not fit the video; lower anomaly_fraction")
    gaps = rng.multinomial(free, np.ones(len(lengths) + 1) / (len(lengths) + 1))
    spans, pos = [], int(gaps[0])
    for k, ln in enumerate(lengths):
        spans.append((pos, pos + ln))
        pos += ln + 1 + int(gaps[k + 1])
    return spans


def _background(height: int, width: int) -> np.ndarray:
    ramp = np.linspace(0.05, 0.2, width, dtype=np.float32)
    return np.broadcast_to(ramp, (height, width)).copy()


def render_video(spec: CorpusSpec, rng) -> tuple[np.ndarray, np.ndarray, list]:
    """Frames (T, H, W) uint8, frame labels and per-frame object boxes."""
    n, height, width = spec.frames_per_video, spec.height, spec.width
    count = int(rng.integers(spec.normal_count[0], spec.normal_count[1] + 1))
    sprites = [_spawn(rng, "normal", spec.normal_size, spec.normal_speed, spec.normal_texture,
                      spec.normal_levels, width, height) for _ in range(count)]
    spans = _event_spans(rng, n, spec.anomaly_fraction, spec.event_length)
    background = _background(height, width)
    frames = np.empty((n, height, width), dtype=np.uint8)
    labels = np.zeros(n, dtype=np.int64)
    objects = []
    anomaly = None
    for t in range(n):
        active = next((s for s in spans if s[0] <= t < s[1]), None)
        if active is None:
            anomaly = None
        elif anomaly is None:
            anomaly = _spawn(rng, "anomaly", spec.anomaly_size,
                             spec.normal_speed * spec.anomaly_speed_factor, spec.anomaly_texture,
                             spec.anomaly_levels, width, height)
        elif t > active[0]:
            anomaly.step(width, height)
        if t > 0:
            for s in sprites:
                s.step(width, height)
        img = background.copy()
        for s in sprites + ([anomaly] if anomaly is not None else []):
            img[s.y:s.y + s.h, s.x:s.x + s.w] = s.texture
            objects.append((t, s.x, s.y, s.x + s.w, s.y + s.h, s.kind))
        labels[t] = int(anomaly is not None)
        frames[t] = np.round(img * 255.0).astype(np.uint8)
    return frames, labels, objects


def generate(spec: CorpusSpec, dest) -> Path:
    """Write ``<dest>/<video_id>/<frame>.png`` plus ``labels.csv`` and
    ``objects.csv`` (per-frame sprite boxes, synthetic ground truth only)."""
    spec.validate()
    dest = Path(dest)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"{dest}: cannot create dataset directory ({exc})") from exc
    root_rng = np.random.default_rng(spec.seed)
    seeds = root_rng.integers(0, 2**63 - 1, size=spec.n_videos)

    def one(v: int):
        vid = f"video_{v:03d}"
        frames, labels, objects = render_video(spec, np.random.default_rng(int(seeds[v])))
        vdir = dest / vid
        vdir.mkdir(exist_ok=True)
        for t, frame in enumerate(frames):
            Image.fromarray(frame, mode="L").save(vdir / f"{t:05d}.png", optimize=False)
        return [(vid, t, int(l)) for t, l in enumerate(labels)], [(vid,) + o for o in objects]

    label_rows, object_rows = [], []
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        for labels, objects in pool.map(one, range(spec.n_videos)):
            label_rows += labels
            object_rows += objects
    with open(dest / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame_index", "label"])
        w.writerows(label_rows)
    with open(dest / "objects.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame_index", "x0", "y0", "x1", "y1", "kind"])
        w.writerows(object_rows)
    log.info("wrote %d videos to %s", spec.n_videos, dest)
    return dest


def read_objects(root) -> dict[tuple[str, int], list[tuple[int, int, int, int, str]]] | None:
    path = Path(root) / "objects.csv"
    if not path.exists():
        return None
    objects: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["video_id"], int(row["frame_index"]))
            objects.setdefault(key, []).append(
                (int(row["x0"]), int(row["y0"]), int(row["x1"]), int(row["y1"]), row["kind"]))
    return objects


def describe(path) -> dict:
    """Frame counts, resolution and anomaly rate of a dataset directory."""
    root = Path(path)
    videos = sorted(p for p in root.iterdir() if p.is_dir())
    counts = {v.name: len(frame_files(v)) for v in videos}
    resolution = None
    for v in videos:
        files = frame_files(v)
        if files:
            with Image.open(files[0]) as im:
                resolution = (im.height, im.width)
            break
    summary = {
        "n_videos": len(videos),
        "n_frames": sum(counts.values()),
        "frames_per_video": counts,
        "resolution": resolution,
        "n_anomalous": None,
        "anomaly_rate": None,
    }
    labels = read_labels(root)
    if labels is None:
        log.warning("%s: labels.csv missing; anomaly rate unavailable", root)
        return summary
    n_anom = sum(labels.values())
    summary["n_anomalous"] = n_anom
    summary["anomaly_rate"] = n_anom / len(labels) if labels else math.nan
    return summary
