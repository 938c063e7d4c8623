"""Frame loading, foreground localization, block-matching optical flow and
construction of spatio-temporal cubes (STCs) and optical-flow cubes (OFCs).

Cube volumes are stored slice-major: an STC is ``(D, size, size)`` and an
OFC is ``(D, 2, size, size)`` with channel 0 the horizontal and channel 1 the
vertical displacement in pixels per frame.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, IngestionError

FRAME_SUFFIXES = {".png", ".pgm", ".bmp", ".tif", ".tiff"}
PARADIGMS = ("REC", "PRD", "RR", "SF")


@dataclass
class VideoClip:
    id: str
    frames: np.ndarray  # (T, H, W) float32 in [0, 1]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int
    frame_index: int = 0

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ConfigurationError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def intersection(self, other: "BoundingBox") -> int:
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(w, 0) * max(h, 0)


@dataclass
class SpatioTemporalCube:
    data: np.ndarray  # (D, size, size)
    video_id: str
    center_frame: int
    box: BoundingBox


@dataclass
class OpticalFlowCube:
    data: np.ndarray  # (D, 2, size, size)
    video_id: str
    center_frame: int
    box: BoundingBox


@dataclass
class ParadigmPair:
    input: np.ndarray
    target: np.ndarray
    paradigm: str
    # per-slice flags selecting where the loss is measured
    slice_mask: np.ndarray = field(default=None)


@dataclass
class LocalizeParams:
    threshold: float = 0.05
    min_box: int = 16
    merge_overlap: float = 0.5
    dilate: int = 2
    min_area: int = 4


@dataclass
class FlowParams:
    block: int = 8
    radius: int = 4


def worker_threads() -> int:
    """Worker cap from ``SPR_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SPR_THREADS", "1")))
    except ValueError:
        return 1


# -- loading -----------------------------------------------------------------

def _read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P"):
                raise IngestionError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            arr = np.asarray(im.convert("L"), dtype=np.float32)
    except IngestionError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise IngestionError(f"{path}: unreadable frame ({exc})") from exc
    return arr / np.float32(255.0)


def frame_files(path) -> list[Path]:
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"{path}: not a directory")
    return sorted(p for p in path.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_video(path) -> VideoClip:
    """Load a directory of grayscale frames in lexicographic file order."""
    path = Path(path)
    files = frame_files(path)
    if not files:
        raise IngestionError(f"{path}: no frames found")
    frames = []
    for f in files:
        arr = _read_frame(f)
        if frames and arr.shape != frames[0].shape:
            raise IngestionError(
                f"{f}: frame size {arr.shape[::-1]} differs from {frames[0].shape[::-1]}")
        frames.append(arr)
    return VideoClip(path.name, np.stack(frames))


def load_dataset(root) -> list[VideoClip]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not dirs:
        raise IngestionError(f"{root}: no video directories")
    return [load_video(d) for d in dirs]


def read_labels(root) -> dict[tuple[str, int], int] | None:
    """``labels.csv`` as ``{(video_id, frame_index): label}``, or None."""
    path = Path(root) / "labels.csv"
    if not path.exists():
        return None
    labels = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                label = int(row["label"])
                key = (row["video_id"], int(row["frame_index"]))
            except (KeyError, ValueError) as exc:
                raise IngestionError(f"{path}:{lineno}: malformed row {row}") from exc
            if label not in (0, 1):
                raise IngestionError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            labels[key] = label
    return labels


# -- localization ------------------------------------------------------------

def _square(x0, y0, x1, y1, side_min, width, height, frame_index) -> BoundingBox:
    side = max(x1 - x0, y1 - y0, side_min)
    side_x, side_y = min(side, width), min(side, height)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    nx0 = int(np.clip(round(cx - side_x / 2.0), 0, width - side_x))
    ny0 = int(np.clip(round(cy - side_y / 2.0), 0, height - side_y))
    return BoundingBox(nx0, ny0, nx0 + side_x, ny0 + side_y, frame_index)


def _merge_boxes(boxes, params, width, height, frame_index):
    boxes = sorted(boxes, key=lambda b: (b.y0, b.x0, b.y1, b.x1))
    merged = True
    while merged:
        merged = False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                if a.intersection(b) >= params.merge_overlap * min(a.area, b.area):
                    union = _square(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1),
                                    max(a.y1, b.y1), params.min_box, width, height, frame_index)
                    rest = [box for k, box in enumerate(boxes) if k not in (i, j)]
                    boxes = sorted(rest + [union], key=lambda b: (b.y0, b.x0, b.y1, b.x1))
                    merged = True
                    break
            if merged:
                break
    return boxes


def localize_foreground(clip: VideoClip, frame_index: int,
                        params: LocalizeParams | None = None) -> list[BoundingBox]:
    """Boxes around regions that changed since the previous frame.

    Thresholded absolute frame difference, 8-connected components, each grown
    to a square of side at least ``min_box`` and merged while two squares
    overlap by ``merge_overlap`` of the smaller one.  Frame 0 is compared
    with frame 1.
    """
    params = params or LocalizeParams()
    n = len(clip)
    if not 0 <= frame_index < n:
        raise IndexError(f"frame {frame_index} outside clip of length {n}")
    if n < 2:
        return []
    prev = frame_index - 1 if frame_index > 0 else 1
    diff = np.abs(clip.frames[frame_index] - clip.frames[prev])
    mask = diff > params.threshold
    if not mask.any():
        return []
    if params.dilate:
        mask = ndimage.binary_dilation(mask, iterations=params.dilate)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    height, width = mask.shape
    boxes = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        region = labels[sl] == lab
        if region.sum() < params.min_area:
            continue
        boxes.append(_square(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop,
                             params.min_box, width, height, frame_index))
    return _merge_boxes(boxes, params, width, height, frame_index)


# -- resampling --------------------------------------------------------------

@lru_cache(maxsize=512)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix (half-pixel centres, edge
    clamped).  Identity when ``n_in == n_out``."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    m.setflags(write=False)
    return m


def resize(patches: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize the last two axes."""
    ry = _interp_matrix(patches.shape[-2], out_h)
    rx = _interp_matrix(patches.shape[-1], out_w)
    return np.einsum("ij,...jk,lk->...il", ry, patches, rx, optimize=True)


def temporal_window(center: int, length: int, depth: int) -> np.ndarray:
    """Frame indices of a centred window, edge frames repeated at the ends."""
    half = (depth - 1) // 2
    return np.clip(np.arange(center - half, center - half + depth), 0, length - 1)


# -- cubes -------------------------------------------------------------------

def build_stc(clip: VideoClip, box: BoundingBox, center_frame: int, depth: int = 5,
              size: int = 32) -> SpatioTemporalCube:
    if box.area <= 0:
        raise ConfigurationError(f"degenerate box {box}")
    idx = temporal_window(center_frame, len(clip), depth)
    patches = clip.frames[idx, box.y0:box.y1, box.x0:box.x1]
    data = resize(patches, size, size).astype(np.float32)
    np.clip(data, 0.0, 1.0, out=data)
    return SpatioTemporalCube(data, clip.id, center_frame, box)


def build_frame_cube(clip: VideoClip, center_frame: int, depth: int = 5,
                     size: int = 32) -> SpatioTemporalCube:
    h, w = clip.shape
    return build_stc(clip, BoundingBox(0, 0, w, h, center_frame), center_frame, depth, size)


def build_ofc(flow_maps: np.ndarray, box: BoundingBox, center_frame: int, depth: int = 5,
              size: int = 32, video_id: str = "") -> OpticalFlowCube:
    """``flow_maps`` is ``(T, 2, H, W)``; displacements are not rescaled."""
    if box.area <= 0:
        raise ConfigurationError(f"degenerate box {box}")
    idx = temporal_window(center_frame, len(flow_maps), depth)
    patches = flow_maps[idx, :, box.y0:box.y1, box.x0:box.x1]
    return OpticalFlowCube(resize(patches, size, size).astype(np.float32), video_id,
                           center_frame, box)


# -- optical flow ------------------------------------------------------------

@lru_cache(maxsize=16)
def _candidates(radius: int) -> list[tuple[int, int]]:
    """Displacements ordered by magnitude, then row-major (dy, dx)."""
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(cands, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def block_flow(frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Integer block displacements ``(2, rows, cols)`` from exhaustive SAD search."""
    params = params or FlowParams()
    if frame_a.shape != frame_b.shape:
        raise ConfigurationError(f"flow frames differ in shape: {frame_a.shape} vs {frame_b.shape}")
    blk, r = params.block, params.radius
    h, w = frame_a.shape
    rows, cols = h // blk, w // blk
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"frame {w}x{h} smaller than one {blk}px block")
    a = frame_a[:rows * blk, :cols * blk].astype(np.float64)
    b = np.pad(frame_b.astype(np.float64), r, mode="edge")
    cands = _candidates(r)
    costs = np.empty((len(cands), rows, cols))
    for k, (dy, dx) in enumerate(cands):
        shifted = b[r + dy:r + dy + rows * blk, r + dx:r + dx + cols * blk]
        costs[k] = np.abs(a - shifted).reshape(rows, blk, cols, blk).sum(axis=(1, 3))
    best = np.argmin(costs, axis=0)  # first minimum == preferred tie-break
    disp = np.array(cands)[best]  # (rows, cols, 2) as (dy, dx)
    return np.stack([disp[..., 1], disp[..., 0]]).astype(np.float64)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Dense flow ``(2, H, W)`` (horizontal, vertical) carrying ``frame_a``
    content onto ``frame_b``, bilinearly upsampled from block centres."""
    params = params or FlowParams()
    grid = block_flow(frame_a, frame_b, params)
    h, w = frame_a.shape
    blk = params.block
    ry = _centre_interp(grid.shape[1], h, blk)
    rx = _centre_interp(grid.shape[2], w, blk)
    return np.einsum("ij,cjk,lk->cil", ry, grid, rx).astype(np.float32)


@lru_cache(maxsize=64)
def _centre_interp(n_blocks: int, n_pixels: int, block: int) -> np.ndarray:
    pos = (np.arange(n_pixels) - (block - 1) / 2.0) / block
    pos = np.clip(pos, 0, n_blocks - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_blocks - 1)
    frac = pos - lo
    m = np.zeros((n_pixels, n_blocks))
    m[np.arange(n_pixels), lo] += 1 - frac
    m[np.arange(n_pixels), hi] += frac
    return m


def flow_maps(clip: VideoClip, params: FlowParams | None = None) -> np.ndarray:
    """Per-frame flow ``(T, 2, H, W)``; frame t holds the motion from t-1 to
    t, and frame 0 reuses frame 1's map."""
    n = len(clip)
    h, w = clip.shape
    out = np.zeros((n, 2, h, w), dtype=np.float32)
    for t in range(1, n):
        out[t] = estimate_flow(clip.frames[t - 1], clip.frames[t], params)
    if n > 1:
        out[0] = out[1]
    return out


# -- learning paradigms ------------------------------------------------------

def apply_paradigm(volume: np.ndarray, paradigm: str, seed: int = 0,
                   source: np.ndarray | None = None) -> ParadigmPair:
    """Build an (input, target) pair from a cube volume (slices on axis 0).

    REC reconstructs the cube, PRD sees the first D-1 slices (last slot
    zeroed) and is scored on the final slice, RR sees the slices reversed and
    SF a seeded shuffle.  ``source`` overrides the volume the input is
    derived from (motion models read the STC and target the OFC).
    """
    paradigm = paradigm.upper()
    if paradigm not in PARADIGMS:
        raise ConfigurationError(f"unknown paradigm {paradigm!r}; expected one of {PARADIGMS}")
    src = volume if source is None else source
    depth = src.shape[0]
    mask = np.ones(volume.shape[0], dtype=bool)
    if paradigm == "REC":
        inp = src.copy()
    elif paradigm == "PRD":
        if depth < 2:
            raise ConfigurationError("PRD needs at least two slices")
        inp = src.copy()
        inp[-1] = 0
        mask[:] = False
        mask[-1] = True
    elif paradigm == "RR":
        inp = src[::-1].copy()
    else:
        perm = np.random.default_rng(seed).permutation(depth)
        inp = src[perm].copy()
    return ParadigmPair(inp, volume.copy(), paradigm, mask)
