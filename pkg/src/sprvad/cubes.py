"""Cube extraction over whole datasets and the on-disk cube cache."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, IngestionError
from .ingest import (BoundingBox, FlowParams, LocalizeParams, VideoClip, build_frame_cube,
                     build_ofc, build_stc, flow_maps, localize_foreground, worker_threads)

CUBE_MAGIC = b"SPRCUBE1"


@dataclass
class CubeSet:
    """Cubes of one dataset with their provenance, as parallel arrays."""

    video_ids: np.ndarray  # (N,) str
    frames: np.ndarray  # (N,) int
    boxes: np.ndarray  # (N, 4) x0, y0, x1, y1
    stc: np.ndarray  # (N, D, S, S) float32
    ofc: np.ndarray | None = None  # (N, D, 2, S, S) float32
    n_frames: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def depth(self) -> int:
        return self.stc.shape[1]

    def subset(self, idx) -> "CubeSet":
        return CubeSet(self.video_ids[idx], self.frames[idx], self.boxes[idx], self.stc[idx],
                       None if self.ofc is None else self.ofc[idx], dict(self.n_frames))

    @staticmethod
    def concat(sets: list["CubeSet"]) -> "CubeSet":
        has_flow = all(s.ofc is not None for s in sets)
        n_frames: dict[str, int] = {}
        for s in sets:
            for vid, n in s.n_frames.items():
                if vid in n_frames:
                    raise ConfigurationError(f"video id {vid!r} appears in more than one dataset")
                n_frames[vid] = n
        return CubeSet(
            np.concatenate([s.video_ids for s in sets]),
            np.concatenate([s.frames for s in sets]),
            np.concatenate([s.boxes for s in sets]),
            np.concatenate([s.stc for s in sets]),
            np.concatenate([s.ofc for s in sets]) if has_flow else None,
            n_frames,
        )


def _extract_clip(clip: VideoClip, frame_based, with_flow, loc, flow, depth, size):
    stcs, ofcs, frames, boxes = [], [], [], []
    maps = flow_maps(clip, flow) if with_flow else None
    for t in range(len(clip)):
        if frame_based:
            h, w = clip.shape
            found = [BoundingBox(0, 0, w, h, t)]
        else:
            found = localize_foreground(clip, t, loc)
        for box in found:
            cube = build_frame_cube(clip, t, depth, size) if frame_based else build_stc(clip, box, t, depth, size)
            stcs.append(cube.data)
            if maps is not None:
                ofcs.append(build_ofc(maps, box, t, depth, size, clip.id).data)
            frames.append(t)
            boxes.append((box.x0, box.y0, box.x1, box.y1))
    return stcs, ofcs, frames, boxes


def extract(clips: list[VideoClip], frame_based: bool = False, with_flow: bool = False,
            loc: LocalizeParams | None = None, flow: FlowParams | None = None,
            depth: int = 5, size: int = 32) -> CubeSet:
    """Localize objects on every frame and build their STCs (and OFCs).

    ``frame_based`` skips localization and builds one whole-frame cube per
    frame.  Videos are processed on up to ``SPR_THREADS`` threads.
    """
    loc = loc or LocalizeParams()
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        results = list(pool.map(
            lambda c: _extract_clip(c, frame_based, with_flow, loc, flow, depth, size), clips))
    vids, stc, ofc, frames, boxes = [], [], [], [], []
    for clip, (s, o, f, b) in zip(clips, results):
        vids += [clip.id] * len(f)
        stc += s
        ofc += o
        frames += f
        boxes += b
    empty = np.zeros((0, depth, size, size), np.float32)
    return CubeSet(
        np.array(vids, dtype=object),
        np.array(frames, dtype=np.int64),
        np.array(boxes, dtype=np.int64).reshape(-1, 4),
        np.stack(stc).astype(np.float32) if stc else empty,
        (np.stack(ofc).astype(np.float32) if ofc else np.zeros((0, depth, 2, size, size), np.float32))
        if with_flow else None,
        {clip.id: len(clip) for clip in clips},
    )


def cube_labels(cubes: CubeSet, objects, min_cover: float = 0.5) -> np.ndarray:
    """1 for cubes whose box covers at least ``min_cover`` of an anomaly
    object in the cube's centre frame (synthetic ground truth)."""
    out = np.zeros(len(cubes), dtype=np.int64)
    for i, (vid, t, (x0, y0, x1, y1)) in enumerate(zip(cubes.video_ids, cubes.frames, cubes.boxes)):
        for ox0, oy0, ox1, oy1, kind in objects.get((vid, int(t)), ()):
            if kind != "anomaly":
                continue
            inter = max(0, min(x1, ox1) - max(x0, ox0)) * max(0, min(y1, oy1) - max(y0, oy0))
            if inter >= min_cover * (ox1 - ox0) * (oy1 - oy0):
                out[i] = 1
                break
    return out


# -- container ---------------------------------------------------------------

def write_cubes(path, cubes: CubeSet) -> None:
    """Header (magic, count, depth, size, flow flag), per-cube provenance and
    little-endian float32 data, then a trailer of per-video frame counts."""
    n, depth, size = len(cubes), cubes.stc.shape[1], cubes.stc.shape[2]
    has_flow = cubes.ofc is not None
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<4I", n, depth, size, int(has_flow)))
        for i in range(n):
            vid = str(cubes.video_ids[i]).encode()
            fh.write(struct.pack("<H", len(vid)) + vid)
            fh.write(struct.pack("<5i", int(cubes.frames[i]), *(int(v) for v in cubes.boxes[i])))
            fh.write(np.ascontiguousarray(cubes.stc[i], dtype="<f4").tobytes())
            if has_flow:
                fh.write(np.ascontiguousarray(cubes.ofc[i], dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(cubes.n_frames)))
        for vid, count in cubes.n_frames.items():
            enc = vid.encode()
            fh.write(struct.pack("<H", len(enc)) + enc + struct.pack("<I", count))


def read_cubes(path) -> CubeSet:
    try:
        return _read_cubes(path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: truncated or corrupt cube container ({exc})") from None


def _read_cubes(path) -> CubeSet:
    with open(path, "rb") as fh:
        if fh.read(8) != CUBE_MAGIC:
            raise IngestionError(f"{path}: not a cube container (bad magic)")
        n, depth, size, has_flow = struct.unpack("<4I", fh.read(16))
        vids, frames, boxes = [], np.empty(n, np.int64), np.empty((n, 4), np.int64)
        stc = np.empty((n, depth, size, size), np.float32)
        ofc = np.empty((n, depth, 2, size, size), np.float32) if has_flow else None
        stc_bytes, ofc_bytes = 4 * depth * size * size, 8 * depth * size * size
        for i in range(n):
            (ln,) = struct.unpack("<H", fh.read(2))
            vids.append(fh.read(ln).decode())
            frame, *box = struct.unpack("<5i", fh.read(20))
            frames[i], boxes[i] = frame, box
            stc[i] = np.frombuffer(fh.read(stc_bytes), "<f4").reshape(depth, size, size)
            if has_flow:
                ofc[i] = np.frombuffer(fh.read(ofc_bytes), "<f4").reshape(depth, 2, size, size)
        n_frames = {}
        (nv,) = struct.unpack("<I", fh.read(4))
        for _ in range(nv):
            (ln,) = struct.unpack("<H", fh.read(2))
            vid = fh.read(ln).decode()
            (n_frames[vid],) = struct.unpack("<I", fh.read(4))
    return CubeSet(np.array(vids, dtype=object), frames, boxes, stc, ofc, n_frames)
