"""Trajectory and frame types shared by the simulator, pair sampler, and critic.

Serialization is newline-delimited JSON, one record per trajectory, with
rasters base64-encoded row-major as uint8 (the renderer emits values on the
1/255 grid, so the round trip is lossless).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np


@dataclass(frozen=True)
class Frame:
    """One observation frame: simulator state features plus a grayscale raster.

    ``truth_progress`` and ``truth_task`` carry simulator ground truth for the
    oracle critic backend; learned backends must not read them.
    """

    features: np.ndarray  # fixed-length float vector
    raster: np.ndarray  # H x W, values in [0, 1]
    timestamp_ms: int
    truth_progress: Optional[float] = None
    truth_task: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "raster", np.asarray(self.raster, dtype=np.float64))
        if self.raster.ndim != 2:
            raise ValueError("raster must be 2-D")


@dataclass
class Trajectory:
    frames: list[Frame]
    task_text: str
    source_id: str

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("trajectory needs at least 2 frames")
        ts = [f.timestamp_ms for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frames must be strictly time-ordered")
        shapes = {f.raster.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError("raster dimensions must be constant within a trajectory")

    def __len__(self) -> int:
        return len(self.frames)


def encode_raster(raster: np.ndarray) -> dict:
    h, w = raster.shape
    data = np.clip(np.rint(raster * 255.0), 0, 255).astype(np.uint8)
    return {"h": h, "w": w, "b64": base64.b64encode(data.tobytes()).decode("ascii")}


def decode_raster(obj: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(obj["b64"]), dtype=np.uint8)
    return raw.reshape(obj["h"], obj["w"]).astype(np.float64) / 255.0


def frame_to_json(frame: Frame) -> dict:
    rec = {
        "features": [float(x) for x in frame.features],
        "raster": encode_raster(frame.raster),
        "timestamp_ms": frame.timestamp_ms,
    }
    if frame.truth_progress is not None:
        rec["truth_progress"] = frame.truth_progress
    if frame.truth_task is not None:
        rec["truth_task"] = frame.truth_task
    return rec


def frame_from_json(rec: dict) -> Frame:
    return Frame(
        features=np.array(rec["features"], dtype=np.float64),
        raster=decode_raster(rec["raster"]),
        timestamp_ms=rec["timestamp_ms"],
        truth_progress=rec.get("truth_progress"),
        truth_task=rec.get("truth_task"),
    )


def save_trajectories(trajectories: Iterable[Trajectory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            rec = {
                "task_text": traj.task_text,
                "source_id": traj.source_id,
                "frames": [frame_to_json(f) for f in traj.frames],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_trajectories(path: str | Path) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                Trajectory(
                    frames=[frame_from_json(f) for f in rec["frames"]],
                    task_text=rec["task_text"],
                    source_id=rec["source_id"],
                )
            )
    return out


def load_trajectory_dir(path: str | Path) -> Iterator[Trajectory]:
    for file in sorted(Path(path).glob("*.ndjson")):
        yield from load_trajectories(file)
