"""Temporal-consistency scoring via mean optical-flow magnitude.

The score of a video is the mean, over consecutive frame pairs and pixels,
of the Euclidean norm of the per-pixel displacement; lower means less
jitter. Flow estimation is pluggable: a full-scale model client can
implement ``FlowEstimator``; two desk-scale estimators ship here (an
exhaustive global-shift matcher used as the test oracle, and block
matching).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .codec import VideoFrames
from .errors import MetricError

# Reference scores reported for the full-scale system (RAFT flow, real
# checkpoints); recorded for documentation and report-layout regression
# only — desk-scale runs are not gated on them.
FULL_SCALE_REFERENCE_SCORES = {
    "squeeze_bus": {"baseline": 0.71768, "dragvideo": 0.66328},
    "shorten_ears": {"baseline": 0.81162, "dragvideo": 0.47923},
    "show_forehead": {"baseline": 1.62124, "dragvideo": 1.61182},
    "shorten_hair": {"baseline": 0.13472, "dragvideo": 0.09027},
    "close_neckline": {"baseline": 0.1519, "dragvideo": 0.1458},
    "close_lion_mouth": {"baseline": 1.3626, "dragvideo": 1.2864},
    "squeeze_sofa": {"baseline": 0.2939, "dragvideo": 0.1392},
    "remove_sleeve": {"baseline": 2.5903, "dragvideo": 2.0229},
    "shorten_suv": {"baseline": 4.0517, "dragvideo": 2.1817},
    "lengthen_plant": {"baseline": 0.4911, "dragvideo": 0.4340},
    "move_sun": {"baseline": 0.4772, "dragvideo": 0.4266},
    "connect_island": {"baseline": 0.7861, "dragvideo": 0.7779},
    "generate_band": {"baseline": 0.2950, "dragvideo": 0.2218},
    "extend_cliff": {"baseline": 0.5270, "dragvideo": 0.5153},
}

REPORT_COLUMNS = ("sample", "baseline_score", "dragvideo_score")


@dataclass
class FlowField:
    """Per-pixel displacement between one frame pair."""

    dx: np.ndarray  # (h, w)
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise MetricError(f"flow components must share a 2-d shape, got {self.dx.shape} / {self.dy.shape}")
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise MetricError("flow field contains non-finite values")

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


class FlowEstimator(Protocol):
    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray) -> FlowField: ...


def _gray(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return frame.mean(axis=-1) if frame.ndim == 3 else frame


def _signed_shift(value: int, size: int) -> int:
    return value - size if value > size // 2 else value


class GlobalShiftFlow:
    """Exhaustive circular-shift matcher: the oracle for constructed shifts.

    Returns the constant field (dx, dy) minimizing the SSD between the
    first frame rolled by (dx, dy) and the second frame.
    """

    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray) -> FlowField:
        a, b = _gray(frame_a), _gray(frame_b)
        if a.shape != b.shape:
            raise MetricError(f"frames differ in size: {a.shape} vs {b.shape}")
        h, w = a.shape
        # zero shift seeds the search so SSD ties (flat content) resolve to no motion
        best = float(((a - b) ** 2).sum())
        best_shift = (0, 0)
        for dy in range(h):
            rolled_y = np.roll(a, dy, axis=0)
            for dx in range(w):
                ssd = float(((np.roll(rolled_y, dx, axis=1) - b) ** 2).sum())
                if ssd < best:
                    best, best_shift = ssd, (dx, dy)
        dx = _signed_shift(best_shift[0], w)
        dy = _signed_shift(best_shift[1], h)
        return FlowField(np.full((h, w), float(dx)), np.full((h, w), float(dy)))


class BlockMatchingFlow:
    """Exhaustive block matching (8x8 blocks, +-8 search), upsampled per pixel."""

    def __init__(self, block_size: int = 8, search_radius: int = 8):
        self.block_size = block_size
        self.search_radius = search_radius

    def estimate(self, frame_a: np.ndarray, frame_b: np.ndarray) -> FlowField:
        a, b = _gray(frame_a), _gray(frame_b)
        if a.shape != b.shape:
            raise MetricError(f"frames differ in size: {a.shape} vs {b.shape}")
        h, w = a.shape
        bs, sr = self.block_size, self.search_radius
        ny, nx = h // bs, w // bs
        flow_x = np.zeros((ny, nx))
        flow_y = np.zeros((ny, nx))
        for by in range(ny):
            for bx in range(nx):
                y0, x0 = by * bs, bx * bs
                block = a[y0 : y0 + bs, x0 : x0 + bs]
                # zero displacement seeds the search: flat blocks stay still
                best = float(((b[y0 : y0 + bs, x0 : x0 + bs] - block) ** 2).sum())
                best_d = (0, 0)
                for dy in range(-sr, sr + 1):
                    yy = y0 + dy
                    if yy < 0 or yy + bs > h:
                        continue
                    for dx in range(-sr, sr + 1):
                        xx = x0 + dx
                        if xx < 0 or xx + bs > w:
                            continue
                        ssd = float(((b[yy : yy + bs, xx : xx + bs] - block) ** 2).sum())
                        if ssd < best:
                            best, best_d = ssd, (dx, dy)
                flow_x[by, bx], flow_y[by, bx] = best_d
        up_x = np.kron(flow_x, np.ones((bs, bs)))
        up_y = np.kron(flow_y, np.ones((bs, bs)))
        # pad any remainder rows/cols with the nearest block's flow
        full_x = np.zeros((h, w))
        full_y = np.zeros((h, w))
        full_x[: up_x.shape[0], : up_x.shape[1]] = up_x
        full_y[: up_y.shape[0], : up_y.shape[1]] = up_y
        return FlowField(full_x, full_y)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, estimator: FlowEstimator) -> FlowField:
    try:
        return estimator.estimate(frame_a, frame_b)
    except MetricError:
        raise
    except Exception as exc:
        raise MetricError(f"flow estimator failed: {exc}") from exc


def consistency_score(video: VideoFrames, estimator: FlowEstimator) -> float:
    """Mean per-pixel flow magnitude over all consecutive frame pairs."""
    l = video.length
    if l < 2:
        raise ValueError(f"consistency score needs at least 2 frames, got {l}")
    h, w = video.size
    total = 0.0
    for i in range(l - 1):
        field = estimate_flow(video.frames[i], video.frames[i + 1], estimator)
        total += float(field.magnitude.sum())
    return total / ((l - 1) * h * w)


def write_report(rows: list[dict], csv_path: Path, json_path: Path | None = None) -> None:
    """Emit the comparison report: one row per sample, baseline vs edited score."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in REPORT_COLUMNS})
    if json_path is not None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(rows, indent=1))
