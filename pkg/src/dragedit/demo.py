"""Self-contained synthetic example: a textured blob dragged across a clip.

Runs the whole flow on the toy backbone with no external models, at sizes
that finish on a laptop CPU in well under five minutes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import VideoFrames, save_frames
from .instruction import DragInstruction, KeyframeAnnotation
from .lora import LoRATrainConfig
from .drag import OptimizationConfig
from .pipeline import Project, RunConfig, RunResult, preprocess, propagate, run_full, set_instruction, train_lora_stage


def synthetic_blob_video(frames: int = 12, height: int = 64, width: int = 64, fps: float = 12.0,
                         start: tuple[float, float] = (20.0, 32.0), step: tuple[float, float] = (2.0, 0.0),
                         sigma: float = 5.0, bg: float = 60.0, peak: float = 210.0) -> VideoFrames:
    """A Gaussian blob translating over a flat background."""
    ys, xs = np.mgrid[0:height, 0:width]
    out = []
    for i in range(frames):
        cx, cy = start[0] + step[0] * i, start[1] + step[1] * i
        blob = np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2)))
        frame = bg + (peak - bg) * blob
        out.append(np.stack([frame] * 3, axis=-1))
    return VideoFrames(np.stack(out), fps=fps)


def demo_run_config(fast: bool = True, seed: int | None = None) -> RunConfig:
    """Paper-like defaults scaled down for the desk-scale backbone."""
    if fast:
        return RunConfig(
            opt=OptimizationConfig(max_steps=10),
            lora=LoRATrainConfig(epochs=10, batch_size=6, rank=8),
            seed=seed,
        )
    return RunConfig(seed=seed)


def build_demo_project(data_root: Path, project_id: str = "demo-synthetic", seed: int = 0,
                       kps: float = 6.0, drag_px: float = 8.0) -> Project:
    """Create a project with the synthetic clip, instruction, and propagation."""
    video = synthetic_blob_video()
    staging = Path(data_root) / "_demo_source"
    save_frames(video, staging)

    project = Project.create(data_root, project_id=project_id, seed=seed)
    processed = preprocess(project, staging, kps=kps, source_fps=video.fps)
    cfg = demo_run_config(seed=seed)
    train_lora_stage(project, cfg)

    stride = int(round(video.fps / kps))
    l = processed.length
    first_center = (20.0, 32.0)
    last_center = (20.0 + 2.0 * stride * (l - 1), 32.0)
    instruction = DragInstruction(
        frames=l,
        extension_radius=2,
        first=KeyframeAnnotation(pairs=[(first_center, (first_center[0] + drag_px, first_center[1]))]),
        last=KeyframeAnnotation(pairs=[(last_center, (last_center[0] + drag_px, last_center[1]))]),
    )
    set_instruction(project, instruction)
    propagate(project)
    return project


def run_demo(data_root: Path, fast: bool = True, seed: int = 0) -> RunResult:
    project = build_demo_project(data_root, seed=seed)
    return run_full(project, demo_run_config(fast=fast, seed=seed))
