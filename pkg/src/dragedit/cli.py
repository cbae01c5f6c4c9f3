"""Command-line interface.

Subcommands: preprocess, train-lora, propagate, drag, score, demo-synthetic,
serve. Exit codes: 0 on success, 1 with the failing stage named on engine
errors, 2 on usage errors (argparse).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .codec import DEFAULT_FPS, load_frames
from .demo import demo_run_config, run_demo
from .drag import OptimizationConfig
from .errors import DragEditError, StageError
from .lora import LoRATrainConfig
from .metrics import BlockMatchingFlow, consistency_score, write_report
from .msa import MsaPlan
from .pipeline import MODE_PER_FRAME, MODE_VIDEO, Project, RunConfig, preprocess, propagate, run_full, set_instruction, train_lora_stage


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=[MODE_VIDEO, MODE_PER_FRAME], default=MODE_VIDEO)
    parser.add_argument("--no-lora", action="store_true", help="ablation: run with zero-delta weights")
    parser.add_argument("--no-msa", action="store_true", help="ablation: denoise the edited branch plainly")
    parser.add_argument("--inversion-steps", type=int, default=50)
    parser.add_argument("--eta", type=float, default=0.01)
    parser.add_argument("--lambda", dest="lam", type=float, default=0.1)
    parser.add_argument("--max-steps", type=int, default=40)
    parser.add_argument("--r", type=int, default=1)
    parser.add_argument("--r-prime", type=int, default=3)
    parser.add_argument("--t-opt", type=int, default=40)
    parser.add_argument("--stop-epsilon", type=float, default=1.0)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch-size", type=int, default=12)
    parser.add_argument("--learning-rate", type=float, default=5e-4)
    parser.add_argument("--rank", type=int, default=16)
    parser.add_argument("--seed", type=int, default=None)


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        opt=OptimizationConfig(eta=args.eta, lam=args.lam, max_steps=args.max_steps, r=args.r,
                               r_prime=args.r_prime, t_opt=args.t_opt, stop_epsilon=args.stop_epsilon),
        lora=LoRATrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                             learning_rate=args.learning_rate, rank=args.rank),
        msa=MsaPlan(),
        lora_enabled=not args.no_lora,
        msa_enabled=not args.no_msa,
        mode=args.mode,
        inversion_steps=args.inversion_steps,
        seed=args.seed,
    )


def _load_video_for_score(path: Path):
    path = Path(path)
    if path.is_dir():
        return load_frames(path, fps=DEFAULT_FPS)
    from .pipeline import _read_source

    return _read_source(path, None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dragedit", description="Drag-style video editing engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="resample/resize a video and encode its latent")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--project", default=None, help="project id (created if absent)")
    p.add_argument("--video", type=Path, required=True)
    p.add_argument("--kps", type=float, required=True, help="kept frames per second")
    p.add_argument("--source-fps", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-lora", help="fit sample-specific adapter weights")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--project", required=True)
    _add_run_flags(p)

    p = sub.add_parser("propagate", help="set the drag instruction and propagate it")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--project", required=True)
    p.add_argument("--instruction", type=Path, required=True, help="instruction JSON file")
    p.add_argument("--keyframe-blend", action="store_true")

    p = sub.add_parser("drag", help="run the full editing flow")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--project", required=True)
    _add_run_flags(p)

    p = sub.add_parser("score", help="temporal-consistency report for edited outputs")
    p.add_argument("--baseline", type=Path, default=None, help="per-frame baseline output video")
    p.add_argument("--edited", type=Path, default=None, help="video-mode output video")
    p.add_argument("--sample", default="sample")
    p.add_argument("--out", type=Path, default=Path("report.csv"))

    p = sub.add_parser("demo-synthetic", help="build and run the synthetic end-to-end example")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--full", action="store_true", help="use unscaled defaults (slower)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="start the HTTP job service")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--workers", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "preprocess":
            if args.project:
                try:
                    project = Project.load(args.data_root, args.project)
                except DragEditError:
                    project = Project.create(args.data_root, project_id=args.project, seed=args.seed)
            else:
                project = Project.create(args.data_root, seed=args.seed)
            video = preprocess(project, args.video, args.kps, source_fps=args.source_fps)
            print(f"project {project.id}: {video.length} frames at {video.fps} fps, size {video.size}")

        elif args.command == "train-lora":
            project = Project.load(args.data_root, args.project)
            info = train_lora_stage(project, _run_config(args))
            trace = info.get("trace") or []
            suffix = f", loss {trace[0]:.5f} -> {trace[-1]:.5f}" if trace else " (zero-delta)"
            print(f"project {project.id}: adapter stage done{suffix}")

        elif args.command == "propagate":
            project = Project.load(args.data_root, args.project)
            instruction = json.loads(args.instruction.read_text())
            set_instruction(project, instruction)
            prop = propagate(project, keyframe_blend=args.keyframe_blend)
            print(f"project {project.id}: propagated {prop.point_count} pair(s) over {prop.frame_count} frames")

        elif args.command == "drag":
            project = Project.load(args.data_root, args.project)
            result = run_full(project, _run_config(args))
            print(f"project {project.id}: mode={result.mode} score={result.score:.5f} -> {result.result_dir}")

        elif args.command == "score":
            if args.baseline is None and args.edited is None:
                parser.error("score needs --baseline and/or --edited")
            estimator = BlockMatchingFlow()
            row = {"sample": args.sample, "baseline_score": None, "dragvideo_score": None}
            if args.baseline is not None:
                row["baseline_score"] = consistency_score(_load_video_for_score(args.baseline), estimator)
            if args.edited is not None:
                row["dragvideo_score"] = consistency_score(_load_video_for_score(args.edited), estimator)
            write_report([row], args.out, args.out.with_suffix(".json"))
            print(args.out.read_text().strip())

        elif args.command == "demo-synthetic":
            started = time.time()
            result = run_demo(args.data_root, fast=not args.full, seed=args.seed)
            elapsed = time.time() - started
            print(f"demo-synthetic: mode={result.mode} score={result.score:.5f} "
                  f"({result.edited.length} frames) in {elapsed:.1f}s -> {result.result_dir}")

        elif args.command == "serve":
            from .service import serve

            serve(args.data_root, host=args.host, port=args.port, workers=args.workers)

        return 0
    except StageError as exc:
        print(f"error in stage '{exc.stage}': {exc}", file=sys.stderr)
        return 1
    except DragEditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
