"""Project lifecycle and end-to-end orchestration.

A project is a directory: frames/, latents/, lora/, trajectory/,
instruction.json, propagated/, audit.jsonl, result/, report.csv, state.json.
Stages are cached by chained content hashes (each stage's key folds in its
inputs' keys), so any config change invalidates exactly its downstream
stages and a killed run resumes from the last completed stage. Every stage
reads its inputs back from the persisted artifacts, which makes resumed and
uninterrupted runs bit-identical.

All randomness derives from a single project seed.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
import uuid
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .codec import (
    DEFAULT_FPS,
    LatentVideo,
    ToyCodec,
    VideoFrames,
    load_frames,
    load_latent,
    save_frames,
    save_latent,
)
from .ddim import DdimSampler, InversionTrajectory, NoiseSchedule
from .drag import Dove, OptimizationConfig, write_audit_jsonl
from .errors import ConfigError, DragEditError, InstructionError, StageError
from .instruction import (
    CorrelationPointTracker,
    DragInstruction,
    FloodFillMaskTracker,
    FloodFillSegmenter,
    MaskVideo,
    PropagatedInstruction,
    propagate_instruction,
)
from .lora import LoRATrainConfig, LoRAWeights, inject, train_lora
from .metrics import BlockMatchingFlow, consistency_score, write_report
from .msa import MsaDenoiser, MsaPlan
from .unet import BackboneConfig, ToyVideoUNet, VideoBackbone
from .utils import derive_seed, stable_hash

STATUS_ORDER = ("created", "preprocessed", "lora_trained", "instructed", "propagated", "dragging", "done")

MODE_VIDEO = "video"
MODE_PER_FRAME = "per_frame_baseline"


@dataclass
class RunConfig:
    opt: OptimizationConfig = field(default_factory=OptimizationConfig)
    lora: LoRATrainConfig = field(default_factory=LoRATrainConfig)
    msa: MsaPlan = field(default_factory=MsaPlan)
    lora_enabled: bool = True
    msa_enabled: bool = True
    mode: str = MODE_VIDEO
    inversion_steps: int = 50
    seed: int | None = None  # None: use the project seed

    def __post_init__(self):
        if self.mode not in (MODE_VIDEO, MODE_PER_FRAME):
            raise ConfigError(f"unknown run mode {self.mode!r}")
        if self.opt.t_opt > self.inversion_steps:
            raise ConfigError(
                f"t_opt {self.opt.t_opt} exceeds inversion steps {self.inversion_steps}"
            )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "lora_enabled": self.lora_enabled,
            "msa_enabled": self.msa_enabled,
            "inversion_steps": self.inversion_steps,
            "seed": self.seed,
            "optimization": self.opt.to_dict(),
            "lora": self.lora.to_dict(),
            "msa": self.msa.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            opt=OptimizationConfig.from_dict(d.get("optimization", {})),
            lora=LoRATrainConfig.from_dict(d.get("lora", {})),
            msa=MsaPlan.from_dict(d.get("msa", {})),
            lora_enabled=d.get("lora_enabled", True),
            msa_enabled=d.get("msa_enabled", True),
            mode=d.get("mode", MODE_VIDEO),
            inversion_steps=d.get("inversion_steps", 50),
            seed=d.get("seed"),
        )

    def hash(self) -> str:
        return stable_hash(self.to_dict())


class Project:
    """On-disk project state with an ordered status machine."""

    def __init__(self, root: Path, state: dict):
        self.root = Path(root)
        self.state = state

    # -- paths ---------------------------------------------------------
    @property
    def frames_dir(self) -> Path:
        return self.root / "frames"

    @property
    def upload_dir(self) -> Path:
        return self.root / "upload"

    @property
    def latent_prefix(self) -> Path:
        return self.root / "latents" / "z0"

    @property
    def lora_prefix(self) -> Path:
        return self.root / "lora" / "lora"

    @property
    def trajectory_dir(self) -> Path:
        return self.root / "trajectory"

    @property
    def instruction_path(self) -> Path:
        return self.root / "instruction.json"

    @property
    def propagated_dir(self) -> Path:
        return self.root / "propagated"

    @property
    def result_dir(self) -> Path:
        return self.root / "result"

    @property
    def audit_path(self) -> Path:
        return self.root / "audit.jsonl"

    @property
    def report_csv(self) -> Path:
        return self.root / "report.csv"

    @property
    def state_path(self) -> Path:
        return self.root / "state.json"

    # -- lifecycle -----------------------------------------------------
    @classmethod
    def create(cls, data_root: Path, project_id: str | None = None, seed: int = 0) -> "Project":
        project_id = project_id or uuid.uuid4().hex[:12]
        root = Path(data_root) / project_id
        root.mkdir(parents=True, exist_ok=True)
        state = {"id": project_id, "status": "created", "seed": seed, "created_at": time.time()}
        project = cls(root, state)
        project.save_state()
        return project

    @classmethod
    def load(cls, data_root: Path, project_id: str) -> "Project":
        root = Path(data_root) / project_id
        state_path = root / "state.json"
        if not state_path.exists():
            raise ConfigError(f"no project {project_id!r} under {data_root}")
        return cls(root, json.loads(state_path.read_text()))

    def save_state(self) -> None:
        self.state_path.write_text(json.dumps(self.state, indent=1, sort_keys=True))

    @property
    def id(self) -> str:
        return self.state["id"]

    @property
    def seed(self) -> int:
        return int(self.state.get("seed", 0))

    @property
    def status(self) -> str:
        return self.state["status"]

    def status_rank(self) -> int:
        status = self.status
        return STATUS_ORDER.index(status) if status in STATUS_ORDER else -1

    def require_status(self, minimum: str, stage: str) -> None:
        if self.status_rank() < STATUS_ORDER.index(minimum):
            raise StageError(stage, f"requires project status >= {minimum!r}, currently {self.status!r}")

    def set_status(self, status: str) -> None:
        if status not in STATUS_ORDER and status != "failed":
            raise ConfigError(f"unknown status {status!r}")
        self.state["status"] = status
        self.save_state()


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------
def _read_source(source: Path, fps_hint: float | None) -> VideoFrames:
    source = Path(source)
    if source.is_dir():
        return load_frames(source, fps=fps_hint or DEFAULT_FPS)
    suffix = source.suffix.lower()
    if suffix in (".npz", ".npy"):
        payload = np.load(source, allow_pickle=False)
        if isinstance(payload, np.lib.npyio.NpzFile):
            frames = payload["frames"]
            fps = float(payload["fps"]) if "fps" in payload else (fps_hint or DEFAULT_FPS)
        else:
            frames, fps = payload, fps_hint or DEFAULT_FPS
        return VideoFrames(frames.astype(np.float64), fps=fps)
    if suffix in (".mp4", ".avi", ".mov", ".mkv", ".webm"):
        import cv2

        capture = cv2.VideoCapture(str(source))
        if not capture.isOpened():
            raise StageError("preprocess", f"cannot open video file {source}")
        fps = capture.get(cv2.CAP_PROP_FPS) or (fps_hint or DEFAULT_FPS)
        frames = []
        while True:
            ok, frame = capture.read()
            if not ok:
                break
            frames.append(frame[:, :, ::-1].astype(np.float64))  # BGR -> RGB
        capture.release()
        if not frames:
            raise StageError("preprocess", f"video file {source} contains no frames")
        return VideoFrames(np.stack(frames), fps=float(fps))
    raise StageError("preprocess", f"unsupported video source {source}")


def _resize_to_divisible(video: VideoFrames, factor: int, size: tuple[int, int] | None) -> VideoFrames:
    h, w = video.size
    if size is not None:
        th, tw = size
    else:
        th, tw = (h // factor) * factor, (w // factor) * factor
    if th < factor or tw < factor:
        raise StageError("preprocess", f"video too small to resize to a multiple of {factor}")
    if th % factor or tw % factor:
        raise StageError("preprocess", f"requested size ({th}, {tw}) not divisible by {factor}")
    if (th, tw) == (h, w):
        return video
    resized = np.stack([
        np.asarray(Image.fromarray(frame).resize((tw, th), Image.BILINEAR), dtype=np.float64)
        for frame in video.as_uint8()
    ])
    return VideoFrames(resized, fps=video.fps)


def video_content_hash(video: VideoFrames) -> str:
    digest = hashlib.sha256(video.as_uint8().tobytes())
    digest.update(f"{video.fps}".encode())
    return digest.hexdigest()


def preprocess(project: Project, source: Path, kps: float, size: tuple[int, int] | None = None,
               source_fps: float | None = None, codec=None) -> VideoFrames:
    """Resample to `kps` frames per second, resize to a codec-divisible
    resolution, persist frames and the encoded latent."""
    codec = codec or ToyCodec()
    video = _read_source(source, source_fps)
    if kps <= 0:
        raise StageError("preprocess", f"kps must be positive, got {kps}")
    if kps > video.fps:
        raise StageError("preprocess", f"kps {kps} exceeds source fps {video.fps}")
    stride = int(round(video.fps / kps))
    frames = video.frames[::stride]
    if frames.shape[0] < 2:
        raise StageError("preprocess", f"resampling to {kps} kps leaves {frames.shape[0]} frame(s); need >= 2")
    resampled = VideoFrames(frames, fps=video.fps / stride)
    resampled = _resize_to_divisible(resampled, codec.spatial_factor, size)

    if project.frames_dir.exists():
        shutil.rmtree(project.frames_dir)
    save_frames(resampled, project.frames_dir)
    save_latent(codec.encode(resampled), project.latent_prefix)
    project.state.update({
        "kps": kps,
        "fps": resampled.fps,
        "frame_count": resampled.length,
        "size": list(resampled.size),
        "video_hash": video_content_hash(resampled),
    })
    project.set_status("preprocessed")
    return resampled


# ---------------------------------------------------------------------------
# instruction / propagation
# ---------------------------------------------------------------------------
def set_instruction(project: Project, instruction: dict | DragInstruction) -> DragInstruction:
    project.require_status("lora_trained", "instruction")
    instr = instruction if isinstance(instruction, DragInstruction) else DragInstruction.from_dict(instruction)
    if instr.frames != project.state.get("frame_count"):
        raise InstructionError(
            f"instruction covers {instr.frames} frames, project has {project.state.get('frame_count')}"
        )
    h, w = project.state["size"]
    instr.validate_bounds(h, w)
    project.instruction_path.write_text(json.dumps(instr.to_dict(), indent=1))
    project.state["instruction_hash"] = stable_hash(instr.to_dict())
    project.set_status("instructed")
    return instr


def default_trackers():
    """Desk-scale oracles, or remote clients when endpoint env vars are set."""
    tracker_url = os.environ.get("DRAGEDIT_TRACKER_URL")
    segmenter_url = os.environ.get("DRAGEDIT_SEGMENTER_URL")
    mask_url = os.environ.get("DRAGEDIT_MASK_TRACKER_URL")
    if tracker_url or segmenter_url or mask_url:
        from . import remote

        point_tracker = remote.RemotePointTracker(tracker_url) if tracker_url else CorrelationPointTracker()
        segmenter = remote.RemoteSegmenter(segmenter_url) if segmenter_url else FloodFillSegmenter()
        mask_tracker = remote.RemoteMaskTracker(mask_url) if mask_url else FloodFillMaskTracker()
        return point_tracker, segmenter, mask_tracker
    segmenter = FloodFillSegmenter()
    return CorrelationPointTracker(), segmenter, FloodFillMaskTracker(segmenter)


def render_overlay(frame: np.ndarray, handles: np.ndarray, targets: np.ndarray,
                   mask: np.ndarray) -> np.ndarray:
    """Burn propagated points and mask into a frame (server-side preview)."""
    image = Image.fromarray(np.clip(np.rint(frame), 0, 255).astype(np.uint8))
    tint = np.zeros((*mask.shape, 4), dtype=np.uint8)
    tint[mask] = (0, 255, 0, 80)
    image = Image.alpha_composite(image.convert("RGBA"), Image.fromarray(tint)).convert("RGB")
    draw = ImageDraw.Draw(image)
    for (hx, hy), (tx, ty) in zip(handles, targets):
        draw.line([(hx, hy), (tx, ty)], fill=(255, 255, 0), width=1)
        draw.ellipse([hx - 2, hy - 2, hx + 2, hy + 2], outline=(255, 0, 0), width=1)
        draw.line([(tx - 2, ty), (tx + 2, ty)], fill=(0, 0, 255), width=1)
        draw.line([(tx, ty - 2), (tx, ty + 2)], fill=(0, 0, 255), width=1)
    return np.asarray(image)


def propagate(project: Project, keyframe_blend: bool = False) -> PropagatedInstruction:
    project.require_status("instructed", "propagate")
    instr = DragInstruction.from_dict(json.loads(project.instruction_path.read_text()))
    video = load_frames(project.frames_dir, fps=project.state.get("fps", DEFAULT_FPS))
    point_tracker, segmenter, mask_tracker = default_trackers()
    codec_factor = ToyCodec().spatial_factor
    prop = propagate_instruction(video, instr, codec_factor, point_tracker=point_tracker,
                                 segmenter=segmenter, mask_tracker=mask_tracker,
                                 keyframe_blend=keyframe_blend)
    out = project.propagated_dir
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    np.save(out / "handles.npy", prop.handles)
    np.save(out / "targets.npy", prop.targets)
    np.save(out / "mask_pixel.npy", prop.mask.pixel)
    np.save(out / "mask_latent.npy", prop.mask.latent)
    (out / "points.json").write_text(json.dumps({
        "handles": prop.handles.tolist(),
        "targets": prop.targets.tolist(),
    }))
    for i in range(video.length):
        overlay = render_overlay(video.frames[i], prop.handles[i], prop.targets[i], prop.mask.pixel[i])
        Image.fromarray(overlay).save(out / f"preview_{i:05d}.png")
    project.state["propagated_hash"] = stable_hash({
        "instruction": project.state.get("instruction_hash"),
        "video": project.state.get("video_hash"),
        "keyframe_blend": keyframe_blend,
    })
    project.set_status("propagated")
    return prop


def load_propagated(project: Project) -> PropagatedInstruction:
    out = project.propagated_dir
    return PropagatedInstruction(
        np.load(out / "handles.npy"),
        np.load(out / "targets.npy"),
        MaskVideo(np.load(out / "mask_pixel.npy"), np.load(out / "mask_latent.npy")),
    )


# ---------------------------------------------------------------------------
# staged execution
# ---------------------------------------------------------------------------
def _stage_fresh(meta_path: Path, key: str) -> bool:
    if not meta_path.exists():
        return True
    try:
        return json.loads(meta_path.read_text()).get("key") != key
    except json.JSONDecodeError:
        return True


def _mark_stage(meta_path: Path, key: str, extra: dict | None = None) -> None:
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps({"key": key, **(extra or {})}))


@dataclass
class RunResult:
    edited: VideoFrames
    reconstruction: VideoFrames
    score: float
    mode: str
    stage_keys: dict
    result_dir: Path


class Engine:
    """Executes the drag flow for one project and one run configuration."""

    def __init__(self, project: Project, cfg: RunConfig, backbone: VideoBackbone | None = None,
                 codec=None):
        self.project = project
        self.cfg = cfg
        self.codec = codec or ToyCodec()
        self.seed = cfg.seed if cfg.seed is not None else project.seed
        self.backbone = backbone or ToyVideoUNet(
            BackboneConfig(seed=derive_seed(self.seed, "backbone"))
        )
        self.schedule = NoiseSchedule.linear_signal(cfg.inversion_steps)
        self.sampler = DdimSampler(self.backbone, self.schedule)
        self.backbone_hash = (
            self.backbone.config.hash() if isinstance(self.backbone, ToyVideoUNet) else "external"
        )

    # -- stage keys ------------------------------------------------------
    def _lora_key(self) -> str:
        return stable_hash({
            "video": self.project.state.get("video_hash"),
            "backbone": self.backbone_hash,
            "cfg": self.cfg.lora.to_dict(),
            "enabled": self.cfg.lora_enabled,
            "seed": self.seed,
        })

    def _traj_key(self, lora_key: str, scope: str) -> str:
        return stable_hash({"lora": lora_key, "steps": self.cfg.inversion_steps, "scope": scope})

    def _drag_key(self, traj_key: str) -> str:
        return stable_hash({
            "trajectory": traj_key,
            "propagated": self.project.state.get("propagated_hash"),
            "opt": self.cfg.opt.to_dict(),
        })

    def _result_key(self, drag_key: str) -> str:
        return stable_hash({
            "drag": drag_key,
            "msa": self.cfg.msa.to_dict(),
            "msa_enabled": self.cfg.msa_enabled,
            "mode": self.cfg.mode,
        })

    # -- stages ----------------------------------------------------------
    def stage_lora(self, z0: LatentVideo, prefix: Path, lora_seed: int) -> tuple[LoRAWeights, str]:
        key = self._lora_key()
        meta = prefix.parent / "stage.json"
        if _stage_fresh(meta, key):
            if self.cfg.lora_enabled:
                train_cfg = replace(self.cfg.lora, seed=lora_seed)
                weights, trace = train_lora(self.backbone, z0, self.schedule, train_cfg)
            else:
                weights, trace = inject(self.backbone, self.cfg.lora.rank, seed=lora_seed), []
            weights.save(prefix, config_hash=key)
            _mark_stage(meta, key, {"trace": trace, "enabled": self.cfg.lora_enabled})
        return LoRAWeights.load(prefix), key

    def stage_invert(self, z0: LatentVideo, lora: LoRAWeights, directory: Path,
                     lora_key: str, scope: str) -> tuple[InversionTrajectory, str]:
        key = self._traj_key(lora_key, scope)
        meta = directory / "stage.json"
        if _stage_fresh(meta, key):
            if directory.exists():
                shutil.rmtree(directory)
            trajectory = self.sampler.invert(z0, n_steps=self.cfg.inversion_steps,
                                             lora=lora if self.cfg.lora_enabled else None)
            for t, latent in trajectory.latents.items():
                save_latent(latent, directory / f"step_{t:04d}")
            _mark_stage(meta, key, {"steps": sorted(trajectory.latents)})
        steps = json.loads(meta.read_text())["steps"]
        latents = {t: load_latent(directory / f"step_{t:04d}") for t in steps}
        return InversionTrajectory(latents), key

    def stage_drag(self, trajectory: InversionTrajectory, prop: PropagatedInstruction,
                   lora: LoRAWeights, directory: Path, traj_key: str) -> tuple[LatentVideo, list, str]:
        key = self._drag_key(traj_key)
        meta = directory / "stage.json"
        if _stage_fresh(meta, key):
            directory.mkdir(parents=True, exist_ok=True)
            dove = Dove(self.backbone, self.sampler)
            result = dove.run_drag(trajectory, prop, self.cfg.opt,
                                   lora=lora if self.cfg.lora_enabled else None)
            save_latent(result.latent, directory / "edited")
            write_audit_jsonl(result.audit, directory / "audit.jsonl")
            _mark_stage(meta, key, {"iterations": result.iterations, "converged": result.converged})
        audit = [json.loads(line) for line in (directory / "audit.jsonl").read_text().splitlines() if line]
        return load_latent(directory / "edited"), audit, key

    def stage_denoise(self, trajectory: InversionTrajectory, edited: LatentVideo,
                      lora: LoRAWeights, directory: Path, drag_key: str) -> tuple[LatentVideo, LatentVideo, str]:
        key = self._result_key(drag_key)
        meta = directory / "stage.json"
        if _stage_fresh(meta, key):
            directory.mkdir(parents=True, exist_ok=True)
            z_t = trajectory[self.cfg.opt.t_opt]
            lora_arg = lora if self.cfg.lora_enabled else None
            denoiser = MsaDenoiser(self.backbone, self.sampler)
            if self.cfg.msa_enabled:
                pair = denoiser.denoise_pair(z_t, edited, self.cfg.opt.t_opt, plan=self.cfg.msa,
                                             lora=lora_arg)
                original, final = pair.original_latent, pair.edited_latent
            else:
                original = self.sampler.denoise(z_t, self.cfg.opt.t_opt, lora=lora_arg)
                final = self.sampler.denoise(edited, self.cfg.opt.t_opt, lora=lora_arg)
            save_latent(original, directory / "original")
            save_latent(final, directory / "edited")
            _mark_stage(meta, key, {"msa": self.cfg.msa_enabled})
        return load_latent(directory / "original"), load_latent(directory / "edited"), key

    # -- single-video flow (video mode, and one frame of baseline mode) ---
    def run_video_flow(self, z0: LatentVideo, prop: PropagatedInstruction, cache_root: Path,
                       lora_seed: int, scope: str) -> dict:
        lora_dir = cache_root / "lora"
        lora_dir.mkdir(parents=True, exist_ok=True)
        lora, lora_key = self.stage_lora(z0, lora_dir / "lora", lora_seed)
        trajectory, traj_key = self.stage_invert(z0, lora, cache_root / "trajectory", lora_key, scope)
        edited, audit, drag_key = self.stage_drag(trajectory, prop, lora, cache_root / "drag", traj_key)
        original, final, result_key = self.stage_denoise(trajectory, edited, lora,
                                                         cache_root / "denoised", drag_key)
        return {
            "original": original,
            "edited": final,
            "audit": audit,
            "keys": {"lora": lora_key, "trajectory": traj_key, "drag": drag_key, "result": result_key},
        }

    # -- full runs ---------------------------------------------------------
    def run_full(self) -> RunResult:
        project = self.project
        project.require_status("propagated", "run")
        project.set_status("dragging")
        try:
            fps = project.state.get("fps", DEFAULT_FPS)
            z0 = load_latent(project.latent_prefix)
            prop = load_propagated(project)
            if self.cfg.mode == MODE_VIDEO:
                flow = self.run_video_flow(z0, prop, project.root, derive_seed(self.seed, "lora"),
                                           scope="video")
                original, edited = flow["original"], flow["edited"]
                audit = flow["audit"]
                keys = flow["keys"]
            else:
                original, edited, audit, keys = self._run_per_frame(z0, prop)
            write_audit_jsonl(audit, project.audit_path)

            recon_video = self.codec.decode(original, fps=fps)
            edited_video = self.codec.decode(edited, fps=fps)
            result_dir = project.result_dir
            result_dir.mkdir(parents=True, exist_ok=True)
            save_frames(edited_video, result_dir / "edited")
            save_frames(recon_video, result_dir / "reconstruction")

            score = consistency_score(edited_video, BlockMatchingFlow()) if edited_video.length >= 2 else 0.0
            scores = project.state.setdefault("scores", {})
            scores[self.cfg.mode] = score
            row = {
                "sample": project.id,
                "baseline_score": scores.get(MODE_PER_FRAME),
                "dragvideo_score": scores.get(MODE_VIDEO),
            }
            write_report([row], project.report_csv, result_dir / "report.json")
            (result_dir / "result.json").write_text(json.dumps({
                "mode": self.cfg.mode,
                "score": score,
                "keys": keys,
                "config": self.cfg.to_dict(),
            }, indent=1))
            project.state["last_run"] = {"mode": self.cfg.mode, "config_hash": self.cfg.hash()}
            project.set_status("done")
            return RunResult(edited_video, recon_video, score, self.cfg.mode, keys, result_dir)
        except DragEditError:
            project.set_status("failed")
            raise
        except Exception as exc:
            project.set_status("failed")
            raise StageError("run", str(exc)) from exc

    def _run_per_frame(self, z0: LatentVideo, prop: PropagatedInstruction):
        """Process every frame as an independent 1-frame video.

        Frame-axis attention over a single frame mixes nothing, which is
        the per-frame baseline's "temporal attention disabled". Frame i
        derives its training seed as base + i so frame 0 matches video mode
        on a 1-frame project exactly.
        """
        project = self.project
        base_seed = derive_seed(self.seed, "lora")
        originals, editeds, all_audit = [], [], []
        keys = {}
        for i in range(z0.length):
            frame_root = project.root / "baseline" / f"frame_{i:03d}"
            frame_root.mkdir(parents=True, exist_ok=True)
            z_frame = LatentVideo(z0.data[i : i + 1].clone(), z0.scale_factor)
            prop_frame = prop.slice_frame(i)
            flow = self.run_video_flow(z_frame, prop_frame, frame_root, base_seed + i,
                                       scope=f"frame:{i}")
            originals.append(flow["original"].data)
            editeds.append(flow["edited"].data)
            for entry in flow["audit"]:
                all_audit.append({**entry, "frame": i})
            keys[f"frame_{i}"] = flow["keys"]
        original = LatentVideo(torch.cat(originals), z0.scale_factor)
        edited = LatentVideo(torch.cat(editeds), z0.scale_factor)
        return original, edited, all_audit, keys


def train_lora_stage(project: Project, cfg: RunConfig, backbone: VideoBackbone | None = None) -> dict:
    """The standalone LoRA stage the UI triggers before instruction entry."""
    project.require_status("preprocessed", "train-lora")
    engine = Engine(project, cfg, backbone=backbone)
    z0 = load_latent(project.latent_prefix)
    (project.lora_prefix.parent).mkdir(parents=True, exist_ok=True)
    _, key = engine.stage_lora(z0, project.lora_prefix, derive_seed(engine.seed, "lora"))
    project.state["lora_key"] = key
    project.set_status("lora_trained")
    meta = json.loads((project.lora_prefix.parent / "stage.json").read_text())
    return {"key": key, "trace": meta.get("trace", []), "enabled": meta.get("enabled", True)}


def run_full(project: Project, cfg: RunConfig, backbone: VideoBackbone | None = None,
             codec=None) -> RunResult:
    return Engine(project, cfg, backbone=backbone, codec=codec).run_full()
