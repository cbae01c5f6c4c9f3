"""Iterative drag optimization on noisy video latents.

One iteration alternates (a) a motion-supervision loss over feature patches
around the current handles, pulling each patch one unit step along the
normalized handle->target direction, with a masked regularizer keeping the
single-step-denoised latent close to the inversion trajectory outside the
edit region; (b) one plain gradient-descent step on the latent; (c) feature-
space nearest-neighbor re-tracking of the handles against reference features
frozen from the unedited latent.

Supervision and tracking share one feature extraction per iteration: the
features of the k-th iterate feed both that iteration's loss and the
re-tracking of handles moved by the previous step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch

from .codec import LatentVideo
from .ddim import DdimSampler, InversionTrajectory
from .errors import ConfigError, OptimizationError, TrackingError
from .instruction import PropagatedInstruction
from .unet import FeatureVolume


@dataclass
class OptimizationConfig:
    eta: float = 0.01            # latent learning rate
    lam: float = 0.1             # mask-regularizer weight (lambda)
    max_steps: int = 40
    r: int = 1                   # supervision patch radius (feature px)
    r_prime: int = 3             # tracking patch half-width (feature px)
    t_opt: int = 40              # optimization noise step, counted from z_0
    stop_epsilon: float = 1.0    # convergence radius (feature px)

    def __post_init__(self):
        if self.eta < 0 or self.lam < 0 or self.r < 0 or self.r_prime < 1:
            raise ConfigError(f"invalid optimization config: {self}")
        if self.max_steps < 0 or self.t_opt < 1:
            raise ConfigError(f"invalid optimization config: {self}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizationConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class TrackState:
    """Current and original handle positions plus frozen reference features."""

    current: np.ndarray            # (l, n, 2) feature coords (x, y)
    original: np.ndarray           # (l, n, 2), immutable
    ref_features: torch.Tensor     # (l, n, c) features of the unedited latent at p^(0)
    iteration: int = 0

    @classmethod
    def create(cls, features: FeatureVolume, handles: np.ndarray) -> "TrackState":
        handles = np.asarray(handles, dtype=np.float64)
        l, n, _ = handles.shape
        refs = torch.stack([
            torch.stack([bilinear_sample(features.data, i, handles[i, j]) for j in range(n)])
            for i in range(l)
        ]).detach()
        return cls(handles.copy(), handles.copy(), refs)


def pixel_to_feature(points: np.ndarray, pixel_size: int, feature_size: int) -> np.ndarray:
    """Map pixel coordinates to the half-resolution feature grid (cell-center convention)."""
    scale = feature_size / pixel_size
    return (np.asarray(points, dtype=np.float64) + 0.5) * scale - 0.5


def feature_to_pixel(points: np.ndarray, pixel_size: int, feature_size: int) -> np.ndarray:
    scale = feature_size / pixel_size
    return (np.asarray(points, dtype=np.float64) + 0.5) / scale - 0.5


def bilinear_sample(data: torch.Tensor, frame: int, q) -> torch.Tensor:
    """Bilinear blend of the 4 grid neighbors of q = (x, y); differentiable in data."""
    x, y = float(q[0]), float(q[1])
    h, w = data.shape[2], data.shape[3]
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValueError(f"sample point ({x}, {y}) outside feature grid {w}x{h}")
    x0 = min(int(math.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(math.floor(y)), h - 2) if h > 1 else 0
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    wx, wy = x - x0, y - y0
    top = (1 - wx) * data[frame, :, y0, x0] + wx * data[frame, :, y0, x1]
    bottom = (1 - wx) * data[frame, :, y1, x0] + wx * data[frame, :, y1, x1]
    return (1 - wy) * top + wy * bottom


def patch_points(center, radius: int, width: int, height: int) -> list[tuple[int, int]]:
    """Integer grid points at offsets within Euclidean distance `radius` of the
    rounded center, clipped to the grid."""
    cx, cy = int(round(float(center[0]))), int(round(float(center[1])))
    points = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                x, y = cx + dx, cy + dy
                if 0 <= x < width and 0 <= y < height:
                    points.append((x, y))
    return points


def _clamp_point(x: float, y: float, width: int, height: int) -> tuple[float, float]:
    return min(max(x, 0.0), width - 1.0), min(max(y, 0.0), height - 1.0)


@dataclass
class MotionLossParts:
    total: float
    term1: float
    term2: float


@dataclass
class DragResult:
    latent: LatentVideo
    handles_feature: np.ndarray
    targets_feature: np.ndarray
    iterations: int
    converged: bool
    audit: list[dict] = field(default_factory=list)


class Dove:
    """Drag optimizer bound to a backbone and sampler."""

    def __init__(self, backbone, sampler: DdimSampler):
        self.backbone = backbone
        self.sampler = sampler

    # ------------------------------------------------------------------
    # Eq.-level operations
    # ------------------------------------------------------------------
    def motion_loss(self, z_hat: LatentVideo, z_prev_ref: torch.Tensor, track: TrackState,
                    targets: np.ndarray, latent_mask: np.ndarray, cfg: OptimizationConfig,
                    cond=None, lora=None, features: FeatureVolume | None = None,
                    reference_latent: LatentVideo | None = None) -> tuple[torch.Tensor, MotionLossParts]:
        """Motion supervision plus masked regularizer.

        Gradient flows only through the live feature samples and the
        single-step-denoised latent; the reference patch features and the
        trajectory latent are stop-gradient operands. ``reference_latent``
        optionally re-sources the stop-gradient features (dual-path harness
        for verifying stop-gradient nullity); by default they come from
        z_hat itself, detached.
        """
        if features is None:
            features = self.backbone.extract_features(z_hat, cfg.t_opt, cond=cond, lora=lora)
        live = features.data
        if reference_latent is None:
            sg = live.detach()
        else:
            with torch.no_grad():
                sg = self.backbone.extract_features(reference_latent, cfg.t_opt, cond=cond, lora=lora).data
        fh, fw = live.shape[2], live.shape[3]

        term1 = live.new_zeros(())
        l, n, _ = track.current.shape
        for i in range(l):
            for j in range(n):
                p = track.current[i, j]
                t_ij = targets[i, j]
                dist = float(np.hypot(t_ij[0] - p[0], t_ij[1] - p[1]))
                if dist < cfg.stop_epsilon or dist < 1e-12:
                    continue  # converged: direction undefined, point excluded
                d = (t_ij - p) / dist
                for qx, qy in patch_points(p, cfg.r, fw, fh):
                    moved = _clamp_point(qx + d[0], qy + d[1], fw, fh)
                    sample_live = bilinear_sample(live, i, moved)
                    sample_sg = bilinear_sample(sg, i, (qx, qy))
                    term1 = term1 + (sample_live - sample_sg).abs().sum()

        z_hat_prev = self.sampler.single_step_denoise(z_hat, cfg.t_opt, cond=cond, lora=lora)
        keep_out = torch.from_numpy((~latent_mask).astype(np.float64))[:, None]
        term2 = ((z_hat_prev.data - z_prev_ref.detach()) * keep_out).abs().sum()

        loss = term1 + cfg.lam * term2
        return loss, MotionLossParts(float(loss.detach()), float(term1.detach()), float(term2.detach()))

    @staticmethod
    def latent_step(z_var: torch.Tensor, loss: torch.Tensor, eta: float) -> torch.Tensor:
        """One plain gradient-descent step on the latent; no momentum."""
        grad = torch.autograd.grad(loss, z_var)[0]
        if not torch.isfinite(grad).all():
            raise OptimizationError(
                f"non-finite latent gradient (loss={float(loss.detach())}, max|grad|=nan)"
            )
        return (z_var - eta * grad).detach()

    def track_handles(self, features: FeatureVolume, track: TrackState,
                      cfg: OptimizationConfig) -> np.ndarray:
        """Nearest-neighbor relocation within a square patch around each handle.

        Distance ties resolve to the lexicographically smallest (row, column)
        grid point.
        """
        data = features.data.detach()
        fh, fw = data.shape[2], data.shape[3]
        l, n, _ = track.current.shape
        out = track.current.copy()
        for i in range(l):
            for j in range(n):
                px, py = track.current[i, j]
                xs = range(max(0, math.ceil(px - cfg.r_prime)), min(fw - 1, math.floor(px + cfg.r_prime)) + 1)
                ys = range(max(0, math.ceil(py - cfg.r_prime)), min(fh - 1, math.floor(py + cfg.r_prime)) + 1)
                if not xs or not ys:
                    raise TrackingError(f"tracking patch around ({px}, {py}) is fully out of bounds")
                ref = track.ref_features[i, j]
                best = None
                best_pos = None
                for qy in ys:
                    for qx in xs:
                        dist = float((data[i, :, qy, qx] - ref).abs().sum())
                        if best is None or dist < best:
                            best, best_pos = dist, (qx, qy)
                if best_pos is None:
                    raise TrackingError(f"tracking patch around ({px}, {py}) is empty")
                out[i, j] = best_pos
        return out

    # ------------------------------------------------------------------
    # the loop
    # ------------------------------------------------------------------
    def run_drag(self, trajectory: InversionTrajectory, instruction: PropagatedInstruction,
                 cfg: OptimizationConfig, cond=None, lora=None) -> DragResult:
        if cfg.t_opt not in trajectory or (cfg.t_opt - 1) not in trajectory:
            raise ConfigError(f"trajectory lacks steps {cfg.t_opt} and {cfg.t_opt - 1}")
        z_orig = trajectory[cfg.t_opt]
        # The regularizer anchor is the original latent taken one denoising step
        # toward clean. Recomputing it here (rather than reading the stored
        # trajectory step, which it matches to ~1e-15) makes the unedited loss
        # exactly zero, so the L1 subgradient cannot seed oscillation on
        # outside-mask cells.
        with torch.no_grad():
            z_prev_ref = self.sampler.single_step_denoise(z_orig, cfg.t_opt, cond=cond, lora=lora).data
        h_pix, w_pix = z_orig.pixel_size

        with torch.no_grad():
            f0 = self.backbone.extract_features(z_orig, cfg.t_opt, cond=cond, lora=lora)
        fh, fw = f0.spatial_size
        handles = pixel_to_feature(instruction.handles, w_pix, fw)
        targets = pixel_to_feature(instruction.targets, w_pix, fw)
        handles[..., 0] = np.clip(handles[..., 0], 0, fw - 1)
        handles[..., 1] = np.clip(handles[..., 1], 0, fh - 1)
        targets[..., 0] = np.clip(targets[..., 0], 0, fw - 1)
        targets[..., 1] = np.clip(targets[..., 1], 0, fh - 1)
        track = TrackState.create(f0, handles)
        latent_mask = instruction.mask.latent

        z_hat = z_orig.data.detach().clone()
        audit: list[dict] = []
        iterations = 0
        needs_track = False  # a latent step has happened since the last re-track
        converged = self._all_converged(track.current, targets, cfg)
        while not converged and iterations < cfg.max_steps:
            z_var = z_hat.clone().requires_grad_(True)
            z_hat_lv = z_orig.with_data(z_var)
            features = self.backbone.extract_features(z_hat_lv, cfg.t_opt, cond=cond, lora=lora)
            if needs_track:
                track.current = self.track_handles(FeatureVolume(features.data.detach()), track, cfg)
                needs_track = False
                converged = self._all_converged(track.current, targets, cfg)
                if converged:
                    break
            loss, parts = self.motion_loss(z_hat_lv, z_prev_ref, track, targets, latent_mask, cfg,
                                           cond=cond, lora=lora, features=features)
            z_hat = self.latent_step(z_var, loss, cfg.eta)
            iterations += 1
            needs_track = True
            track.iteration = iterations
            audit.append(self._audit_entry(iterations, parts, track, targets, cfg, w_pix, fw))

        if needs_track:
            with torch.no_grad():
                features = self.backbone.extract_features(z_orig.with_data(z_hat), cfg.t_opt,
                                                          cond=cond, lora=lora)
            track.current = self.track_handles(features, track, cfg)
            converged = self._all_converged(track.current, targets, cfg)

        return DragResult(z_orig.with_data(z_hat), track.current.copy(), targets,
                          iterations, converged, audit)

    @staticmethod
    def _all_converged(current: np.ndarray, targets: np.ndarray, cfg: OptimizationConfig) -> bool:
        dist = np.linalg.norm(current - targets, axis=-1)
        return bool((dist < cfg.stop_epsilon).all())

    @staticmethod
    def _audit_entry(iteration: int, parts: MotionLossParts, track: TrackState,
                     targets: np.ndarray, cfg: OptimizationConfig, pixel_size: int,
                     feature_size: int) -> dict:
        dist = np.linalg.norm(track.current - targets, axis=-1)
        handles_px = feature_to_pixel(track.current, pixel_size, feature_size)
        return {
            "iteration": iteration,
            "loss": parts.total,
            "term1": parts.term1,
            "term2": parts.term2,
            "handles": [[list(map(float, p)) for p in frame] for frame in handles_px],
            "converged": [[bool(d < cfg.stop_epsilon) for d in frame] for frame in dist],
        }


def write_audit_jsonl(entries: list[dict], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry) + "\n")
