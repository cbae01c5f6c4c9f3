"""Drag instructions and their propagation across frames.

A user annotates the first and last frames with (handle, target) point pairs
plus positive/negative mask prompts. Propagation tracks only the handles
(targets often sit on untrackable background), linearly interpolates the
drag displacement between the keyframes, tracks the mask, and finally
dilates each frame's mask along the drag vector so every target ends up
inside it.

Desk-scale oracle components (correlation point tracker, flood-fill
segmenter and mask tracker) implement the same interfaces as the full-scale
external-model clients in ``remote``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import ndimage

from .codec import VideoFrames
from .errors import ConfigError, InstructionError, PropagationError

Point = tuple[float, float]  # (x, y), subpixel, origin top-left


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------
@dataclass
class KeyframeAnnotation:
    pairs: list[tuple[Point, Point]] = field(default_factory=list)  # (handle, target)
    positive: list[Point] = field(default_factory=list)
    negative: list[Point] = field(default_factory=list)

    @property
    def handles(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.float64).reshape(-1, 2)

    @property
    def targets(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.float64).reshape(-1, 2)

    def to_dict(self) -> dict:
        return {
            "pairs": [{"handle": list(h), "target": list(t)} for h, t in self.pairs],
            "positive": [list(p) for p in self.positive],
            "negative": [list(p) for p in self.negative],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KeyframeAnnotation":
        return cls(
            pairs=[(tuple(p["handle"]), tuple(p["target"])) for p in d.get("pairs", [])],
            positive=[tuple(p) for p in d.get("positive", [])],
            negative=[tuple(p) for p in d.get("negative", [])],
        )


@dataclass
class DragInstruction:
    frames: int
    extension_radius: int
    first: KeyframeAnnotation
    last: KeyframeAnnotation

    def __post_init__(self):
        if self.frames < 2:
            raise InstructionError(f"drag instruction needs at least 2 frames, got {self.frames}")
        if self.extension_radius < 0:
            raise InstructionError("extension radius must be non-negative")
        if len(self.first.pairs) != len(self.last.pairs):
            raise InstructionError(
                f"keyframes carry {len(self.first.pairs)} vs {len(self.last.pairs)} point pairs; counts must match"
            )
        if not self.first.pairs:
            raise InstructionError("instruction must contain at least one (handle, target) pair")

    @property
    def pair_count(self) -> int:
        return len(self.first.pairs)

    def validate_bounds(self, height: int, width: int) -> None:
        for kf_name, kf in (("first", self.first), ("last", self.last)):
            points = [p for pair in kf.pairs for p in pair] + kf.positive + kf.negative
            for x, y in points:
                if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                    raise InstructionError(
                        f"point ({x}, {y}) on keyframe '{kf_name}' outside {width}x{height} frame"
                    )

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "extension_radius": self.extension_radius,
            "keyframes": {"first": self.first.to_dict(), "last": self.last.to_dict()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DragInstruction":
        try:
            return cls(
                frames=int(d["frames"]),
                extension_radius=int(d["extension_radius"]),
                first=KeyframeAnnotation.from_dict(d["keyframes"]["first"]),
                last=KeyframeAnnotation.from_dict(d["keyframes"]["last"]),
            )
        except (KeyError, TypeError) as exc:
            raise InstructionError(f"malformed instruction JSON: {exc}") from exc


@dataclass
class MaskVideo:
    """Per-frame binary masks at pixel resolution plus their latent downsample."""

    pixel: np.ndarray  # (l, h, w) bool
    latent: np.ndarray  # (l, h//f, w//f) bool

    def __post_init__(self):
        if self.pixel.ndim != 3 or self.latent.ndim != 3:
            raise ConfigError("masks must be (l, h, w)")
        if self.pixel.shape[0] != self.latent.shape[0]:
            raise ConfigError("pixel and latent masks disagree on frame count")

    @classmethod
    def from_pixel(cls, pixel: np.ndarray, scale_factor: int) -> "MaskVideo":
        return cls(pixel.astype(bool), downsample_mask_to_latent(pixel, scale_factor))


@dataclass
class PropagatedInstruction:
    handles: np.ndarray  # (l, n, 2) float (x, y)
    targets: np.ndarray  # (l, n, 2)
    mask: MaskVideo

    def __post_init__(self):
        if self.handles.shape != self.targets.shape or self.handles.ndim != 3:
            raise ConfigError("handles and targets must both be (l, n, 2)")
        if not np.isfinite(self.handles).all() or not np.isfinite(self.targets).all():
            raise ConfigError("propagated points must be finite")

    @property
    def frame_count(self) -> int:
        return self.handles.shape[0]

    @property
    def point_count(self) -> int:
        return self.handles.shape[1]

    def slice_frame(self, i: int) -> "PropagatedInstruction":
        """A 1-frame view used by the per-frame baseline mode."""
        return PropagatedInstruction(
            self.handles[i : i + 1].copy(),
            self.targets[i : i + 1].copy(),
            MaskVideo(self.mask.pixel[i : i + 1].copy(), self.mask.latent[i : i + 1].copy()),
        )


# ---------------------------------------------------------------------------
# pluggable tracker / segmenter interfaces
# ---------------------------------------------------------------------------
class PointTracker(Protocol):
    def track(self, video: VideoFrames, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """points (n, 2) on frame 0 -> positions (l, n, 2), validity (l, n)."""


class Segmenter(Protocol):
    def segment(self, frame: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> np.ndarray: ...


class MaskTracker(Protocol):
    def track_mask(self, video: VideoFrames, first_mask: np.ndarray,
                   seeds: np.ndarray | None = None) -> np.ndarray:
        """first_mask (h, w) -> masks (l, h, w); seeds (l, n, 2) optional hints."""


def _grayscale(frame: np.ndarray) -> np.ndarray:
    return frame.mean(axis=-1)


class FloodFillSegmenter:
    """Seeded flood fill over color similarity; the desk-scale stand-in for a
    promptable segmentation model.

    Positive prompts grow connected regions of pixels within ``tolerance``
    of the seed color. Negative prompts veto: each grows its own region at
    the tighter ``negative_tolerance`` and positive growth may not enter it,
    so a negative placed inside a candidate region carves that region out.
    """

    def __init__(self, tolerance: float = 30.0, negative_tolerance: float | None = None):
        self.tolerance = tolerance
        self.negative_tolerance = tolerance / 2 if negative_tolerance is None else negative_tolerance

    def _fill(self, frame: np.ndarray, seed: tuple[int, int], tolerance: float,
              blocked: np.ndarray | None = None) -> np.ndarray:
        h, w, _ = frame.shape
        sx, sy = seed
        ref = frame[sy, sx]
        visited = np.zeros((h, w), dtype=bool)
        if blocked is not None and blocked[sy, sx]:
            return visited
        queue = deque([(sx, sy)])
        visited[sy, sx] = True
        while queue:
            x, y = queue.popleft()
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h and not visited[ny, nx]:
                    if blocked is not None and blocked[ny, nx]:
                        continue
                    if np.abs(frame[ny, nx] - ref).max() <= tolerance:
                        visited[ny, nx] = True
                        queue.append((nx, ny))
        return visited

    def segment(self, frame: np.ndarray, positive: np.ndarray, negative: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        h, w, _ = frame.shape
        pos = np.asarray(positive, dtype=np.float64).reshape(-1, 2)
        neg = np.asarray(negative, dtype=np.float64).reshape(-1, 2)
        barrier = np.zeros((h, w), dtype=bool)
        for x, y in neg:
            barrier |= self._fill(frame, (int(round(x)), int(round(y))), self.negative_tolerance)
        mask = np.zeros((h, w), dtype=bool)
        for x, y in pos:
            mask |= self._fill(frame, (int(round(x)), int(round(y))), self.tolerance, blocked=barrier)
        return mask


class CorrelationPointTracker:
    """Track points by SSD template matching of the first-frame patch.

    The template is anchored at the original point; each frame searches a
    window around the previous position. Integer-resolution matching,
    adequate for the oracle tests' half-pixel tolerance.
    """

    def __init__(self, template_radius: int = 3, search_radius: int = 6):
        self.template_radius = template_radius
        self.search_radius = search_radius

    def _patch(self, gray: np.ndarray, cx: int, cy: int) -> np.ndarray:
        r = self.template_radius
        h, w = gray.shape
        cx = int(np.clip(cx, r, w - 1 - r))
        cy = int(np.clip(cy, r, h - 1 - r))
        return gray[cy - r : cy + r + 1, cx - r : cx + r + 1]

    def track(self, video: VideoFrames, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        l = video.length
        h, w = video.size
        grays = [_grayscale(f) for f in video.frames]
        r, sr = self.template_radius, self.search_radius
        positions = np.zeros((l, len(points), 2))
        positions[0] = points
        for j, (x0, y0) in enumerate(points):
            template = self._patch(grays[0], int(round(x0)), int(round(y0)))
            prev = np.array([x0, y0])
            for i in range(1, l):
                cx, cy = int(round(prev[0])), int(round(prev[1]))
                best, best_pos = None, (cx, cy)
                for ny in range(max(r, cy - sr), min(h - 1 - r, cy + sr) + 1):
                    for nx in range(max(r, cx - sr), min(w - 1 - r, cx + sr) + 1):
                        cand = grays[i][ny - r : ny + r + 1, nx - r : nx + r + 1]
                        ssd = float(((cand - template) ** 2).sum())
                        if best is None or ssd < best:
                            best, best_pos = ssd, (nx, ny)
                prev = np.array(best_pos, dtype=np.float64) + (np.array([x0, y0]) - np.array([round(x0), round(y0)]))
                positions[i, j] = prev
        valid = np.ones((l, len(points)), dtype=bool)
        return positions, valid


class FloodFillMaskTracker:
    """Track a mask by translating it with the flood-fill region's motion.

    Per frame, the region grown from the seed points is compared with the
    first frame's region; the rounded centroid displacement translates the
    input mask. This keeps user extensions intact and reduces to the
    identity on static videos.
    """

    def __init__(self, segmenter: FloodFillSegmenter | None = None):
        self.segmenter = segmenter or FloodFillSegmenter()

    def _centroid(self, region: np.ndarray) -> np.ndarray:
        ys, xs = np.nonzero(region)
        return np.array([xs.mean(), ys.mean()])

    def track_mask(self, video: VideoFrames, first_mask: np.ndarray,
                   seeds: np.ndarray | None = None) -> np.ndarray:
        if seeds is None:
            raise PropagationError("flood-fill mask tracker needs per-frame seed points")
        l = video.length
        masks = np.zeros((l, *first_mask.shape), dtype=bool)
        masks[0] = first_mask
        none = np.zeros((0, 2))
        ref = self.segmenter.segment(video.frames[0], seeds[0], none)
        ref_centroid = self._centroid(ref)
        for i in range(1, l):
            region = self.segmenter.segment(video.frames[i], seeds[i], none)
            dx, dy = np.rint(self._centroid(region) - ref_centroid).astype(int)
            masks[i] = _shift_mask(first_mask, dx, dy)
        return masks


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------
def segment_mask(frame: np.ndarray, positive: np.ndarray, negative: np.ndarray,
                 segmenter: Segmenter | None = None) -> np.ndarray:
    """Build the first-frame mask from point prompts.

    Postcondition: every positive point is inside the mask and every
    negative point outside; contradictory prompts raise.
    """
    positive = np.asarray(positive, dtype=np.float64).reshape(-1, 2)
    negative = np.asarray(negative, dtype=np.float64).reshape(-1, 2)
    if len(positive) == 0:
        raise InstructionError("mask segmentation needs at least one positive point")
    for p in positive:
        for n in negative:
            if np.allclose(p, n):
                raise InstructionError(f"point ({p[0]}, {p[1]}) is both a positive and a negative prompt")
    segmenter = segmenter or FloodFillSegmenter()
    mask = segmenter.segment(frame, positive, negative)
    for x, y in positive:
        if not mask[int(round(y)), int(round(x))]:
            raise InstructionError(f"segmenter failed to include positive point ({x}, {y})")
    for x, y in negative:
        if mask[int(round(y)), int(round(x))]:
            raise InstructionError(f"segmenter failed to exclude negative point ({x}, {y})")
    return mask


def disc_structure(radius: int) -> np.ndarray:
    """Euclidean disc: offsets with ||delta||_2 <= radius."""
    grid = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(grid, grid, indexing="ij")
    return dx**2 + dy**2 <= radius**2


def extend_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate by a Euclidean disc of the given radius; radius 0 is identity."""
    if radius < 0:
        raise InstructionError("extension radius must be non-negative")
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc_structure(radius))


def _fill_invalid(positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Linear interpolation between nearest valid neighbors per point."""
    l, n, _ = positions.shape
    out = positions.copy()
    for j in range(n):
        good = np.flatnonzero(valid[:, j])
        if len(good) == 0:
            raise PropagationError(f"tracker returned no valid frame for point {j}")
        for axis in range(2):
            out[:, j, axis] = np.interp(np.arange(l), good, positions[good, j, axis])
    return out


def propagate_handles(video: VideoFrames, handles: np.ndarray, tracker: PointTracker,
                      last_handles: np.ndarray | None = None,
                      keyframe_blend: bool = False) -> np.ndarray:
    """Track handle points from the first frame across the video.

    Row 0 always reproduces the user's first-frame handles. With
    keyframe_blend, the user's last-frame handles are honored exactly and
    intermediate rows receive a linearly growing share of the correction.
    """
    handles = np.asarray(handles, dtype=np.float64).reshape(-1, 2)
    l = video.length
    h, w = video.size
    if l == 2 and keyframe_blend and last_handles is not None:
        positions = np.stack([handles, np.asarray(last_handles, dtype=np.float64)])
    else:
        try:
            raw, valid = tracker.track(video, handles)
        except PropagationError:
            raise
        except Exception as exc:
            raise PropagationError(f"point tracker failed: {exc}") from exc
        positions = _fill_invalid(np.asarray(raw, dtype=np.float64), np.asarray(valid, dtype=bool))
        positions[0] = handles
        if keyframe_blend and last_handles is not None and l > 1:
            correction = np.asarray(last_handles, dtype=np.float64) - positions[-1]
            weights = (np.arange(l) / (l - 1))[:, None, None]
            positions = positions + weights * correction
    positions[..., 0] = np.clip(positions[..., 0], 0, w - 1)
    positions[..., 1] = np.clip(positions[..., 1], 0, h - 1)
    return positions


def interpolate_targets(handles: np.ndarray, targets_first: np.ndarray,
                        targets_last: np.ndarray) -> np.ndarray:
    """Per-frame targets: interpolate the displacement (target - handle)
    between the keyframes and re-anchor it on the tracked handle."""
    handles = np.asarray(handles, dtype=np.float64)
    l = handles.shape[0]
    if l < 2:
        raise ValueError(f"target interpolation needs at least 2 frames, got {l}")
    d_first = np.asarray(targets_first, dtype=np.float64) - handles[0]
    d_last = np.asarray(targets_last, dtype=np.float64) - handles[-1]
    w = (np.arange(l) / (l - 1))[:, None, None]
    displacement = (1 - w) * d_first[None] + w * d_last[None]
    return handles + displacement


def propagate_masks(video: VideoFrames, first_mask: np.ndarray, tracker: MaskTracker,
                    seeds: np.ndarray | None = None) -> np.ndarray:
    try:
        masks = tracker.track_mask(video, first_mask, seeds=seeds)
    except PropagationError:
        raise
    except Exception as exc:
        raise PropagationError(f"mask tracker failed: {exc}") from exc
    masks = np.asarray(masks, dtype=bool)
    masks[0] = first_mask
    for i in range(video.length):
        if not masks[i].any():
            raise PropagationError("mask propagation produced an empty mask", frame=i)
    return masks


def _shift_mask(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def dilate_along_drag(mask: np.ndarray, handle: Point, target: Point) -> np.ndarray:
    """Sweep the mask along the handle->target segment (union of translates)
    until the target lies inside; identity if it already does."""
    h, w = mask.shape
    tx, ty = int(round(target[0])), int(round(target[1]))
    tx, ty = int(np.clip(tx, 0, w - 1)), int(np.clip(ty, 0, h - 1))
    if mask[ty, tx]:
        return mask.copy()
    vec = np.array([target[0] - handle[0], target[1] - handle[1]])
    steps = int(np.ceil(np.linalg.norm(vec))) or 1
    out = mask.copy()
    for s in range(1, steps + 1):
        dx, dy = np.rint(vec * s / steps).astype(int)
        out |= _shift_mask(mask, dx, dy)
    out[ty, tx] = True
    return out


def downsample_mask_to_latent(masks: np.ndarray, scale_factor: int) -> np.ndarray:
    """Max-pool: a latent cell is set if any covered pixel is set."""
    masks = np.asarray(masks, dtype=bool)
    l, h, w = masks.shape
    if h % scale_factor or w % scale_factor:
        raise ConfigError(f"mask size ({h}, {w}) not divisible by scale factor {scale_factor}")
    f = scale_factor
    return masks.reshape(l, h // f, f, w // f, f).any(axis=(2, 4))


def propagate_instruction(video: VideoFrames, instruction: DragInstruction, scale_factor: int,
                          point_tracker: PointTracker | None = None,
                          segmenter: Segmenter | None = None,
                          mask_tracker: MaskTracker | None = None,
                          keyframe_blend: bool = False) -> PropagatedInstruction:
    """Full propagation: segmentation, extension, handle tracking, target
    interpolation, mask tracking, and drag-vector dilation."""
    h, w = video.size
    instruction.validate_bounds(h, w)
    if instruction.frames != video.length:
        raise InstructionError(
            f"instruction covers {instruction.frames} frames but video has {video.length}"
        )
    point_tracker = point_tracker or CorrelationPointTracker()
    segmenter = segmenter or FloodFillSegmenter()
    mask_tracker = mask_tracker or FloodFillMaskTracker(segmenter if isinstance(segmenter, FloodFillSegmenter) else None)

    first = instruction.first
    # handle points are automatically positive prompts
    positives = np.concatenate([first.handles, np.asarray(first.positive, dtype=np.float64).reshape(-1, 2)])
    negatives = np.asarray(first.negative, dtype=np.float64).reshape(-1, 2)
    mask0 = segment_mask(video.frames[0], positives, negatives, segmenter)
    mask0 = extend_mask(mask0, instruction.extension_radius)

    handles = propagate_handles(video, first.handles, point_tracker,
                                last_handles=instruction.last.handles, keyframe_blend=keyframe_blend)
    targets = interpolate_targets(handles, first.targets, instruction.last.targets)
    targets[..., 0] = np.clip(targets[..., 0], 0, w - 1)
    targets[..., 1] = np.clip(targets[..., 1], 0, h - 1)

    masks = propagate_masks(video, mask0, mask_tracker, seeds=handles)
    for i in range(video.length):
        for j in range(instruction.pair_count):
            masks[i] = dilate_along_drag(masks[i], tuple(handles[i, j]), tuple(targets[i, j]))

    return PropagatedInstruction(handles, targets, MaskVideo.from_pixel(masks, scale_factor))
