"""Pixel <-> latent conversion through a pluggable encoder/decoder pair.

The desk-scale ``ToyCodec`` is a deterministic strided average-pool encoder
with a matching nearest-neighbor upsample decoder. Pixels are normalized to
[-1, 1] before encoding, matching the convention of the full-scale slot.

Roundtrip behavior: ``decode(encode(v)) == v`` exactly (to float precision)
for videos constant on ``factor x factor`` blocks; on arbitrary videos the
per-pixel roundtrip error is bounded by the range (max - min) of pixel
values within the pixel's block, since pooling replaces each block by its
mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, NumericsError

DEFAULT_FPS = 8.0


@dataclass
class VideoFrames:
    """A pixel-space video: (l, h, w, 3) values in the 8-bit range [0, 255].

    Frames are stored as float64 so that codec roundtrips are exact on the
    codec's range; quantization to uint8 happens only at PNG boundaries.
    """

    frames: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ConfigError(f"frames must be (l, h, w, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ConfigError("video must contain at least one frame")
        if not np.isfinite(self.frames).all():
            raise NumericsError("video frames contain non-finite values")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        """(height, width) in pixels."""
        return self.frames.shape[1], self.frames.shape[2]

    def as_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.frames), 0, 255).astype(np.uint8)


@dataclass
class LatentVideo:
    """Latent-space video: (l, c, h_latent, w_latent) float tensor."""

    data: torch.Tensor
    scale_factor: int

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigError(f"latent must be (l, c, h, w), got {tuple(self.data.shape)}")
        if self.scale_factor < 1:
            raise ConfigError(f"scale_factor must be positive, got {self.scale_factor}")

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def latent_size(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]

    @property
    def pixel_size(self) -> tuple[int, int]:
        h, w = self.latent_size
        return h * self.scale_factor, w * self.scale_factor

    def with_data(self, data: torch.Tensor) -> "LatentVideo":
        return LatentVideo(data, self.scale_factor)

    def clone(self) -> "LatentVideo":
        return LatentVideo(self.data.clone(), self.scale_factor)


class VideoCodec(Protocol):
    """Interface both the toy codec and full-scale autoencoder wrappers satisfy."""

    spatial_factor: int
    channels: int

    def encode(self, video: VideoFrames) -> LatentVideo: ...

    def decode(self, latent: LatentVideo, fps: float = DEFAULT_FPS) -> VideoFrames: ...


class ToyCodec:
    """Average-pool encoder / nearest-neighbor decoder, factor 8, 4 channels.

    Channel layout: channels 0-2 are pooled normalized RGB; channel 3 is
    their mean (a luminance proxy the decoder ignores). A zero latent
    decodes to mid-gray (127.5).
    """

    def __init__(self, spatial_factor: int = 8, dtype: torch.dtype = torch.float64):
        self.spatial_factor = spatial_factor
        self.channels = 4
        self.dtype = dtype

    def encode(self, video: VideoFrames) -> LatentVideo:
        f = self.spatial_factor
        l, h, w, _ = video.frames.shape
        if h % f != 0:
            raise ConfigError(f"frame height {h} not divisible by codec factor {f}")
        if w % f != 0:
            raise ConfigError(f"frame width {w} not divisible by codec factor {f}")
        norm = video.frames / 127.5 - 1.0
        pooled = norm.reshape(l, h // f, f, w // f, f, 3).mean(axis=(2, 4))
        rgb = np.moveaxis(pooled, -1, 1)  # (l, 3, h/f, w/f)
        lum = rgb.mean(axis=1, keepdims=True)
        data = torch.from_numpy(np.ascontiguousarray(np.concatenate([rgb, lum], axis=1)))
        return LatentVideo(data.to(self.dtype), scale_factor=f)

    def decode(self, latent: LatentVideo, fps: float = DEFAULT_FPS) -> VideoFrames:
        if latent.scale_factor != self.spatial_factor:
            raise ConfigError(
                f"latent scale_factor {latent.scale_factor} does not match codec factor {self.spatial_factor}"
            )
        if not torch.isfinite(latent.data).all():
            raise NumericsError("latent contains non-finite values")
        f = self.spatial_factor
        rgb = latent.data[:, :3].detach().cpu().numpy()
        up = np.repeat(np.repeat(rgb, f, axis=2), f, axis=3)
        frames = np.moveaxis(up, 1, -1)
        frames = np.clip((frames + 1.0) * 127.5, 0.0, 255.0)
        return VideoFrames(frames, fps=fps)


def save_frames(video: VideoFrames, directory: Path) -> list[Path]:
    """Persist frames as numbered lossless PNGs (frame_%05d.png)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video.as_uint8()):
        path = directory / f"frame_{i:05d}.png"
        Image.fromarray(frame).save(path)
        paths.append(path)
    return paths


def load_frames(directory: Path, fps: float = DEFAULT_FPS) -> VideoFrames:
    directory = Path(directory)
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise ConfigError(f"no frame_*.png files in {directory}")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB")) for p in paths])
    return VideoFrames(frames.astype(np.float64), fps=fps)


def save_latent(latent: LatentVideo, prefix: Path) -> None:
    """Cache a latent as flat little-endian float32 plus a JSON sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arr = latent.data.detach().cpu().numpy().astype("<f4")
    arr.tofile(prefix.with_suffix(".bin"))
    sidecar = {"shape": list(latent.data.shape), "scale_factor": latent.scale_factor, "dtype": "<f4"}
    prefix.with_suffix(".json").write_text(json.dumps(sidecar))


def load_latent(prefix: Path, dtype: torch.dtype = torch.float64) -> LatentVideo:
    prefix = Path(prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    arr = np.fromfile(prefix.with_suffix(".bin"), dtype=sidecar["dtype"]).reshape(sidecar["shape"])
    return LatentVideo(torch.from_numpy(arr.copy()).to(dtype), scale_factor=sidecar["scale_factor"])
