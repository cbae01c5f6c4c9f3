"""Mutual-self-attention paired denoising.

The original and edited noisy latents descend the schedule in lockstep. At
each step the original branch runs normally while its keys and values are
captured at the designated spatial self-attention layers; the edited branch
then runs with its K/V replaced by the captured ones, so the edit inherits
the original's appearance statistics. Temporal motion-module attention is
left untouched unless a plan names those layers explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .codec import LatentVideo, VideoCodec, VideoFrames
from .ddim import DdimSampler
from .errors import ConfigError, NumericsError, PairingError
from .unet import AttentionTap


@dataclass
class MsaPlan:
    """Which spatial self-attention layers are swapped, over which step range.

    layers=None designates every spatial self-attention layer; an empty
    tuple disables swapping. The range [t_start, t_end] is inclusive;
    t_end=None extends to the starting step.
    """

    layers: tuple[str, ...] | None = None
    t_start: int = 0
    t_end: int | None = None

    def active(self, t: int, from_step: int) -> bool:
        end = from_step if self.t_end is None else self.t_end
        return self.t_start <= t <= end and (self.layers is None or len(self.layers) > 0)

    def to_dict(self) -> dict:
        return {"layers": None if self.layers is None else list(self.layers),
                "t_start": self.t_start, "t_end": self.t_end}

    @classmethod
    def from_dict(cls, d: dict) -> "MsaPlan":
        layers = d.get("layers")
        return cls(layers=None if layers is None else tuple(layers),
                   t_start=d.get("t_start", 0), t_end=d.get("t_end"))


def msa_attention(q_edited: torch.Tensor, k: torch.Tensor, v: torch.Tensor, d: float) -> torch.Tensor:
    """Single-head attention with queries from the edited branch and K/V from
    the original: softmax(Q_hat K^T / sqrt(d)) V."""
    if d <= 0:
        raise ConfigError(f"attention dimension must be positive, got {d}")
    if k.shape[0] != v.shape[0] or q_edited.shape[-1] != k.shape[-1]:
        raise ConfigError(
            f"incompatible token shapes: Q {tuple(q_edited.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}"
        )
    weights = torch.softmax(q_edited @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return weights @ v


@dataclass
class MsaPairResult:
    original_latent: LatentVideo
    edited_latent: LatentVideo
    original_video: VideoFrames | None = None
    edited_video: VideoFrames | None = None


class MsaDenoiser:
    """Lockstep paired denoising driver."""

    def __init__(self, backbone, sampler: DdimSampler):
        self.backbone = backbone
        self.sampler = sampler

    def denoise_pair(self, z_t: LatentVideo, z_hat_t: LatentVideo, from_step: int,
                     plan: MsaPlan | None = None, cond=None, lora=None,
                     codec: VideoCodec | None = None, fps: float = 8.0,
                     edited_step: int | None = None) -> MsaPairResult:
        if edited_step is not None and edited_step != from_step:
            raise PairingError(
                f"paired latents must sit at the same step: original {from_step}, edited {edited_step}"
            )
        if z_t.data.shape != z_hat_t.data.shape:
            raise PairingError(
                f"paired latents must share a shape: {tuple(z_t.data.shape)} vs {tuple(z_hat_t.data.shape)}"
            )
        plan = plan or MsaPlan()
        z = z_t.data
        z_hat = z_hat_t.data
        with torch.no_grad():
            for t in range(from_step, 0, -1):
                swap = plan.active(t, from_step)
                states: dict = {}
                capture = AttentionTap("capture", plan.layers, states) if swap else None
                eps_orig = self.backbone.predict_noise(z_t.with_data(z), t, cond=cond, lora=lora,
                                                       attention=capture).data
                inject = AttentionTap("inject", plan.layers, states) if swap else None
                eps_edit = self.backbone.predict_noise(z_hat_t.with_data(z_hat), t, cond=cond, lora=lora,
                                                       attention=inject).data
                z = self.sampler._step_to_prev(z, eps_orig, t)
                z_hat = self.sampler._step_to_prev(z_hat, eps_edit, t)
                if not torch.isfinite(z_hat).all() or not torch.isfinite(z).all():
                    raise NumericsError("paired denoising produced non-finite latent", step=t)
        result = MsaPairResult(z_t.with_data(z.clone()), z_hat_t.with_data(z_hat.clone()))
        if codec is not None:
            result.original_video = codec.decode(result.original_latent, fps=fps)
            result.edited_video = codec.decode(result.edited_latent, fps=fps)
        return result
