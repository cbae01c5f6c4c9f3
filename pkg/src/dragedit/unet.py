"""Video U-Net backbones: noise prediction, feature extraction, attention hooks.

Two implementations of the same adapter interface live here:

* ``ToyVideoUNet`` — a small seed-deterministic 2-level U-Net with one
  spatial self-attention and one temporal motion module per level. Motion
  modules are identity-initialized (zero project-out) so an untrained
  network treats frames independently.
* ``TransparentBackbone`` — predicts zero noise and exposes the upsampled
  latent itself as its feature map; used by synthetic drag harnesses and as
  the zero-noise oracle for sampler tests.

A wrapper around full-scale pretrained weights can implement the same
``VideoBackbone`` protocol and drop into every downstream module.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import LatentVideo
from .errors import ConfigError
from .utils import stable_hash


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 4
    widths: tuple[int, int] = (32, 64)
    heads: int = 2
    feature_layer_index: int = 2
    cond_dim: int = 16
    output_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 2:
            raise ConfigError("toy backbone supports exactly two levels")
        for w in self.widths:
            if w % self.heads != 0:
                raise ConfigError(f"width {w} not divisible by head count {self.heads}")

    def hash(self) -> str:
        return stable_hash(asdict(self))


@dataclass
class FeatureVolume:
    """U-Net feature map resized to half the pixel resolution, grad-preserving."""

    data: torch.Tensor  # (l, c_f, h_pix/2, w_pix/2)

    @property
    def spatial_size(self) -> tuple[int, int]:
        return self.data.shape[2], self.data.shape[3]


@dataclass
class ConditioningEmbedding:
    """Optional conditioning tokens; an empty embedding means unconditioned."""

    embedding: torch.Tensor  # (tokens, d_cond)

    @property
    def is_null(self) -> bool:
        return self.embedding.numel() == 0


def null_conditioning(cond_dim: int = 16, dtype: torch.dtype = torch.float64) -> ConditioningEmbedding:
    return ConditioningEmbedding(torch.zeros(0, cond_dim, dtype=dtype))


@dataclass
class AttentionState:
    """Captured Q/K/V of one attention layer, in evaluation order."""

    layer: str
    queries: torch.Tensor  # (n, tokens, c)
    keys: torch.Tensor
    values: torch.Tensor
    head_dim: int


@dataclass
class LoraTarget:
    name: str
    d_in: int
    d_out: int


class AttentionTap:
    """Capture or inject K/V at named attention layers during one forward pass.

    mode="capture" records each designated layer's state into ``states``;
    mode="inject" replaces K/V of designated layers with previously captured
    states (keyed by layer name).
    """

    def __init__(self, mode: str, layers: Sequence[str] | None, states: dict[str, AttentionState] | None = None):
        if mode not in ("capture", "inject"):
            raise ConfigError(f"unknown attention tap mode {mode!r}")
        self.mode = mode
        self.layers = None if layers is None else tuple(layers)
        self.states: dict[str, AttentionState] = {} if states is None else states
        self.order: list[str] = []

    def applies(self, layer: str, default_layers: Sequence[str]) -> bool:
        designated = self.layers if self.layers is not None else tuple(default_layers)
        return layer in designated

    def record(self, state: AttentionState) -> None:
        self.states[state.layer] = state
        self.order.append(state.layer)

    def lookup(self, layer: str) -> AttentionState:
        if layer not in self.states:
            raise ConfigError(f"no captured attention state for layer {layer!r}")
        return self.states[layer]

    def ordered_states(self) -> list[AttentionState]:
        return [self.states[name] for name in self.order]


@runtime_checkable
class VideoBackbone(Protocol):
    spatial_attention_layers: tuple[str, ...]

    def predict_noise(self, z: LatentVideo, t: int, cond=None, lora=None, attention=None) -> LatentVideo: ...

    def predict_noise_batched(self, data: torch.Tensor, t: torch.Tensor, cond=None, lora=None) -> torch.Tensor: ...

    def extract_features(self, z: LatentVideo, t: int, cond=None, layer=None, lora=None) -> FeatureVolume: ...

    def capture_attention(self, z: LatentVideo, t: int, cond=None, lora=None) -> list[AttentionState]: ...

    def lora_targets(self) -> list[LoraTarget]: ...


class _Ctx:
    __slots__ = ("temb", "lora", "tap", "frames", "spatial_layers")

    def __init__(self, temb, lora, tap, frames, spatial_layers):
        self.temb = temb
        self.lora = lora
        self.tap = tap
        self.frames = frames
        self.spatial_layers = spatial_layers


def _apply_lora(linear: nn.Linear, x: torch.Tensor, lora, name: str) -> torch.Tensor:
    y = linear(x)
    if lora is not None:
        delta = lora.delta(name, x)
        if delta is not None:
            y = y + delta
    return y


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    n, tq, c = q.shape
    tk = k.shape[1]
    d = c // heads
    qh = q.reshape(n, tq, heads, d).transpose(1, 2)
    kh = k.reshape(n, tk, heads, d).transpose(1, 2)
    vh = v.reshape(n, tk, heads, d).transpose(1, 2)
    weights = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = weights @ vh
    return out.transpose(1, 2).reshape(n, tq, c)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, ctx: _Ctx):
        h = self.conv1(F.gelu(self.norm1(x)))
        h = h + self.time_proj(ctx.temb)[:, :, None, None]
        h = self.conv2(F.gelu(self.norm2(h)))
        return h + self.skip(x)


class _SpatialSelfAttention(nn.Module):
    """Per-frame self-attention over spatial tokens, with LoRA and tap hooks."""

    def __init__(self, channels: int, heads: int, name: str):
        super().__init__()
        self.name = name
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, ctx: _Ctx):
        n, c, hh, ww = x.shape
        tokens = self.norm(x).reshape(n, c, hh * ww).transpose(1, 2)
        q = _apply_lora(self.q, tokens, ctx.lora, f"{self.name}.q")
        k = _apply_lora(self.k, tokens, ctx.lora, f"{self.name}.k")
        v = _apply_lora(self.v, tokens, ctx.lora, f"{self.name}.v")
        tap = ctx.tap
        if tap is not None and tap.applies(self.name, ctx.spatial_layers):
            if tap.mode == "capture":
                tap.record(AttentionState(self.name, q.detach().clone(), k.detach().clone(),
                                          v.detach().clone(), c // self.heads))
            else:
                state = tap.lookup(self.name)
                if state.keys.shape[0] != n or state.keys.shape[2] != c:
                    raise ConfigError(
                        f"captured K/V shape {tuple(state.keys.shape)} incompatible with layer {self.name}"
                    )
                k, v = state.keys, state.values
        y = self.out(_attention(q, k, v, self.heads))
        return x + y.transpose(1, 2).reshape(n, c, hh, ww)


class _MotionModule(nn.Module):
    """Temporal self-attention per spatial location, wrapped in project-in/out.

    The project-out layer is zero-initialized, making the block an exact
    identity until trained. Attention carries no positional encoding, so it
    is equivariant to frame permutations.
    """

    def __init__(self, channels: int, heads: int, name: str):
        super().__init__()
        self.name = name
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.proj_in = nn.Linear(channels, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj_out = nn.Linear(channels, channels)

    def forward(self, x, ctx: _Ctx):
        n, c, hh, ww = x.shape
        l = ctx.frames
        b = n // l
        seq = x.reshape(b, l, c, hh * ww).permute(0, 3, 1, 2).reshape(b * hh * ww, l, c)
        h = self.proj_in(self.norm(seq))
        q = _apply_lora(self.q, h, ctx.lora, f"{self.name}.q")
        k = _apply_lora(self.k, h, ctx.lora, f"{self.name}.k")
        v = _apply_lora(self.v, h, ctx.lora, f"{self.name}.v")
        tap = ctx.tap
        if tap is not None and tap.layers is not None and self.name in tap.layers:
            # Temporal K/V swapping is off unless a plan names this layer explicitly.
            if tap.mode == "capture":
                tap.record(AttentionState(self.name, q.detach().clone(), k.detach().clone(),
                                          v.detach().clone(), c // self.heads))
            else:
                state = tap.lookup(self.name)
                k, v = state.keys, state.values
        y = self.proj_out(_attention(q, k, v, self.heads))
        out = seq + y
        return out.reshape(b, hh * ww, l, c).permute(0, 2, 3, 1).reshape(n, c, hh, ww)


def _sinusoidal_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ToyVideoUNet(nn.Module):
    """Seed-deterministic desk-scale video U-Net.

    Decoder taps (for feature extraction): 0 = upsample conv output,
    1 = decoder residual block, 2 = decoder spatial attention (default),
    3 = decoder motion module.
    """

    DECODER_LAYERS = 4

    def __init__(self, config: BackboneConfig | None = None, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.config = config or BackboneConfig()
        self.dtype = dtype
        w0, w1 = self.config.widths
        temb_dim = 2 * w1
        heads = self.config.heads

        self.time_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.GELU(), nn.Linear(temb_dim, temb_dim))
        self.cond_proj = nn.Linear(self.config.cond_dim, temb_dim)

        self.conv_in = nn.Conv2d(self.config.in_channels, w0, 3, padding=1)
        self.enc_res = _ResBlock(w0, w0, temb_dim)
        self.enc_attn = _SpatialSelfAttention(w0, heads, "enc.attn")
        self.enc_motion = _MotionModule(w0, heads, "enc.motion")
        self.down = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.mid_res = _ResBlock(w1, w1, temb_dim)
        self.mid_attn = _SpatialSelfAttention(w1, heads, "mid.attn")
        self.mid_motion = _MotionModule(w1, heads, "mid.motion")
        self.up_conv = nn.Conv2d(w1, w0, 3, padding=1)
        self.dec_res = _ResBlock(2 * w0, w0, temb_dim)
        self.dec_attn = _SpatialSelfAttention(w0, heads, "dec.attn")
        self.dec_motion = _MotionModule(w0, heads, "dec.motion")
        self.out_norm = nn.GroupNorm(8, w0)
        self.conv_out = nn.Conv2d(w0, self.config.in_channels, 3, padding=1)

        self.to(self.dtype)
        self._init_parameters()
        for p in self.parameters():
            p.requires_grad_(False)

    # ------------------------------------------------------------------
    # initialization / serialization
    # ------------------------------------------------------------------
    def _init_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        for name, p in sorted(self.named_parameters()):
            with torch.no_grad():
                if "motion" in name and "proj_out" in name:
                    p.zero_()
                elif "norm" in name:
                    p.fill_(1.0) if name.endswith("weight") else p.zero_()
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=self.dtype) / math.sqrt(fan_in))

    def save(self, prefix: Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        names = sorted(n for n, _ in self.named_parameters())
        params = dict(self.named_parameters())
        blob = np.concatenate([params[n].detach().numpy().ravel().astype("<f8") for n in names])
        blob.tofile(prefix.with_suffix(".bin"))
        manifest = {
            "config": asdict(self.config),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "shapes": {n: list(params[n].shape) for n in names},
            "dtype": "<f8",
        }
        prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, prefix: Path, dtype: torch.dtype = torch.float64) -> "ToyVideoUNet":
        prefix = Path(prefix)
        manifest = json.loads(prefix.with_suffix(".json").read_text())
        cfg = manifest["config"]
        cfg["widths"] = tuple(cfg["widths"])
        model = cls(BackboneConfig(**cfg), dtype=dtype)
        blob = np.fromfile(prefix.with_suffix(".bin"), dtype=manifest["dtype"])
        offset = 0
        params = dict(model.named_parameters())
        for name in sorted(manifest["shapes"]):
            shape = manifest["shapes"][name]
            n = int(np.prod(shape))
            if name not in params or list(params[name].shape) != shape:
                raise ConfigError(f"manifest parameter {name} does not match model structure")
            with torch.no_grad():
                params[name].copy_(torch.from_numpy(blob[offset:offset + n].reshape(shape).copy()))
            offset += n
        return model

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------
    @property
    def spatial_attention_layers(self) -> tuple[str, ...]:
        return ("enc.attn", "mid.attn", "dec.attn")

    @property
    def temporal_attention_layers(self) -> tuple[str, ...]:
        return ("enc.motion", "mid.motion", "dec.motion")

    def lora_targets(self) -> list[LoraTarget]:
        targets = []
        for name, module in (("enc.attn", self.enc_attn), ("mid.attn", self.mid_attn), ("dec.attn", self.dec_attn),
                             ("enc.motion", self.enc_motion), ("mid.motion", self.mid_motion),
                             ("dec.motion", self.dec_motion)):
            for proj in ("q", "k", "v"):
                linear = getattr(module, proj)
                targets.append(LoraTarget(f"{name}.{proj}", linear.in_features, linear.out_features))
        return targets

    def _ctx(self, batch: int, frames: int, t: torch.Tensor, cond, lora, tap) -> _Ctx:
        temb = self.time_mlp(_sinusoidal_embedding(t, self.time_dim, self.dtype))
        if cond is not None and not cond.is_null:
            if cond.embedding.shape[1] != self.config.cond_dim:
                raise ConfigError(
                    f"conditioning dim {cond.embedding.shape[1]} does not match backbone cond_dim {self.config.cond_dim}"
                )
            temb = temb + self.cond_proj(cond.embedding.to(self.dtype).mean(dim=0))[None, :]
        temb = temb.repeat_interleave(frames, dim=0)
        return _Ctx(temb=temb, lora=lora, tap=tap, frames=frames, spatial_layers=self.spatial_attention_layers)

    def _forward(self, data: torch.Tensor, t: torch.Tensor, cond=None, lora=None, tap=None):
        if data.ndim != 5:
            raise ConfigError(f"expected (batch, frames, c, h, w), got {tuple(data.shape)}")
        b, l, c, h, w = data.shape
        if c != self.config.in_channels:
            raise ConfigError(f"latent has {c} channels, backbone expects {self.config.in_channels}")
        if h % 2 != 0 or w % 2 != 0:
            raise ConfigError(f"latent spatial size ({h}, {w}) must be even for the 2-level toy backbone")
        ctx = self._ctx(b, l, t, cond, lora, tap)
        x = data.reshape(b * l, c, h, w).to(self.dtype)
        e = self.enc_res(self.conv_in(x), ctx)
        e = self.enc_attn(e, ctx)
        e = self.enc_motion(e, ctx)
        m = self.mid_res(self.down(e), ctx)
        m = self.mid_attn(m, ctx)
        m = self.mid_motion(m, ctx)
        u = self.up_conv(F.interpolate(m, scale_factor=2, mode="nearest"))
        taps = [u]
        y = self.dec_res(torch.cat([u, e], dim=1), ctx)
        taps.append(y)
        y = self.dec_attn(y, ctx)
        taps.append(y)
        y = self.dec_motion(y, ctx)
        taps.append(y)
        eps = self.conv_out(F.gelu(self.out_norm(y))) * self.config.output_scale
        return eps.reshape(b, l, c, h, w), taps, (b, l)

    def predict_noise_batched(self, data: torch.Tensor, t: torch.Tensor, cond=None, lora=None) -> torch.Tensor:
        eps, _, _ = self._forward(data, t, cond=cond, lora=lora)
        return eps

    def predict_noise(self, z: LatentVideo, t: int, cond=None, lora=None, attention=None) -> LatentVideo:
        if t < 0:
            raise ConfigError(f"step index must be non-negative, got {t}")
        t_tensor = torch.tensor([t], dtype=torch.long)
        eps, _, _ = self._forward(z.data[None], t_tensor, cond=cond, lora=lora, tap=attention)
        return z.with_data(eps[0])

    def extract_features(self, z: LatentVideo, t: int, cond=None, layer=None, lora=None) -> FeatureVolume:
        layer = self.config.feature_layer_index if layer is None else layer
        if not 0 <= layer < self.DECODER_LAYERS:
            raise ConfigError(f"feature layer index {layer} out of range [0, {self.DECODER_LAYERS})")
        t_tensor = torch.tensor([t], dtype=torch.long)
        _, taps, (b, l) = self._forward(z.data[None], t_tensor, cond=cond, lora=lora)
        feat = taps[layer]
        h_pix, w_pix = z.pixel_size
        resized = F.interpolate(feat, size=(h_pix // 2, w_pix // 2), mode="bilinear", align_corners=False)
        return FeatureVolume(resized)

    def capture_attention(self, z: LatentVideo, t: int, cond=None, lora=None) -> list[AttentionState]:
        tap = AttentionTap("capture", None)
        self.predict_noise(z, t, cond=cond, lora=lora, attention=tap)
        return tap.ordered_states()


class TransparentBackbone:
    """Zero noise predictor whose feature map is the upsampled latent itself.

    With this backbone the DDIM trajectory is the pure signal-rate scaling
    z_t = alpha_t * z_0, and motion supervision acts directly on latent
    content, which makes drag behavior inspectable end to end.
    """

    spatial_attention_layers: tuple[str, ...] = ()

    def __init__(self, dtype: torch.dtype = torch.float64):
        self.dtype = dtype

    def predict_noise(self, z: LatentVideo, t: int, cond=None, lora=None, attention=None) -> LatentVideo:
        return z.with_data(torch.zeros_like(z.data))

    def predict_noise_batched(self, data: torch.Tensor, t: torch.Tensor, cond=None, lora=None) -> torch.Tensor:
        return torch.zeros_like(data)

    def extract_features(self, z: LatentVideo, t: int, cond=None, layer=None, lora=None) -> FeatureVolume:
        h_pix, w_pix = z.pixel_size
        resized = F.interpolate(z.data, size=(h_pix // 2, w_pix // 2), mode="bilinear", align_corners=False)
        return FeatureVolume(resized)

    def capture_attention(self, z: LatentVideo, t: int, cond=None, lora=None) -> list[AttentionState]:
        return []

    def lora_targets(self) -> list[LoraTarget]:
        return []
