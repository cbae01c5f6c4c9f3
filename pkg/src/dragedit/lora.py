"""Sample-specific low-rank adaptation of the backbone's attention projections.

Rank-r deltas (A: r x d_in, B: d_out x r) attach to the query/key/value
projections of every attention module, spatial and temporal. B starts at
zero so a fresh injection never changes the forward pass. Training minimizes
the standard denoising objective: draw a step t and Gaussian noise eps, form
alpha_t * z + sigma_t * eps, and regress the predicted noise onto eps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from .codec import LatentVideo
from .ddim import NoiseSchedule
from .errors import ConfigError, TrainingError
from .utils import derive_seed, stable_hash


@dataclass
class LoRATrainConfig:
    epochs: int = 100
    batch_size: int = 12
    learning_rate: float = 5e-4
    rank: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0 or self.rank <= 0:
            raise ConfigError(f"invalid LoRA training config: {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LoRATrainConfig":
        return cls(**d)


class LoRAWeights:
    """Per-target (A, B) delta matrices with scaling 1/rank."""

    def __init__(self, rank: int, pairs: dict[str, tuple[torch.Tensor, torch.Tensor]]):
        self.rank = rank
        self.scaling = 1.0 / rank
        self.pairs = pairs

    @property
    def target_names(self) -> list[str]:
        return sorted(self.pairs)

    def delta(self, name: str, x: torch.Tensor) -> torch.Tensor | None:
        pair = self.pairs.get(name)
        if pair is None:
            return None
        a, b = pair
        return (x @ a.T @ b.T) * self.scaling

    def parameters(self) -> list[torch.Tensor]:
        return [t for name in self.target_names for t in self.pairs[name]]

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def clone(self) -> "LoRAWeights":
        return LoRAWeights(self.rank, {n: (a.detach().clone(), b.detach().clone())
                                       for n, (a, b) in self.pairs.items()})

    def save(self, prefix: Path, config_hash: str = "") -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        chunks, shapes = [], {}
        for name in self.target_names:
            a, b = self.pairs[name]
            chunks += [a.detach().numpy().ravel().astype("<f8"), b.detach().numpy().ravel().astype("<f8")]
            shapes[name] = [list(a.shape), list(b.shape)]
        np.concatenate(chunks).tofile(prefix.with_suffix(".bin"))
        manifest = {"rank": self.rank, "targets": shapes, "config_hash": config_hash, "dtype": "<f8"}
        prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, prefix: Path, dtype: torch.dtype = torch.float64) -> "LoRAWeights":
        prefix = Path(prefix)
        manifest = json.loads(prefix.with_suffix(".json").read_text())
        blob = np.fromfile(prefix.with_suffix(".bin"), dtype=manifest["dtype"])
        pairs, offset = {}, 0
        for name in sorted(manifest["targets"]):
            a_shape, b_shape = manifest["targets"][name]
            tensors = []
            for shape in (a_shape, b_shape):
                n = int(np.prod(shape))
                tensors.append(torch.from_numpy(blob[offset:offset + n].reshape(shape).copy()).to(dtype))
                offset += n
            pairs[name] = (tensors[0], tensors[1])
        return cls(manifest["rank"], pairs)


def inject(backbone, rank: int, seed: int = 0, dtype: torch.dtype = torch.float64) -> LoRAWeights:
    """Create zero-effect deltas for every q/k/v projection the backbone exposes."""
    targets = backbone.lora_targets()
    gen = torch.Generator().manual_seed(derive_seed(seed, "lora-init"))
    pairs = {}
    for target in sorted(targets, key=lambda t: t.name):
        if rank > min(target.d_in, target.d_out):
            raise ConfigError(
                f"rank {rank} exceeds min dimension {min(target.d_in, target.d_out)} of target {target.name}"
            )
        a = torch.randn(rank, target.d_in, generator=gen, dtype=dtype) / np.sqrt(target.d_in)
        b = torch.zeros(target.d_out, rank, dtype=dtype)
        pairs[target.name] = (a, b)
    return LoRAWeights(rank, pairs)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between drawn and predicted noise."""
    return ((eps - eps_hat) ** 2).mean()


def train_lora(backbone, z0: LatentVideo, schedule: NoiseSchedule, cfg: LoRATrainConfig,
               cond=None) -> tuple[LoRAWeights, list[float]]:
    """Fit sample-specific deltas on one video latent.

    Each epoch draws one batch of ``batch_size`` independent (t, eps) pairs
    over the same latent (the sample is a single video, so batching is over
    noise draws) and takes one optimizer step. Returns the trained weights
    and the per-epoch mean loss trace.
    """
    weights = inject(backbone, cfg.rank, seed=cfg.seed)
    for p in weights.parameters():
        p.requires_grad_(True)
    if cfg.epochs == 0:
        for p in weights.parameters():
            p.requires_grad_(False)
        return weights, []

    optimizer = torch.optim.AdamW(weights.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "lora-train"))
    data = z0.data.detach()
    alphas = torch.from_numpy(schedule.alphas).to(data.dtype)
    sigmas = torch.from_numpy(schedule.sigmas).to(data.dtype)
    trace = []
    for epoch in range(cfg.epochs):
        t = torch.randint(1, schedule.last_step + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn((cfg.batch_size, *data.shape), generator=gen, dtype=data.dtype)
        a = alphas[t][:, None, None, None, None]
        s = sigmas[t][:, None, None, None, None]
        noisy = a * data[None] + s * eps
        eps_hat = backbone.predict_noise_batched(noisy, t, cond=cond, lora=weights)
        loss = diffusion_loss(eps, eps_hat)
        if not torch.isfinite(loss):
            raise TrainingError("loss became non-finite", step=epoch)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        trace.append(float(loss.detach()))
    for p in weights.parameters():
        p.requires_grad_(False)
    return weights, trace


def train_config_hash(cfg: LoRATrainConfig, extra: dict | None = None) -> str:
    payload = cfg.to_dict()
    if extra:
        payload = {**payload, **extra}
    return stable_hash(payload)
