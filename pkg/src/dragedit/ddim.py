"""Deterministic DDIM inversion and denoising over latent videos.

No classifier-free guidance is applied anywhere: inversion errors grow when
conditioning is amplified, so both directions run the bare backbone.

Schedule indices count from the clean latent: step 0 is z_0, step T is the
noisiest latent. Each transition uses the variance-preserving update

    toward noise:  z_t     = a_t * x0 + s_t * eps,   x0 = (z_{t-1} - s_{t-1} eps) / a_{t-1}
    toward clean:  z_{t-1} = a_{t-1} * x0 + s_{t-1} * eps,  x0 = (z_t - s_t eps) / a_t

with eps the backbone's noise prediction at the transition's upper step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import LatentVideo
from .errors import ConfigError, NumericsError

DEFAULT_STEPS = 50
DEFAULT_TRAIN_STEPS = 1000
DEFAULT_ALPHA_FINAL = 0.3
DEFAULT_REFINE_ITERS = 3


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step (alpha_t, sigma_t) pairs with alpha^2 + sigma^2 = 1."""

    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        a, s = self.alphas, self.sigmas
        if a.ndim != 1 or a.shape != s.shape or a.shape[0] < 1:
            raise ConfigError("schedule arrays must be 1-d and equally sized")
        if a[0] != 1.0 or s[0] != 0.0:
            raise ConfigError("schedule must start at alpha_0 = 1, sigma_0 = 0")
        if not (np.diff(a) < 0).all():
            raise ConfigError("alpha must be strictly decreasing")
        if not (np.diff(s) > 0).all():
            raise ConfigError("sigma must be strictly increasing")
        if not np.allclose(a**2 + s**2, 1.0, atol=1e-12, rtol=0):
            raise ConfigError("alpha_t^2 + sigma_t^2 must equal 1 for every step")

    @classmethod
    def linear_signal(cls, n_steps: int = DEFAULT_STEPS, train_steps: int = DEFAULT_TRAIN_STEPS,
                      alpha_final: float = DEFAULT_ALPHA_FINAL) -> "NoiseSchedule":
        """Signal rate decreasing linearly over the training grid, strided to n_steps."""
        if not 1 <= n_steps <= train_steps:
            raise ConfigError(f"n_steps must be in [1, {train_steps}], got {n_steps}")
        if not 0.0 < alpha_final < 1.0:
            raise ConfigError("alpha_final must lie strictly inside (0, 1)")
        idx = np.round(np.linspace(0, train_steps, n_steps + 1)).astype(int)
        alphas = 1.0 - (1.0 - alpha_final) * idx / train_steps
        alphas[0] = 1.0
        sigmas = np.sqrt(1.0 - alphas**2)
        return cls(alphas, sigmas)

    @property
    def last_step(self) -> int:
        return len(self.alphas) - 1

    def pair(self, t: int) -> tuple[float, float]:
        if not 0 <= t <= self.last_step:
            raise ConfigError(f"step {t} outside schedule [0, {self.last_step}]")
        return float(self.alphas[t]), float(self.sigmas[t])


@dataclass
class InversionTrajectory:
    """Map step -> latent along one DDIM inversion, z_0 included at step 0."""

    latents: dict[int, LatentVideo]

    def __post_init__(self):
        if 0 not in self.latents:
            raise ConfigError("trajectory must contain the clean latent at step 0")

    def __getitem__(self, t: int) -> LatentVideo:
        if t not in self.latents:
            raise ConfigError(f"trajectory does not contain step {t}")
        return self.latents[t]

    def __contains__(self, t: int) -> bool:
        return t in self.latents

    @property
    def steps(self) -> list[int]:
        return sorted(self.latents)


class DdimSampler:
    """Deterministic inversion/denoising driver bound to a backbone and schedule."""

    def __init__(self, backbone, schedule: NoiseSchedule):
        self.backbone = backbone
        self.schedule = schedule

    def _predict(self, z: LatentVideo, t: int, cond, lora, attention=None) -> torch.Tensor:
        return self.backbone.predict_noise(z, t, cond=cond, lora=lora, attention=attention).data

    def invert(self, z0: LatentVideo, n_steps: int | None = None, cond=None, lora=None,
               refine_iters: int = DEFAULT_REFINE_ITERS) -> InversionTrajectory:
        """Walk z_0 up to z_T by adding back the model-predicted noise.

        Each transition first applies the explicit DDIM update (prediction
        taken at the current latent), then runs ``refine_iters`` fixed-point
        iterations that re-evaluate the prediction at the candidate z_t, so
        the transition converges to the exact preimage of the denoising
        step. refine_iters=0 is the classic explicit inversion.
        """
        n_steps = self.schedule.last_step if n_steps is None else n_steps
        if n_steps > self.schedule.last_step:
            raise ConfigError(f"requested {n_steps} steps but schedule has {self.schedule.last_step}")
        latents = {0: z0.clone()}
        z = z0.data
        with torch.no_grad():
            for t in range(1, n_steps + 1):
                a_prev, s_prev = self.schedule.pair(t - 1)
                a_t, s_t = self.schedule.pair(t)
                eps = self._predict(z0.with_data(z), t, cond, lora)
                z_t = a_t * (z - s_prev * eps) / a_prev + s_t * eps
                for _ in range(refine_iters):
                    eps = self._predict(z0.with_data(z_t), t, cond, lora)
                    z_t = a_t * (z - s_prev * eps) / a_prev + s_t * eps
                z = z_t
                if not torch.isfinite(z).all():
                    raise NumericsError("inversion produced non-finite latent", step=t)
                latents[t] = z0.with_data(z.clone())
        return InversionTrajectory(latents)

    def _step_to_prev(self, z: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        a_t, s_t = self.schedule.pair(t)
        a_prev, s_prev = self.schedule.pair(t - 1)
        x0 = (z - s_t * eps) / a_t
        return a_prev * x0 + s_prev * eps

    def denoise(self, z_t: LatentVideo, from_step: int, cond=None, lora=None, attention=None) -> LatentVideo:
        if not 0 <= from_step <= self.schedule.last_step:
            raise ConfigError(f"from_step {from_step} outside schedule")
        z = z_t.data
        with torch.no_grad():
            for t in range(from_step, 0, -1):
                eps = self._predict(z_t.with_data(z), t, cond, lora, attention=attention)
                z = self._step_to_prev(z, eps, t)
                if not torch.isfinite(z).all():
                    raise NumericsError("denoising produced non-finite latent", step=t)
        return z_t.with_data(z.clone())

    def single_step_denoise(self, z_t: LatentVideo, t: int, cond=None, lora=None) -> LatentVideo:
        """One DDIM transition t -> t-1 with the autograd path to z_t preserved."""
        if t < 1:
            raise ValueError(f"single-step denoise needs t >= 1, got {t}")
        eps = self._predict(z_t, t, cond, lora)
        return z_t.with_data(self._step_to_prev(z_t.data, eps, t))
