import numpy as np
import pytest
import torch

from dragedit.codec import LatentVideo
from dragedit.ddim import DdimSampler, NoiseSchedule
from dragedit.errors import ConfigError
from dragedit.unet import TransparentBackbone

from conftest import small_latent


class TestSchedule:
    def test_invariants_hold_at_construction(self, schedule):
        a, s = schedule.alphas, schedule.sigmas
        assert a[0] == 1.0 and s[0] == 0.0
        assert (np.diff(a) < 0).all()
        assert (np.diff(s) > 0).all()
        assert np.abs(a**2 + s**2 - 1.0).max() <= 1e-12

    def test_length(self, schedule):
        assert schedule.last_step == 50

    def test_bad_schedules_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSchedule(np.array([0.9, 0.5]), np.array([np.sqrt(1 - 0.81), np.sqrt(0.75)]))
        with pytest.raises(ConfigError):
            NoiseSchedule(np.array([1.0, 0.8]), np.array([0.0, 0.5]))  # alpha^2+sigma^2 != 1

    def test_pair_out_of_range(self, schedule):
        with pytest.raises(ConfigError):
            schedule.pair(51)


class TestZeroPredictor:
    def test_inversion_scales_by_alpha(self, schedule):
        sampler = DdimSampler(TransparentBackbone(), schedule)
        z0 = small_latent(0)
        traj = sampler.invert(z0)
        for t in (1, 10, 40, 50):
            expected = schedule.alphas[t] * z0.data
            assert float((traj[t].data - expected).abs().max()) < 1e-13

    def test_zero_steps_trajectory_contains_only_z0(self, schedule):
        sampler = DdimSampler(TransparentBackbone(), schedule)
        z0 = small_latent(1)
        traj = sampler.invert(z0, n_steps=0)
        assert traj.steps == [0]
        assert torch.equal(traj[0].data, z0.data)

    def test_denoise_inverts_alpha_scaling_exactly(self, schedule):
        sampler = DdimSampler(TransparentBackbone(), schedule)
        z0 = small_latent(2)
        t = 30
        z_t = z0.with_data(torch.tensor(schedule.alphas[t]) * z0.data)
        rec = sampler.denoise(z_t, t)
        assert float((rec.data - z0.data).abs().max()) < 1e-13

    def test_single_step_is_alpha_ratio(self, schedule):
        sampler = DdimSampler(TransparentBackbone(), schedule)
        z = small_latent(3)
        out = sampler.single_step_denoise(z, 10)
        ratio = schedule.alphas[9] / schedule.alphas[10]
        assert torch.allclose(out.data, ratio * z.data, atol=1e-14)


class TestToyBackbone:
    def test_roundtrip_within_tolerance(self, toy_backbone, schedule, random_latent):
        sampler = DdimSampler(toy_backbone, schedule)
        traj = sampler.invert(random_latent)
        rec = sampler.denoise(traj[50], 50)
        assert float((rec.data - random_latent.data).abs().max()) < 1e-3

    def test_invert_and_denoise_bit_reproducible(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        z0 = small_latent(4)
        t1 = sampler.invert(z0, n_steps=10)
        t2 = sampler.invert(z0, n_steps=10)
        assert torch.equal(t1[10].data, t2[10].data)
        d1 = sampler.denoise(t1[10], 10)
        d2 = sampler.denoise(t2[10], 10)
        assert torch.equal(d1.data, d2.data)

    def test_denoise_from_step_zero_is_identity(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        z = small_latent(5)
        assert torch.equal(sampler.denoise(z, 0).data, z.data)

    def test_composed_single_steps_equal_denoise(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        z0 = small_latent(6, frames=2)
        traj = sampler.invert(z0, n_steps=8)
        z = traj[8]
        with torch.no_grad():
            for t in range(8, 0, -1):
                z = sampler.single_step_denoise(z, t)
        full = sampler.denoise(traj[8], 8)
        assert torch.equal(z.data, full.data)

    def test_single_step_requires_positive_step(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        with pytest.raises(ValueError):
            sampler.single_step_denoise(small_latent(7), 0)

    def test_single_step_gradient_matches_finite_differences(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        z = small_latent(8, frames=2)
        t = 5

        def scalar(data):
            return sampler.single_step_denoise(LatentVideo(data, 8), t).data.abs().sum()

        data = z.data.clone().requires_grad_(True)
        grad = torch.autograd.grad(scalar(data), data)[0]
        rng = np.random.default_rng(3)
        eps = 1e-3
        for _ in range(5):
            idx = tuple(rng.integers(0, s) for s in z.data.shape)
            plus = z.data.clone()
            plus[idx] += eps
            minus = z.data.clone()
            minus[idx] -= eps
            fd = (scalar(plus) - scalar(minus)).item() / (2 * eps)
            assert abs(fd - grad[idx].item()) <= 1e-4 * max(1.0, abs(fd))

    def test_trajectory_contains_requested_steps(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        traj = sampler.invert(small_latent(9), n_steps=5)
        assert traj.steps == [0, 1, 2, 3, 4, 5]

    def test_too_many_steps_rejected(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        with pytest.raises(ConfigError):
            sampler.invert(small_latent(9), n_steps=51)
