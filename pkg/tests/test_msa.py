import math

import numpy as np
import pytest
import torch

from dragedit.codec import LatentVideo, ToyCodec
from dragedit.ddim import DdimSampler
from dragedit.errors import ConfigError, PairingError
from dragedit.msa import MsaDenoiser, MsaPlan, msa_attention
from dragedit.unet import AttentionTap

from conftest import small_latent


def oracle_softmax_attention(q, k, v, d):
    """Independent pure-python softmax attention for tiny cases."""
    rows = []
    for qi in q:
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k]
        m = max(logits)
        exp = [math.exp(x - m) for x in logits]
        z = sum(exp)
        weights = [e / z for e in exp]
        rows.append([sum(w * vj[c] for w, vj in zip(weights, v)) for c in range(len(v[0]))])
    return rows


class TestMsaAttention:
    def test_self_as_source_equals_standard_attention(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.randn(6, 8, dtype=torch.float64, generator=gen)
        out = msa_attention(x, x.clone(), x.clone(), d=8)
        expected = torch.softmax(x @ x.T / math.sqrt(8), dim=-1) @ x
        assert float((out - expected).abs().max()) < 1e-6

    def test_constant_value_rows_collapse_exactly(self):
        gen = torch.Generator().manual_seed(1)
        q = torch.randn(5, 4, dtype=torch.float64, generator=gen)
        k = torch.randn(7, 4, dtype=torch.float64, generator=gen)
        c = torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64)
        v = c.repeat(7, 1)
        out = msa_attention(q, k, v, d=4)
        # convex combination of identical rows: every output row equals c
        assert float((out - c).abs().max()) < 1e-12

    def test_two_token_hand_case_matches_oracle(self):
        q = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
        k = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
        v = torch.tensor([[2.0], [4.0]], dtype=torch.float64)
        out = msa_attention(q, k, v, d=1)
        expected = oracle_softmax_attention(q.tolist(), k.tolist(), v.tolist(), 1)
        assert abs(out[0, 0].item() - expected[0][0]) < 1e-10
        assert abs(out[1, 0].item() - expected[1][0]) < 1e-10
        # second query is uniform over keys: plain mean of values
        assert abs(out[1, 0].item() - 3.0) < 1e-12

    def test_softmax_rows_sum_to_one(self):
        gen = torch.Generator().manual_seed(2)
        q = torch.randn(4, 6, dtype=torch.float64, generator=gen)
        k = torch.randn(9, 6, dtype=torch.float64, generator=gen)
        weights = torch.softmax(q @ k.T / math.sqrt(6), dim=-1)
        assert float((weights.sum(dim=-1) - 1.0).abs().max()) < 1e-8

    def test_invalid_dimension_rejected(self):
        x = torch.zeros(2, 2, dtype=torch.float64)
        with pytest.raises(ConfigError):
            msa_attention(x, x, x, d=0)

    def test_incompatible_tokens_rejected(self):
        q = torch.zeros(2, 3, dtype=torch.float64)
        k = torch.zeros(4, 5, dtype=torch.float64)
        with pytest.raises(ConfigError):
            msa_attention(q, k, k, d=3)


class TestDenoisePair:
    def test_identical_inputs_give_identical_outputs(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z0 = small_latent(3, frames=2)
        traj = sampler.invert(z0, n_steps=10)
        result = denoiser.denoise_pair(traj[10], traj[10].clone(), 10)
        assert torch.equal(result.original_latent.data, result.edited_latent.data)

    def test_identity_degeneracy_per_designated_layer(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z = small_latent(4, frames=2)
        for layer in toy_backbone.spatial_attention_layers:
            plan = MsaPlan(layers=(layer,))
            result = denoiser.denoise_pair(z, z.clone(), 5, plan=plan)
            plain = sampler.denoise(z, 5)
            assert float((result.edited_latent.data - plain.data).abs().max()) < 1e-6

    def test_empty_layer_set_equals_plain_denoise(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z = small_latent(5, frames=2)
        z_hat = z.with_data(z.data + 0.1)
        result = denoiser.denoise_pair(z, z_hat, 8, plan=MsaPlan(layers=()))
        plain = sampler.denoise(z_hat, 8)
        assert torch.equal(result.edited_latent.data, plain.data)

    def test_swapped_kv_changes_edited_output(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        gen = torch.Generator().manual_seed(6)
        z = small_latent(6, frames=2)
        z_hat = z.with_data(z.data + 0.3 * torch.randn(z.data.shape, generator=gen, dtype=torch.float64))
        with_msa = denoiser.denoise_pair(z, z_hat, 8)
        without = sampler.denoise(z_hat, 8)
        assert not torch.equal(with_msa.edited_latent.data, without.data)
        # the original branch is unaffected by the swap
        assert torch.equal(with_msa.original_latent.data, sampler.denoise(z, 8).data)

    def test_pair_determinism(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z = small_latent(7, frames=2)
        z_hat = z.with_data(z.data * 1.1)
        a = denoiser.denoise_pair(z, z_hat, 6)
        b = denoiser.denoise_pair(z, z_hat, 6)
        assert torch.equal(a.edited_latent.data, b.edited_latent.data)
        assert torch.equal(a.original_latent.data, b.original_latent.data)

    def test_step_mismatch_raises(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z = small_latent(8)
        with pytest.raises(PairingError):
            denoiser.denoise_pair(z, z.clone(), 6, edited_step=5)

    def test_shape_mismatch_raises(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        with pytest.raises(PairingError):
            denoiser.denoise_pair(small_latent(9, frames=2), small_latent(9, frames=3), 6)

    def test_codec_decode_attached(self, toy_backbone, schedule):
        codec = ToyCodec()
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z = small_latent(10, frames=2)
        result = denoiser.denoise_pair(z, z.clone(), 3, codec=codec, fps=6.0)
        assert result.edited_video is not None
        assert result.edited_video.frames.shape == (2, 64, 64, 3)
        assert result.edited_video.fps == 6.0

    def test_msa_active_range_limits_swapping(self, toy_backbone, schedule):
        sampler = DdimSampler(toy_backbone, schedule)
        denoiser = MsaDenoiser(toy_backbone, sampler)
        z = small_latent(11, frames=2)
        z_hat = z.with_data(z.data + 0.2)
        never = denoiser.denoise_pair(z, z_hat, 6, plan=MsaPlan(t_start=7, t_end=9))
        plain = sampler.denoise(z_hat, 6)
        assert torch.equal(never.edited_latent.data, plain.data)
