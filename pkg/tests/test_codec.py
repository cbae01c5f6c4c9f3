import numpy as np
import pytest
import torch

from dragedit.codec import (
    LatentVideo,
    ToyCodec,
    VideoFrames,
    load_frames,
    load_latent,
    save_frames,
    save_latent,
)
from dragedit.errors import ConfigError, NumericsError


def block_constant_video(rng, l=4, hb=8, wb=8, factor=8):
    """Video whose 8x8 blocks are constant (codec roundtrip is lossless)."""
    blocks = rng.integers(0, 256, (l, hb, wb, 3)).astype(np.float64)
    frames = np.repeat(np.repeat(blocks, factor, axis=1), factor, axis=2)
    return VideoFrames(frames, fps=8)


def test_encode_shape_and_dtype(codec, random_video):
    latent = codec.encode(random_video)
    assert latent.data.shape == (6, 4, 8, 8)
    assert latent.data.dtype == torch.float64
    assert latent.scale_factor == 8


def test_constant_gray_video_encodes_to_constant_latent(codec):
    video = VideoFrames(np.full((3, 16, 16, 3), 100.0), fps=8)
    latent = codec.encode(video)
    expected = 100.0 / 127.5 - 1.0
    assert torch.allclose(latent.data, torch.full_like(latent.data, expected))


def test_dimension_not_divisible_names_axis(codec):
    with pytest.raises(ConfigError, match="height 60"):
        codec.encode(VideoFrames(np.zeros((2, 60, 64, 3)), fps=8))
    with pytest.raises(ConfigError, match="width 60"):
        codec.encode(VideoFrames(np.zeros((2, 64, 60, 3)), fps=8))


def test_roundtrip_exact_on_block_constant_video(codec):
    rng = np.random.default_rng(5)
    video = block_constant_video(rng)
    back = codec.decode(codec.encode(video), fps=video.fps)
    assert np.abs(back.frames - video.frames).max() < 1e-12


def test_roundtrip_error_bounded_by_block_range(codec):
    rng = np.random.default_rng(9)
    video = VideoFrames(rng.uniform(0, 255, (2, 32, 32, 3)), fps=8)
    back = codec.decode(codec.encode(video))
    f = codec.spatial_factor
    blocks = video.frames.reshape(2, 32 // f, f, 32 // f, f, 3)
    block_range = blocks.max(axis=(2, 4)) - blocks.min(axis=(2, 4))
    err = np.abs(back.frames - video.frames).reshape(2, 32 // f, f, 32 // f, f, 3).max(axis=(2, 4))
    assert (err <= block_range + 1e-9).all()


@pytest.mark.parametrize("seed", range(5))
def test_decoder_is_right_inverse_on_codec_range(codec, seed):
    rng = np.random.default_rng(seed)
    video = VideoFrames(rng.uniform(0, 255, (3, 32, 32, 3)), fps=8)
    once = codec.encode(video)
    again = codec.encode(codec.decode(once))
    assert torch.allclose(once.data, again.data, atol=1e-12, rtol=0)


def test_encode_is_frame_wise(codec, random_video):
    latent = codec.encode(random_video)
    perm = np.array([3, 1, 5, 0, 4, 2])
    permuted = codec.encode(VideoFrames(random_video.frames[perm], fps=8))
    assert torch.equal(permuted.data, latent.data[torch.from_numpy(perm)])


def test_zero_latent_decodes_to_mid_gray(codec):
    latent = LatentVideo(torch.zeros(2, 4, 8, 8, dtype=torch.float64), scale_factor=8)
    video = codec.decode(latent)
    assert np.allclose(video.frames, 127.5)


def test_mismatched_scale_factor_rejected(codec):
    latent = LatentVideo(torch.zeros(2, 4, 8, 8, dtype=torch.float64), scale_factor=4)
    with pytest.raises(ConfigError, match="scale_factor"):
        codec.decode(latent)


def test_non_finite_latent_rejected(codec):
    data = torch.zeros(2, 4, 8, 8, dtype=torch.float64)
    data[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericsError):
        codec.decode(LatentVideo(data, scale_factor=8))


def test_frame_png_roundtrip(tmp_path, random_video):
    paths = save_frames(random_video, tmp_path)
    assert [p.name for p in paths][:2] == ["frame_00000.png", "frame_00001.png"]
    loaded = load_frames(tmp_path, fps=random_video.fps)
    assert np.array_equal(loaded.frames, random_video.as_uint8().astype(np.float64))


def test_latent_blob_roundtrip(tmp_path, codec, random_video):
    latent = codec.encode(random_video)
    save_latent(latent, tmp_path / "z0")
    loaded = load_latent(tmp_path / "z0")
    assert loaded.scale_factor == latent.scale_factor
    # float32 on disk: exact at float32 resolution
    assert torch.allclose(loaded.data, latent.data, atol=1e-6, rtol=0)
    raw = np.fromfile(tmp_path / "z0.bin", dtype="<f4")
    assert raw.size == latent.data.numel()
