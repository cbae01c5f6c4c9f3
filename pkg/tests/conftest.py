import numpy as np
import pytest
import torch

from dragedit.codec import ToyCodec, VideoFrames
from dragedit.ddim import NoiseSchedule
from dragedit.unet import BackboneConfig, ToyVideoUNet


@pytest.fixture(scope="session")
def toy_backbone():
    return ToyVideoUNet(BackboneConfig(seed=7))


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.linear_signal(50)


@pytest.fixture(scope="session")
def codec():
    return ToyCodec()


@pytest.fixture()
def random_video():
    rng = np.random.default_rng(123)
    return VideoFrames(rng.uniform(0, 255, (6, 64, 64, 3)), fps=8)


@pytest.fixture()
def random_latent(codec, random_video):
    return codec.encode(random_video)


def small_latent(seed=0, frames=3, channels=4, size=8, scale_factor=8):
    gen = torch.Generator().manual_seed(seed)
    from dragedit.codec import LatentVideo

    data = torch.randn(frames, channels, size, size, generator=gen, dtype=torch.float64)
    return LatentVideo(data, scale_factor=scale_factor)
