from pathlib import Path

import numpy as np
import pytest

from diffpretrain.diffusion.schedule import make_schedule
from diffpretrain.models.schemas import DenoiserConfig, PretrainConfig, ScheduleConfig
from diffpretrain.pipeline.pretrain import Backbone, init_denoiser
from diffpretrain.synth.phantom import generate_phantom
from diffpretrain.volumes.volume import Volume

REPO_ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = REPO_ROOT / "configs" / "desk.ini"


def random_image(shape, seed=0) -> Volume:
    rng = np.random.default_rng(seed)
    return Volume(data=rng.uniform(-1.0, 1.0, size=shape).astype(np.float32))


@pytest.fixture(scope="session")
def phantoms():
    return [generate_phantom(seed) for seed in range(4)]


@pytest.fixture(scope="session")
def images(phantoms):
    return [p.image for p in phantoms]


@pytest.fixture
def tiny_denoiser_config():
    return DenoiserConfig(in_channels=1, base_width=8, levels=2, time_embed_dim=16)


@pytest.fixture
def tiny_pretrain_config():
    return PretrainConfig(
        patch_shape=[8, 16, 16],
        max_steps=6,
        checkpoint_every=3,
        log_every=2,
        progress=False,
        denoiser=DenoiserConfig(base_width=8, levels=2, time_embed_dim=16),
        schedule=ScheduleConfig(T=20),
    )


@pytest.fixture
def tiny_backbone(tiny_denoiser_config):
    model = init_denoiser(tiny_denoiser_config, seed=0)
    model.eval()
    model.requires_grad_(False)
    return Backbone(
        model=model,
        schedule=make_schedule(20, 1e-3, 0.2),
        config=tiny_denoiser_config,
        patch_shape=(8, 16, 16),
        identity="tiny",
    )
