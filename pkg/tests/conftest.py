import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from geoedit.backbone import Denoiser, DenoiserConfig, NoiseSchedule, gen_shapes_dataset
from geoedit.pipeline import Editor

CHECKPOINT = "checkpoints/toy64.npz"


def tiny_config(**overrides) -> DenoiserConfig:
    base = dict(
        resolution=32,
        levels=2,
        channel_mult=(1, 2),
        attention_grids=(16, 8),
        base_channels=8,
        embed_dim=32,
        cond_dim=16,
        vocab_size=128,
        cond_tokens=6,
        seed=0,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def tiny_model():
    model = Denoiser(tiny_config())
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_schedule():
    return NoiseSchedule.linear(100)


@pytest.fixture(scope="session")
def tiny_editor(tiny_model, tiny_schedule):
    return Editor(tiny_model, tiny_schedule)


@pytest.fixture(scope="session")
def shapes32():
    return gen_shapes_dataset(4, seed=1, resolution=32)


@pytest.fixture(scope="session")
def toy_checkpoint():
    """The committed 64x64 checkpoint; acceptance-grade tests need it."""
    from pathlib import Path

    from geoedit.backbone import load_checkpoint

    path = Path(__file__).resolve().parents[1] / CHECKPOINT
    if not path.exists():
        pytest.skip("committed toy checkpoint not present")
    model, schedule, meta = load_checkpoint(path)
    return model, schedule, meta


@pytest.fixture(scope="session")
def toy_editor(toy_checkpoint, tmp_path_factory):
    model, schedule, _ = toy_checkpoint
    cache = tmp_path_factory.mktemp("inversion-cache")
    return Editor(model, schedule, cache_dir=cache)


def rng_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.3):
    from geoedit.imaging import MaskBuffer

    return MaskBuffer((rng.random((h, w)) < p).astype(np.uint8))
