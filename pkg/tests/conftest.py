import numpy as np
import pytest

from refcomplete.masks import MaskSpec
from refcomplete.model import Model, ModelConfig
from refcomplete.synth import FigureSpec, build_training_pair


def densify(model: Model, seed: int = 0, scale: float = 0.05) -> Model:
    """Jitter every parameter so zero-initialized output paths are live."""
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = (t.data + scale * rng.standard_normal(t.data.shape)).astype(
            t.data.dtype)
    return model


def tiny_model_config(**overrides) -> ModelConfig:
    """Small-but-real config: 32px images, 8x8 latent grid, two levels."""
    defaults = dict(
        image_size=32,
        latent_factor=4,
        base_channels=32,
        channel_multipliers=(1, 2),
        attention_levels=(0, 1),
        token_dim=32,
        heads=4,
        semantic_token_count=2,
        semantic_dim=16,
        time_dim=32,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_model(tiny_config) -> Model:
    # jittered so zero-initialized output projections do not mask bugs
    return densify(Model(tiny_config, seed=7), seed=70)


@pytest.fixture(scope="session")
def tiny_samples():
    rng = np.random.default_rng(99)
    samples = []
    for i in range(3):
        spec = FigureSpec.random(f"t{i:03d}", rng)
        samples.append(build_training_pair(spec, rng, MaskSpec(), size=32))
    return samples
