import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from iman.data import IMAGE_MODALITIES, PatientSample
from iman.model import ModelConfig
from iman.synthetic import SyntheticSpec, gen_synthetic

settings.register_profile("iman", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("iman")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_model=8, num_heads=2, num_layers=1, image_shape=(1, 8, 8), patch_size=4, seed=5)


@pytest.fixture(scope="session")
def small_cohort():
    return gen_synthetic(SyntheticSpec(n_samples=40, image_shape=(1, 8, 8), seed=11))


def make_sample(rng, image_shape=(1, 8, 8), present=(True,) * 5, label=1, sample_id=0):
    return PatientSample(
        sample_id,
        rng.normal(size=4),
        rng.normal(size=19),
        tuple(rng.normal(size=image_shape) for _ in IMAGE_MODALITIES),
        tuple(present),
        label,
    )
