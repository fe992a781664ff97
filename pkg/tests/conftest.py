import numpy as np
import pytest

from svcodec.config import TrainConfig
from svcodec.procgen import SphereSpec, gen_sphere_sdf


@pytest.fixture(scope="session")
def small_sphere():
    """Radius-12 sphere band in a 40^3 region; ~11k active voxels."""
    return gen_sphere_sdf(SphereSpec(center=(20, 20, 20), radius=12.0,
                                     voxel_size=1.0, half_width=3.0))


@pytest.fixture(scope="session")
def tiny_config():
    """Fast config for pipeline-shape tests (not for quality)."""
    return TrainConfig(l1_net=(2, 8), l0_net=(2, 16), voxel_net=(2, 16),
                       tile_net=None, ffm_size=16, ffm_scale=5.0,
                       max_epochs=40, batch_size=4096, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
