import numpy as np
import pytest

from tscm.data import SyntheticWorldConfig, generate_synthetic
from tscm.models import StudentConfig, TeacherConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Micro configurations keep finite-difference checks over every parameter cheap.
MICRO_TEACHER = TeacherConfig(
    image_size=8, stage_channels=(2, 3, 3), tokens=4, d_model=4, n_heads=2, d_ff=6,
    clusters=2, inter_width=3, mid_feature_width=2, vit_width=2,
)
MICRO_STUDENT = StudentConfig(
    image_size=8, stage_channels=(2, 3, 3), tokens=4, d_model=3, conv_channels=2,
    clusters=2, resnet_width=4, conv_width=3,
)


@pytest.fixture(scope="session")
def small_world():
    cfg = SyntheticWorldConfig(n_places=4, views_per_place=10)
    return generate_synthetic(cfg, seed=7)
