"""
Shared fixtures: small synthetic scenes and helpers
"""

import numpy as np
import pytest
import torch

from camfit.core.geometry import DTYPE, PoseSE3
from camfit.core.synth import generate_scene
from camfit.models.schemas import SceneSpec


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (deselect with -m 'not slow')")


def scene_spec(**overrides) -> SceneSpec:
    """Small static arc scene unless overridden"""
    values = dict(
        frames=5,
        width=32,
        height=32,
        focal=30.0,
        camera_path="arc",
        translation_per_frame=0.08,
        rotation_per_frame_deg=1.0,
        static_boxes=3,
        movers=0,
        mover_coverage=0.0,
        seed=3,
    )
    values.update(overrides)
    return SceneSpec(**values)


def random_poses(count: int, seed: int = 0, rot_scale: float = 0.5, trans_scale: float = 1.0) -> PoseSE3:
    generator = torch.Generator().manual_seed(seed)
    axis_angle = rot_scale * torch.randn(count, 3, generator=generator, dtype=DTYPE)
    translation = trans_scale * torch.randn(count, 3, generator=generator, dtype=DTYPE)
    return PoseSE3(axis_angle, translation)


@pytest.fixture
def static_scene():
    return generate_scene(scene_spec())


@pytest.fixture
def dynamic_scene():
    return generate_scene(scene_spec(frames=4, movers=1, mover_coverage=0.2, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
