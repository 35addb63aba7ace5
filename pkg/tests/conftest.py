"""Shared small fixtures: tiny configs, meshes with smooth features, rendered samples."""
from dataclasses import replace
from pathlib import Path
import sys

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from inemo.models import Camera, NeuralMesh, Pose  # noqa: E402
from inemo.services.benchgen import make_class_appearance, render_sample  # noqa: E402
from inemo.services.geometry3d import build_cuboid, neighborhood_mask  # noqa: E402
from inemo.services.settings_store import ExperimentConfig, validate  # noqa: E402

SMALL = dict(
    seed=3,
    feature_dim=8,
    max_classes=8,
    target_vertices=60,
    population_size=4000,
    bg_capacity=32,
    bg_update=2,
    unused_pool_size=32,
    epochs_per_task=2,
    lr=5e-3,
    lr_halve_after=0,
    batch_size=4,
    buffer_capacity=8,
    azimuth_bins=4,
    num_classes=4,
    per_class_train=6,
    per_class_test=3,
    split_spec="B0+2",
    image_size=48,
    template_count=12,
    refine_iterations=5,
)


def small_config(**changes):
    return validate(replace(ExperimentConfig(**SMALL), **changes))


@pytest.fixture
def make_config():
    return small_config


@pytest.fixture
def cfg():
    return small_config()


def smooth_theta(vertices, dim, seed=0, scale=2.5):
    """Unit features varying smoothly over the surface (random Fourier features of position)."""
    rng = np.random.default_rng(seed)
    proj = vertices @ rng.normal(0.0, scale, (3, dim // 2)) + rng.uniform(0, 2 * np.pi, dim // 2)
    theta = np.concatenate([np.sin(proj), np.cos(proj)], axis=1)
    return theta / np.linalg.norm(theta, axis=1, keepdims=True)


def make_mesh(class_id=0, dims=(1.0, 0.8, 0.6), target=150, dim=16, seed=0, radius_scale=0.2):
    geometry = build_cuboid(dims, target)
    return NeuralMesh(
        class_id=class_id,
        geometry=geometry,
        theta=smooth_theta(geometry.vertices, dim, seed),
        neighbor_mask=neighborhood_mask(geometry, radius_scale * geometry.diagonal),
    )


@pytest.fixture
def smooth_mesh():
    return make_mesh()


@pytest.fixture
def feature_camera():
    return Camera.for_resolution(32)


def render_class(class_id, poses, seed=3, size=48):
    appearance = make_class_appearance(class_id, seed)
    camera = Camera.for_resolution(size)
    return [
        render_sample(appearance, pose, camera, background_seed=1000 * class_id + i,
                      sample_id=f"c{class_id:03d}-train-{i:04d}")
        for i, pose in enumerate(poses)
    ]


def random_poses(count, seed=0, distance=5.0):
    rng = np.random.default_rng(seed)
    return [
        Pose(float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(-np.pi / 3, np.pi / 3)),
             float(rng.uniform(-np.pi / 6, np.pi / 6)), distance)
        for _ in range(count)
    ]
