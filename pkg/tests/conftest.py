"""Shared fixtures: random scene builders sized for fast CPU tests."""

import numpy as np
import pytest

from gs4d.scene import Camera, GaussianCloud, inverse_sigmoid, rgb_to_sh


def make_camera(width=64, height=64, fx=None, fy=None, near=0.1, far=50.0):
    fx = 1.1 * width if fx is None else fx
    fy = 1.1 * height if fy is None else fy
    return Camera(fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  width=width, height=height,
                  R=np.eye(3), t=np.zeros(3), near=near, far=far)


def make_cloud(rng, n, camera, degree=1, z_range=(2.0, 6.0),
               scale_range=(0.02, 0.12), opacity_range=(0.2, 0.9)):
    """Random cloud scattered inside the camera frustum."""
    z = rng.uniform(*z_range, size=n)
    # spread across ~90% of the image so most splats land on screen
    u = rng.uniform(0.05, 0.95, size=n) * (camera.width - 1)
    v = rng.uniform(0.05, 0.95, size=n) * (camera.height - 1)
    x = (u - camera.cx) / camera.fx * z
    y = (v - camera.cy) / camera.fy * z
    positions = np.stack([x, y, z], axis=-1)
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=-1, keepdims=True)
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    opacity_logits = inverse_sigmoid(rng.uniform(*opacity_range, size=n))
    bands = (degree + 1) ** 2
    sh = np.zeros((n, 3, bands))
    sh[:, :, 0] = rgb_to_sh(rng.uniform(0.1, 0.9, size=(n, 3)))
    if bands > 1:
        sh[:, :, 1:] = 0.2 * rng.normal(size=(n, 3, bands - 1))
    return GaussianCloud(positions=positions, rotations=rotations,
                         log_scales=log_scales, opacity_logits=opacity_logits,
                         sh_coeffs=sh, sh_degree=degree)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def camera():
    return make_camera()
