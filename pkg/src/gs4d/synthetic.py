"""Self-contained synthetic sequence generator for tests and demos.

Builds a known ground-truth Gaussian scene (an undulating colored sheet),
animates it with a rigid drift plus a traveling sinusoidal bulge, renders
every frame with the package's own rasterizer, and writes a complete dataset
(8-bit PNG images, metric PFM depth, JSON manifest) to a directory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .depth import write_pfm
from .rasterizer import render
from .scene import Camera, GaussianCloud, inverse_sigmoid, rgb_to_sh


def make_camera(size: int = 64) -> Camera:
    f = 1.1 * size
    c = (size - 1) / 2.0
    return Camera(fx=f, fy=f, cx=c, cy=c, width=size, height=size,
                  R=np.eye(3), t=np.zeros(3), near=0.1, far=20.0)


def make_scene(n_gaussians: int = 200, seed: int = 7) -> GaussianCloud:
    """Ground-truth cloud at time zero: a wavy sheet facing the camera."""
    rng = np.random.default_rng(seed)
    cols = 20
    rows = int(np.ceil(n_gaussians / cols))
    u, v = np.meshgrid(np.linspace(-1.0, 1.0, cols), np.linspace(-0.7, 0.7, rows))
    u = u.ravel()[:n_gaussians]
    v = v.ravel()[:n_gaussians]
    z = 3.0 + 0.18 * np.sin(2.3 * u) * np.cos(2.0 * v)
    positions = np.stack([u, v, z], axis=1)
    positions += rng.normal(scale=0.004, size=positions.shape)

    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n_gaussians, 1))
    rotations += rng.normal(scale=0.02, size=rotations.shape)
    log_scales = np.full((n_gaussians, 3), np.log(0.085))
    log_scales += rng.normal(scale=0.05, size=log_scales.shape)

    colors = np.stack([
        0.5 + 0.35 * np.sin(3.1 * u + 0.4),
        0.5 + 0.35 * np.cos(2.2 * v - 0.2),
        0.5 + 0.30 * np.sin(2.7 * (u + v)),
    ], axis=1)
    sh = rgb_to_sh(colors)[:, :, None]

    opacity = inverse_sigmoid(rng.uniform(0.85, 0.95, size=n_gaussians))
    return GaussianCloud(positions=positions, rotations=rotations,
                         log_scales=log_scales, opacity_logits=opacity,
                         sh_coeffs=sh, sh_degree=0)


def positions_at(base: np.ndarray, t: float) -> np.ndarray:
    """Rigid translation plus a traveling vertical-axis bulge, t in [0, 1]."""
    drift = np.array([0.12, 0.06, -0.10]) * t
    bulge = 0.12 * np.sin(2.0 * np.pi * t + 1.7 * base[:, 0])
    out = base + drift
    out[:, 2] = out[:, 2] + bulge
    return out


def generate_synthetic_dataset(out_dir, n_frames: int = 10, size: int = 64,
                               n_gaussians: int = 200, seed: int = 7) -> Path:
    """Render and write a full synthetic dataset; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    camera = make_camera(size)
    scene = make_scene(n_gaussians, seed)
    base = scene.positions.copy()

    frames = []
    for k in range(n_frames):
        t = k / (n_frames - 1) if n_frames > 1 else 0.0
        scene.positions = positions_at(base, t)
        out = render(scene, camera)
        img = np.clip(out.color, 0.0, 1.0)
        img8 = np.round(img * 255.0).astype(np.uint8)
        image_name = f"frame_{k:03d}.png"
        depth_name = f"depth_{k:03d}.pfm"
        Image.fromarray(img8).save(out_dir / image_name)
        write_pfm(out_dir / depth_name, out.depth.astype(np.float32))
        frames.append({"image": image_name, "depth": depth_name, "time": float(k)})

    manifest = {
        "camera": camera.to_dict(),
        "depth_kind": "metric",
        "frames": frames,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path
