"""Depth-prior utilities: metric recovery, back-projection, pseudo-normals.

Depth maps travel as a value array plus a validity mask. All gradient
stencils are central differences in the interior and one-sided at the image
border; any stencil that touches an invalid pixel yields a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .scene import Camera


@dataclass
class DepthMap:
    """Float depth values (H, W) with a boolean validity mask of the same shape."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("values and valid must share one (H, W) shape")


def recover_metric_depth(inverse_depth: np.ndarray, beta: float,
                         valid: np.ndarray | None = None) -> DepthMap:
    """Convert an inverse-depth prior to metric depth via depth = beta / inverse.

    Pixels with non-positive or non-finite inverse depth (or masked out by
    `valid`) become invalid and carry value 0.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    inv = np.asarray(inverse_depth, dtype=np.float64)
    ok = np.isfinite(inv) & (inv > 0)
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    depth = np.zeros_like(inv)
    depth[ok] = beta / inv[ok]
    return DepthMap(depth, ok)


def backproject(depth: DepthMap, image: np.ndarray, camera: Camera,
                stride: int = 1, max_points: int | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Lift valid depth pixels to world-space points with their RGB colors.

    Samples every `stride`-th pixel along both axes. Returns (points (M, 3),
    colors (M, 3)); if the point count exceeds max_points the set is thinned
    by a uniform deterministic subsample.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = depth.values.shape
    if image.shape[:2] != (h, w):
        raise ValueError("image and depth dimensions disagree")
    vs = np.arange(0, h, stride)
    us = np.arange(0, w, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    d = depth.values[vv, uu]
    ok = depth.valid[vv, uu]
    uu, vv, d = uu[ok], vv[ok], d[ok]
    x_cam = np.stack([
        (uu - camera.cx) / camera.fx * d,
        (vv - camera.cy) / camera.fy * d,
        d,
    ], axis=-1)
    points = (x_cam - camera.t) @ camera.R
    colors = image[vv, uu].astype(np.float64)
    if max_points is not None and points.shape[0] > max_points:
        keep = np.linspace(0, points.shape[0] - 1, max_points).round().astype(np.int64)
        keep = np.unique(keep)
        points, colors = points[keep], colors[keep]
    return points, colors


def depth_gradients(values: np.ndarray, valid: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical depth gradients (central, one-sided at borders).

    A pixel's gradient is zero when the pixel itself or any stencil neighbor
    is invalid. Returns (g_w, g_h) matching the input shape.
    """
    d = np.asarray(values, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    gw = np.zeros_like(d)
    gh = np.zeros_like(d)
    if d.shape[1] >= 3:
        ok = m[:, 1:-1] & m[:, :-2] & m[:, 2:]
        gw[:, 1:-1] = np.where(ok, (d[:, 2:] - d[:, :-2]) * 0.5, 0.0)
    if d.shape[1] >= 2:
        ok = m[:, 0] & m[:, 1]
        gw[:, 0] = np.where(ok, d[:, 1] - d[:, 0], 0.0)
        ok = m[:, -1] & m[:, -2]
        gw[:, -1] = np.where(ok, d[:, -1] - d[:, -2], 0.0)
    if d.shape[0] >= 3:
        ok = m[1:-1, :] & m[:-2, :] & m[2:, :]
        gh[1:-1, :] = np.where(ok, (d[2:, :] - d[:-2, :]) * 0.5, 0.0)
    if d.shape[0] >= 2:
        ok = m[0, :] & m[1, :]
        gh[0, :] = np.where(ok, d[1, :] - d[0, :], 0.0)
        ok = m[-1, :] & m[-2, :]
        gh[-1, :] = np.where(ok, d[-1, :] - d[-2, :], 0.0)
    return gw, gh


def depth_gradients_backward(grad_gw: np.ndarray, grad_gh: np.ndarray,
                             valid: np.ndarray) -> np.ndarray:
    """Transpose of depth_gradients: scatter gradient-map cotangents to values."""
    m = np.asarray(valid, dtype=bool)
    h, w = m.shape
    out = np.zeros((h, w), dtype=np.float64)
    if w >= 3:
        ok = m[:, 1:-1] & m[:, :-2] & m[:, 2:]
        t = np.where(ok, grad_gw[:, 1:-1], 0.0)
        out[:, 2:] += t * 0.5
        out[:, :-2] -= t * 0.5
    if w >= 2:
        t = np.where(m[:, 0] & m[:, 1], grad_gw[:, 0], 0.0)
        out[:, 1] += t
        out[:, 0] -= t
        t = np.where(m[:, -1] & m[:, -2], grad_gw[:, -1], 0.0)
        out[:, -1] += t
        out[:, -2] -= t
    if h >= 3:
        ok = m[1:-1, :] & m[:-2, :] & m[2:, :]
        t = np.where(ok, grad_gh[1:-1, :], 0.0)
        out[2:, :] += t * 0.5
        out[:-2, :] -= t * 0.5
    if h >= 2:
        t = np.where(m[0, :] & m[1, :], grad_gh[0, :], 0.0)
        out[1, :] += t
        out[0, :] -= t
        t = np.where(m[-1, :] & m[-2, :], grad_gh[-1, :], 0.0)
        out[-1, :] += t
        out[-2, :] -= t
    return out


def pseudo_normal_map(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Per-pixel normals from depth gradients: (g_w, g_h, 1) normalized.

    Flat or invalid regions produce (0, 0, 1). Output shape (H, W, 3), unit
    norm everywhere.
    """
    gw, gh = depth_gradients(values, valid)
    norm = np.sqrt(gw * gw + gh * gh + 1.0)
    return np.stack([gw / norm, gh / norm, 1.0 / norm], axis=-1)


def normalize_map(values: np.ndarray, valid: np.ndarray
                  ) -> tuple[np.ndarray, bool]:
    """Min-max normalize over valid pixels to [0, 1]; invalid pixels become 0.

    Returns (normalized, degenerate) where degenerate is True when the valid
    range is empty or constant (output all zeros in that case).
    """
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    out = np.zeros_like(v)
    if not m.any():
        return out, True
    lo = v[m].min()
    hi = v[m].max()
    if hi - lo <= 0:
        return out, True
    out[m] = (v[m] - lo) / (hi - lo)
    return out, False


def normalize_map_backward(values: np.ndarray, valid: np.ndarray,
                           grad_norm: np.ndarray) -> np.ndarray:
    """Gradient of normalize_map with respect to the raw values.

    Includes the terms through the min and max picks (first occurrence in
    row-major order, matching numpy argmin/argmax). Degenerate maps return a
    zero gradient.
    """
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    out = np.zeros_like(v)
    if not m.any():
        return out
    flat_idx = np.flatnonzero(m.ravel())
    vals = v.ravel()[flat_idx]
    lo, hi = vals.min(), vals.max()
    r = hi - lo
    if r <= 0:
        return out
    jmin = flat_idx[np.argmin(vals)]
    jmax = flat_idx[np.argmax(vals)]
    g = np.where(m, grad_norm, 0.0)
    gsum = g.sum()
    # weighted sum of cotangents against the normalized values
    norm_vals = np.zeros_like(v)
    norm_vals[m] = (v[m] - lo) / r
    s = (g * norm_vals).sum()
    out = g / r
    flat = out.ravel()
    flat[jmin] += (-gsum + s) / r
    flat[jmax] -= s / r
    return flat.reshape(v.shape)


# --- depth file formats ---------------------------------------------------


def write_pfm(path, values: np.ndarray) -> None:
    """Write a grayscale PFM (little-endian, rows stored bottom-up)."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 2:
        raise ValueError("PFM writer expects a 2-D map")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{v.shape[1]} {v.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(v[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float64 (H, W) array."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"not a grayscale PFM (header {header!r})")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
        if data.size != w * h:
            raise ValueError("PFM payload truncated")
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_depth_png16(path, values: np.ndarray) -> None:
    """Write a 16-bit grayscale PNG of raw (inverse-depth) integer values."""
    v = np.asarray(values)
    if v.dtype != np.uint16:
        v = np.clip(np.rint(v), 0, 65535).astype(np.uint16)
    Image.fromarray(v).save(path)


def read_depth_png16(path) -> np.ndarray:
    """Read a 16-bit grayscale PNG of inverse-depth values as float64."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("depth PNG must be single channel")
    return arr.astype(np.float64)
