"""Gaussian cloud container, camera model, and per-Gaussian geometry ops.

Parameters are kept in raw (pre-activation) space: log scales, opacity
logits, unnormalized quaternions. Activations are applied where the values
are consumed so that gradients can be chained through them analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Real spherical harmonics constants, degrees 0..2.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

MAX_SH_DEGREE = 2


def num_sh_bands(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free on both tails.
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y: np.ndarray | float) -> np.ndarray:
    y = np.asarray(y)
    return np.log(y / (1.0 - y))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) in (w, x, y, z) order to rotation matrices (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(unit quaternion), shape (..., 4, 3, 3).

    Entry [..., k, i, j] is the derivative of R[i, j] with respect to
    quaternion component k; the quaternion is assumed unit (apply the
    normalization Jacobian separately for raw quaternions).
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    J = np.zeros(q.shape[:-1] + (4, 3, 3), dtype=q.dtype)
    zero = np.zeros_like(w)
    # dR/dw
    J[..., 0, 0, 1] = -2 * z
    J[..., 0, 0, 2] = 2 * y
    J[..., 0, 1, 0] = 2 * z
    J[..., 0, 1, 2] = -2 * x
    J[..., 0, 2, 0] = -2 * y
    J[..., 0, 2, 1] = 2 * x
    # dR/dx
    J[..., 1, 0, 1] = 2 * y
    J[..., 1, 0, 2] = 2 * z
    J[..., 1, 1, 0] = 2 * y
    J[..., 1, 1, 1] = -4 * x
    J[..., 1, 1, 2] = -2 * w
    J[..., 1, 2, 0] = 2 * z
    J[..., 1, 2, 1] = 2 * w
    J[..., 1, 2, 2] = -4 * x
    # dR/dy
    J[..., 2, 0, 0] = -4 * y
    J[..., 2, 0, 1] = 2 * x
    J[..., 2, 0, 2] = 2 * w
    J[..., 2, 1, 0] = 2 * x
    J[..., 2, 1, 2] = 2 * z
    J[..., 2, 2, 0] = -2 * w
    J[..., 2, 2, 1] = 2 * z
    J[..., 2, 2, 2] = -4 * y
    # dR/dz
    J[..., 3, 0, 0] = -4 * z
    J[..., 3, 0, 1] = -2 * w
    J[..., 3, 0, 2] = 2 * x
    J[..., 3, 1, 0] = 2 * w
    J[..., 3, 1, 1] = -4 * z
    J[..., 3, 1, 2] = 2 * y
    J[..., 3, 2, 0] = 2 * x
    J[..., 3, 2, 1] = 2 * y
    del zero
    return J


def build_covariance(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """World-space covariance R S S^T R^T from unit quaternions and linear scales.

    rotations: (..., 4) unit quaternions, scales: (..., 3) positive. Returns
    (..., 3, 3) symmetric positive semi-definite matrices.
    """
    R = quat_to_rotmat(rotations)
    M = R * scales[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions (N, 3), shape (N, bands)."""
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise ValueError(f"SH degree {degree} outside supported range 0..{MAX_SH_DEGREE}")
    n = dirs.shape[0]
    basis = np.empty((n, num_sh_bands(degree)), dtype=dirs.dtype)
    basis[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis[:, 1] = -SH_C1 * y
        basis[:, 2] = SH_C1 * z
        basis[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 4] = SH_C2[0] * x * y
        basis[:, 5] = SH_C2[1] * y * z
        basis[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        basis[:, 7] = SH_C2[3] * x * z
        basis[:, 8] = SH_C2[4] * (xx - yy)
    return basis


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives of the SH basis with respect to direction, shape (N, bands, 3)."""
    n = dirs.shape[0]
    J = np.zeros((n, num_sh_bands(degree), 3), dtype=dirs.dtype)
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        J[:, 1, 1] = -SH_C1
        J[:, 2, 2] = SH_C1
        J[:, 3, 0] = -SH_C1
    if degree >= 2:
        J[:, 4, 0] = SH_C2[0] * y
        J[:, 4, 1] = SH_C2[0] * x
        J[:, 5, 1] = SH_C2[1] * z
        J[:, 5, 2] = SH_C2[1] * y
        J[:, 6, 0] = SH_C2[2] * (-2.0 * x)
        J[:, 6, 1] = SH_C2[2] * (-2.0 * y)
        J[:, 6, 2] = SH_C2[2] * 4.0 * z
        J[:, 7, 0] = SH_C2[3] * z
        J[:, 7, 2] = SH_C2[3] * x
        J[:, 8, 0] = SH_C2[4] * 2.0 * x
        J[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    return J


def eval_sh(sh_coeffs: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate SH colors: clamp(basis . coeffs + 0.5, min 0).

    sh_coeffs: (N, 3, bands), dirs: (N, 3) unit view directions, returns (N, 3).
    Coefficient bands beyond the requested degree are ignored.
    """
    nb = num_sh_bands(degree)
    basis = sh_basis(dirs, degree)
    raw = np.einsum("nb,ncb->nc", basis, sh_coeffs[:, :, :nb]) + 0.5
    return np.maximum(raw, 0.0)


def rgb_to_sh(rgb: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] to the DC coefficient that reproduces it under a 0.5 offset."""
    return (rgb - 0.5) / SH_C0


def sh_to_rgb(dc: np.ndarray) -> np.ndarray:
    return dc * SH_C0 + 0.5


def shortest_axis_normal(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Unit normal of each Gaussian: the rotation column of its smallest scale.

    Ties resolve to the lowest axis index. rotations (N, 4) unit quaternions,
    scales (N, 3) positive, returns (N, 3).
    """
    R = quat_to_rotmat(rotations)
    axis = np.argmin(scales, axis=-1)
    return np.take_along_axis(R, axis[..., None, None], axis=-1)[..., 0]


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform (z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray
    t: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")

    @property
    def cam_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @property
    def w2c(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "w2c": self.w2c.reshape(-1).tolist(),
            "near": self.near,
            "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        w2c = np.asarray(d["w2c"], dtype=np.float64).reshape(4, 4)
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            R=w2c[:3, :3],
            t=w2c[:3, 3],
            near=float(d.get("near", 0.01)),
            far=float(d.get("far", 100.0)),
        )


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian cloud in raw parameter space.

    positions (N, 3), rotations (N, 4) quaternions (consumers normalize),
    log_scales (N, 3), opacity_logits (N,), sh_coeffs (N, 3, bands).
    sh_degree is the currently active evaluation degree; the coefficient
    array is always sized for its maximum degree.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def max_sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[2]))) - 1

    def validate(self) -> None:
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions shape {self.positions.shape}, expected ({n}, 3)")
        if self.rotations.shape != (n, 4):
            raise ValueError(f"rotations shape {self.rotations.shape}, expected ({n}, 4)")
        if self.log_scales.shape != (n, 3):
            raise ValueError(f"log_scales shape {self.log_scales.shape}, expected ({n}, 3)")
        if self.opacity_logits.shape != (n,):
            raise ValueError(f"opacity_logits shape {self.opacity_logits.shape}, expected ({n},)")
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[:2] != (n, 3):
            raise ValueError(f"sh_coeffs shape {self.sh_coeffs.shape}, expected ({n}, 3, bands)")
        bands = self.sh_coeffs.shape[2]
        deg = int(round(np.sqrt(bands))) - 1
        if num_sh_bands(deg) != bands:
            raise ValueError(f"sh band count {bands} is not a square")
        if not 0 <= self.sh_degree <= deg:
            raise ValueError(f"active sh_degree {self.sh_degree} exceeds stored degree {deg}")

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_rotations(self) -> np.ndarray:
        return normalize_quaternions(self.rotations)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            sh_degree=self.sh_degree,
        )

    def select(self, idx: np.ndarray) -> "GaussianCloud":
        """New cloud holding the rows picked by an index or boolean array."""
        return GaussianCloud(
            positions=self.positions[idx].copy(),
            rotations=self.rotations[idx].copy(),
            log_scales=self.log_scales[idx].copy(),
            opacity_logits=self.opacity_logits[idx].copy(),
            sh_coeffs=self.sh_coeffs[idx].copy(),
            sh_degree=self.sh_degree,
        )

    @classmethod
    def concatenate(cls, clouds: list["GaussianCloud"]) -> "GaussianCloud":
        if not clouds:
            raise ValueError("nothing to concatenate")
        return cls(
            positions=np.concatenate([c.positions for c in clouds]),
            rotations=np.concatenate([c.rotations for c in clouds]),
            log_scales=np.concatenate([c.log_scales for c in clouds]),
            opacity_logits=np.concatenate([c.opacity_logits for c in clouds]),
            sh_coeffs=np.concatenate([c.sh_coeffs for c in clouds]),
            sh_degree=clouds[0].sh_degree,
        )

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.astype(dtype),
            rotations=self.rotations.astype(dtype),
            log_scales=self.log_scales.astype(dtype),
            opacity_logits=self.opacity_logits.astype(dtype),
            sh_coeffs=self.sh_coeffs.astype(dtype),
            sh_degree=self.sh_degree,
        )
