"""Time-conditioned deformation field over a factored space-time grid.

A point (x, y, z, t), normalized into the unit 4-cube, is bilinearly
interpolated on six feature planes per level (xy, xz, yz, xt, yt, zt).
The six plane features are fused by elementwise product, levels are
concatenated, and a shared two-layer trunk followed by five small heads
emits additive deltas for position, rotation, scale, opacity, and SH
coefficients. Deltas live in raw parameter space; head output layers start
at zero so the field is the identity until trained.

Every operation here has a matching hand-written backward so gradients on
the deformed parameters flow to the plane features, the MLP weights, and
the canonical positions (through the interpolation coordinates).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scene import GaussianCloud

PLANE_AXES = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
HEAD_SPECS = (("position", 3), ("rotation", 4), ("scale", 3),
              ("opacity", 1), ("sh", None))  # sh width filled from the cloud


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class DeformCache:
    """Forward intermediates needed by the backward pass."""

    positions: np.ndarray
    t: float
    coords: np.ndarray            # (N, 4) normalized, post-clip
    in_range: np.ndarray          # (N, 4) clip pass-through mask
    plane_feats: list             # per level: list of six (N, F) arrays
    plane_hits: list              # per level: list of six (i0, j0, fa, fb)
    fused: list                   # per level: (N, F) product features
    trunk_in: np.ndarray          # (N, F * levels)
    trunk_h_pre: np.ndarray
    trunk_out: np.ndarray
    act_pre: np.ndarray           # trunk_out (relu input shared by heads)
    head_h_pre: dict
    n: int


class DeformationField:
    """Factored space-time deformation with multiplicative plane fusion."""

    def __init__(self, bbox_min, bbox_max,
                 base_resolution=(64, 64, 64, 75), num_levels: int = 2,
                 feature_dim: int = 8, hidden_width: int = 64,
                 sh_bands: int = 9, seed: int = 0, dtype=np.float32):
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_max > self.bbox_min):
            raise ValueError("bbox_max must exceed bbox_min on every axis")
        self.base_resolution = tuple(int(r) for r in base_resolution)
        if len(self.base_resolution) != 4 or min(self.base_resolution) < 2:
            raise ValueError("base_resolution must be four values >= 2")
        self.num_levels = int(num_levels)
        self.feature_dim = int(feature_dim)
        self.hidden_width = int(hidden_width)
        self.sh_bands = int(sh_bands)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction --------------------------------------------------

    def level_resolution(self, level: int) -> tuple[int, int, int, int]:
        """Spatial axes double per level; the time axis never scales."""
        rx, ry, rz, rt = self.base_resolution
        f = 2 ** level
        return (rx * f, ry * f, rz * f, rt)

    def _init_params(self, rng: np.random.Generator) -> None:
        p = self.params
        for level in range(self.num_levels):
            res = self.level_resolution(level)
            for (a, b), name in zip(PLANE_AXES, PLANE_NAMES):
                # near the multiplicative identity so fused features start ~1
                p[f"plane_l{level}_{name}"] = rng.uniform(
                    0.9, 1.1, size=(res[a], res[b], self.feature_dim)
                ).astype(self.dtype)
        w = self.hidden_width
        in_dim = self.feature_dim * self.num_levels
        p["trunk_w0"] = _xavier(rng, in_dim, w).astype(self.dtype)
        p["trunk_b0"] = np.zeros(w, dtype=self.dtype)
        p["trunk_w1"] = _xavier(rng, w, w).astype(self.dtype)
        p["trunk_b1"] = np.zeros(w, dtype=self.dtype)
        for name, out in self._head_dims():
            p[f"head_{name}_w0"] = _xavier(rng, w, w).astype(self.dtype)
            p[f"head_{name}_b0"] = np.zeros(w, dtype=self.dtype)
            p[f"head_{name}_w1"] = np.zeros((w, out), dtype=self.dtype)
            p[f"head_{name}_b1"] = np.zeros(out, dtype=self.dtype)

    def _head_dims(self):
        for name, out in HEAD_SPECS:
            yield name, (3 * self.sh_bands if out is None else out)

    def param_groups(self) -> dict[str, list[str]]:
        """Parameter names split into the grid and MLP learning-rate groups."""
        planes = sorted(k for k in self.params if k.startswith("plane_"))
        mlps = sorted(k for k in self.params if not k.startswith("plane_"))
        return {"planes": planes, "mlps": mlps}

    # -- forward -------------------------------------------------------

    def _normalize(self, positions: np.ndarray, t: float
                   ) -> tuple[np.ndarray, np.ndarray]:
        n = positions.shape[0]
        coords = np.empty((n, 4))
        raw = (positions - self.bbox_min) / (self.bbox_max - self.bbox_min)
        coords[:, :3] = np.clip(raw, 0.0, 1.0)
        coords[:, 3] = min(max(float(t), 0.0), 1.0)
        in_range = np.empty((n, 4), dtype=bool)
        in_range[:, :3] = (raw >= 0.0) & (raw <= 1.0)
        in_range[:, 3] = 0.0 <= t <= 1.0
        return coords, in_range

    def _interp_plane(self, plane: np.ndarray, ca: np.ndarray, cb: np.ndarray):
        ra, rb = plane.shape[0], plane.shape[1]
        ga = ca * (ra - 1)
        gb = cb * (rb - 1)
        i0 = np.minimum(np.floor(ga), ra - 2).astype(np.int64)
        j0 = np.minimum(np.floor(gb), rb - 2).astype(np.int64)
        fa = ga - i0
        fb = gb - j0
        pl = plane.astype(np.float64, copy=False)
        p00 = pl[i0, j0]
        p10 = pl[i0 + 1, j0]
        p01 = pl[i0, j0 + 1]
        p11 = pl[i0 + 1, j0 + 1]
        wa = fa[:, None]
        wb = fb[:, None]
        feat = ((1 - wa) * (1 - wb) * p00 + wa * (1 - wb) * p10
                + (1 - wa) * wb * p01 + wa * wb * p11)
        return feat, (i0, j0, fa, fb)

    def encode_features(self, positions: np.ndarray, t: float,
                        _collect=None) -> np.ndarray:
        """Fused grid features, concatenated over levels, shape (N, F * levels)."""
        coords, in_range = self._normalize(np.asarray(positions, dtype=np.float64), t)
        pieces = []
        for level in range(self.num_levels):
            feats = []
            hits = []
            for (a, b), name in zip(PLANE_AXES, PLANE_NAMES):
                plane = self.params[f"plane_l{level}_{name}"]
                feat, hit = self._interp_plane(plane, coords[:, a], coords[:, b])
                feats.append(feat)
                hits.append(hit)
            fused = feats[0].copy()
            for f in feats[1:]:
                fused *= f
            pieces.append((feats, hits, fused))
        out = np.concatenate([p[2] for p in pieces], axis=1)
        if _collect is not None:
            _collect["coords"] = coords
            _collect["in_range"] = in_range
            _collect["plane_feats"] = [p[0] for p in pieces]
            _collect["plane_hits"] = [p[1] for p in pieces]
            _collect["fused"] = [p[2] for p in pieces]
        return out

    def _mlp64(self, name: str) -> tuple[np.ndarray, ...]:
        p = self.params
        return (p[name + "_w0"].astype(np.float64), p[name + "_b0"].astype(np.float64),
                p[name + "_w1"].astype(np.float64), p[name + "_b1"].astype(np.float64))

    def deform(self, cloud: GaussianCloud, t: float
               ) -> tuple[GaussianCloud, DeformCache]:
        """Apply the field at time t; returns the deformed cloud and a cache.

        Deltas are added in raw parameter space; the deformed quaternion is
        renormalized by the consuming activation chain (the rasterizer), so
        zero deltas reproduce the canonical cloud bit for bit. The canonical
        cloud is never mutated.
        """
        n = len(cloud)
        grid_cache: dict = {}
        X = self.encode_features(cloud.positions, t, _collect=grid_cache)
        w0, b0, w1, b1 = self._mlp64("trunk")
        h_pre = X @ w0 + b0
        h = np.maximum(h_pre, 0.0)
        f_out = h @ w1 + b1
        a = np.maximum(f_out, 0.0)

        deltas = {}
        head_h_pre = {}
        for name, _ in self._head_dims():
            hw0, hb0, hw1, hb1 = self._mlp64(f"head_{name}")
            hp = a @ hw0 + hb0
            head_h_pre[name] = hp
            deltas[name] = np.maximum(hp, 0.0) @ hw1 + hb1

        dt = cloud.positions.dtype
        deformed = GaussianCloud(
            positions=cloud.positions + deltas["position"].astype(dt),
            rotations=cloud.rotations + deltas["rotation"].astype(cloud.rotations.dtype),
            log_scales=cloud.log_scales + deltas["scale"].astype(cloud.log_scales.dtype),
            opacity_logits=cloud.opacity_logits
            + deltas["opacity"][:, 0].astype(cloud.opacity_logits.dtype),
            sh_coeffs=cloud.sh_coeffs
            + deltas["sh"].reshape(n, 3, self.sh_bands).astype(cloud.sh_coeffs.dtype),
            sh_degree=cloud.sh_degree,
        )
        cache = DeformCache(
            positions=np.asarray(cloud.positions, dtype=np.float64),
            t=float(t), coords=grid_cache["coords"], in_range=grid_cache["in_range"],
            plane_feats=grid_cache["plane_feats"], plane_hits=grid_cache["plane_hits"],
            fused=grid_cache["fused"], trunk_in=X, trunk_h_pre=h_pre,
            trunk_out=f_out, act_pre=a, head_h_pre=head_h_pre, n=n,
        )
        return deformed, cache

    # -- backward ------------------------------------------------------

    def backward(self, cache: DeformCache, d_positions: np.ndarray,
                 d_rotations: np.ndarray, d_log_scales: np.ndarray,
                 d_opacity_logits: np.ndarray, d_sh_coeffs: np.ndarray
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backpropagate deformed-parameter cotangents.

        Returns (field parameter gradients keyed like self.params, extra
        canonical-position gradient from the interpolation coordinates).
        The identity paths (canonical parameter -> deformed parameter) are
        the caller's responsibility; only the delta paths are handled here.
        """
        n = cache.n
        grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}
        d_deltas = {
            "position": np.asarray(d_positions, dtype=np.float64),
            "rotation": np.asarray(d_rotations, dtype=np.float64),
            "scale": np.asarray(d_log_scales, dtype=np.float64),
            "opacity": np.asarray(d_opacity_logits, dtype=np.float64).reshape(n, 1),
            "sh": np.asarray(d_sh_coeffs, dtype=np.float64).reshape(n, -1),
        }
        a = cache.act_pre
        a_relu = np.maximum(a, 0.0)
        d_a = np.zeros_like(a)
        for name, _ in self._head_dims():
            hw0 = self.params[f"head_{name}_w0"].astype(np.float64)
            hw1 = self.params[f"head_{name}_w1"].astype(np.float64)
            hp = cache.head_h_pre[name]
            hh = np.maximum(hp, 0.0)
            d_out = d_deltas[name]
            grads[f"head_{name}_w1"] = hh.T @ d_out
            grads[f"head_{name}_b1"] = d_out.sum(axis=0)
            d_hh = (d_out @ hw1.T) * (hp > 0)
            grads[f"head_{name}_w0"] = a_relu.T @ d_hh
            grads[f"head_{name}_b0"] = d_hh.sum(axis=0)
            d_a += d_hh @ hw0.T
        d_f = d_a * (a > 0)

        w1 = self.params["trunk_w1"].astype(np.float64)
        w0 = self.params["trunk_w0"].astype(np.float64)
        h = np.maximum(cache.trunk_h_pre, 0.0)
        grads["trunk_w1"] = h.T @ d_f
        grads["trunk_b1"] = d_f.sum(axis=0)
        d_h = (d_f @ w1.T) * (cache.trunk_h_pre > 0)
        grads["trunk_w0"] = cache.trunk_in.T @ d_h
        grads["trunk_b0"] = d_h.sum(axis=0)
        d_X = d_h @ w0.T

        F = self.feature_dim
        d_coords = np.zeros((n, 4))
        for level in range(self.num_levels):
            d_fused = d_X[:, level * F:(level + 1) * F]
            feats = cache.plane_feats[level]
            hits = cache.plane_hits[level]
            # leave-one-out products for the fusion backward
            k = len(feats)
            prefix = [np.ones((n, F))]
            for f in feats:
                prefix.append(prefix[-1] * f)
            suffix = [np.ones((n, F))]
            for f in reversed(feats):
                suffix.append(suffix[-1] * f)
            suffix.reverse()
            res = self.level_resolution(level)
            for p_idx, ((a_ax, b_ax), name) in enumerate(zip(PLANE_AXES, PLANE_NAMES)):
                d_feat = d_fused * prefix[p_idx] * suffix[p_idx + 1]
                i0, j0, fa, fb = hits[p_idx]
                wa = fa[:, None]
                wb = fb[:, None]
                key = f"plane_l{level}_{name}"
                g = grads[key]
                np.add.at(g, (i0, j0), (1 - wa) * (1 - wb) * d_feat)
                np.add.at(g, (i0 + 1, j0), wa * (1 - wb) * d_feat)
                np.add.at(g, (i0, j0 + 1), (1 - wa) * wb * d_feat)
                np.add.at(g, (i0 + 1, j0 + 1), wa * wb * d_feat)
                pl = self.params[key].astype(np.float64, copy=False)
                p00 = pl[i0, j0]
                p10 = pl[i0 + 1, j0]
                p01 = pl[i0, j0 + 1]
                p11 = pl[i0 + 1, j0 + 1]
                d_fa = (((1 - wb) * (p10 - p00) + wb * (p11 - p01)) * d_feat).sum(axis=1)
                d_fb = (((1 - wa) * (p01 - p00) + wa * (p11 - p10)) * d_feat).sum(axis=1)
                d_coords[:, a_ax] += d_fa * (res[a_ax] - 1)
                d_coords[:, b_ax] += d_fb * (res[b_ax] - 1)

        d_coords *= cache.in_range
        d_pos_extra = d_coords[:, :3] / (self.bbox_max - self.bbox_min)
        return grads, d_pos_extra

    # -- regularization ------------------------------------------------

    def plane_tv_loss(self) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared difference of adjacent cells per plane, summed over
        all planes and levels, with gradients for every plane."""
        total = 0.0
        grads = {}
        for key, plane in self.params.items():
            if not key.startswith("plane_"):
                continue
            p = plane.astype(np.float64)
            d0 = p[1:, :, :] - p[:-1, :, :]
            d1 = p[:, 1:, :] - p[:, :-1, :]
            count = d0.size + d1.size
            total += (np.sum(d0 * d0) + np.sum(d1 * d1)) / count
            g = np.zeros_like(p)
            g[1:, :, :] += 2.0 * d0 / count
            g[:-1, :, :] -= 2.0 * d0 / count
            g[:, 1:, :] += 2.0 * d1 / count
            g[:, :-1, :] -= 2.0 * d1 / count
            grads[key] = g
        return float(total), grads

    # -- serialization -------------------------------------------------

    def state_metadata(self) -> dict:
        return {
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
            "base_resolution": list(self.base_resolution),
            "num_levels": self.num_levels,
            "feature_dim": self.feature_dim,
            "hidden_width": self.hidden_width,
            "sh_bands": self.sh_bands,
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "DeformationField":
        return cls(bbox_min=meta["bbox_min"], bbox_max=meta["bbox_max"],
                   base_resolution=meta["base_resolution"],
                   num_levels=meta["num_levels"], feature_dim=meta["feature_dim"],
                   hidden_width=meta["hidden_width"], sh_bands=meta["sh_bands"])
