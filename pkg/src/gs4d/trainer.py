"""Two-stage scene optimization: static geometry, then time deformation.

Stage one fits a canonical Gaussian cloud to the training frames without any
time conditioning. Stage two adds the deformation field (and its grid
smoothness term) so the canonical cloud tracks scene motion. Both stages run
Adam on analytic gradients, adaptively densify and prune the cloud, and log
per-iteration loss parts plus periodic validation metrics.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset, FrameSample, split_train_val
from .deformation import DeformationField
from .depth import DepthMap, backproject, pseudo_normal_map
from .losses import psnr, ssim, total_loss
from .ply import export_ply
from .rasterizer import render, render_backward
from .scene import (
    Camera,
    GaussianCloud,
    inverse_sigmoid,
    normalize_quaternions,
    num_sh_bands,
    rgb_to_sh,
)

CLOUD_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits",
                "sh_coeffs")
HISTORY_COLUMNS = ("iteration", "psnr", "ssim", "loss_total", "loss_color",
                   "loss_depth", "loss_surf", "loss_con", "loss_tv")


@dataclass
class TrainConfig:
    """Hyperparameters for both optimization stages; JSON round-trippable."""

    seed: int = 42
    iterations_static: int = 1000
    iterations_dynamic: int = 3000
    # learning rates
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_gaussian: float = 1.6e-3
    lr_planes: float = 1.6e-3
    lr_mlp: float = 1.6e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # loss weights
    lambda_norm: float = 0.01
    lambda_grad: float = 0.001
    lambda_surf: float = 0.001
    lambda_con: float = 1e-4
    # adaptive density control
    densify_interval: int = 100
    densify_start: int = 500
    densify_end_fraction: float = 0.8
    densify_grad_threshold: float = 2e-4
    densify_percent_dense: float = 0.01
    prune_opacity: float = 0.005
    max_gaussians: int = 200_000
    split_scale_shrink: float = 1.6
    # appearance schedule
    sh_max_degree: int = 2
    sh_degree_interval: int = 1000
    # deformation grid
    grid_resolution: tuple = (64, 64, 64, 75)
    grid_levels: int = 2
    grid_feature_dim: int = 8
    mlp_width: int = 64
    bbox_margin: float = 0.2
    # initialization
    init_stride: int = 2
    init_max_points: int = 100_000
    init_opacity: float = 0.1
    # bookkeeping
    val_interval: int = 500
    log_interval: int = 50

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_resolution"] = list(self.grid_resolution)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = cls(**data)
        out.grid_resolution = tuple(int(r) for r in out.grid_resolution)
        return out

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


class Adam:
    """Per-tensor Adam with bias correction.

    Moments are stored float32 alongside the float32 parameters; the update
    arithmetic runs in float64 for reproducibility. Entries whose gradient
    is not finite are skipped (parameter left untouched) and counted.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self.skipped = 0

    def ensure(self, name: str, shape: tuple) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape, dtype=np.float32)
            self.v[name] = np.zeros(shape, dtype=np.float32)
            self.steps[name] = 0

    def step(self, name: str, param: np.ndarray, grad: np.ndarray,
             lr: float) -> np.ndarray:
        self.ensure(name, param.shape)
        g = np.asarray(grad, dtype=np.float64)
        good = np.isfinite(g)
        bad = int(g.size - good.sum())
        if bad:
            self.skipped += bad
            g = np.where(good, g, 0.0)
        self.steps[name] += 1
        t = self.steps[name]
        m = self.beta1 * self.m[name].astype(np.float64) + (1 - self.beta1) * g
        v = self.beta2 * self.v[name].astype(np.float64) + (1 - self.beta2) * g * g
        self.m[name] = m.astype(np.float32)
        self.v[name] = v.astype(np.float32)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
        new = param.astype(np.float64) - np.where(good, update, 0.0)
        return new.astype(param.dtype)

    def remap_rows(self, name: str, keep: np.ndarray, n_append: int) -> None:
        """Reindex first-axis moment rows after densification; new rows zero."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name]
            tail = np.zeros((n_append,) + old.shape[1:], dtype=old.dtype)
            store[name] = np.concatenate([old[keep], tail], axis=0)


def position_lr(cfg: TrainConfig, iteration: int, total: int) -> float:
    """Exponential decay from lr_position to lr_position_final over training."""
    if total <= 1:
        return cfg.lr_position
    frac = min(max(iteration / (total - 1), 0.0), 1.0)
    return cfg.lr_position * (cfg.lr_position_final / cfg.lr_position) ** frac


def densify_and_prune(cloud: GaussianCloud, adam: Adam, grad_accum: np.ndarray,
                      seen: np.ndarray, cfg: TrainConfig, scene_extent: float,
                      rng: np.random.Generator) -> tuple[GaussianCloud, dict]:
    """Adaptive density control over the canonical cloud.

    Gaussians whose mean screen-space gradient exceeds the threshold are
    cloned (small ones) or split into two shrunken children (large ones,
    relative to the scene extent); Gaussians with near-zero opacity are
    pruned. Additions are skipped when they would exceed the cap. Adam
    moment rows are remapped to follow the surviving rows.
    """
    n = len(cloud)
    avg = np.where(seen > 0, grad_accum / np.maximum(seen, 1), 0.0)
    above = avg > cfg.densify_grad_threshold
    prune = cloud.opacities < cfg.prune_opacity
    big = cloud.scales.max(axis=1) > cfg.densify_percent_dense * scene_extent
    split_mask = above & big & ~prune
    clone_mask = above & ~big & ~prune

    n_add = int(clone_mask.sum()) + 2 * int(split_mask.sum())
    capped = False
    if n - int(prune.sum()) - int(split_mask.sum()) + n_add > cfg.max_gaussians:
        warnings.warn(
            f"densify skipped: cap of {cfg.max_gaussians} Gaussians reached",
            stacklevel=2)
        capped = True
        split_mask = np.zeros(n, dtype=bool)
        clone_mask = np.zeros(n, dtype=bool)

    keep = ~(prune | split_mask)
    pieces = [cloud.select(np.flatnonzero(keep))]
    append_rows = 0

    if clone_mask.any():
        pieces.append(cloud.select(np.flatnonzero(clone_mask)))
        append_rows += int(clone_mask.sum())

    if split_mask.any():
        src = cloud.select(np.flatnonzero(split_mask))
        k = len(src.positions)
        q = normalize_quaternions(src.rotations.astype(np.float64))
        from .scene import quat_to_rotmat  # local to avoid cycle at import
        R = quat_to_rotmat(q)
        s = np.exp(src.log_scales.astype(np.float64))
        children = []
        for _ in range(2):
            eps = rng.standard_normal((k, 3))
            offs = np.einsum("nij,nj->ni", R, eps * s)
            child = src.copy()
            child.positions = (src.positions.astype(np.float64) + offs
                               ).astype(src.positions.dtype)
            child.log_scales = (src.log_scales.astype(np.float64)
                                - math.log(cfg.split_scale_shrink)
                                ).astype(src.log_scales.dtype)
            children.append(child)
        pieces.append(GaussianCloud.concatenate(children))
        append_rows += 2 * k

    new_cloud = GaussianCloud.concatenate(pieces) if len(pieces) > 1 else pieces[0]
    keep_idx = np.flatnonzero(keep)
    clone_idx = np.flatnonzero(clone_mask)
    row_src = np.concatenate([keep_idx, clone_idx]) if clone_idx.size else keep_idx
    # cloned rows reuse source moments; split children start from zeros
    for g in CLOUD_GROUPS:
        adam.remap_rows(f"cloud.{g}", row_src,
                        len(new_cloud.positions) - row_src.size)
    stats = {"cloned": int(clone_mask.sum()), "split": int(split_mask.sum()),
             "pruned": int(prune.sum()), "capped": capped,
             "total": len(new_cloud.positions)}
    return new_cloud, stats


def init_cloud_from_frame(frame: FrameSample, cfg: TrainConfig
                          ) -> GaussianCloud:
    """Seed the canonical cloud by backprojecting one frame's depth prior.

    Scales start isotropic at each point's mean distance to its three
    nearest neighbors; opacity starts low so wrong points can be pruned.
    """
    valid = frame.depth.valid & frame.mask
    masked = DepthMap(frame.depth.values, valid)
    points, colors = backproject(masked, frame.image, frame.camera,
                                 stride=cfg.init_stride,
                                 max_points=cfg.init_max_points)
    if points.shape[0] < 4:
        raise ValueError("too few valid depth pixels to initialize a scene")
    tree = cKDTree(points)
    dists, _ = tree.query(points, k=4)
    nn = np.maximum(dists[:, 1:].mean(axis=1), 1e-6)
    n = points.shape[0]
    bands = num_sh_bands(cfg.sh_max_degree)
    sh = np.zeros((n, 3, bands), dtype=np.float32)
    sh[:, :, 0] = rgb_to_sh(colors)
    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=points.astype(np.float32),
        rotations=rot,
        log_scales=np.repeat(np.log(nn)[:, None], 3, axis=1).astype(np.float32),
        opacity_logits=np.full(n, inverse_sigmoid(cfg.init_opacity),
                               dtype=np.float32),
        sh_coeffs=sh,
        sh_degree=0,
    )


class Trainer:
    """Owns the cloud, the deformation field, and the optimization loop."""

    def __init__(self, dataset: Dataset, config: TrainConfig | None = None):
        self.dataset = dataset
        self.cfg = config or TrainConfig()
        self.train_idx, self.val_idx = split_train_val(len(dataset))
        if not self.train_idx:
            raise ValueError("dataset has no training frames")
        self.rng = np.random.default_rng(self.cfg.seed)
        self._priors: dict[int, tuple] = {}

        first = dataset.frame(self.train_idx[0])
        self.cloud = init_cloud_from_frame(first, self.cfg)
        pts = self.cloud.positions.astype(np.float64)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        extent = np.maximum(hi - lo, 1e-3)
        self.bbox_min = lo - self.cfg.bbox_margin * extent
        self.bbox_max = hi + self.cfg.bbox_margin * extent
        self.scene_extent = float(0.5 * np.linalg.norm(hi - lo))
        self.field = DeformationField(
            self.bbox_min, self.bbox_max,
            base_resolution=self.cfg.grid_resolution,
            num_levels=self.cfg.grid_levels,
            feature_dim=self.cfg.grid_feature_dim,
            hidden_width=self.cfg.mlp_width,
            sh_bands=num_sh_bands(self.cfg.sh_max_degree),
            seed=self.cfg.seed)
        self.adam = Adam(self.cfg.adam_beta1, self.cfg.adam_beta2,
                         self.cfg.adam_eps)
        self.iteration = 0
        self.active_sh = 0
        self.history: list[dict] = []
        self._reset_densify_stats()

    # -- helpers ---------------------------------------------------------

    def _reset_densify_stats(self) -> None:
        n = len(self.cloud)
        self._grad_accum = np.zeros(n)
        self._seen = np.zeros(n, dtype=np.int64)

    def _prior(self, index: int) -> tuple:
        """(metric depth values, depth mask, pseudo-normal map) per frame."""
        if index not in self._priors:
            fr = self.dataset.frame(index)
            dmask = fr.mask & fr.depth.valid
            normal = pseudo_normal_map(fr.depth.values, fr.depth.valid)
            self._priors[index] = (fr.depth.values, dmask, normal)
        return self._priors[index]

    @property
    def total_iterations(self) -> int:
        return self.cfg.iterations_static + self.cfg.iterations_dynamic

    def render_at(self, camera: Camera, t: float,
                  deform: bool = True):
        """Render the current model at normalized time t."""
        if deform:
            dcloud, _ = self.field.deform(self.cloud, t)
        else:
            dcloud = self.cloud
        return render(dcloud, camera, sh_degree=self.active_sh)

    # -- one optimization step -------------------------------------------

    def train_step(self, frame_index: int, dynamic: bool) -> dict:
        cfg = self.cfg
        fr = self.dataset.frame(frame_index)
        prior_depth, depth_mask, prior_normal = self._prior(frame_index)

        if dynamic:
            dcloud, dcache = self.field.deform(self.cloud, fr.time)
            tv_val, tv_grads = self.field.plane_tv_loss()
        else:
            dcloud, dcache = self.cloud, None
            tv_val, tv_grads = 0.0, None

        out = render(dcloud, fr.camera, sh_degree=self.active_sh)
        total, parts, bg = total_loss(
            out.color, out.depth, out.confidence, out.normal,
            fr.image, prior_depth, prior_normal, fr.mask,
            cfg.lambda_norm, cfg.lambda_grad, cfg.lambda_surf, cfg.lambda_con,
            tv_value=tv_val, depth_mask=depth_mask)
        pg = render_backward(dcloud, fr.camera, out,
                             grad_color=bg["d_color"], grad_depth=bg["d_depth"],
                             grad_confidence=bg["d_confidence"],
                             grad_normal=bg["d_normal"])

        if dynamic:
            fgrads, d_pos_extra = self.field.backward(
                dcache, pg.positions, pg.rotations, pg.log_scales,
                pg.opacity_logits, pg.sh_coeffs)
            g_pos = pg.positions + d_pos_extra
            for key, g in tv_grads.items():
                fgrads[key] = fgrads[key] + g
        else:
            fgrads, g_pos = None, pg.positions

        lr_pos = position_lr(cfg, self.iteration, self.total_iterations)
        cloud_grads = {"positions": (g_pos, lr_pos),
                       "rotations": (pg.rotations, cfg.lr_gaussian),
                       "log_scales": (pg.log_scales, cfg.lr_gaussian),
                       "opacity_logits": (pg.opacity_logits, cfg.lr_gaussian),
                       "sh_coeffs": (pg.sh_coeffs, cfg.lr_gaussian)}
        for name, (grad, lr) in cloud_grads.items():
            arr = getattr(self.cloud, name)
            setattr(self.cloud, name, self.adam.step(f"cloud.{name}", arr, grad, lr))
        self.cloud.rotations = normalize_quaternions(
            self.cloud.rotations.astype(np.float64)).astype(np.float32)

        if dynamic:
            groups = self.field.param_groups()
            for key in groups["planes"]:
                self.field.params[key] = self.adam.step(
                    f"field.{key}", self.field.params[key], fgrads[key],
                    cfg.lr_planes)
            for key in groups["mlps"]:
                self.field.params[key] = self.adam.step(
                    f"field.{key}", self.field.params[key], fgrads[key],
                    cfg.lr_mlp)

        self._grad_accum[pg.visible] += pg.screen_grad_norm[pg.visible]
        self._seen[pg.visible] += 1
        return {"total": total, **parts}

    def _maybe_densify(self) -> None:
        cfg = self.cfg
        it = self.iteration
        end = int(cfg.densify_end_fraction * self.total_iterations)
        if it < cfg.densify_start or it > end or it % cfg.densify_interval != 0:
            return
        self.cloud, stats = densify_and_prune(
            self.cloud, self.adam, self._grad_accum, self._seen, cfg,
            self.scene_extent, self.rng)
        self._reset_densify_stats()

    def _maybe_raise_sh(self) -> None:
        cfg = self.cfg
        if cfg.sh_degree_interval <= 0:
            return
        if self.iteration % cfg.sh_degree_interval == 0 and self.iteration > 0:
            if self.active_sh < cfg.sh_max_degree:
                self.active_sh += 1
                self.cloud.sh_degree = self.active_sh

    # -- validation --------------------------------------------------------

    def validate(self, deform: bool = True) -> dict:
        """Masked PSNR/SSIM over the validation frames at the current model."""
        rows = []
        for idx in self.val_idx:
            fr = self.dataset.frame(idx)
            out = self.render_at(fr.camera, fr.time, deform=deform)
            m = fr.mask[..., None]
            pred = np.clip(out.color, 0.0, 1.0) * m
            target = fr.image * m
            rows.append({"frame": idx, "psnr": psnr(pred, target),
                         "ssim": ssim(pred, target)})
        if not rows:
            return {"psnr": None, "ssim": None, "frames": []}
        return {"psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows])),
                "frames": rows}

    # -- full loop ---------------------------------------------------------

    def train(self, log=None) -> dict:
        """Run both stages; returns history plus final validation metrics."""
        cfg = self.cfg
        for stage, n_iters in (("static", cfg.iterations_static),
                               ("dynamic", cfg.iterations_dynamic)):
            dynamic = stage == "dynamic"
            for _ in range(n_iters):
                self.iteration += 1
                self._maybe_raise_sh()
                idx = self.train_idx[int(self.rng.integers(len(self.train_idx)))]
                parts = self.train_step(idx, dynamic)
                row = {"iteration": self.iteration, "psnr": "", "ssim": "",
                       "loss_total": parts["total"],
                       "loss_color": parts["color"],
                       "loss_depth": parts["depth"],
                       "loss_surf": parts["surf"],
                       "loss_con": parts["con"],
                       "loss_tv": parts["tv"],
                       "stage": stage}
                self._maybe_densify()
                if (cfg.val_interval > 0 and self.val_idx
                        and self.iteration % cfg.val_interval == 0):
                    metrics = self.validate(deform=dynamic)
                    row["psnr"] = metrics["psnr"]
                    row["ssim"] = metrics["ssim"]
                self.history.append(row)
                if log and self.iteration % cfg.log_interval == 0:
                    log(f"iter {self.iteration:5d} [{stage}] "
                        f"loss {parts['total']:.4f} "
                        f"gaussians {len(self.cloud)}")
        final = self.validate(deform=True) if self.val_idx else \
            {"psnr": None, "ssim": None, "frames": []}
        return {"history": self.history, "val": final,
                "iterations": self.iteration,
                "n_gaussians": len(self.cloud)}

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(HISTORY_COLUMNS)
            for row in self.history:
                writer.writerow([row["iteration"], row["psnr"], row["ssim"],
                                 row["loss_total"], row["loss_color"],
                                 row["loss_depth"], row["loss_surf"],
                                 row["loss_con"], row["loss_tv"]])

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_trainer_state(path, self.cloud, self.field, self.cfg,
                           iteration=self.iteration, active_sh=self.active_sh,
                           scene_extent=self.scene_extent, adam=self.adam)

    def export_ply(self, path, ascii_format: bool = False) -> None:
        export_ply(path, self.cloud, ascii_format=ascii_format)


def save_trainer_state(path, cloud: GaussianCloud, field: DeformationField,
                       cfg: TrainConfig, iteration: int = 0,
                       active_sh: int = 0, scene_extent: float = 1.0,
                       adam: Adam | None = None) -> None:
    """Serialize model + optimizer into the binary checkpoint container."""
    tensors = {}
    for g in CLOUD_GROUPS:
        tensors[f"cloud.{g}"] = getattr(cloud, g)
    for key, arr in field.params.items():
        tensors[f"field.{key}"] = arr
    meta = {
        "config": cfg.to_dict(),
        "iteration": int(iteration),
        "active_sh": int(active_sh),
        "cloud_sh_degree": int(cloud.sh_degree),
        "scene_extent": float(scene_extent),
        "field": field.state_metadata(),
    }
    if adam is not None:
        for name in sorted(adam.m):
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
        meta["adam_steps"] = adam.steps
        meta["adam_skipped"] = adam.skipped
    save_checkpoint(path, tensors, meta)


def load_trainer_state(path) -> dict:
    """Inverse of save_trainer_state.

    Returns a dict with cloud, field, config, iteration, active_sh,
    scene_extent, and (when present) a restored Adam instance.
    """
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    cloud = GaussianCloud(
        positions=tensors["cloud.positions"],
        rotations=tensors["cloud.rotations"],
        log_scales=tensors["cloud.log_scales"],
        opacity_logits=tensors["cloud.opacity_logits"],
        sh_coeffs=tensors["cloud.sh_coeffs"],
        sh_degree=int(meta["cloud_sh_degree"]))
    fld = DeformationField.from_metadata(meta["field"])
    for key in fld.params:
        full = f"field.{key}"
        if full not in tensors:
            raise ValueError(f"checkpoint is missing tensor '{full}'")
        if tensors[full].shape != fld.params[key].shape:
            raise ValueError(f"checkpoint tensor '{full}' has shape "
                             f"{tensors[full].shape}, expected "
                             f"{fld.params[key].shape}")
        fld.params[key] = tensors[full]
    adam = None
    if "adam_steps" in meta:
        adam = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        adam.steps = {k: int(v) for k, v in meta["adam_steps"].items()}
        adam.skipped = int(meta.get("adam_skipped", 0))
        for name in adam.steps:
            adam.m[name] = tensors[f"adam.m.{name}"]
            adam.v[name] = tensors[f"adam.v.{name}"]
    return {"cloud": cloud, "field": fld, "config": cfg,
            "iteration": int(meta["iteration"]),
            "active_sh": int(meta["active_sh"]),
            "scene_extent": float(meta["scene_extent"]), "adam": adam}
