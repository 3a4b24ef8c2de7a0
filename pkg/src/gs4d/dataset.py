"""Dataset manifest loading, frame access, and the train/validation split.

A manifest is a JSON file pointing at per-frame image / depth / mask files
with timestamps and either a shared camera or per-frame cameras. Frames are
decoded lazily and cached; every loading error names the frame index.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .depth import DepthMap, read_depth_png16, read_pfm, recover_metric_depth
from .scene import Camera

DEFAULT_BETA = 1000.0
VAL_EVERY = 8  # one validation frame per eight (7:1 split)


@dataclass
class FrameSample:
    """One decoded frame: image in [0, 1], metric depth prior, boolean mask."""

    index: int
    time: float
    camera: Camera
    image: np.ndarray
    depth: DepthMap
    mask: np.ndarray


@dataclass
class FrameRecord:
    index: int
    image_path: Path
    depth_path: Path
    mask_path: Optional[Path]
    time: float
    camera: Camera


class Dataset:
    """Frame collection defined by a manifest; see load_manifest."""

    def __init__(self, records: list[FrameRecord], beta: float, depth_kind: str):
        self.records = records
        self.beta = beta
        self.depth_kind = depth_kind
        self._cache: dict[int, FrameSample] = {}
        last = records[-1].time if records else 0.0
        self._time_scale = last if last > 0 else 1.0

    def __len__(self) -> int:
        return len(self.records)

    def normalized_time(self, index: int) -> float:
        return self.records[index].time / self._time_scale

    def frame(self, index: int) -> FrameSample:
        if index in self._cache:
            return self._cache[index]
        rec = self.records[index]
        try:
            sample = self._decode(rec)
        except Exception as exc:
            raise ValueError(f"frame {index}: {exc}") from exc
        self._cache[index] = sample
        return sample

    def _decode(self, rec: FrameRecord) -> FrameSample:
        cam = rec.camera
        img = Image.open(rec.image_path).convert("RGB")
        image = np.asarray(img, dtype=np.float64) / 255.0
        if image.shape[:2] != (cam.height, cam.width):
            raise ValueError(
                f"image is {image.shape[1]}x{image.shape[0]}, camera expects "
                f"{cam.width}x{cam.height}")

        suffix = rec.depth_path.suffix.lower()
        if suffix == ".pfm":
            raw = read_pfm(rec.depth_path)
            if self.depth_kind == "metric":
                ok = np.isfinite(raw) & (raw > 0)
                depth = DepthMap(np.where(ok, raw, 0.0), ok)
            else:
                depth = recover_metric_depth(raw, self.beta)
        elif suffix == ".png":
            if self.depth_kind == "metric":
                raise ValueError(
                    "16-bit PNG depth holds inverse depth; depth_kind 'metric' "
                    "is only valid for PFM files")
            depth = recover_metric_depth(read_depth_png16(rec.depth_path), self.beta)
        else:
            raise ValueError(f"unsupported depth format '{suffix}'")
        if depth.values.shape != (cam.height, cam.width):
            raise ValueError(
                f"depth is {depth.values.shape[1]}x{depth.values.shape[0]}, camera "
                f"expects {cam.width}x{cam.height}")

        if rec.mask_path is None:
            mask = np.ones((cam.height, cam.width), dtype=bool)
        else:
            marr = np.asarray(Image.open(rec.mask_path).convert("L"))
            if marr.shape != (cam.height, cam.width):
                raise ValueError(
                    f"mask is {marr.shape[1]}x{marr.shape[0]}, camera expects "
                    f"{cam.width}x{cam.height}")
            mask = marr > 127
        return FrameSample(index=rec.index, time=self.normalized_time(rec.index),
                           camera=cam, image=image, depth=depth, mask=mask)


def load_manifest(path) -> Dataset:
    """Parse a dataset manifest and validate its structure.

    Required keys: "frames" (list of {image, depth, time} with optional mask
    and camera). A top-level "camera" is shared by frames that do not carry
    their own. "depth_kind" is "inverse" (default) or "metric"; "beta" scales
    inverse depth. Timestamps must be non-negative and strictly increasing.
    """
    path = Path(path)
    with open(path) as f:
        data = json.load(f)
    if "frames" not in data or not isinstance(data["frames"], list):
        raise ValueError("manifest lacks a 'frames' list")
    if not data["frames"]:
        raise ValueError("manifest contains no frames")
    depth_kind = data.get("depth_kind", "inverse")
    if depth_kind not in ("inverse", "metric"):
        raise ValueError(f"unknown depth_kind '{depth_kind}'")
    beta = float(data.get("beta", DEFAULT_BETA))
    if beta <= 0:
        raise ValueError("beta must be positive")
    shared_cam = Camera.from_dict(data["camera"]) if "camera" in data else None

    base = path.parent
    records = []
    prev_time = -np.inf
    for i, fr in enumerate(data["frames"]):
        try:
            for key in ("image", "depth", "time"):
                if key not in fr:
                    raise ValueError(f"missing '{key}'")
            t = float(fr["time"])
            if t < 0:
                raise ValueError("negative timestamp")
            if t <= prev_time:
                raise ValueError("timestamps must be strictly increasing")
            prev_time = t
            cam = Camera.from_dict(fr["camera"]) if "camera" in fr else shared_cam
            if cam is None:
                raise ValueError("no camera (neither shared nor per-frame)")
            image_path = base / fr["image"]
            depth_path = base / fr["depth"]
            mask_path = base / fr["mask"] if fr.get("mask") else None
            for p in (image_path, depth_path, mask_path):
                if p is not None and not p.exists():
                    raise ValueError(f"file not found: {p}")
            records.append(FrameRecord(index=i, image_path=image_path,
                                       depth_path=depth_path, mask_path=mask_path,
                                       time=t, camera=cam))
        except ValueError as exc:
            raise ValueError(f"frame {i}: {exc}") from None
    return Dataset(records, beta=beta, depth_kind=depth_kind)


def split_train_val(n_frames: int) -> tuple[list[int], list[int]]:
    """Deterministic 7:1 split: every eighth frame (index % 8 == 7) validates.

    Sequences shorter than eight frames produce an empty validation set and
    a warning.
    """
    val = [i for i in range(n_frames) if i % VAL_EVERY == VAL_EVERY - 1]
    train = [i for i in range(n_frames) if i % VAL_EVERY != VAL_EVERY - 1]
    if not val:
        warnings.warn(
            f"only {n_frames} frames: validation split is empty (need >= "
            f"{VAL_EVERY})", stacklevel=2)
    return train, val
