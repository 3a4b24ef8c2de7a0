"""Point-cloud export and import in the PLY splat layout.

Properties follow the de facto Gaussian-splat convention: position, the
shortest-axis normal, raw opacity logit, raw log scales, raw (unnormalized)
quaternion, then spherical-harmonic coefficients as f_dc_0..2 followed by
the higher bands channel-major (f_rest_{c * (bands - 1) + band}). Values are
stored in parameter space, not activated space, so a written file reimports
bit-exactly at float32.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .scene import GaussianCloud, shortest_axis_normal


def _property_names(n_rest: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz", "opacity",
             "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    return names


def _pack_rows(cloud: GaussianCloud) -> np.ndarray:
    normals = shortest_axis_normal(cloud.unit_rotations, cloud.scales)
    n = len(cloud.positions)
    dc = cloud.sh_coeffs[:, :, 0]
    rest = cloud.sh_coeffs[:, :, 1:].reshape(n, -1)
    cols = [cloud.positions, normals, cloud.opacity_logits[:, None],
            cloud.log_scales, cloud.rotations, dc, rest]
    return np.concatenate(cols, axis=1).astype(np.float32)


def export_ply(path, cloud: GaussianCloud, ascii_format: bool = False) -> None:
    """Write the cloud to path; binary little-endian unless ascii_format."""
    rows = _pack_rows(cloud)
    names = _property_names(rows.shape[1] - 17)
    fmt = "ascii 1.0" if ascii_format else "binary_little_endian 1.0"
    header = ["ply", f"format {fmt}",
              "comment raw gaussian parameters (log scales, logit opacity)",
              f"element vertex {rows.shape[0]}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if ascii_format:
            for row in rows:
                f.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))
        else:
            f.write(rows.tobytes())


def import_ply(path) -> GaussianCloud:
    """Read a PLY file written by export_ply back into a GaussianCloud."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header_lines = raw[:end].decode("ascii").splitlines()
    if header_lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    fmt = next(l.split()[1] for l in header_lines if l.startswith("format "))
    count = next(int(l.split()[2]) for l in header_lines
                 if l.startswith("element vertex"))
    names = [l.split()[2] for l in header_lines if l.startswith("property ")]

    if fmt == "ascii":
        rows = np.loadtxt(raw[end:].decode("ascii").splitlines(),
                          dtype=np.float32, ndmin=2)
    elif fmt == "binary_little_endian":
        rows = np.frombuffer(raw[end:end + 4 * count * len(names)],
                             dtype="<f4").reshape(count, len(names))
    else:
        raise ValueError(f"{path}: unsupported PLY format '{fmt}'")

    col = {name: i for i, name in enumerate(names)}
    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    bands = 1 + n_rest // 3
    positions = rows[:, [col["x"], col["y"], col["z"]]]
    opacity = rows[:, col["opacity"]]
    log_scales = rows[:, [col[f"scale_{i}"] for i in range(3)]]
    rotations = rows[:, [col[f"rot_{i}"] for i in range(4)]]
    sh = np.zeros((count, 3, bands), dtype=np.float32)
    sh[:, :, 0] = rows[:, [col[f"f_dc_{i}"] for i in range(3)]]
    if n_rest:
        rest = rows[:, [col[f"f_rest_{i}"] for i in range(n_rest)]]
        sh[:, :, 1:] = rest.reshape(count, 3, bands - 1)
    degree = int(round(np.sqrt(bands))) - 1
    return GaussianCloud(positions=positions, rotations=rotations,
                         log_scales=log_scales, opacity_logits=opacity,
                         sh_coeffs=sh, sh_degree=degree)
