"""Differentiable splat rasterizer: projection, tile binning, compositing.

The forward pass projects each Gaussian to a screen-space mean, inverse 2-D
covariance (conic), integer 3-sigma radius, view-dependent color, camera
depth, and a camera-frame normal (shortest axis, oriented away from the
camera so it shares the depth-derived normal convention). Splats are binned
to 16x16 tiles and composited front to back per pixel.

The backward pass replays compositing per pixel to recover transmittances,
accumulates per-instance gradients without atomics, reduces them in a fixed
order, then chains analytically through the conic inverse, the perspective
Jacobian, the covariance factorization, spherical harmonics, and every
activation back to the raw cloud parameters. Outputs are bit-identical
across runs and thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import numba

from . import _kernels
from .scene import (
    Camera,
    GaussianCloud,
    normalize_quaternions,
    quat_to_rotmat,
    rotmat_quat_jacobian,
    sh_basis,
    sh_basis_jacobian,
    num_sh_bands,
    sigmoid,
)

TILE_SIZE = _kernels.TILE_SIZE
# Screen-space covariance low-pass added to the diagonal (anti-aliasing floor).
COV2D_BLUR = 0.3
# Floor for the confidence denominator when normalizing accumulated depth.
CONFIDENCE_EPS = 1e-8
# Below this accumulated-normal norm the output normal is left at zero.
NORMAL_NORM_EPS = 1e-12


def set_num_threads(n: int) -> int:
    """Clamp and apply the worker-thread count for the compositing kernels."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass
class ProjectedGaussians:
    """Per-Gaussian screen-space quantities plus cached forward intermediates."""

    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    radius: np.ndarray
    color: np.ndarray
    color_clamped: np.ndarray
    opacity: np.ndarray
    normal: np.ndarray
    visible: np.ndarray
    # caches for the backward chain
    t_cam: np.ndarray
    cov3d: np.ndarray
    Tm: np.ndarray
    rx: np.ndarray
    ry: np.ndarray
    rx_free: np.ndarray
    ry_free: np.ndarray
    q_unit: np.ndarray
    q_norm: np.ndarray
    scales: np.ndarray
    axis: np.ndarray
    flip: np.ndarray
    basis: np.ndarray
    dir_unit: np.ndarray
    dir_norm: np.ndarray
    sh_degree: int


@dataclass
class RenderAux:
    proj: ProjectedGaussians
    inst_gauss: np.ndarray
    tile_ranges: np.ndarray
    tiles_x: int
    final_t: np.ndarray
    n_replay: np.ndarray
    dsum: np.ndarray
    wsum: np.ndarray
    nsum: np.ndarray
    nsum_norm: np.ndarray
    n_gaussians: int


@dataclass
class RenderOutput:
    """Composited maps: color (H,W,3), depth, confidence, normal (H,W,3).

    depth is the confidence-normalized weighted camera depth; confidence is
    the accumulated compositing weight in [0, 1]; normal holds unit vectors
    where confidence is positive and zeros elsewhere. n_contrib counts the
    composited splats per pixel. aux carries buffers for the backward pass.
    """

    color: np.ndarray
    depth: np.ndarray
    confidence: np.ndarray
    normal: np.ndarray
    n_contrib: np.ndarray
    aux: Optional[RenderAux]


@dataclass
class ParamGrads:
    """Loss gradients in raw parameter space plus densification statistics."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    screen_grad_norm: np.ndarray
    visible: np.ndarray


def project_gaussians(cloud: GaussianCloud, camera: Camera,
                      sh_degree: int | None = None) -> ProjectedGaussians:
    """Project a cloud into screen space, culling by depth and image bounds.

    Culled Gaussians keep zeroed rows and visible=False. Compute runs in
    float64 regardless of the cloud dtype.
    """
    if sh_degree is None:
        sh_degree = cloud.sh_degree
    n = len(cloud)
    pos = np.asarray(cloud.positions, dtype=np.float64)
    q_raw = np.asarray(cloud.rotations, dtype=np.float64)
    q_norm = np.linalg.norm(q_raw, axis=-1)
    q_unit = q_raw / q_norm[:, None]
    scales = np.exp(np.asarray(cloud.log_scales, dtype=np.float64))
    opacity = sigmoid(np.asarray(cloud.opacity_logits, dtype=np.float64))
    sh = np.asarray(cloud.sh_coeffs, dtype=np.float64)

    W = camera.R
    t_cam = pos @ W.T + camera.t
    tz = t_cam[:, 2]
    visible = (tz > camera.near) & (tz < camera.far) & np.isfinite(tz)

    safe_tz = np.where(visible, tz, 1.0)
    u = camera.fx * t_cam[:, 0] / safe_tz + camera.cx
    v = camera.fy * t_cam[:, 1] / safe_tz + camera.cy
    mean2d = np.stack([u, v], axis=-1)

    # perspective Jacobian with the frustum ratio clamp
    lim_x = 1.3 * (0.5 * camera.width / camera.fx)
    lim_y = 1.3 * (0.5 * camera.height / camera.fy)
    rx_raw = t_cam[:, 0] / safe_tz
    ry_raw = t_cam[:, 1] / safe_tz
    rx = np.clip(rx_raw, -lim_x, lim_x)
    ry = np.clip(ry_raw, -lim_y, lim_y)
    rx_free = np.abs(rx_raw) < lim_x
    ry_free = np.abs(ry_raw) < lim_y

    R_g = quat_to_rotmat(q_unit)
    M = R_g * scales[:, None, :]
    cov3d = M @ np.swapaxes(M, -1, -2)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / safe_tz
    J[:, 0, 2] = -camera.fx * rx / safe_tz
    J[:, 1, 1] = camera.fy / safe_tz
    J[:, 1, 2] = -camera.fy * ry / safe_tz
    Tm = J @ W
    cov2d = np.einsum("nij,njk,nlk->nil", Tm, cov3d, Tm)
    cov2d[:, 0, 0] += COV2D_BLUR
    cov2d[:, 1, 1] += COV2D_BLUR

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    visible &= det > 0
    safe_det = np.where(visible, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=-1)

    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - safe_det, 0.0))
    lam_max = mid + disc
    radius = np.ceil(3.0 * np.sqrt(np.maximum(lam_max, 0.0))).astype(np.int64)
    visible &= radius >= 1
    # cull splats whose 3-sigma box misses the image entirely
    r = radius.astype(np.float64)
    visible &= (u + r >= 0) & (u - r <= camera.width - 1)
    visible &= (v + r >= 0) & (v - r <= camera.height - 1)

    # view-conditioned color
    cam_center = camera.cam_center
    dirv = pos - cam_center
    dir_norm = np.linalg.norm(dirv, axis=-1)
    safe_dn = np.where(dir_norm > 0, dir_norm, 1.0)
    dir_unit = dirv / safe_dn[:, None]
    basis = sh_basis(dir_unit, sh_degree)
    nb = num_sh_bands(sh_degree)
    raw = np.einsum("nb,ncb->nc", basis, sh[:, :, :nb]) + 0.5
    color_clamped = raw < 0.0
    color = np.maximum(raw, 0.0)

    # camera-frame shortest-axis normal, oriented away from the camera
    axis = np.argmin(scales, axis=-1)
    n_world = np.take_along_axis(R_g, axis[:, None, None], axis=-1)[:, :, 0]
    n_cam = n_world @ W.T
    dot = np.einsum("ni,ni->n", n_cam, t_cam)
    flip = np.where(dot < 0, -1.0, 1.0)
    normal = n_cam * flip[:, None]

    zero = ~visible
    for arr in (mean2d, conic, normal, color):
        arr[zero] = 0.0
    radius = np.where(visible, radius, 0)

    return ProjectedGaussians(
        mean2d=mean2d, conic=conic, depth=tz.copy(), radius=radius,
        color=color, color_clamped=color_clamped, opacity=opacity,
        normal=normal, visible=visible,
        t_cam=t_cam, cov3d=cov3d, Tm=Tm, rx=rx, ry=ry,
        rx_free=rx_free, ry_free=ry_free,
        q_unit=q_unit, q_norm=q_norm, scales=scales, axis=axis, flip=flip,
        basis=basis, dir_unit=dir_unit, dir_norm=dir_norm, sh_degree=sh_degree,
    )


def _bin_instances(proj: ProjectedGaussians, width: int, height: int
                   ) -> tuple[np.ndarray, np.ndarray, int]:
    """Duplicate visible splats per overlapped tile, sorted by (tile, depth, id)."""
    tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y
    vis_idx = np.flatnonzero(proj.visible)
    if vis_idx.size == 0:
        return (np.zeros(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64), tiles_x)
    u = proj.mean2d[vis_idx, 0]
    v = proj.mean2d[vis_idx, 1]
    r = proj.radius[vis_idx].astype(np.float64)
    x0 = np.clip(np.floor((u - r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((u + r) / TILE_SIZE), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((v - r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((v + r) / TILE_SIZE), 0, tiles_y - 1).astype(np.int64)
    counts = (x1 - x0 + 1) * (y1 - y0 + 1)
    total = int(counts.sum())
    offsets = np.concatenate([[0], np.cumsum(counts)])
    local = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], counts)
    wx = np.repeat(x1 - x0 + 1, counts)
    dx = local % wx
    dy = local // wx
    tile_id = (np.repeat(y0, counts) + dy) * tiles_x + np.repeat(x0, counts) + dx
    gauss = np.repeat(vis_idx, counts)
    order = np.lexsort((gauss, proj.depth[gauss], tile_id))
    tile_id = tile_id[order]
    inst_gauss = gauss[order]
    tile_ranges = np.searchsorted(tile_id, np.arange(n_tiles + 1, dtype=np.int64))
    return inst_gauss, tile_ranges.astype(np.int64), tiles_x


def _finalize_maps(dsum, wsum, nsum):
    depth = dsum / np.maximum(wsum, CONFIDENCE_EPS)
    nsum_norm = np.linalg.norm(nsum, axis=-1)
    ok = nsum_norm > NORMAL_NORM_EPS
    normal = np.zeros_like(nsum)
    normal[ok] = nsum[ok] / nsum_norm[ok][:, None]
    return depth, normal, nsum_norm


def render(cloud: GaussianCloud, camera: Camera,
           sh_degree: int | None = None) -> RenderOutput:
    """Tile-binned forward render over a black background."""
    proj = project_gaussians(cloud, camera, sh_degree)
    h, w = camera.height, camera.width
    inst_gauss, tile_ranges, tiles_x = _bin_instances(proj, w, h)
    out_color = np.zeros((h, w, 3))
    dsum = np.zeros((h, w))
    wsum = np.zeros((h, w))
    nsum = np.zeros((h, w, 3))
    final_t = np.ones((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    n_replay = np.zeros((h, w), dtype=np.int64)
    if inst_gauss.size:
        _kernels.composite_tiles(
            proj.mean2d, proj.conic, proj.depth, proj.color, proj.opacity,
            proj.normal, proj.radius, inst_gauss, tile_ranges, w, h, tiles_x,
            out_color, dsum, wsum, nsum, final_t, n_contrib, n_replay)
    depth, normal, nsum_norm = _finalize_maps(dsum, wsum, nsum)
    aux = RenderAux(proj=proj, inst_gauss=inst_gauss, tile_ranges=tile_ranges,
                    tiles_x=tiles_x, final_t=final_t, n_replay=n_replay,
                    dsum=dsum, wsum=wsum, nsum=nsum, nsum_norm=nsum_norm,
                    n_gaussians=len(cloud))
    return RenderOutput(color=out_color, depth=depth, confidence=wsum,
                        normal=normal, n_contrib=n_contrib, aux=aux)


def render_reference(cloud: GaussianCloud, camera: Camera,
                     sh_degree: int | None = None) -> RenderOutput:
    """Naive oracle renderer: per pixel, walk every visible splat in depth
    order with no tiling and no early termination. Per-contribution math is
    identical to the tiled path."""
    proj = project_gaussians(cloud, camera, sh_degree)
    h, w = camera.height, camera.width
    vis_idx = np.flatnonzero(proj.visible)
    order = vis_idx[np.lexsort((vis_idx, proj.depth[vis_idx]))]
    out_color = np.zeros((h, w, 3))
    dsum = np.zeros((h, w))
    wsum = np.zeros((h, w))
    nsum = np.zeros((h, w, 3))
    final_t = np.ones((h, w))
    n_contrib = np.zeros((h, w), dtype=np.int64)
    if order.size:
        _kernels.composite_reference(
            proj.mean2d, proj.conic, proj.depth, proj.color, proj.opacity,
            proj.normal, proj.radius, order, w, h,
            out_color, dsum, wsum, nsum, final_t, n_contrib)
    depth, normal, _ = _finalize_maps(dsum, wsum, nsum)
    return RenderOutput(color=out_color, depth=depth, confidence=wsum,
                        normal=normal, n_contrib=n_contrib, aux=None)


def render_backward(cloud: GaussianCloud, camera: Camera, output: RenderOutput,
                    grad_color: np.ndarray | None = None,
                    grad_depth: np.ndarray | None = None,
                    grad_confidence: np.ndarray | None = None,
                    grad_normal: np.ndarray | None = None) -> ParamGrads:
    """Chain per-pixel cotangents on the output maps back to raw parameters.

    grad_depth applies to the confidence-normalized depth map, grad_normal
    to the renormalized unit-normal map; their internal normalizations are
    differentiated here. Raises if the aux buffers do not match the cloud.
    """
    aux = output.aux
    if aux is None:
        raise ValueError("output carries no backward buffers (reference render?)")
    n = len(cloud)
    if aux.n_gaussians != n:
        raise ValueError(
            f"render buffers built for {aux.n_gaussians} Gaussians, cloud has {n}")
    proj = aux.proj
    h, w = camera.height, camera.width
    for name, g, shape in (("grad_color", grad_color, (h, w, 3)),
                           ("grad_depth", grad_depth, (h, w)),
                           ("grad_confidence", grad_confidence, (h, w)),
                           ("grad_normal", grad_normal, (h, w, 3))):
        if g is not None and g.shape != shape:
            raise ValueError(f"{name} shape {g.shape}, expected {shape}")

    gC = np.zeros((h, w, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    # depth map = dsum / max(wsum, eps)
    wg = np.maximum(aux.wsum, CONFIDENCE_EPS)
    g_dsum = np.zeros((h, w))
    g_wsum = np.zeros((h, w))
    if grad_depth is not None:
        gD = np.asarray(grad_depth, dtype=np.float64)
        g_dsum = gD / wg
        live = aux.wsum > CONFIDENCE_EPS
        g_wsum = np.where(live, -gD * aux.dsum / (wg * wg), 0.0)
    if grad_confidence is not None:
        g_wsum = g_wsum + np.asarray(grad_confidence, dtype=np.float64)
    g_nsum = np.zeros((h, w, 3))
    if grad_normal is not None:
        gN = np.asarray(grad_normal, dtype=np.float64)
        ok = aux.nsum_norm > NORMAL_NORM_EPS
        nhat = output.normal
        dot = np.einsum("hwc,hwc->hw", nhat, gN)
        g_nsum = np.where(ok[..., None],
                          (gN - nhat * dot[..., None]) / np.maximum(aux.nsum_norm, 1.0e-300)[..., None],
                          0.0)

    inst_grads = np.zeros((aux.inst_gauss.shape[0], 13))
    if aux.inst_gauss.size:
        _kernels.composite_backward(
            proj.mean2d, proj.conic, proj.depth, proj.color, proj.opacity,
            proj.normal, proj.radius, aux.inst_gauss, aux.tile_ranges,
            w, h, aux.tiles_x, aux.final_t, aux.n_replay,
            gC, g_dsum, g_wsum, g_nsum, inst_grads)
        g13 = _kernels.reduce_instance_grads(aux.inst_gauss, inst_grads, n)
    else:
        g13 = np.zeros((n, 13))

    g_uv = g13[:, 0:2]
    g_conic = g13[:, 2:5]
    g_opac = g13[:, 5]
    g_col = g13[:, 6:9]
    g_dep = g13[:, 9]
    g_nrm = g13[:, 10:13]

    vis = proj.visible
    W = camera.R
    tz = np.where(vis, proj.t_cam[:, 2], 1.0)
    g_t = np.zeros((n, 3))
    # projected mean
    g_t[:, 0] += g_uv[:, 0] * camera.fx / tz
    g_t[:, 1] += g_uv[:, 1] * camera.fy / tz
    g_t[:, 2] += (-g_uv[:, 0] * camera.fx * proj.t_cam[:, 0]
                  - g_uv[:, 1] * camera.fy * proj.t_cam[:, 1]) / (tz * tz)
    # composited camera depth
    g_t[:, 2] += g_dep

    # conic -> 2-D covariance (inverse backward), then through the projection
    Y = np.zeros((n, 2, 2))
    Y[:, 0, 0] = proj.conic[:, 0]
    Y[:, 0, 1] = Y[:, 1, 0] = proj.conic[:, 1]
    Y[:, 1, 1] = proj.conic[:, 2]
    Ghat = np.zeros((n, 2, 2))
    Ghat[:, 0, 0] = g_conic[:, 0]
    Ghat[:, 0, 1] = Ghat[:, 1, 0] = 0.5 * g_conic[:, 1]
    Ghat[:, 1, 1] = g_conic[:, 2]
    dSig2 = -np.einsum("nij,njk,nkl->nil", Y, Ghat, Y)
    dT = 2.0 * np.einsum("nij,njk,nkl->nil", dSig2, proj.Tm, proj.cov3d)
    dCov3 = np.einsum("nji,njk,nkl->nil", proj.Tm, dSig2, proj.Tm)
    dJ = dT @ W.T

    g_rx = dJ[:, 0, 2] * (-camera.fx / tz)
    g_ry = dJ[:, 1, 2] * (-camera.fy / tz)
    g_t[:, 2] += (dJ[:, 0, 0] * (-camera.fx) + dJ[:, 1, 1] * (-camera.fy)
                  + dJ[:, 0, 2] * camera.fx * proj.rx
                  + dJ[:, 1, 2] * camera.fy * proj.ry) / (tz * tz)
    g_rx = np.where(proj.rx_free, g_rx, 0.0)
    g_ry = np.where(proj.ry_free, g_ry, 0.0)
    g_t[:, 0] += g_rx / tz
    g_t[:, 1] += g_ry / tz
    g_t[:, 2] += (-g_rx * proj.t_cam[:, 0] - g_ry * proj.t_cam[:, 1]) / (tz * tz)

    g_pos = g_t @ W

    # covariance factor M = R diag(s)
    R_g = quat_to_rotmat(proj.q_unit)
    M = R_g * proj.scales[:, None, :]
    dM = 2.0 * np.einsum("nij,njk->nik", dCov3, M)
    g_scales = np.einsum("nrk,nrk->nk", R_g, dM)
    dR = dM * proj.scales[:, None, :]

    # oriented camera-frame normal n = flip * W R[:, axis]
    g_nworld = (g_nrm @ W) * proj.flip[:, None]
    np.put_along_axis(
        dR, proj.axis[:, None, None],
        np.take_along_axis(dR, proj.axis[:, None, None], axis=-1) + g_nworld[:, :, None],
        axis=-1)

    # spherical harmonics and the color clamp
    nb = num_sh_bands(proj.sh_degree)
    g_c_eff = np.where(proj.color_clamped, 0.0, g_col)
    g_sh = np.zeros((n,) + cloud.sh_coeffs.shape[1:])
    g_sh[:, :, :nb] = np.einsum("nc,nb->ncb", g_c_eff, proj.basis)
    sh = np.asarray(cloud.sh_coeffs[:, :, :nb], dtype=np.float64)
    basisJ = sh_basis_jacobian(proj.dir_unit, proj.sh_degree)
    g_dirU = np.einsum("nc,ncb,nbd->nd", g_c_eff, sh, basisJ)
    dn = np.where(proj.dir_norm > 0, proj.dir_norm, 1.0)
    dotd = np.einsum("ni,ni->n", proj.dir_unit, g_dirU)
    g_pos += (g_dirU - proj.dir_unit * dotd[:, None]) / dn[:, None]

    # quaternion through the rotation matrix and its normalization
    Jq = rotmat_quat_jacobian(proj.q_unit)
    g_qunit = np.einsum("nkij,nij->nk", Jq, dR)
    dotq = np.einsum("ni,ni->n", proj.q_unit, g_qunit)
    g_q = (g_qunit - proj.q_unit * dotq[:, None]) / proj.q_norm[:, None]

    # activations
    g_ls = g_scales * proj.scales
    g_logit = g_opac * proj.opacity * (1.0 - proj.opacity)

    zero = ~vis
    for arr in (g_pos, g_q, g_ls, g_sh):
        arr[zero] = 0.0
    g_logit = np.where(vis, g_logit, 0.0)

    screen = np.hypot(g_uv[:, 0] * (w * 0.5), g_uv[:, 1] * (h * 0.5))
    return ParamGrads(positions=g_pos, rotations=g_q, log_scales=g_ls,
                      opacity_logits=g_logit, sh_coeffs=g_sh,
                      screen_grad_norm=np.where(vis, screen, 0.0),
                      visible=vis.copy())
