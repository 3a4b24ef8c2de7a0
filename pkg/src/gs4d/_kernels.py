"""Numba kernels for tile-binned and reference alpha compositing.

Both renderers share one per-contribution rule set so their outputs agree:
a splat covers the Chebyshev box of its integer 3-sigma radius, the Gaussian
falloff is evaluated from the inverse 2-D covariance (conic), alpha is
clamped to 0.99, contributions with alpha < 1/255 are skipped. Contributors
are composited front to back in (depth, index) order. Only the tiled kernel
stops early once transmittance drops below 1e-4; the reference kernel walks
every Gaussian for every pixel.

Parallel loops write disjoint buffers (tiles own their pixels, instances own
their gradient slots), so results are bit-identical for any thread count.
"""

import math

import numpy as np
from numba import njit, prange

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
TILE_SIZE = 16


@njit(cache=True, parallel=True)
def composite_tiles(mean2d, conic, depth, color, opacity, normal, radius,
                    inst_gauss, tile_ranges, width, height, tiles_x,
                    out_color, out_dsum, out_wsum, out_nsum,
                    out_final_t, out_n_contrib, out_n_replay):
    n_tiles = tile_ranges.shape[0] - 1
    for tile in prange(n_tiles):
        start = tile_ranges[tile]
        end = tile_ranges[tile + 1]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        x0 = tx * TILE_SIZE
        y0 = ty * TILE_SIZE
        x1 = min(x0 + TILE_SIZE, width)
        y1 = min(y0 + TILE_SIZE, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                t_cur = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                wsum = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                ncon = 0
                nrep = 0
                for idx in range(start, end):
                    g = inst_gauss[idx]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    r = radius[g]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    alpha = opacity[g] * math.exp(power)
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    w = alpha * t_cur
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    dsum += depth[g] * w
                    wsum += w
                    n0 += normal[g, 0] * w
                    n1 += normal[g, 1] * w
                    n2 += normal[g, 2] * w
                    t_cur *= 1.0 - alpha
                    ncon += 1
                    nrep = idx - start + 1
                    if t_cur < TRANSMITTANCE_MIN:
                        break
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_dsum[py, px] = dsum
                out_wsum[py, px] = wsum
                out_nsum[py, px, 0] = n0
                out_nsum[py, px, 1] = n1
                out_nsum[py, px, 2] = n2
                out_final_t[py, px] = t_cur
                out_n_contrib[py, px] = ncon
                out_n_replay[py, px] = nrep


@njit(cache=True, parallel=True)
def composite_reference(mean2d, conic, depth, color, opacity, normal, radius,
                        order, width, height,
                        out_color, out_dsum, out_wsum, out_nsum,
                        out_final_t, out_n_contrib):
    n = order.shape[0]
    for py in prange(height):
        for px in range(width):
            t_cur = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            dsum = 0.0
            wsum = 0.0
            n0 = 0.0
            n1 = 0.0
            n2 = 0.0
            ncon = 0
            for k in range(n):
                g = order[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                r = radius[g]
                if dx > r or dx < -r or dy > r or dy < -r:
                    continue
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                    - conic[g, 1] * dx * dy
                if power > 0.0:
                    continue
                alpha = opacity[g] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                w = alpha * t_cur
                c0 += color[g, 0] * w
                c1 += color[g, 1] * w
                c2 += color[g, 2] * w
                dsum += depth[g] * w
                wsum += w
                n0 += normal[g, 0] * w
                n1 += normal[g, 1] * w
                n2 += normal[g, 2] * w
                t_cur *= 1.0 - alpha
                ncon += 1
            out_color[py, px, 0] = c0
            out_color[py, px, 1] = c1
            out_color[py, px, 2] = c2
            out_dsum[py, px] = dsum
            out_wsum[py, px] = wsum
            out_nsum[py, px, 0] = n0
            out_nsum[py, px, 1] = n1
            out_nsum[py, px, 2] = n2
            out_final_t[py, px] = t_cur
            out_n_contrib[py, px] = ncon


@njit(cache=True, parallel=True)
def composite_backward(mean2d, conic, depth, color, opacity, normal, radius,
                       inst_gauss, tile_ranges, width, height, tiles_x,
                       final_t, n_replay,
                       grad_color, grad_dsum, grad_wsum, grad_nsum,
                       inst_grads):
    """Replay compositing per pixel and fill per-instance gradient slots.

    inst_grads has one 13-wide row per instance:
    [du, dv, dA, dB, dC, dopacity, dc0, dc1, dc2, ddepth, dn0, dn1, dn2].
    Each instance belongs to exactly one tile, so parallel tiles never race;
    the per-Gaussian reduction happens outside in a fixed order.
    """
    n_tiles = tile_ranges.shape[0] - 1
    for tile in prange(n_tiles):
        start = tile_ranges[tile]
        end = tile_ranges[tile + 1]
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        x0 = tx * TILE_SIZE
        y0 = ty * TILE_SIZE
        x1 = min(x0 + TILE_SIZE, width)
        y1 = min(y0 + TILE_SIZE, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                nrep = n_replay[py, px]
                if nrep == 0:
                    continue
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gd = grad_dsum[py, px]
                gw = grad_wsum[py, px]
                gn0 = grad_nsum[py, px, 0]
                gn1 = grad_nsum[py, px, 1]
                gn2 = grad_nsum[py, px, 2]
                t_after = final_t[py, px]
                suffix = 0.0
                for k in range(nrep - 1, -1, -1):
                    idx = start + k
                    g = inst_gauss[idx]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    r = radius[g]
                    if dx > r or dx < -r or dy > r or dy < -r:
                        continue
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    raw_alpha = opacity[g] * math.exp(power)
                    alpha = raw_alpha
                    if alpha > ALPHA_MAX:
                        alpha = ALPHA_MAX
                    if alpha < ALPHA_MIN:
                        continue
                    t_before = t_after / (1.0 - alpha)
                    w = alpha * t_before
                    dldw = gc0 * color[g, 0] + gc1 * color[g, 1] + gc2 * color[g, 2] \
                        + gd * depth[g] + gw \
                        + gn0 * normal[g, 0] + gn1 * normal[g, 1] + gn2 * normal[g, 2]
                    dlda = t_before * dldw - suffix / (1.0 - alpha)
                    suffix += w * dldw
                    t_after = t_before
                    inst_grads[idx, 6] += gc0 * w
                    inst_grads[idx, 7] += gc1 * w
                    inst_grads[idx, 8] += gc2 * w
                    inst_grads[idx, 9] += gd * w
                    inst_grads[idx, 10] += gn0 * w
                    inst_grads[idx, 11] += gn1 * w
                    inst_grads[idx, 12] += gn2 * w
                    if raw_alpha > ALPHA_MAX:
                        continue  # clamped alpha has zero local derivative
                    gpow = dlda * alpha
                    inst_grads[idx, 5] += dlda * math.exp(power)
                    inst_grads[idx, 0] += gpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    inst_grads[idx, 1] += gpow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    inst_grads[idx, 2] += gpow * (-0.5 * dx * dx)
                    inst_grads[idx, 3] += gpow * (-dx * dy)
                    inst_grads[idx, 4] += gpow * (-0.5 * dy * dy)


@njit(cache=True)
def reduce_instance_grads(inst_gauss, inst_grads, n_gaussians):
    """Sum instance gradient slots into per-Gaussian rows in instance order."""
    out = np.zeros((n_gaussians, 13), dtype=np.float64)
    for i in range(inst_gauss.shape[0]):
        g = inst_gauss[i]
        for c in range(13):
            out[g, c] += inst_grads[i, c]
    return out
