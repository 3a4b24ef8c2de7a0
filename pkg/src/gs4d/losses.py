"""Training objective terms and evaluation metrics.

Every loss returns its scalar value together with analytic gradients with
respect to the rendered buffers it consumes; the trainer chains those into
the rasterizer and deformation backward passes. PSNR and SSIM are
evaluation-only metrics and carry no gradients.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

from .depth import (
    depth_gradients,
    depth_gradients_backward,
    normalize_map,
    normalize_map_backward,
)

# confidence values are clamped to this range inside the confidence loss
CONFIDENCE_CLAMP = (1e-3, 1.0)
# variance threshold under which correlation is treated as undefined
PEARSON_VAR_EPS = 1e-8
# rendered pixels with confidence below this carry no usable depth
COVERAGE_EPS = 1e-3
SURFACE_GATE = 0.5


def color_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray
               ) -> tuple[float, np.ndarray]:
    """Masked mean absolute color error and its gradient on the prediction."""
    m = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(pred, dtype=np.float64)
    count = int(m.sum())
    if count == 0:
        return 0.0, grad
    diff = (pred - target) * m[..., None]
    denom = count * pred.shape[-1]
    val = np.abs(diff).sum() / denom
    grad = np.sign(diff) / denom
    return float(val), grad


def pearson_corr(a: np.ndarray, b: np.ndarray) -> float:
    """Correlation coefficient of two flat samples; 0 when either side is
    (numerically) constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("samples must have equal size")
    if a.size < 2:
        return 0.0
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(ac @ ac)
    sbb = float(bc @ bc)
    if saa < PEARSON_VAR_EPS or sbb < PEARSON_VAR_EPS:
        return 0.0
    return float((ac @ bc) / (math.sqrt(saa) * math.sqrt(sbb)))


def _pearson_with_grad(a: np.ndarray, b: np.ndarray
                       ) -> tuple[float, np.ndarray]:
    """pearson_corr plus its gradient with respect to the first argument."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2:
        return 0.0, np.zeros_like(a)
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(ac @ ac)
    sbb = float(bc @ bc)
    if saa < PEARSON_VAR_EPS or sbb < PEARSON_VAR_EPS:
        return 0.0, np.zeros_like(a)
    sab = float(ac @ bc)
    denom = math.sqrt(saa) * math.sqrt(sbb)
    p = sab / denom
    grad = (bc - ac * (sab / saa)) / denom
    return p, grad


def depth_reg_loss(pred: np.ndarray, prior: np.ndarray, mask: np.ndarray,
                   lambda_norm: float, lambda_grad: float
                   ) -> tuple[float, np.ndarray]:
    """Scale-invariant depth regularizer.

    Sum of a masked L1 between min-max normalized depths (skipped when
    either map is constant over the mask) and one minus the correlation of
    the raw depth-gradient magnitudes. Returns (value, gradient on pred).
    """
    m = np.asarray(mask, dtype=bool)
    pred = np.asarray(pred, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    grad = np.zeros_like(pred)
    count = int(m.sum())
    if count == 0:
        return 0.0, grad
    val = 0.0

    np_pred, deg_p = normalize_map(pred, m)
    np_prior, deg_q = normalize_map(prior, m)
    if not (deg_p or deg_q):
        diff = (np_pred - np_prior) * m
        val += lambda_norm * np.abs(diff).sum() / count
        d_norm = lambda_norm * np.sign(diff) / count
        grad += normalize_map_backward(pred, m, d_norm)

    gw_p, gh_p = depth_gradients(pred, m)
    gw_q, gh_q = depth_gradients(prior, m)
    gm_p = np.hypot(gw_p, gh_p)
    gm_q = np.hypot(gw_q, gh_q)
    p, d_p_flat = _pearson_with_grad(gm_p[m], gm_q[m])
    val += lambda_grad * (1.0 - p)
    d_gm = np.zeros_like(pred)
    d_gm[m] = -lambda_grad * d_p_flat
    safe = np.where(gm_p > 0, gm_p, 1.0)
    live = gm_p > 0
    d_gw = np.where(live, d_gm * gw_p / safe, 0.0)
    d_gh = np.where(live, d_gm * gh_p / safe, 0.0)
    grad += depth_gradients_backward(d_gw, d_gh, m)
    return float(val), grad


def confidence_loss(pred_depth_norm: np.ndarray, prior_depth_norm: np.ndarray,
                    pred_color: np.ndarray, target_color: np.ndarray,
                    confidence: np.ndarray, mask: np.ndarray,
                    depth_valid: bool = True
                    ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Aleatoric-style error weighting by the rendered confidence map.

    Two expectations over masked pixels, one on normalized depth error and
    one on the per-pixel channel-mean squared color error, each divided by
    2 W^2 plus a log W barrier. W is the confidence clamped to [1e-3, 1].
    The depth expectation is dropped when depth_valid is False. Returns
    (value, d_pred_depth_norm, d_pred_color, d_confidence).
    """
    m = np.asarray(mask, dtype=bool)
    d_depth = np.zeros_like(pred_depth_norm, dtype=np.float64)
    d_color = np.zeros_like(pred_color, dtype=np.float64)
    d_conf = np.zeros_like(confidence, dtype=np.float64)
    count = int(m.sum())
    if count == 0:
        return 0.0, d_depth, d_color, d_conf
    lo, hi = CONFIDENCE_CLAMP
    w = np.clip(confidence, lo, hi)
    live = (confidence > lo) & (confidence < hi) & m
    inv_w2 = 1.0 / (w * w)
    log_w = np.log(w)
    val = 0.0

    if depth_valid:
        e = pred_depth_norm - prior_depth_norm
        val += float(((0.5 * e * e * inv_w2 + log_w) * m).sum() / count)
        d_depth = np.where(m, e * inv_w2, 0.0) / count
        d_conf += np.where(live, -e * e / (w ** 3) + 1.0 / w, 0.0) / count

    ce = pred_color - target_color
    ce2 = np.mean(ce * ce, axis=-1)
    val += float(((0.5 * ce2 * inv_w2 + log_w) * m).sum() / count)
    d_color = np.where(m[..., None], ce * (inv_w2[..., None] / ce.shape[-1]), 0.0) / count
    d_conf += np.where(live, -ce2 / (w ** 3) + 1.0 / w, 0.0) / count
    return float(val), d_depth, d_color, d_conf


def surface_normal_loss(pred_normal: np.ndarray, prior_normal: np.ndarray,
                        confidence: np.ndarray, mask: np.ndarray,
                        gate: float = SURFACE_GATE
                        ) -> tuple[float, np.ndarray]:
    """Mean absolute normal-component error on well-covered pixels.

    Pixels enter only where the mask holds and confidence exceeds the gate,
    which keeps empty or barely covered regions from being penalized.
    """
    active = np.asarray(mask, dtype=bool) & (confidence > gate)
    grad = np.zeros_like(pred_normal, dtype=np.float64)
    count = int(active.sum())
    if count == 0:
        return 0.0, grad
    diff = (pred_normal - prior_normal) * active[..., None]
    denom = count * pred_normal.shape[-1]
    val = np.abs(diff).sum() / denom
    grad = np.sign(diff) / denom
    return float(val), grad


def total_loss(color: np.ndarray, depth: np.ndarray, confidence: np.ndarray,
               normal: np.ndarray, target_color: np.ndarray,
               prior_depth: np.ndarray, prior_normal: np.ndarray,
               mask: np.ndarray, lambda_norm: float, lambda_grad: float,
               lambda_surf: float, lambda_con: float,
               tv_value: float = 0.0, depth_mask: np.ndarray | None = None
               ) -> tuple[float, dict, dict]:
    """Compose the full objective over one frame's rendered buffers.

    Color uses the full frame mask. Depth-dependent terms use depth_mask
    (defaulting to the frame mask; pass mask & prior-validity when the depth
    prior has holes) further restricted to covered pixels, i.e. confidence
    above a small floor. The grid smoothness value is passed in precomputed
    (its gradient lives in plane space, not buffer space) and is added
    unweighted.

    Returns (total, parts, grads) where parts holds the individual term
    values and grads holds d_color, d_depth, d_confidence, d_normal.
    """
    m = np.asarray(mask, dtype=bool)
    dm = m if depth_mask is None else (m & np.asarray(depth_mask, dtype=bool))
    dmask = dm & (confidence > COVERAGE_EPS)

    val_color, d_color = color_loss(color, target_color, m)
    val_depth, d_depth = depth_reg_loss(depth, prior_depth, dmask,
                                        lambda_norm, lambda_grad)
    val_surf, d_normal = surface_normal_loss(normal, prior_normal, confidence, dm)

    dn_pred, deg_p = normalize_map(depth, dmask)
    dn_prior, deg_q = normalize_map(prior_depth, dmask)
    val_con, d_dn, d_col_con, d_conf = confidence_loss(
        dn_pred, dn_prior, color, target_color, confidence, dmask,
        depth_valid=not (deg_p or deg_q))

    total = val_color + tv_value + val_depth + lambda_surf * val_surf \
        + lambda_con * val_con
    d_color = d_color + lambda_con * d_col_con
    d_depth = d_depth + lambda_con * normalize_map_backward(depth, dmask, d_dn)
    d_confidence = lambda_con * d_conf
    d_normal = lambda_surf * d_normal
    parts = {
        "color": val_color,
        "tv": tv_value,
        "depth": val_depth,
        "surf": val_surf,
        "con": val_con,
    }
    grads = {
        "d_color": d_color,
        "d_depth": d_depth,
        "d_confidence": d_confidence,
        "d_normal": d_normal,
    }
    return float(total), parts, grads


# --- evaluation metrics ----------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for signals in [0, 1]; +inf on equality."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter2_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = kernel.size // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Windows are fully interior (valid mode, no padding). Multi-channel
    inputs average the per-channel scores. Requires images of at least the
    window size.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < 11 or a.shape[1] < 11:
        raise ValueError("image smaller than the 11x11 SSIM window")
    kernel = _ssim_window()
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    scores = []
    for ch in range(a.shape[2]):
        x = a[..., ch]
        y = b[..., ch]
        mu_x = _filter2_valid(x, kernel)
        mu_y = _filter2_valid(y, kernel)
        sxx = _filter2_valid(x * x, kernel) - mu_x * mu_x
        syy = _filter2_valid(y * y, kernel) - mu_y * mu_y
        sxy = _filter2_valid(x * y, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
