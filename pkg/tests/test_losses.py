"""Objective terms against hand-computed values and finite differences."""

import math

import numpy as np
import pytest

from gs4d.losses import (
    color_loss,
    confidence_loss,
    depth_reg_loss,
    pearson_corr,
    psnr,
    ssim,
    surface_normal_loss,
    total_loss,
)
from gs4d.depth import normalize_map


def test_color_loss_hand_value():
    pred = np.zeros((2, 2, 3))
    target = np.zeros((2, 2, 3))
    pred[0, 0] = [0.5, 0.0, 0.0]
    target[0, 1] = [0.0, 0.2, 0.0]
    mask = np.ones((2, 2), bool)
    val, grad = color_loss(pred, target, mask)
    # |0.5| + |-0.2| over 4 pixels * 3 channels
    assert np.isclose(val, 0.7 / 12.0)
    assert np.isclose(grad[0, 0, 0], 1.0 / 12.0)
    assert np.isclose(grad[0, 1, 1], -1.0 / 12.0)
    assert grad[1, 1, 2] == 0.0


def test_color_loss_empty_mask():
    val, grad = color_loss(np.ones((3, 3, 3)), np.zeros((3, 3, 3)),
                           np.zeros((3, 3), bool))
    assert val == 0.0 and np.all(grad == 0.0)


def test_color_loss_matches_fd(rng):
    pred = rng.random((5, 4, 3))
    target = rng.random((5, 4, 3))
    mask = rng.random((5, 4)) > 0.3
    val, grad = color_loss(pred, target, mask)
    eps = 1e-7
    for _ in range(20):
        i, j, c = rng.integers(5), rng.integers(4), rng.integers(3)
        p2 = pred.copy()
        p2[i, j, c] += eps
        v2, _ = color_loss(p2, target, mask)
        assert abs((v2 - val) / eps - grad[i, j, c]) < 1e-5


def test_pearson_affine_invariance(rng):
    a = rng.normal(size=200)
    b = rng.normal(size=200)
    base = pearson_corr(a, b)
    assert abs(pearson_corr(3.0 * a + 11.0, b) - base) < 1e-9
    assert abs(pearson_corr(a, -2.0 * b + 5.0) + base) < 1e-9
    assert abs(pearson_corr(a, a) - 1.0) < 1e-12


def test_pearson_constant_input_is_zero():
    assert pearson_corr(np.full(50, 3.0), np.arange(50.0)) == 0.0
    assert abs(pearson_corr(np.arange(3.0), np.arange(3.0)[::-1]) + 1.0) < 1e-12


def test_pearson_size_mismatch():
    with pytest.raises(ValueError):
        pearson_corr(np.zeros(3), np.zeros(4))


def test_depth_reg_zero_under_affine_prior(rng):
    # normalized L1 and gradient correlation are both scale/shift invariant
    d = rng.random((16, 16)) * 4.0 + 1.0
    m = np.ones((16, 16), bool)
    val, _ = depth_reg_loss(d, 2.5 * d + 1.3, m, 0.01, 0.001)
    assert abs(val) < 1e-9


def test_depth_reg_positive_on_mismatch(rng):
    d = rng.random((16, 16))
    q = rng.random((16, 16))
    val, _ = depth_reg_loss(d, q, np.ones((16, 16), bool), 0.01, 0.001)
    assert val > 0.0


def test_depth_reg_grad_matches_fd(rng):
    d = rng.random((8, 8)) * 2.0
    q = rng.random((8, 8)) * 3.0
    m = rng.random((8, 8)) > 0.2
    val, grad = depth_reg_loss(d, q, m, 0.01, 0.001)
    eps = 1e-6
    fd = np.zeros_like(d)
    for i in range(8):
        for j in range(8):
            dp, dm_ = d.copy(), d.copy()
            dp[i, j] += eps
            dm_[i, j] -= eps
            vp, _ = depth_reg_loss(dp, q, m, 0.01, 0.001)
            vm, _ = depth_reg_loss(dm_, q, m, 0.01, 0.001)
            fd[i, j] = (vp - vm) / (2 * eps)
    assert np.abs(grad - fd).max() < 1e-6


def test_confidence_loss_hand_value():
    # zero errors at W = 0.5 on every pixel: value is 2 * log(0.5)
    shape = (4, 4)
    zero = np.zeros(shape)
    conf = np.full(shape, 0.5)
    m = np.ones(shape, bool)
    val, d_d, d_c, d_w = confidence_loss(zero, zero, np.zeros(shape + (3,)),
                                         np.zeros(shape + (3,)), conf, m)
    assert np.isclose(val, 2.0 * math.log(0.5))
    assert np.all(d_d == 0.0) and np.all(d_c == 0.0)
    # the log barrier pushes confidence down toward the clamp floor: d/dW of
    # 2 log W at W=0.5 is 4, averaged over 16 pixels per pixel = 0.25
    assert np.allclose(d_w, (2.0 / 0.5) / 16.0)


def test_confidence_loss_prefers_low_confidence_on_error():
    shape = (2, 2)
    e = np.full(shape, 0.8)
    m = np.ones(shape, bool)
    hi, *_ = confidence_loss(e, np.zeros(shape), np.zeros(shape + (3,)),
                             np.zeros(shape + (3,)), np.full(shape, 0.9), m)
    lo, *_ = confidence_loss(e, np.zeros(shape), np.zeros(shape + (3,)),
                             np.zeros(shape + (3,)), np.full(shape, 0.3), m)
    assert lo > hi  # high error with high claimed confidence costs more
    del lo, hi


def test_confidence_loss_grads_match_fd(rng):
    shape = (5, 5)
    pd = rng.random(shape)
    qd = rng.random(shape)
    pc = rng.random(shape + (3,))
    tc = rng.random(shape + (3,))
    conf = rng.uniform(0.05, 0.95, size=shape)
    m = rng.random(shape) > 0.2
    val, d_d, d_c, d_w = confidence_loss(pd, qd, pc, tc, conf, m)
    eps = 1e-7
    for _ in range(15):
        i, j = rng.integers(5), rng.integers(5)
        p2 = pd.copy()
        p2[i, j] += eps
        v2, *_ = confidence_loss(p2, qd, pc, tc, conf, m)
        assert abs((v2 - val) / eps - d_d[i, j]) < 1e-5
        c2 = conf.copy()
        c2[i, j] += eps
        v2, *_ = confidence_loss(pd, qd, pc, tc, c2, m)
        assert abs((v2 - val) / eps - d_w[i, j]) < 1e-4
        k = rng.integers(3)
        pc2 = pc.copy()
        pc2[i, j, k] += eps
        v2, *_ = confidence_loss(pd, qd, pc2, tc, conf, m)
        assert abs((v2 - val) / eps - d_c[i, j, k]) < 1e-5


def test_confidence_loss_depth_term_switch():
    shape = (3, 3)
    e = np.full(shape, 0.5)
    m = np.ones(shape, bool)
    conf = np.full(shape, 0.7)
    with_d, dd1, *_ = confidence_loss(e, np.zeros(shape), np.zeros(shape + (3,)),
                                      np.zeros(shape + (3,)), conf, m,
                                      depth_valid=True)
    no_d, dd0, _, _ = confidence_loss(e, np.zeros(shape), np.zeros(shape + (3,)),
                                      np.zeros(shape + (3,)), conf, m,
                                      depth_valid=False)
    # dropping the depth expectation removes exactly 0.5 e^2/W^2 + log W
    expect = 0.5 * 0.25 / 0.49 + math.log(0.7)
    assert abs((with_d - no_d) - expect) < 1e-12
    assert np.all(dd0 == 0.0) and np.abs(dd1).max() > 0.0


def test_surface_normal_loss_gating():
    pred = np.zeros((4, 4, 3))
    pred[..., 2] = 1.0
    prior = np.zeros((4, 4, 3))
    prior[..., 0] = 1.0
    m = np.ones((4, 4), bool)
    conf = np.zeros((4, 4))
    conf[0, 0] = 0.9  # only this pixel clears the coverage gate
    val, grad = surface_normal_loss(pred, prior, conf, m)
    # one active pixel, error |1| + |-1| over 3 channels
    assert np.isclose(val, 2.0 / 3.0)
    assert np.isclose(grad[0, 0, 2], 1.0 / 3.0)
    assert np.all(grad[1:] == 0.0)


def test_surface_normal_loss_empty_gate():
    val, grad = surface_normal_loss(np.zeros((3, 3, 3)), np.zeros((3, 3, 3)),
                                    np.zeros((3, 3)), np.ones((3, 3), bool))
    assert val == 0.0 and np.all(grad == 0.0)


def test_total_loss_composition(rng):
    shape = (12, 12)
    color = rng.random(shape + (3,))
    target = rng.random(shape + (3,))
    depth = rng.random(shape) * 3.0 + 1.0
    prior = rng.random(shape) * 2.0 + 0.5
    conf = rng.uniform(0.2, 0.95, size=shape)
    normal = rng.normal(size=shape + (3,))
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    prior_n = rng.normal(size=shape + (3,))
    prior_n /= np.linalg.norm(prior_n, axis=-1, keepdims=True)
    mask = np.ones(shape, bool)
    total, parts, grads = total_loss(color, depth, conf, normal, target,
                                     prior, prior_n, mask, 0.01, 0.001,
                                     0.001, 1e-4, tv_value=0.123)
    assert parts["tv"] == 0.123
    expect = (parts["color"] + parts["tv"] + parts["depth"]
              + 0.001 * parts["surf"] + 1e-4 * parts["con"])
    assert np.isclose(total, expect)
    for k in ("d_color", "d_depth", "d_confidence", "d_normal"):
        assert np.all(np.isfinite(grads[k]))


def test_total_loss_depth_mask_restricts_depth_terms(rng):
    shape = (12, 12)
    color = rng.random(shape + (3,))
    target = color.copy()
    depth = rng.random(shape) + 1.0
    prior = depth + rng.normal(size=shape) * 0.5
    conf = np.full(shape, 0.8)
    normal = np.zeros(shape + (3,))
    normal[..., 2] = 1.0
    mask = np.ones(shape, bool)
    hole = np.ones(shape, bool)
    hole[:, 6:] = False
    t_full, parts_full, _ = total_loss(color, depth, conf, normal, target,
                                       prior, normal, mask, 0.01, 0.001,
                                       0.001, 1e-4)
    t_hole, parts_hole, _ = total_loss(color, depth, conf, normal, target,
                                       prior, normal, mask, 0.01, 0.001,
                                       0.001, 1e-4, depth_mask=hole)
    # color is untouched by the depth mask, the depth term changes
    assert parts_full["color"] == parts_hole["color"]
    assert parts_full["depth"] != parts_hole["depth"]
    del t_full, t_hole


def test_total_loss_uncovered_pixels_drop_from_depth_terms(rng):
    shape = (12, 12)
    color = rng.random(shape + (3,))
    depth = rng.random(shape) + 1.0
    prior = rng.random(shape) + 1.0
    normal = np.zeros(shape + (3,))
    normal[..., 2] = 1.0
    mask = np.ones(shape, bool)
    conf = np.full(shape, 0.8)
    conf[5:, :] = 0.0  # uncovered half
    _, _, grads = total_loss(color, depth, conf, normal, color, prior,
                             normal, mask, 0.01, 0.001, 0.001, 1e-4)
    assert np.all(grads["d_depth"][5:, :] == 0.0)


def test_total_loss_buffer_grads_match_fd(rng):
    shape = (8, 8)
    color = rng.random(shape + (3,))
    target = rng.random(shape + (3,))
    depth = rng.random(shape) * 2.0 + 1.0
    prior = rng.random(shape) * 2.0 + 1.0
    conf = rng.uniform(0.05, 0.95, size=shape)
    normal = rng.normal(size=shape + (3,))
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    prior_n = rng.normal(size=shape + (3,))
    prior_n /= np.linalg.norm(prior_n, axis=-1, keepdims=True)
    mask = np.ones(shape, bool)
    args = dict(lambda_norm=0.01, lambda_grad=0.001, lambda_surf=0.001,
                lambda_con=1e-4)
    val, _, grads = total_loss(color, depth, conf, normal, target, prior,
                               prior_n, mask, **args)
    eps = 1e-7
    for _ in range(12):
        i, j = rng.integers(8), rng.integers(8)
        d2 = depth.copy()
        d2[i, j] += eps
        v2, _, _ = total_loss(color, d2, conf, normal, target, prior,
                              prior_n, mask, **args)
        assert abs((v2 - val) / eps - grads["d_depth"][i, j]) < 1e-4
        c2 = conf.copy()
        c2[i, j] += eps
        v2, _, _ = total_loss(color, depth, c2, normal, target, prior,
                              prior_n, mask, **args)
        assert abs((v2 - val) / eps - grads["d_confidence"][i, j]) < 1e-4
        k = rng.integers(3)
        col2 = color.copy()
        col2[i, j, k] += eps
        v2, _, _ = total_loss(col2, depth, conf, normal, target, prior,
                              prior_n, mask, **args)
        assert abs((v2 - val) / eps - grads["d_color"][i, j, k]) < 1e-5
        n2 = normal.copy()
        n2[i, j, k] += eps
        v2, _, _ = total_loss(color, depth, conf, n2, target, prior,
                              prior_n, mask, **args)
        assert abs((v2 - val) / eps - grads["d_normal"][i, j, k]) < 1e-5


def test_psnr_known_values(rng):
    a = rng.random((16, 16, 3))
    assert psnr(a, a) == math.inf
    b = a + 0.1
    # MSE 0.01 -> 20 dB exactly
    assert abs(psnr(np.zeros((10, 10)), np.full((10, 10), 0.1)) - 20.0) < 1e-9
    assert psnr(a, np.clip(b, None, 2.0)) < psnr(a, a + 0.01)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))


def test_ssim_self_is_one(rng):
    a = rng.random((24, 24, 3))
    assert ssim(a, a) == 1.0


def test_ssim_constant_images():
    a = np.full((16, 16), 0.5)
    assert abs(ssim(a, a) - 1.0) < 1e-12
    b = np.full((16, 16), 0.6)
    # closed form for constant images: only the luminance term differs
    c1 = 0.01 ** 2
    expect = (2 * 0.5 * 0.6 + c1) / (0.5 ** 2 + 0.6 ** 2 + c1)
    assert abs(ssim(a, b) - expect) < 1e-12


def test_ssim_degrades_with_noise(rng):
    a = rng.random((32, 32))
    noisy = np.clip(a + 0.3 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, noisy) < ssim(a, np.clip(a + 0.01, 0, 1))


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
