"""Depth priors: metric recovery, back-projection, gradients, normals, file IO."""

import numpy as np
import pytest

from gs4d.depth import (
    DepthMap,
    backproject,
    depth_gradients,
    depth_gradients_backward,
    normalize_map,
    normalize_map_backward,
    pseudo_normal_map,
    read_depth_png16,
    read_pfm,
    recover_metric_depth,
    write_depth_png16,
    write_pfm,
)

from conftest import make_camera


def test_depthmap_shape_check():
    with pytest.raises(ValueError):
        DepthMap(np.zeros((4, 4)), np.ones((4, 5), dtype=bool))
    with pytest.raises(ValueError):
        DepthMap(np.zeros(4), np.ones(4, dtype=bool))


def test_recover_metric_depth_values():
    inv = np.array([[2.0, 4.0], [0.0, -1.0]])
    dm = recover_metric_depth(inv, beta=8.0)
    assert np.allclose(dm.values[0], [4.0, 2.0])
    assert np.array_equal(dm.valid, [[True, True], [False, False]])
    assert np.all(dm.values[~dm.valid] == 0.0)


def test_recover_metric_depth_rejects_bad_beta():
    with pytest.raises(ValueError):
        recover_metric_depth(np.ones((2, 2)), beta=0.0)


def test_recover_metric_depth_respects_extra_mask():
    inv = np.ones((2, 2))
    dm = recover_metric_depth(inv, beta=1.0,
                              valid=np.array([[True, False], [True, True]]))
    assert not dm.valid[0, 1]


def test_backproject_geometry():
    cam = make_camera(8, 8, fx=10.0, fy=10.0)
    depth = np.full((8, 8), 2.0)
    image = np.zeros((8, 8, 3))
    pts, cols = backproject(DepthMap(depth, np.ones((8, 8), bool)), image, cam)
    assert pts.shape == (64, 3)
    # every point reprojects onto its source pixel
    u = pts[:, 0] / pts[:, 2] * cam.fx + cam.cx
    v = pts[:, 1] / pts[:, 2] * cam.fy + cam.cy
    uu, vv = np.meshgrid(np.arange(8), np.arange(8), indexing="xy")
    grid_u = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")[1].ravel()
    grid_v = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")[0].ravel()
    assert np.allclose(u, grid_u, atol=1e-9)
    assert np.allclose(v, grid_v, atol=1e-9)
    assert np.allclose(pts[:, 2], 2.0)
    del uu, vv


def test_backproject_respects_pose():
    theta = 0.4
    R = np.array([[np.cos(theta), 0, np.sin(theta)],
                  [0, 1, 0],
                  [-np.sin(theta), 0, np.cos(theta)]])
    t = np.array([0.3, -0.2, 0.7])
    cam = make_camera(4, 4, fx=5.0, fy=5.0)
    cam_posed = type(cam)(fx=5.0, fy=5.0, cx=cam.cx, cy=cam.cy, width=4,
                          height=4, R=R, t=t, near=0.1, far=50.0)
    depth = np.full((4, 4), 3.0)
    img = np.zeros((4, 4, 3))
    pts, _ = backproject(DepthMap(depth, np.ones((4, 4), bool)), img, cam_posed)
    # world points must land back at camera depth 3 under the w2c transform
    cam_pts = pts @ R.T + t
    assert np.allclose(cam_pts[:, 2], 3.0, atol=1e-12)


def test_backproject_stride_and_cap():
    cam = make_camera(16, 16)
    depth = DepthMap(np.full((16, 16), 2.0), np.ones((16, 16), bool))
    img = np.zeros((16, 16, 3))
    pts, _ = backproject(depth, img, cam, stride=2)
    assert pts.shape[0] == 64
    pts, _ = backproject(depth, img, cam, stride=1, max_points=50)
    assert pts.shape[0] <= 50
    with pytest.raises(ValueError):
        backproject(depth, img, cam, stride=0)


def test_backproject_skips_invalid():
    cam = make_camera(4, 4)
    valid = np.ones((4, 4), bool)
    valid[1, 2] = False
    pts, _ = backproject(DepthMap(np.full((4, 4), 1.0), valid),
                         np.zeros((4, 4, 3)), cam)
    assert pts.shape[0] == 15


def test_depth_gradients_linear_ramp():
    # values 3*u + 5*v: central differences recover the slopes exactly
    v, u = np.mgrid[0:6, 0:7]
    d = 3.0 * u + 5.0 * v
    gw, gh = depth_gradients(d, np.ones_like(d, bool))
    assert np.allclose(gw, 3.0)
    assert np.allclose(gh, 5.0)


def test_depth_gradients_zero_on_invalid_stencils():
    d = np.arange(25, dtype=float).reshape(5, 5)
    m = np.ones((5, 5), bool)
    m[2, 2] = False
    gw, gh = depth_gradients(d, m)
    # any stencil touching (2,2) is dead
    assert gw[2, 1] == 0.0 and gw[2, 3] == 0.0 and gw[2, 2] == 0.0
    assert gh[1, 2] == 0.0 and gh[3, 2] == 0.0 and gh[2, 2] == 0.0
    assert gw[0, 1] != 0.0


def test_depth_gradients_backward_is_transpose(rng):
    # <J x, y> == <x, J^T y> for random x, y
    m = rng.random((9, 11)) > 0.2
    x = rng.normal(size=(9, 11))
    yw = rng.normal(size=(9, 11))
    yh = rng.normal(size=(9, 11))
    gw, gh = depth_gradients(x, m)
    lhs = (gw * yw).sum() + (gh * yh).sum()
    rhs = (x * depth_gradients_backward(yw, yh, m)).sum()
    assert abs(lhs - rhs) < 1e-12


def test_pseudo_normal_flat_is_up():
    n = pseudo_normal_map(np.full((6, 6), 4.2), np.ones((6, 6), bool))
    assert np.allclose(n, np.broadcast_to([0.0, 0.0, 1.0], (6, 6, 3)))


def test_pseudo_normal_unit_slope():
    # slope of 1 per pixel along u: normal (1, 0, 1)/sqrt(2)
    v, u = np.mgrid[0:6, 0:6]
    n = pseudo_normal_map(u.astype(float), np.ones((6, 6), bool))
    r = 1.0 / np.sqrt(2.0)
    assert np.allclose(n[2, 2], [r, 0.0, r])


def test_pseudo_normal_always_unit(rng):
    vals = rng.normal(size=(12, 12)) * 3.0
    m = rng.random((12, 12)) > 0.3
    n = pseudo_normal_map(vals, m)
    assert np.abs(np.linalg.norm(n, axis=-1) - 1.0).max() < 1e-12


def test_normalize_map_values():
    v = np.array([[2.0, 4.0], [6.0, 0.0]])
    m = np.array([[True, True], [True, False]])
    out, deg = normalize_map(v, m)
    assert not deg
    assert np.allclose(out, [[0.0, 0.5], [1.0, 0.0]])


def test_normalize_map_degenerate():
    out, deg = normalize_map(np.full((3, 3), 7.0), np.ones((3, 3), bool))
    assert deg and np.all(out == 0.0)
    out, deg = normalize_map(np.ones((3, 3)), np.zeros((3, 3), bool))
    assert deg and np.all(out == 0.0)


def test_normalize_map_backward_matches_fd(rng):
    v = rng.normal(size=(6, 6)) * 2.0
    m = rng.random((6, 6)) > 0.2
    g = rng.normal(size=(6, 6))
    analytic = normalize_map_backward(v, m, g)
    eps = 1e-6
    fd = np.zeros_like(v)
    for i in range(6):
        for j in range(6):
            vp, vm = v.copy(), v.copy()
            vp[i, j] += eps
            vm[i, j] -= eps
            op, _ = normalize_map(vp, m)
            om, _ = normalize_map(vm, m)
            fd[i, j] = ((op - om) * g).sum() / (2 * eps)
    assert np.abs(analytic - fd).max() < 1e-6


def test_pfm_round_trip(tmp_path, rng):
    vals = rng.normal(size=(17, 23)).astype(np.float32)
    p = tmp_path / "d.pfm"
    write_pfm(p, vals)
    back = read_pfm(p)
    assert back.shape == (17, 23)
    assert np.array_equal(back.astype(np.float32), vals)


def test_pfm_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 3)))


def test_pfm_rejects_wrong_header(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"PF\n2 2\n-1.0\n" + b"\x00" * 48)
    with pytest.raises(ValueError):
        read_pfm(p)


def test_png16_round_trip(tmp_path):
    vals = np.arange(0, 65536, 257, dtype=np.uint16).reshape(16, 16)
    p = tmp_path / "d.png"
    write_depth_png16(p, vals)
    back = read_depth_png16(p)
    assert back.shape == (16, 16)
    assert np.array_equal(back.astype(np.uint16), vals)


def test_png16_clips_float_input(tmp_path):
    p = tmp_path / "d.png"
    write_depth_png16(p, np.array([[-5.0, 70000.0], [100.2, 0.0]]))
    back = read_depth_png16(p)
    assert back[0, 0] == 0 and back[0, 1] == 65535 and back[1, 0] == 100
