"""Space-time deformation field: identity start, gradients, smoothness."""

import numpy as np
import pytest

from gs4d.deformation import PLANE_NAMES, DeformationField
from gs4d.scene import GaussianCloud, inverse_sigmoid

from conftest import make_camera, make_cloud


def small_field(rng=None, randomize_heads=False, **kw):
    kw.setdefault("base_resolution", (3, 4, 5, 3))
    kw.setdefault("num_levels", 1)
    kw.setdefault("feature_dim", 2)
    kw.setdefault("hidden_width", 4)
    kw.setdefault("sh_bands", 1)
    kw.setdefault("seed", 3)
    kw.setdefault("dtype", np.float64)
    field = DeformationField(bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1), **kw)
    if randomize_heads:
        # zero-init output layers block gradient flow; stir them for FD tests
        for k in field.params:
            if k.endswith("_w1") or k.endswith("_b1"):
                field.params[k] = 0.05 * rng.normal(size=field.params[k].shape)
    return field


def unit_cloud(rng, n=6):
    cam = make_camera()
    cloud = make_cloud(rng, n, cam, degree=0)
    cloud.positions[:] = rng.uniform(-0.8, 0.8, size=(n, 3))
    return cloud


def test_identity_at_zero_init(rng):
    cloud = unit_cloud(rng)
    field = small_field()
    for t in (0.0, 0.5, 1.0):
        out, _ = field.deform(cloud, t)
        assert np.array_equal(out.positions, cloud.positions)
        assert np.array_equal(out.rotations, cloud.rotations)
        assert np.array_equal(out.log_scales, cloud.log_scales)
        assert np.array_equal(out.opacity_logits, cloud.opacity_logits)
        assert np.array_equal(out.sh_coeffs, cloud.sh_coeffs)


def test_deform_does_not_mutate_canonical(rng):
    cloud = unit_cloud(rng)
    field = small_field(rng, randomize_heads=True)
    before = cloud.positions.copy()
    out, _ = field.deform(cloud, 0.3)
    assert np.array_equal(cloud.positions, before)
    assert np.abs(out.positions - cloud.positions).max() > 0.0


def test_time_dependence(rng):
    cloud = unit_cloud(rng)
    field = small_field(rng, randomize_heads=True)
    a, _ = field.deform(cloud, 0.1)
    b, _ = field.deform(cloud, 0.9)
    assert np.abs(a.positions - b.positions).max() > 1e-9


def test_level_resolution_scaling():
    field = small_field(num_levels=2)
    assert field.level_resolution(0) == (3, 4, 5, 3)
    # spatial axes double per level, the time axis stays fixed
    assert field.level_resolution(1) == (6, 8, 10, 3)


def test_param_groups_partition():
    field = small_field()
    groups = field.param_groups()
    assert set(groups) == {"planes", "mlps"}
    assert len(groups["planes"]) == 6
    all_names = set(groups["planes"]) | set(groups["mlps"])
    assert all_names == set(field.params)
    for name in PLANE_NAMES:
        assert f"plane_l0_{name}" in groups["planes"]


def test_bbox_validation():
    with pytest.raises(ValueError):
        DeformationField(bbox_min=(0, 0, 0), bbox_max=(1, 1, 0))
    with pytest.raises(ValueError):
        DeformationField(bbox_min=(0, 0, 0), bbox_max=(1, 1, 1),
                         base_resolution=(1, 4, 4, 4))


def _weighted_loss(field, cloud, t, weights):
    out, _ = field.deform(cloud, t)
    return (float((out.positions * weights[0]).sum())
            + float((out.rotations * weights[1]).sum())
            + float((out.log_scales * weights[2]).sum())
            + float((out.opacity_logits * weights[3]).sum())
            + float((out.sh_coeffs * weights[4]).sum()))


def test_backward_matches_fd_on_field_params(rng):
    cloud = unit_cloud(rng, n=5)
    field = small_field(rng, randomize_heads=True)
    t = 0.37
    n = len(cloud)
    weights = (rng.normal(size=(n, 3)), rng.normal(size=(n, 4)),
               rng.normal(size=(n, 3)), rng.normal(size=n),
               rng.normal(size=(n, 3, 1)))
    _, cache = field.deform(cloud, t)
    grads, _ = field.backward(cache, *weights)
    eps = 1e-6
    for key, arr in field.params.items():
        flat = arr.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _weighted_loss(field, cloud, t, weights)
            flat[i] = orig - eps
            fm = _weighted_loss(field, cloud, t, weights)
            flat[i] = orig
            fd[i] = (fp - fm) / (2 * eps)
        rel = np.abs(grads[key].reshape(-1) - fd) / np.maximum(
            np.maximum(np.abs(grads[key].reshape(-1)), np.abs(fd)), 1e-4)
        assert rel.max() < 1e-4, f"{key}: max rel err {rel.max():.2e}"


def test_backward_position_extra_matches_fd(rng):
    cloud = unit_cloud(rng, n=5)
    field = small_field(rng, randomize_heads=True)
    t = 0.61
    n = len(cloud)
    weights = (rng.normal(size=(n, 3)), rng.normal(size=(n, 4)),
               rng.normal(size=(n, 3)), rng.normal(size=n),
               rng.normal(size=(n, 3, 1)))
    _, cache = field.deform(cloud, t)
    _, d_pos_extra = field.backward(cache, *weights)
    # total position gradient = identity path + interpolation-coordinate path
    analytic = weights[0] + d_pos_extra
    eps = 1e-6
    fd = np.zeros((n, 3))
    for i in range(n):
        for j in range(3):
            orig = cloud.positions[i, j]
            cloud.positions[i, j] = orig + eps
            fp = _weighted_loss(field, cloud, t, weights)
            cloud.positions[i, j] = orig - eps
            fm = _weighted_loss(field, cloud, t, weights)
            cloud.positions[i, j] = orig
            fd[i, j] = (fp - fm) / (2 * eps)
    rel = np.abs(analytic - fd) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(fd)), 1e-4)
    assert rel.max() < 1e-4


def test_out_of_range_points_get_no_coordinate_gradient(rng):
    cloud = unit_cloud(rng, n=4)
    cloud.positions[0] = np.array([5.0, 5.0, 5.0])  # clamped to the bbox edge
    field = small_field(rng, randomize_heads=True)
    _, cache = field.deform(cloud, 0.5)
    n = len(cloud)
    _, d_pos_extra = field.backward(
        cache, np.ones((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
        np.zeros(n), np.zeros((n, 3, 1)))
    assert np.all(d_pos_extra[0] == 0.0)
    assert np.abs(d_pos_extra[1:]).max() > 0.0


def test_plane_tv_zero_for_constant_planes():
    field = small_field()
    for k in field.params:
        if k.startswith("plane_"):
            field.params[k][:] = 0.7
    val, grads = field.plane_tv_loss()
    assert val == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_plane_tv_matches_fd(rng):
    field = small_field()
    key = "plane_l0_xt"
    arr = field.params[key]
    arr[:] = rng.normal(size=arr.shape)
    _, grads = field.plane_tv_loss()
    eps = 1e-6
    flat = arr.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp, _ = field.plane_tv_loss()
        flat[i] = orig - eps
        fm, _ = field.plane_tv_loss()
        flat[i] = orig
        fd[i] = (fp - fm) / (2 * eps)
    assert np.abs(grads[key].reshape(-1) - fd).max() < 1e-8


def test_metadata_round_trip(rng):
    field = small_field(rng, randomize_heads=True)
    meta = field.state_metadata()
    clone = DeformationField.from_metadata(meta)
    assert set(clone.params) == set(field.params)
    for k, v in field.params.items():
        assert clone.params[k].shape == v.shape
        clone.params[k] = v.copy()
    cloud = unit_cloud(rng)
    a, _ = field.deform(cloud, 0.25)
    b, _ = clone.deform(cloud, 0.25)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.sh_coeffs, b.sh_coeffs)
