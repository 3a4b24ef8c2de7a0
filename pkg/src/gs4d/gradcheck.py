"""Finite-difference verification of every analytic gradient path.

Builds a tiny double-precision scene (five Gaussians, an 8x8 camera, a
reduced deformation field with randomized head output layers so deltas flow)
and compares central finite differences against the analytic gradients for
every parameter group crossed with every objective term.

The objective is piecewise smooth, so the fixture is checked to sit at a
safe distance from every non-differentiable boundary (alpha cutoffs, L1
signs, gates, clamps, argmin/argmax picks, ReLU zeros, bilinear cell edges)
before any derivative is trusted; a fixture violating a margin raises
immediately rather than producing noisy comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import numba

from .deformation import DeformationField
from .depth import depth_gradients, pseudo_normal_map
from .losses import (
    COVERAGE_EPS,
    SURFACE_GATE,
    color_loss,
    confidence_loss,
    depth_reg_loss,
    normalize_map,
    normalize_map_backward,
    surface_normal_loss,
    total_loss,
)
from .rasterizer import render, render_backward, set_num_threads
from .scene import Camera, GaussianCloud, inverse_sigmoid, rgb_to_sh

GROUPS = ("positions", "rotations", "log_scales", "opacity_logits",
          "sh_coeffs", "planes", "mlps")
CLOUD_GROUPS = GROUPS[:5]
TERMS = ("color", "tv", "depth", "surf", "con")
FD_EPS = 1e-4
# relative-error denominators are floored here so near-zero pairs compare absolutely
REL_FLOOR = 1e-4

LAMBDA_NORM = 0.01
LAMBDA_GRAD = 0.001


@dataclass
class GradcheckFixture:
    camera: Camera
    cloud: GaussianCloud
    deform_field: DeformationField
    t: float
    target: np.ndarray
    prior_depth: np.ndarray
    prior_normal: np.ndarray
    mask: np.ndarray


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel: dict
    runtime_s: float
    corrupt: str | None = None
    failures: list = dataclass_field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def format_table(self) -> str:
        lines = [f"{'group':>16} " + "".join(f"{t:>12}" for t in TERMS)]
        for g in GROUPS:
            row = f"{g:>16} "
            for t in TERMS:
                row += f"{self.max_rel[(g, t)]:>12.3e}"
            lines.append(row)
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: tolerance {self.tolerance:g}, "
                     f"runtime {self.runtime_s:.1f}s"
                     + (f", corrupted group '{self.corrupt}'" if self.corrupt else ""))
        if self.failures:
            lines.append("exceeded: " + ", ".join(
                f"{g}/{t}={v:.2e}" for g, t, v in self.failures))
        return "\n".join(lines)


def build_fixture(seed: int = 1) -> GradcheckFixture:
    """Deterministic smooth-point fixture; see _assert_margins for the checks.

    Eight wide low-opacity splats whose 3-sigma boxes each cover the whole
    8x8 image, so every pixel composites several Gaussians: the rendered
    depth then varies everywhere (no flat single-splat plateaus), the
    confidence map sweeps across the surface gate, and min/max picks are
    unique.
    """
    rng = np.random.default_rng(seed)
    camera = Camera(fx=9.0, fy=9.0, cx=3.5, cy=3.5, width=8, height=8,
                    R=np.eye(3), t=np.zeros(3), near=0.1, far=50.0)
    n = 8
    ring = np.array([[-0.35, -0.35], [0.0, -0.35], [0.35, -0.35],
                     [-0.35, 0.0], [0.35, 0.0],
                     [-0.35, 0.35], [0.0, 0.35], [0.35, 0.35]])
    z = 2.75 + 0.08 * np.arange(n)
    positions = np.column_stack([ring, z]) + rng.normal(scale=0.02, size=(n, 3))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)) \
        + rng.normal(scale=0.12, size=(n, 4))
    log_scales = np.log(0.5) + rng.normal(scale=0.04, size=(n, 3))
    log_scales += np.array([-0.25, 0.0, 0.25])  # unique shortest axis
    opacity_logits = inverse_sigmoid(rng.uniform(0.14, 0.30, size=n))
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = rgb_to_sh(rng.uniform(0.35, 0.75, size=(n, 3)))
    sh[:, :, 1:] = rng.normal(scale=0.05, size=(n, 3, 3))
    cloud = GaussianCloud(positions=positions, rotations=rotations,
                          log_scales=log_scales, opacity_logits=opacity_logits,
                          sh_coeffs=sh, sh_degree=1)

    lo = positions.min(axis=0) - 0.4
    hi = positions.max(axis=0) + 0.4
    deform_field = DeformationField(lo, hi, base_resolution=(5, 5, 5, 4),
                                    num_levels=2, feature_dim=2,
                                    hidden_width=8, sh_bands=4, seed=seed,
                                    dtype=np.float64)
    # heads are zero-initialized for training; give them structure here so
    # gradients actually flow through every head path
    for name in ("position", "rotation", "scale", "opacity", "sh"):
        w1 = deform_field.params[f"head_{name}_w1"]
        b1 = deform_field.params[f"head_{name}_b1"]
        scale = 0.02 if name == "position" else 0.04
        deform_field.params[f"head_{name}_w1"] = scale * rng.standard_normal(w1.shape)
        deform_field.params[f"head_{name}_b1"] = 0.02 * rng.standard_normal(b1.shape)
    t = 0.4

    dcloud, _ = deform_field.deform(cloud, t)
    out = render(dcloud, camera)
    uu, vv = np.meshgrid(np.arange(8, dtype=np.float64),
                         np.arange(8, dtype=np.float64), indexing="xy")
    target = out.color + (0.05 + 0.03 * np.sin(1.3 * uu + 0.7)
                          * np.cos(1.1 * vv - 0.4))[..., None]
    prior_depth = out.depth + 0.06 + 0.04 * np.sin(0.9 * uu - 0.3) \
        * np.sin(0.8 * vv + 0.5)
    prior_normal = pseudo_normal_map(prior_depth, np.ones((8, 8), dtype=bool))
    mask = np.ones((8, 8), dtype=bool)
    return GradcheckFixture(camera=camera, cloud=cloud,
                            deform_field=deform_field, t=t, target=target,
                            prior_depth=prior_depth, prior_normal=prior_normal,
                            mask=mask)


def _assert_margins(fx: GradcheckFixture) -> None:
    """Verify the fixture sits clear of every objective kink.

    A central difference with step 1e-4 moves any single intermediate by at
    most a few 1e-6 to 1e-4 depending on the path, so each non-smooth
    boundary must sit several times further away than the shift that can
    reach it. Exact zeros that stay exact under perturbation (uncovered
    pixels, pinned normalization extremes, identically flat depth) are safe
    and exempted.
    """
    bad: list[str] = []
    dcloud, cache = fx.deform_field.deform(fx.cloud, fx.t)
    out = render(dcloud, fx.camera)
    proj = out.aux.proj

    if not proj.visible.all():
        bad.append("some fixture Gaussians are culled")
    # below sigmoid(-0.75)=0.32, alpha at and beyond the 3-sigma box edge is
    # under exp(-4.5)*0.32 < 1/255, so box-set changes can never alter output
    if np.max(proj.opacity) > 0.32:
        bad.append("opacity too close to the 3-sigma skip equivalence bound")
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    if u.min() < 1.5 or u.max() > 5.5 or v.min() < 1.5 or v.max() > 5.5:
        bad.append("screen means too close to the image border")
    tz = np.sort(proj.depth)
    if np.min(np.diff(tz)) < 1e-2:
        bad.append("camera depths too close: sort order could flip")
    lim = 1.3 * (0.5 * fx.camera.width / fx.camera.fx)
    if np.max(np.abs(proj.rx)) > lim - 0.05 or np.max(np.abs(proj.ry)) > lim - 0.05:
        bad.append("frustum ratio too close to the Jacobian clamp")
    dots = np.abs(np.einsum("ni,ni->n", proj.normal, proj.t_cam))
    if dots.min() < 1e-2:
        bad.append("normal orientation dot too close to the flip boundary")
    ls = np.asarray(dcloud.log_scales, dtype=np.float64)
    gaps = np.sort(ls, axis=1)
    if np.min(gaps[:, 1] - gaps[:, 0]) < 5e-2:
        bad.append("shortest-axis pick is ambiguous")
    raw_color = np.einsum("nb,ncb->nc", proj.basis,
                          np.asarray(dcloud.sh_coeffs)[:, :, :proj.basis.shape[1]]) + 0.5
    if raw_color.min() < 5e-3:
        bad.append("a color channel sits at the non-negativity clamp")

    # per-contribution alpha distances from the 1/255 skip; the largest
    # single-parameter shift of any alpha is ~3e-6 at step 1e-4
    alphas = []
    for py in range(fx.camera.height):
        for px in range(fx.camera.width):
            for g in range(len(fx.cloud.positions)):
                dx = u[g] - px
                dy = v[g] - py
                r = proj.radius[g]
                if abs(dx) > r or abs(dy) > r:
                    continue
                power = -0.5 * (proj.conic[g, 0] * dx * dx
                                + proj.conic[g, 2] * dy * dy) \
                    - proj.conic[g, 1] * dx * dy
                if power > 0:
                    continue
                alphas.append(proj.opacity[g] * np.exp(power))
    alphas = np.asarray(alphas)
    if np.min(np.abs(alphas - 1.0 / 255.0)) < 6e-6:
        bad.append("a contribution alpha sits at the 1/255 skip threshold")
    if out.aux.final_t.min() < 1e-2:
        bad.append("transmittance too close to the early-stop threshold")

    # uncovered pixels hold exactly zero confidence and stay zero under any
    # perturbation (outside every 3-sigma box), so only covered pixels need
    # distance from the coverage floor; confidence shifts by at most ~3e-5
    conf = out.confidence
    covered = conf > COVERAGE_EPS
    if not covered.any():
        bad.append("no covered pixels at all")
    else:
        if np.min(conf[covered]) < 2e-3:
            bad.append("a covered pixel sits near the coverage floor")
        if np.max(conf[covered]) > 0.99:
            bad.append("confidence too close to the upper clamp")
        if np.min(np.abs(conf[covered] - SURFACE_GATE)) < 5e-5:
            bad.append("confidence sits at the surface-loss gate")

    dmask = fx.mask & covered
    for label, vals in (("rendered", out.depth), ("prior", fx.prior_depth)):
        mv = np.sort(vals[dmask])
        if mv[1] - mv[0] < 3e-4 or mv[-1] - mv[-2] < 3e-4:
            bad.append(f"{label} depth min/max pick is ambiguous")
        if mv[-1] - mv[0] < 5e-2:
            bad.append(f"{label} depth range too narrow to normalize")
    dn_pred, _ = normalize_map(out.depth, dmask)
    dn_prior, _ = normalize_map(fx.prior_depth, dmask)
    resid = np.abs(dn_pred - dn_prior)[dmask]
    # pixels where both normalizations pin the same extreme hold an exact,
    # perturbation-stable zero; every other residual needs sign margin
    live_resid = resid[resid > 0.0]
    if resid.size - live_resid.size > 2:
        bad.append("too many exactly-tied normalized depth residuals")
    if live_resid.size and live_resid.min() < 5e-4:
        bad.append("normalized depth residual crosses the L1 sign kink")

    # exactly-zero gradient magnitudes are symmetric under perturbation and
    # contribute zero on both FD sides; small nonzero ones are the hazard
    gw, gh = depth_gradients(out.depth, dmask)
    gm = np.hypot(gw, gh)[dmask]
    tiny = gm[(gm > 0.0) & (gm < 1e-3)]
    if tiny.size:
        bad.append("a depth-gradient magnitude sits near the hypot kink")
    for label, g in (("rendered", gm),
                     ("prior", np.hypot(*depth_gradients(fx.prior_depth, dmask))[dmask])):
        c = g - g.mean()
        if float(c @ c) < 1e-6:
            bad.append(f"{label} gradient correlation variance near threshold")

    color_resid = np.abs(out.color - fx.target)[fx.mask]
    if color_resid.min() < 5e-4:
        bad.append("a color residual crosses the L1 sign kink")
    gate = dmask & (conf > SURFACE_GATE)
    if gate.any():
        nresid = np.abs(out.normal - fx.prior_normal)[gate]
        if nresid.min() < 5e-4:
            bad.append("a normal residual crosses the L1 sign kink")
    else:
        bad.append("surface gate empty: surf term untested")

    if np.min(np.abs(cache.trunk_h_pre)) < 1.5e-3:
        bad.append("a trunk hidden preactivation sits at the ReLU kink")
    if np.min(np.abs(cache.trunk_out)) < 1.5e-3:
        bad.append("the trunk output sits at the ReLU kink")
    for name, hp in cache.head_h_pre.items():
        if np.min(np.abs(hp)) < 1.5e-3:
            bad.append(f"head '{name}' preactivation sits at the ReLU kink")
    for level_hits in cache.plane_hits:
        for i0, j0, fa, fb in level_hits:
            for f in (fa, fb):
                if np.min(f) < 1e-3 or np.max(f) > 1 - 1e-3:
                    bad.append("an interpolation coordinate sits on a cell edge")
    raw = (cache.positions - fx.deform_field.bbox_min) \
        / (fx.deform_field.bbox_max - fx.deform_field.bbox_min)
    if raw.min() < 0.02 or raw.max() > 0.98:
        bad.append("a position sits at the grid boundary clip")

    if bad:
        raise AssertionError("fixture violates smoothness margins: "
                             + "; ".join(sorted(set(bad))))


def _loss_vector(fx: GradcheckFixture) -> np.ndarray:
    dcloud, _ = fx.deform_field.deform(fx.cloud, fx.t)
    out = render(dcloud, fx.camera)
    tv_val, _ = fx.deform_field.plane_tv_loss()
    _, parts, _ = total_loss(out.color, out.depth, out.confidence, out.normal,
                             fx.target, fx.prior_depth, fx.prior_normal,
                             fx.mask, LAMBDA_NORM, LAMBDA_GRAD, 1.0, 1.0,
                             tv_value=tv_val)
    return np.array([parts[t] for t in TERMS])


def _per_term_buffer_grads(fx: GradcheckFixture, out) -> dict:
    m = fx.mask
    dmask = m & (out.confidence > COVERAGE_EPS)
    _, d_color = color_loss(out.color, fx.target, m)
    _, d_depth = depth_reg_loss(out.depth, fx.prior_depth, dmask,
                                LAMBDA_NORM, LAMBDA_GRAD)
    _, d_normal = surface_normal_loss(out.normal, fx.prior_normal,
                                      out.confidence, m)
    dn_pred, deg_p = normalize_map(out.depth, dmask)
    dn_prior, deg_q = normalize_map(fx.prior_depth, dmask)
    _, d_dn, d_col_con, d_conf = confidence_loss(
        dn_pred, dn_prior, out.color, fx.target, out.confidence, dmask,
        depth_valid=not (deg_p or deg_q))
    return {
        "color": {"grad_color": d_color},
        "depth": {"grad_depth": d_depth},
        "surf": {"grad_normal": d_normal},
        "con": {"grad_depth": normalize_map_backward(out.depth, dmask, d_dn),
                "grad_color": d_col_con,
                "grad_confidence": d_conf},
        "tv": {},
    }


def _analytic_grads(fx: GradcheckFixture) -> dict:
    """(group, term) -> flat analytic gradient array."""
    fld = fx.deform_field
    groups = fld.param_groups()
    dcloud, dcache = fld.deform(fx.cloud, fx.t)
    out = render(dcloud, fx.camera)
    bufgrads = _per_term_buffer_grads(fx, out)

    result = {}
    zeros = {g: np.zeros(getattr(fx.cloud, g).size) for g in CLOUD_GROUPS}
    for term in TERMS:
        if term == "tv":
            _, tvg = fld.plane_tv_loss()
            for g in CLOUD_GROUPS:
                result[(g, term)] = zeros[g]
            result[("planes", term)] = np.concatenate(
                [tvg[k].ravel() for k in groups["planes"]])
            result[("mlps", term)] = np.zeros(
                sum(fld.params[k].size for k in groups["mlps"]))
            continue
        pg = render_backward(dcloud, fx.camera, out, **bufgrads[term])
        fg, d_pos_extra = fld.backward(dcache, pg.positions, pg.rotations,
                                       pg.log_scales, pg.opacity_logits,
                                       pg.sh_coeffs)
        result[("positions", term)] = (pg.positions + d_pos_extra).ravel()
        result[("rotations", term)] = pg.rotations.ravel()
        result[("log_scales", term)] = pg.log_scales.ravel()
        result[("opacity_logits", term)] = pg.opacity_logits.ravel()
        result[("sh_coeffs", term)] = pg.sh_coeffs.ravel()
        result[("planes", term)] = np.concatenate(
            [fg[k].ravel() for k in groups["planes"]])
        result[("mlps", term)] = np.concatenate(
            [fg[k].ravel() for k in groups["mlps"]])
    return result


def _fd_grads(fx: GradcheckFixture) -> dict:
    """(group, term) -> flat central-difference gradient array."""
    fld = fx.deform_field
    groups = fld.param_groups()
    result = {}

    def fd_over(flat: np.ndarray) -> np.ndarray:
        cols = np.empty((flat.size, len(TERMS)))
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_EPS
            fp = _loss_vector(fx)
            flat[i] = orig - FD_EPS
            fm = _loss_vector(fx)
            flat[i] = orig
            cols[i] = (fp - fm) / (2.0 * FD_EPS)
        return cols

    for g in CLOUD_GROUPS:
        arr = getattr(fx.cloud, g)
        cols = fd_over(arr.reshape(-1))
        for k, term in enumerate(TERMS):
            result[(g, term)] = cols[:, k].copy()
    for label in ("planes", "mlps"):
        pieces = [fd_over(fld.params[key].reshape(-1)) for key in groups[label]]
        cols = np.concatenate(pieces, axis=0)
        for k, term in enumerate(TERMS):
            result[(label, term)] = cols[:, k].copy()
    return result


def run_gradcheck(tolerance: float = 1e-4, corrupt: str | None = None,
                  seed: int = 1) -> GradcheckReport:
    """Compare analytic and finite-difference gradients for all groups/terms.

    corrupt names a parameter group whose analytic gradients get sign-flipped
    before comparison; the report then demonstrates a detected failure.
    """
    if corrupt is not None and corrupt not in GROUPS:
        raise ValueError(f"unknown parameter group '{corrupt}' "
                         f"(expected one of {', '.join(GROUPS)})")
    start = time.perf_counter()
    prev_threads = numba.get_num_threads()
    set_num_threads(1)
    try:
        fx = build_fixture(seed)
        _assert_margins(fx)
        analytic = _analytic_grads(fx)
        fd = _fd_grads(fx)
    finally:
        set_num_threads(prev_threads)

    max_rel = {}
    failures = []
    for key, a in analytic.items():
        if corrupt is not None and key[0] == corrupt:
            a = -a
        f = fd[key]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), REL_FLOOR)
        rel = float(np.max(np.abs(a - f) / denom)) if a.size else 0.0
        max_rel[key] = rel
        if rel > tolerance:
            failures.append((key[0], key[1], rel))
    return GradcheckReport(tolerance=tolerance, max_rel=max_rel,
                           runtime_s=time.perf_counter() - start,
                           corrupt=corrupt, failures=failures)
