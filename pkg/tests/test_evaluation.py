import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from portrait_nerf.errors import DimensionMismatch, TooSmall
from portrait_nerf.evaluation import (
    PRESETS,
    Condition,
    EvalReport,
    input_view_order,
    perspective_camera,
    psnr,
    render_perspective,
    run_ablation,
    silhouette,
    ssim,
)
from portrait_nerf.field import Architecture
from portrait_nerf.geom import look_at_camera
from portrait_nerf.meta import MetaConfig
from portrait_nerf.render import RenderConfig, render_image


def scalar_ssim(a, b):
    """Direct windowed SSIM: explicit 2-D Gaussian weights, one window at a time."""
    w = np.array([0.299, 0.587, 0.114])
    ya, yb = a @ w, b @ w
    k, sig = 11, 1.5
    ax = np.arange(k) - 5.0
    g2 = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sig * sig))
    g2 /= g2.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(ya.shape[0] - k + 1):
        for j in range(ya.shape[1] - k + 1):
            pa, pb = ya[i:i + k, j:j + k], yb[i:i + k, j:j + k]
            ma, mb = (g2 * pa).sum(), (g2 * pb).sum()
            va = (g2 * (pa - ma) ** 2).sum()
            vb = (g2 * (pb - mb) ** 2).sum()
            cov = (g2 * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# --- PSNR / SSIM ---------------------------------------------------------------

def test_psnr_examples():
    a = np.random.default_rng(0).random((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros((2, 2, 3)), np.full((2, 2, 3), 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 0.0


def test_metrics_reject_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_ssim_too_small():
    with pytest.raises(TooSmall):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).random((16, 16, 3))
    assert ssim(a, a) == 1.0


def test_ssim_anticorrelated_is_negative():
    a = (np.random.default_rng(2).random((16, 16, 3)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = (rng.integers(11, 20), rng.integers(11, 20), 3)
    a = rng.random(shape)
    b = np.clip(a + rng.normal(scale=0.2, size=shape), 0, 1)
    assert ssim(a, b) == pytest.approx(scalar_ssim(a, b), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_are_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((12, 14, 3)), rng.random((12, 14, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(3)
    a = rng.random((16, 16, 3))
    noise = rng.normal(size=a.shape)
    values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(values, values[1:]))


# --- reports ---------------------------------------------------------------------

def test_report_means_recompute_from_rows():
    rep = EvalReport()
    rng = np.random.default_rng(0)
    conds = [Condition("random"), Condition("meta", n_views=2)]
    for c in conds:
        for k in range(7):
            rep.add(c, "s", k, rng.uniform(10, 30), rng.uniform(0, 1))
    for c in conds:
        rows = rep.condition_rows(c.label)
        assert abs(rep.means()[c.label]["psnr"] - sum(r["psnr"] for r in rows) / len(rows)) < 1e-12
        assert abs(rep.means()[c.label]["ssim"] - sum(r["ssim"] for r in rows) / len(rows)) < 1e-12


def test_presets():
    assert [c.init for c in PRESETS["table3"]] == ["random", "joint", "meta"]
    assert [c.coord for c in PRESETS["table4"]] == ["world", "canonical"]
    assert sorted({c.n_views for c in PRESETS["table6"]}) == [1, 2, 5]


def test_condition_validation():
    with pytest.raises(ValueError):
        Condition("pretty")
    with pytest.raises(ValueError):
        Condition(coord="polar")


def test_input_view_order(tiny_dataset):
    cap = tiny_dataset.test[0]
    assert input_view_order(cap) == [(1, 1), (1, 0), (1, 2), (0, 1), (2, 1)]
    assert cap.view(*input_view_order(cap)[0]).index == cap.support_index


SMALL_CFG = MetaConfig(alpha=5.0, beta=5.0, n_support=2, n_query=2, rays_per_step=32, n_samples=8)
SMALL_ARCH = Architecture(width=16, depth=2, precision=64)


def test_ablation_rows_and_determinism(tiny_dataset, tmp_path):
    cond = Condition("meta", "canonical", 1)
    rep = run_ablation(tiny_dataset, [cond, cond], SMALL_CFG, SMALL_ARCH, finetune_iters=2, out_dir=tmp_path)
    n_query = len(tiny_dataset.test[0].query)
    rows = rep.condition_rows(cond.label)
    assert len(rows) == 2 * n_query
    assert [r["psnr"] for r in rows[:n_query]] == [r["psnr"] for r in rows[n_query:]]
    again = run_ablation(tiny_dataset, [cond], SMALL_CFG, SMALL_ARCH, finetune_iters=2)
    assert [r["psnr"] for r in again.rows] == [r["psnr"] for r in rows[:n_query]]
    assert len(list((tmp_path / cond.label).rglob("*.png"))) == n_query
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().startswith("# psnr on float renders")


def test_ablation_excludes_extra_input_views(tiny_dataset):
    conds = [Condition("random", n_views=1), Condition("random", n_views=2)]
    rep = run_ablation(tiny_dataset, conds, SMALL_CFG, SMALL_ARCH, finetune_iters=1)
    for c in conds:
        assert len(rep.condition_rows(c.label)) == 9 - 2


# --- perspective ---------------------------------------------------------------

def base_cam(res=24):
    return look_at_camera((0, 0, 0.3), (0, 0, 0), (0, 1, 0), 84, res, res, 0.08, 0.52)


def test_perspective_scale_one_is_identity(tiny_dataset):
    subj = tiny_dataset.test[0].subject
    cam = look_at_camera(subj.center + [0, 0, 0.3], subj.center, (0, 1, 0), 84, 16, 16, 0.08, 0.52)
    cfg = RenderConfig(n_samples=32)
    np.testing.assert_array_equal(render_perspective(subj, cam, 1.0, cfg), render_image(subj, cam, None, cfg))


def test_perspective_fov_formula():
    c = base_cam()
    p = perspective_camera(c, 2.0)
    assert p.tan_half_fov == pytest.approx(c.tan_half_fov / 2, rel=1e-12)
    np.testing.assert_allclose(p.forward, c.forward, atol=1e-15)
    np.testing.assert_allclose(p.eye, [0, 0, 0.6], atol=1e-15)
    with pytest.raises(ValueError):
        perspective_camera(c, 0.0)


class Disk:
    """Thin opaque disk in the z = 0 plane, facing +z."""

    def __init__(self, radius, half_thickness=0.002):
        self.radius, self.half = radius, half_thickness

    def query(self, x, d):
        inside = (np.abs(x[:, 2]) <= self.half) & (x[:, 0] ** 2 + x[:, 1] ** 2 <= self.radius ** 2)
        return np.full((len(x), 3), 0.3), np.where(inside, 1e4, 0.0)


class Ball:
    def __init__(self, radius):
        self.radius = radius

    def query(self, x, d):
        return np.full((len(x), 3), 0.3), np.where((x ** 2).sum(axis=1) <= self.radius ** 2, 1e4, 0.0)


def test_dolly_zoom_preserves_area_in_focal_plane():
    c = base_cam(res=96)
    cfg = RenderConfig(n_samples=512)
    near = silhouette(Disk(0.08), c, cfg=cfg).sum()
    far = silhouette(Disk(0.08), perspective_camera(c, 2.0), cfg=cfg).sum()
    assert abs(far / near - 1) < 0.01


def test_dolly_zoom_shrinks_ball_by_cone_geometry():
    # A ball's outline is its tangent cone, so its apparent radius under a
    # dolly zoom follows tan(asin(r / d)) rather than staying fixed.
    r, d = 0.11, 0.3
    expected = (2 * math.tan(math.asin(r / (2 * d))) / math.tan(math.asin(r / d))) ** 2
    c = base_cam(res=96)
    cfg = RenderConfig(n_samples=512)
    near = silhouette(Ball(r), c, cfg=cfg).sum()
    far = silhouette(Ball(r), perspective_camera(c, 2.0), cfg=cfg).sum()
    assert far / near == pytest.approx(expected, abs=0.015)
