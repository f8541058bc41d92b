"""Differentiable volume rendering along camera rays.

Compositing follows the usual quadrature: with ``delta_i = t_{i+1} - t_i``
(the last interval ends at ``far``), ``alpha_i = 1 - exp(-sigma_i delta_i)``,
``T_i = prod_{j<i} (1 - alpha_j)`` and ``w_i = T_i alpha_i``; the pixel is
``sum_i w_i c_i + T_final * background``.

Rendering is single-process: every random draw comes from a generator seeded
by the caller, so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import NonFinite, NonMonotonicDepths
from .field.analytic import AnalyticField, SyntheticSubject
from .field.mlp import MlpParams, NeuralField, backward, forward
from .geom import Camera, Ray, Similarity, camera_rays

DEPTH_EPS = 1e-8


@dataclass(frozen=True)
class RenderConfig:
    """Sampling setup. ``near``/``far`` of ``None`` defer to the camera."""

    n_samples: int = 32
    near: Optional[float] = None
    far: Optional[float] = None
    stratified: bool = False
    background_rgb: tuple = (1.0, 1.0, 1.0)
    rng_seed: int = 0
    rays_per_batch: int = 4096

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.near is not None and self.far is not None and not self.near < self.far:
            raise ValueError("near must be < far")
        bg = tuple(float(c) for c in self.background_rgb)
        if len(bg) != 3 or not all(0.0 <= c <= 1.0 for c in bg):
            raise ValueError("background_rgb must be three values in [0, 1]")
        object.__setattr__(self, "background_rgb", bg)

    def bounds(self, cam: Optional[Camera] = None) -> tuple[float, float]:
        near = self.near if self.near is not None else (cam.near if cam else None)
        far = self.far if self.far is not None else (cam.far if cam else None)
        if near is None or far is None:
            raise ValueError("integration bounds unset: give near/far or a camera")
        return float(near), float(far)

    def replace(self, **changes) -> "RenderConfig":
        return replace(self, **changes)


def as_field(f):
    if isinstance(f, MlpParams):
        return NeuralField(f)
    if isinstance(f, SyntheticSubject):
        return AnalyticField(f)
    return f


def sample_depths(n_rays: int, near: float, far: float, n_samples: int,
                  stratified: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Depths of shape ``(n_rays, n_samples)``: bin midpoints, or one
    uniform draw inside each equal-width bin when ``stratified``."""
    edges = np.linspace(near, far, n_samples + 1)
    lower, width = edges[:-1], np.diff(edges)
    if not stratified:
        return np.broadcast_to(lower + 0.5 * width, (n_rays, n_samples)).copy()
    if rng is None:
        raise ValueError("stratified sampling needs an rng")
    u = rng.random((n_rays, n_samples))
    return lower + u * width


def sample_along_ray(ray: Ray, cfg: RenderConfig, rng=None) -> np.ndarray:
    near, far = cfg.bounds()
    if rng is None and cfg.stratified:
        rng = np.random.default_rng(cfg.rng_seed)
    return sample_depths(1, near, far, cfg.n_samples, cfg.stratified, rng)[0]


class Composite(NamedTuple):
    rgb: np.ndarray            # (R, 3)
    weights: np.ndarray        # (R, S)
    depth: np.ndarray          # (R,)
    transmittance: np.ndarray  # (R,) final transmittance
    acc: np.ndarray            # (R,) sum of weights
    # kept for the backward pass
    T: np.ndarray              # (R, S) transmittance before each sample
    delta: np.ndarray          # (R, S)
    colors: np.ndarray         # (R, S, 3)


def composite_rays(rgb, sigma, t, far: float, background) -> Composite:
    """Composite samples of many rays at once (float64 throughout)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = far - t[:, -1]
    if np.any(delta <= 0):
        raise NonMonotonicDepths("sample depths must be strictly increasing and below far")
    with np.errstate(invalid="ignore"):
        tau = sigma * delta
    trans = np.exp(-tau)
    alpha = 1.0 - trans
    T = np.ones_like(trans)
    np.cumprod(trans[:, :-1], axis=1, out=T[:, 1:])
    weights = T * alpha
    T_final = T[:, -1] * trans[:, -1]
    bg = np.asarray(background, dtype=np.float64)
    color = np.einsum("rs,rsc->rc", weights, rgb) + T_final[:, None] * bg
    acc = weights.sum(axis=1)
    depth = (weights * t).sum(axis=1) / np.maximum(acc, DEPTH_EPS)
    return Composite(color, weights, depth, T_final, acc, T, delta, rgb)


def composite(samples, background_rgb=(1.0, 1.0, 1.0), far: Optional[float] = None):
    """Single-ray compositing of ``[((rgb, sigma), t), ...]``.

    Returns ``(rgb, weights, depth, transmittance_final)``. When ``far`` is
    omitted the last interval copies the previous one.
    """
    rgb = np.array([s[0][0] for s in samples], dtype=np.float64)[None]
    sigma = np.array([s[0][1] for s in samples], dtype=np.float64)[None]
    t = np.array([s[1] for s in samples], dtype=np.float64)[None]
    if far is None:
        far = t[0, -1] + (t[0, -1] - t[0, -2])
    out = composite_rays(rgb, sigma, t, far, background_rgb)
    return out.rgb[0], out.weights[0], float(out.depth[0]), float(out.transmittance[0])


def composite_backward(comp: Composite, d_rgb, background):
    """Gradients of a loss w.r.t. sample colors and densities.

    ``d_rgb`` is the upstream gradient on the composited colors ``(R, 3)``.
    """
    g = np.asarray(d_rgb, dtype=np.float64)
    d_colors = comp.weights[:, :, None] * g[:, None, :]
    gc = np.einsum("rsc,rc->rs", comp.colors, g)           # g . c_i
    wgc = comp.weights * gc
    # sum_{j>i} w_j (g . c_j)
    later = np.cumsum(wgc[:, ::-1], axis=1)[:, ::-1] - wgc
    T_next = np.empty_like(comp.T)
    T_next[:, :-1] = comp.T[:, 1:]
    T_next[:, -1] = comp.transmittance
    gbg = g @ np.asarray(background, dtype=np.float64)
    d_sigma = comp.delta * (T_next * gc - later - comp.transmittance[:, None] * gbg[:, None])
    return d_colors, d_sigma


def _ray_points(origins, dirs, t, warp: Optional[Similarity]):
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    if warp is not None:
        pts = warp.apply(pts)
    d = np.broadcast_to(dirs[:, None, :], pts.shape)
    return pts.reshape(-1, 3), d.reshape(-1, 3)


def render_rays(fld, origins, dirs, cfg: RenderConfig, near: float, far: float,
                warp: Optional[Similarity] = None, rng=None) -> Composite:
    fld = as_field(fld)
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R = len(origins)
    t = sample_depths(R, near, far, cfg.n_samples, cfg.stratified, rng)
    S = t.shape[1]
    hit = _support_hits(fld, origins, dirs, near, far) if warp is None else None
    if hit is None:
        x, d = _ray_points(origins, dirs, t, warp)
        rgb, sigma = fld.query(x, d)
        rgb, sigma = np.asarray(rgb).reshape(R, S, 3), np.asarray(sigma).reshape(R, S)
    else:
        # rays missing the field's support see exactly zero density
        rgb, sigma = np.zeros((R, S, 3)), np.zeros((R, S))
        if np.any(hit):
            x, d = _ray_points(origins[hit], dirs[hit], t[hit], None)
            h_rgb, h_sigma = fld.query(x, d)
            rgb[hit] = np.asarray(h_rgb).reshape(-1, S, 3)
            sigma[hit] = np.asarray(h_sigma).reshape(-1, S)
    return composite_rays(rgb, sigma, t, far, cfg.background_rgb)


def _support_hits(fld, origins, dirs, near, far):
    sphere = getattr(fld, "support_sphere", None)
    if sphere is None:
        return None
    center, radius = sphere()
    oc = center - origins
    tc = np.einsum("ij,ij->i", oc, dirs)
    dist2 = np.einsum("ij,ij->i", oc, oc) - tc * tc
    return (dist2 < radius * radius) & (tc + radius > near) & (tc - radius < far)


class RenderResult(NamedTuple):
    rgb: np.ndarray    # (H, W, 3)
    depth: np.ndarray  # (H, W) expected ray depth
    acc: np.ndarray    # (H, W) accumulated opacity


def render_camera(fld, cam: Camera, warp: Optional[Similarity] = None,
                  cfg: RenderConfig = RenderConfig()) -> RenderResult:
    near, far = cfg.bounds(cam)
    origins, dirs = camera_rays(cam)
    rng = np.random.default_rng(cfg.rng_seed) if cfg.stratified else None
    n = len(origins)
    rgb = np.empty((n, 3))
    depth = np.empty(n)
    acc = np.empty(n)
    step = max(int(cfg.rays_per_batch), 1)
    for lo in range(0, n, step):
        sl = slice(lo, min(lo + step, n))
        out = render_rays(fld, origins[sl], dirs[sl], cfg, near, far, warp, rng)
        rgb[sl], depth[sl], acc[sl] = out.rgb, out.depth, out.acc
    shape = (cam.height, cam.width)
    return RenderResult(np.clip(rgb, 0.0, 1.0).reshape(*shape, 3), depth.reshape(shape), acc.reshape(shape))


def render_image(fld, cam: Camera, warp: Optional[Similarity] = None,
                 cfg: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render an ``(H, W, 3)`` image in [0, 1].

    ``warp`` maps world sample positions into the field's frame; viewing
    directions stay in world coordinates.
    """
    return render_camera(fld, cam, warp, cfg).rgb


def disparity_map(fld, cam: Camera, warp: Optional[Similarity] = None,
                  cfg: RenderConfig = RenderConfig(), min_acc: float = 1e-3) -> np.ndarray:
    """Inverse expected depth normalized to [0, 1] over covered pixels.

    Pixels whose accumulated weight is below ``min_acc`` are 0; if every
    covered pixel has the same disparity they are all 1.
    """
    res = render_camera(fld, cam, warp, cfg)
    return disparity_from_depth(res.depth, res.acc, min_acc)


def disparity_from_depth(depth, acc, min_acc: float = 1e-3) -> np.ndarray:
    valid = acc >= min_acc
    out = np.zeros_like(depth, dtype=np.float64)
    if not np.any(valid):
        return out
    disp = 1.0 / np.maximum(depth[valid], DEPTH_EPS)
    lo, hi = disp.min(), disp.max()
    out[valid] = (disp - lo) / (hi - lo) if hi > lo else 1.0
    return out


def loss_and_grad(params: MlpParams, origins, dirs, targets, cfg: RenderConfig,
                  near: float, far: float, warp: Optional[Similarity] = None,
                  rng=None) -> tuple[float, MlpParams]:
    """Mean squared color error over a ray batch and its parameter gradient.

    The loss is ``mean_r ||rgb_pred_r - rgb_target_r||^2`` (channels summed).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    R = len(origins)
    if R == 0:
        raise ValueError("empty ray batch")
    S = cfg.n_samples
    t = sample_depths(R, near, far, S, cfg.stratified, rng)
    x, d = _ray_points(origins, dirs, t, warp)
    rgb, sigma, cache = forward(params, x, d, keep=True)
    comp = composite_rays(rgb.reshape(R, S, 3), sigma.reshape(R, S), t, far, cfg.background_rgb)
    diff = comp.rgb - targets
    loss = float(np.sum(diff * diff) / R)
    if not np.isfinite(loss):
        raise NonFinite("non-finite loss")
    d_colors, d_sigma = composite_backward(comp, 2.0 * diff / R, cfg.background_rgb)
    grad = backward(params, cache, d_colors.reshape(-1, 3), d_sigma.reshape(-1))
    return loss, grad


def render_loss(params: MlpParams, origins, dirs, targets, cfg: RenderConfig,
                near: float, far: float, warp=None, t=None) -> float:
    """Forward-only loss, optionally with fixed sample depths ``t``."""
    R = len(origins)
    if t is None:
        t = sample_depths(R, near, far, cfg.n_samples, False)
    x, d = _ray_points(np.asarray(origins, float), np.asarray(dirs, float), t, warp)
    rgb, sigma = forward(params, x, d)
    comp = composite_rays(rgb.reshape(R, -1, 3), sigma.reshape(R, -1), t, far, cfg.background_rgb)
    diff = comp.rgb - np.asarray(targets, float)
    return float(np.sum(diff * diff) / R)
