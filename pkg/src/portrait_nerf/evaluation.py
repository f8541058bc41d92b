"""Image metrics, the ablation harness, and perspective (dolly-zoom) renders.

PSNR is computed per image on floating-point renders (before 8-bit
quantization) and then averaged over images. SSIM uses the Gaussian-window
formulation (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03, data range 1) on Rec.601
luma, averaged over the valid-region SSIM map.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, TooSmall
from .field.mlp import Architecture, MlpParams
from .geom import Camera, Similarity
from .images import write_png
from .meta import MetaConfig, finetune, pretrain_joint, pretrain_meta, random_init, subject_warp
from .render import RenderConfig, render_camera, render_image
from .seeding import substream

PSNR_IDENTICAL = math.inf
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img @ LUMA


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b) -> float:
    a, b = _check_same(a, b)
    ya, yb = luma(a), luma(b)
    if min(ya.shape) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs both sides >= {SSIM_WINDOW}, got {ya.shape}")
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    s_aa = _filter_valid(ya * ya, g) - mu_a * mu_a
    s_bb = _filter_valid(yb * yb, g) - mu_b * mu_b
    s_ab = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * s_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return float(np.mean(num / den))


# --- perspective manipulation -------------------------------------------------

def perspective_camera(base_cam: Camera, distance_scale: float) -> Camera:
    """Dolly-zoom: move the eye along the view axis and narrow the FOV.

    The look-at distance is the middle of the camera's ``[near, far]`` slab.
    Integration bounds shift with the eye so they cover the same world-space
    slab the field was trained on.
    """
    if not distance_scale > 0:
        raise ValueError("distance_scale must be positive")
    if distance_scale == 1.0:
        return base_cam
    dist = 0.5 * (base_cam.near + base_cam.far)
    center = base_cam.eye + dist * base_cam.forward
    shift = (distance_scale - 1.0) * dist
    eye = center - distance_scale * dist * base_cam.forward
    half = math.atan(base_cam.tan_half_fov / distance_scale)
    pose = Similarity(1.0, base_cam.pose.R, eye)
    near = max(base_cam.near + shift, 1e-6)
    return base_cam.replace(pose=pose, fov_deg=math.degrees(2.0 * half), near=near, far=base_cam.far + shift)


def render_perspective(theta_s, base_cam: Camera, distance_scale: float,
                       cfg: RenderConfig = RenderConfig(), warp: Optional[Similarity] = None) -> np.ndarray:
    cam = perspective_camera(base_cam, distance_scale)
    return render_image(theta_s, cam, warp, cfg.replace(near=None, far=None))


def silhouette(fld, cam: Camera, warp=None, cfg: RenderConfig = RenderConfig(), threshold: float = 0.5):
    return render_camera(fld, cam, warp, cfg.replace(near=None, far=None)).acc > threshold


# --- ablations ------------------------------------------------------------------

INITS = ("random", "joint", "meta")


@dataclass(frozen=True)
class Condition:
    init: str = "meta"
    coord: str = "canonical"
    n_views: int = 1
    k_train: Optional[int] = None

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.coord not in ("canonical", "world"):
            raise ValueError("coord must be 'canonical' or 'world'")
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")

    @property
    def label(self) -> str:
        k = "all" if self.k_train is None else str(self.k_train)
        return f"{self.init}-{self.coord}-v{self.n_views}-k{k}"


PRESETS = {
    "table3": [Condition("random"), Condition("joint"), Condition("meta")],
    "table4": [Condition("meta", "world"), Condition("meta", "canonical")],
    "table5": [Condition("meta", k_train=k) for k in (2, 4, 6, 8)],
    "table6": [Condition(i, "canonical", v) for i in INITS for v in (1, 2, 5)],
}


def input_view_order(capture) -> list:
    """Grid cells used as inputs: center first, then the mid-row ends and
    the mid-column ends."""
    rows = max(v.row for v in capture.views) + 1
    cols = max(v.col for v in capture.views) + 1
    cr, cc = rows // 2, cols // 2
    cells = [(cr, cc), (cr, 0), (cr, cols - 1), (0, cc), (rows - 1, cc)]
    out = []
    for cell in cells:
        if cell not in out:
            out.append(cell)
    return out


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)     # dicts: condition, subject, view, psnr, ssim
    conditions: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, cond: Condition, subject: str, view: int, p: float, s: float) -> None:
        self.conditions.setdefault(cond.label, cond)
        self.rows.append({"condition": cond.label, "subject": subject, "view": view, "psnr": p, "ssim": s})

    def condition_rows(self, label: str) -> list:
        return [r for r in self.rows if r["condition"] == label]

    def means(self) -> dict:
        out = {}
        for label in self.conditions:
            rows = self.condition_rows(label)
            out[label] = {
                "psnr": sum(r["psnr"] for r in rows) / len(rows),
                "ssim": sum(r["ssim"] for r in rows) / len(rows),
                "n": len(rows),
            }
        return out

    def mean_psnr(self, cond: Condition) -> float:
        return self.means()[cond.label]["psnr"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# psnr on float renders before 8-bit quantization; ssim on Rec.601 luma\n")
            w = csv.writer(fh)
            w.writerow(["condition", "init", "coord", "n_views", "k_train", "subject", "view", "psnr", "ssim"])
            for r in self.rows:
                c = self.conditions[r["condition"]]
                w.writerow([c.label, c.init, c.coord, c.n_views, "" if c.k_train is None else c.k_train,
                            r["subject"], r["view"], repr(r["psnr"]), repr(r["ssim"])])

    def summary(self) -> str:
        lines = [f"{'condition':<32} {'n':>4} {'PSNR':>8} {'SSIM':>8}"]
        for label, m in self.means().items():
            lines.append(f"{label:<32} {m['n']:>4} {m['psnr']:>8.3f} {m['ssim']:>8.4f}")
        return "\n".join(lines)


def pretrained_params(dataset, cond: Condition, cfg: MetaConfig, arch: Architecture) -> MlpParams:
    if cond.init == "random":
        return random_init(arch, cfg.seed)
    train = dataset.train if cond.k_train is None else dataset.train[: cond.k_train]
    cfg = cfg.replace(warp_mode=cond.coord)
    if cond.init == "joint":
        return pretrain_joint(dataset, cfg, arch, captures=train)
    return pretrain_meta(dataset, cfg, arch, captures=train)[0]


def run_ablation(dataset, conditions, cfg: MetaConfig = MetaConfig(), arch: Architecture = Architecture(),
                 finetune_iters: Optional[int] = None, finetune_rate: Optional[float] = None,
                 subjects=None, out_dir=None, pretrained: Optional[dict] = None,
                 progress=None) -> EvalReport:
    """Pretrain (per condition), finetune on each held-out subject's input
    views, render the evaluation views and score them.

    Evaluation views are the query views minus every extra input view any
    listed condition uses, so all conditions are scored on the same images.
    ``pretrained`` may carry a cache keyed by ``(init, coord, k_train)``.
    """
    conditions = list(conditions)
    n_iters = cfg.n_support if finetune_iters is None else finetune_iters
    rate = cfg.alpha if finetune_rate is None else finetune_rate
    subjects = dataset.test if subjects is None else subjects
    cache = {} if pretrained is None else pretrained
    max_views = max(c.n_views for c in conditions)
    rcfg = RenderConfig(n_samples=cfg.n_samples, stratified=False)
    report = EvalReport(config={"meta": asdict(cfg), "arch": asdict(arch), "finetune_iters": n_iters,
                                "finetune_rate": rate, "dataset": asdict(dataset.config)})
    for cond in conditions:
        key = (cond.init, cond.coord if cond.init != "random" else None, cond.k_train if cond.init != "random" else None)
        if key not in cache:
            cache[key] = pretrained_params(dataset, cond, cfg, arch)
        theta_p = cache[key]
        for cap in subjects:
            order = input_view_order(cap)
            if cond.n_views > len(order):
                raise ValueError(f"at most {len(order)} input views are defined")
            inputs = [cap.view(*cell) for cell in order[: cond.n_views]]
            excluded = {cap.view(*cell).index for cell in order[:max_views]}
            warp = subject_warp(dataset, cap, cond.coord)
            rng = substream(cfg.seed, f"finetune/{cap.subject_id}/{cond.n_views}")
            theta_s = finetune(theta_p, [(v.camera, v.image) for v in inputs], warp, n_iters, rate, cfg, rng)
            for v in cap.views:
                if v.index in excluded:
                    continue
                img = render_image(theta_s, v.camera, warp, rcfg)
                report.add(cond, cap.subject_id, v.index, psnr(img, v.image), ssim(img, v.image))
                if out_dir is not None:
                    d = Path(out_dir) / cond.label / cap.subject_id
                    d.mkdir(parents=True, exist_ok=True)
                    write_png(d / f"view_{v.index:03d}.png", img)
            if progress is not None:
                progress(cond, cap)
    return report
