"""Pretraining and finetuning of the radiance-field MLP.

Sequential meta-pretraining visits the training subjects once, in order.
For subject ``m`` the current pretrained weights are first adapted to the
frontal (support) view with ``N_s`` plain gradient steps of size ``alpha``.
Then ``N_q`` steps on the query views continue from the adapted weights;
each query gradient, always evaluated at the adapted weights, is applied
with rate ``beta`` both to the adapted weights and to the pretrained
weights. The pretrained weights after the last subject are the result.

All updates are plain SGD; in 64-bit mode they are rounded to a fixed
binary lattice (see ``snap``) so that the pretrained and adapted weights
receive bitwise-identical deltas. Randomness (initialization and ray batches)
comes from labeled sub-streams of one seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NonFinite
from .field.mlp import Architecture, MlpParams, init_params
from .geom import Similarity, camera_rays
from .render import RenderConfig, loss_and_grad
from .seeding import substream

WARP_MODES = ("canonical", "world")

# In 64-bit mode parameters and SGD updates are rounded to multiples of
# 2**-LATTICE_BITS. While every magnitude stays below 2**(52 - LATTICE_BITS)
# each addition is then exact, so applying one update sequence to two
# parameter sets changes both by bitwise the same amount.
LATTICE_BITS = 40
LATTICE_LIMIT = 2.0 ** (52 - LATTICE_BITS)


def snap(params: MlpParams) -> MlpParams:
    """Round 64-bit parameters onto the update lattice (32-bit: unchanged)."""
    if params.arch.precision != 64:
        return params
    return MlpParams(params.arch, [np.ldexp(np.rint(np.ldexp(t, LATTICE_BITS)), -LATTICE_BITS)
                                   for t in params.tensors])


def _check_lattice(params: MlpParams, where: str = "") -> None:
    if params.arch.precision == 64 and params.max_abs() >= LATTICE_LIMIT:
        msg = f"parameter magnitude {params.max_abs():.3g} left the exact-update range"
        raise NonFinite(f"{msg} at {where}" if where else msg)


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 3.0
    beta: float = 3.0
    n_support: int = 128
    n_query: int = 128
    rays_per_step: int = 512
    n_samples: int = 32
    seed: int = 0
    warp_mode: str = "canonical"
    epochs: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("learning rates must be non-negative")
        if self.n_support < 0 or self.n_query < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.rays_per_step < 1 or self.epochs < 1:
            raise ValueError("rays_per_step and epochs must be >= 1")
        if self.warp_mode not in WARP_MODES:
            raise ValueError(f"warp_mode must be one of {WARP_MODES}")

    def render_config(self) -> RenderConfig:
        return RenderConfig(n_samples=self.n_samples, stratified=True)

    def replace(self, **changes) -> "MetaConfig":
        return replace(self, **changes)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)          # (m, phase, t, loss, wall_ms)
    subject_ms: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def append(self, m: int, phase: str, t: int, loss: float, wall_ms: float) -> None:
        self.rows.append((m, phase, t, float(loss), float(wall_ms)))

    def losses(self, m: Optional[int] = None, phase: Optional[str] = None) -> list:
        return [r[3] for r in self.rows if (m is None or r[0] == m) and (phase is None or r[1] == phase)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["m", "phase", "t", "loss", "wall_ms"])
            for m, phase, t, loss, ms in self.rows:
                w.writerow([m, phase, t, repr(loss), f"{ms:.3f}"])


class RayPool:
    """All pixel rays of a set of posed images, for uniform minibatching."""

    def __init__(self, views):
        views = list(views)
        if not views:
            raise ValueError("need at least one view")
        origins, dirs, colors = [], [], []
        bounds = {(cam.near, cam.far) for cam, _ in views}
        if len(bounds) != 1:
            raise ValueError("all views must share near/far bounds")
        self.near, self.far = bounds.pop()
        for cam, img in views:
            o, d = camera_rays(cam)
            origins.append(o)
            dirs.append(d)
            colors.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.colors = np.concatenate(colors)

    def __len__(self) -> int:
        return len(self.origins)

    def sample(self, rng: np.random.Generator, n: int):
        idx = rng.integers(0, len(self), size=n)
        return self.origins[idx], self.dirs[idx], self.colors[idx]


def _as_pool(views) -> RayPool:
    return views if isinstance(views, RayPool) else RayPool(views)


def sgd_step(params: MlpParams, pool: RayPool, warp, cfg: MetaConfig, rate: float,
             rng: np.random.Generator, where: str = ""):
    """One gradient step; returns ``(new_params, loss, update)``.

    ``where`` names the step (subject, phase, iteration) in error messages.
    """
    o, d, tgt = pool.sample(rng, cfg.rays_per_step)
    try:
        loss, grad = loss_and_grad(params, o, d, tgt, cfg.render_config(), pool.near, pool.far, warp, rng)
    except NonFinite as exc:
        raise NonFinite(f"{exc} at {where}" if where else str(exc)) from exc
    update = snap(grad.scaled(rate))
    new = params - update
    if not new.is_finite():
        raise NonFinite(f"parameters diverged at {where}" if where else "parameters diverged")
    _check_lattice(new, where)
    return new, loss, update


def inner_adapt(theta0: MlpParams, support, warp: Optional[Similarity], cfg: MetaConfig,
                rng: np.random.Generator, log: Optional[TrainLog] = None, m: int = 0,
                n_iters: Optional[int] = None, rate: Optional[float] = None) -> MlpParams:
    """``n_iters`` (default ``N_s``) SGD steps of size ``alpha`` on the support views."""
    pool = _as_pool(support)
    n = cfg.n_support if n_iters is None else n_iters
    lr = cfg.alpha if rate is None else rate
    theta = theta0
    for t in range(n):
        t0 = time.perf_counter()
        theta, loss, _ = sgd_step(theta, pool, warp, cfg, lr, rng, f"m={m} phase=support t={t}")
        if log is not None:
            log.append(m, "support", t, loss, 1e3 * (time.perf_counter() - t0))
    return theta


def outer_step(theta_star: MlpParams, theta_p: MlpParams, query, warp: Optional[Similarity],
               cfg: MetaConfig, rng: np.random.Generator, log: Optional[TrainLog] = None,
               m: int = 0, trace: Optional[list] = None):
    """Query phase: returns ``(theta_m_final, theta_p_next)``.

    Each step's gradient is taken at the subject weights ``theta_m^t`` and the
    identical update is subtracted from both parameter sets. ``trace``, if
    given, receives the generator state and the applied update per step so
    a step can be replayed.
    """
    pool = _as_pool(query)
    theta_m, theta_pt = theta_star, theta_p
    for t in range(cfg.n_query):
        t0 = time.perf_counter()
        state = rng.bit_generator.state if trace is not None else None
        theta_m_next, loss, update = sgd_step(theta_m, pool, warp, cfg, cfg.beta, rng, f"m={m} phase=query t={t}")
        theta_pt = theta_pt - update
        _check_lattice(theta_pt)
        if trace is not None:
            trace.append({"rng_state": state, "theta_m": theta_m, "update": update})
        theta_m = theta_m_next
        if log is not None:
            log.append(m, "query", t, loss, 1e3 * (time.perf_counter() - t0))
    if not theta_pt.is_finite():
        raise NonFinite("pretrained parameters diverged")
    return theta_m, theta_pt


def subject_warp(dataset, capture, warp_mode: str) -> Optional[Similarity]:
    return dataset.canonical_warp(capture) if warp_mode == "canonical" else None


def random_init(arch: Architecture, seed: int) -> MlpParams:
    return snap(init_params(arch, substream(seed, "init")))


def pretrain_meta(dataset, cfg: MetaConfig, arch: Architecture = Architecture(),
                  log: Optional[TrainLog] = None, captures=None):
    """Sequential meta-pretraining over the training subjects.

    Returns ``(theta_p_star, log)``.
    """
    log = TrainLog() if log is None else log
    captures = dataset.train if captures is None else captures
    theta_p = random_init(arch, cfg.seed)
    m = 0
    for epoch in range(cfg.epochs):
        for cap in captures:
            t0 = time.perf_counter()
            warp = subject_warp(dataset, cap, cfg.warp_mode)
            rng_s = substream(cfg.seed, f"batch/support/{epoch}/{m}")
            rng_q = substream(cfg.seed, f"batch/query/{epoch}/{m}")
            theta_star = inner_adapt(theta_p, cap.support, warp, cfg, rng_s, log, m)
            _, theta_p = outer_step(theta_star, theta_p, cap.query, warp, cfg, rng_q, log, m)
            log.subject_ms[m] = 1e3 * (time.perf_counter() - t0)
            m += 1
    return theta_p, log


def pretrain_joint(dataset, cfg: MetaConfig, arch: Architecture = Architecture(),
                   log: Optional[TrainLog] = None, captures=None,
                   n_steps: Optional[int] = None) -> MlpParams:
    """Plain pretraining on the summed support and query losses of every subject.

    Each step draws a subject, then a phase (support or query) and a ray
    batch from that phase's views, an unbiased estimate of the objective.
    The default budget equals the meta-pretraining step count.
    """
    captures = list(dataset.train if captures is None else captures)
    if n_steps is None:
        n_steps = cfg.epochs * len(captures) * (cfg.n_support + cfg.n_query)
    theta = random_init(arch, cfg.seed)
    pools = []
    for cap in captures:
        phases = [RayPool(cap.support)]
        if cap.query:
            phases.append(RayPool(cap.query))
        pools.append((phases, subject_warp(dataset, cap, cfg.warp_mode)))
    rng = substream(cfg.seed, "batch/joint")
    for step in range(n_steps):
        t0 = time.perf_counter()
        k = int(rng.integers(len(pools))) if len(pools) > 1 else 0
        phases, warp = pools[k]
        ph = int(rng.integers(len(phases))) if len(phases) > 1 else 0
        theta, loss, _ = sgd_step(theta, phases[ph], warp, cfg, cfg.beta, rng, f"phase=joint t={step}")
        if log is not None:
            log.append(k, "joint", step, loss, 1e3 * (time.perf_counter() - t0))
    return theta


def finetune(theta_p_star: MlpParams, input_views, warp: Optional[Similarity], n_iters: int,
             rate: float, cfg: MetaConfig = MetaConfig(), rng: Optional[np.random.Generator] = None,
             log: Optional[TrainLog] = None, optimizer: str = "sgd") -> MlpParams:
    """Test-time adaptation on one or more posed input views.

    Rays are drawn uniformly over the pixels of all input views, so each
    step estimates the mean per-view loss. ``optimizer="adam"`` switches to
    Adam (off by default; noted in ``log``).
    """
    rng = substream(cfg.seed, "batch/finetune") if rng is None else rng
    if optimizer == "sgd":
        return inner_adapt(theta_p_star, input_views, warp, cfg, rng, log, 0, n_iters=n_iters, rate=rate)
    if optimizer != "adam":
        raise ValueError("optimizer must be 'sgd' or 'adam'")
    if log is not None:
        log.notes.append("finetune optimizer: adam")
    return _adam(theta_p_star, _as_pool(input_views), warp, n_iters, rate, cfg, rng, log)


def _adam(theta, pool, warp, n_iters, rate, cfg, rng, log, b1=0.9, b2=0.999, eps=1e-8):
    mom = [np.zeros_like(t) for t in theta.tensors]
    vel = [np.zeros_like(t) for t in theta.tensors]
    for t in range(1, n_iters + 1):
        t0 = time.perf_counter()
        o, d, tgt = pool.sample(rng, cfg.rays_per_step)
        loss, g = loss_and_grad(theta, o, d, tgt, cfg.render_config(), pool.near, pool.far, warp, rng)
        new = []
        for k, (p, gk) in enumerate(zip(theta.tensors, g.tensors)):
            mom[k] = b1 * mom[k] + (1 - b1) * gk
            vel[k] = b2 * vel[k] + (1 - b2) * gk * gk
            mh = mom[k] / (1 - b1 ** t)
            vh = vel[k] / (1 - b2 ** t)
            new.append(p - rate * mh / (np.sqrt(vh) + eps))
        theta = MlpParams(theta.arch, new)
        if log is not None:
            log.append(0, "finetune", t - 1, loss, 1e3 * (time.perf_counter() - t0))
    return theta


def config_dict(cfg: MetaConfig) -> dict:
    return asdict(cfg)
