"""Command-line entry point: ``portrait-nerf <command> [flags]``.

Every command writes a ``manifest.txt`` next to its artifacts with the merged
configuration, seeds, input checksums and output checksums. Settings are
resolved as defaults < ``--config`` JSON file < explicit flags.

Exit codes: 0 success, 1 usage/config/data error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import DatasetConfig, dataset_checksum, gen_dataset, load_dataset, save_dataset
from .errors import ConfigError, DatasetError, NonFinite, PortraitNerfError
from .evaluation import PRESETS, Condition, input_view_order, psnr, render_perspective, run_ablation, ssim
from .field.checkpoint import load_checkpoint, save_checkpoint
from .field.mlp import Architecture
from .geom import look_at_camera
from .images import read_png, write_png
from .meta import MetaConfig, TrainLog, finetune, pretrain_joint, pretrain_meta
from .render import RenderConfig, disparity_map, render_image
from .seeding import substream

THREADS_ENV = "PORTRAIT_NERF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- helpers ------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_id() -> str:
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def write_manifest(out_dir, command: str, config: dict, inputs: dict, outputs, started: float,
                   extra: dict | None = None) -> None:
    out = Path(out_dir)
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"build_id = {build_id()}",
        f"config = {json.dumps(config, sort_keys=True)}",
    ]
    lines += [f"{k} = {v}" for k, v in (extra or {}).items()]
    lines += [f"input.{k} = {v}" for k, v in sorted(inputs.items())]
    for p in sorted(outputs):
        p = Path(p)
        lines.append(f"artifact.{p.relative_to(out)} = {_sha256(p)}")
    lines.append(f"wall_clock_s = {time.time() - started:.3f}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _merge(defaults: dict, args: argparse.Namespace, keys) -> dict:
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(x) for x in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--grid expects ROWSxCOLS, got {text!r}") from exc
    return r, c


def _set_threads(n) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    threadpool_limits(n)


# --- config plumbing ----------------------------------------------------------

META_KEYS = ["alpha", "beta", "n_support", "n_query", "rays_per_step", "n_samples", "seed", "warp_mode", "epochs"]
ARCH_KEYS = ["width", "depth", "l_pos", "l_dir", "activation", "precision"]


def _add_meta_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--n-support", dest="n_support", type=int)
    p.add_argument("--n-query", dest="n_query", type=int)
    p.add_argument("--rays", dest="rays_per_step", type=int)
    p.add_argument("--samples", dest="n_samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--warp-mode", dest="warp_mode", choices=["canonical", "world"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--l-pos", dest="l_pos", type=int)
    p.add_argument("--l-dir", dest="l_dir", type=int)
    p.add_argument("--activation", choices=["relu", "softplus"])
    p.add_argument("--precision", type=int, choices=[32, 64])
    p.add_argument("--config", help="JSON file with settings (flags take precedence)")


def _meta_arch(args) -> tuple[MetaConfig, Architecture, dict]:
    defaults = {**asdict(MetaConfig()), **{k: v for k, v in asdict(Architecture()).items() if k in ARCH_KEYS}}
    merged = _merge(defaults, args, META_KEYS + ARCH_KEYS)
    try:
        cfg = MetaConfig(**{k: merged[k] for k in META_KEYS})
        arch = Architecture(**{k: merged[k] for k in ARCH_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, arch, merged


def _capture(ds, subject_id):
    if subject_id is None:
        return ds.test[0] if ds.test else ds.captures[-1]
    for cap in ds.captures:
        if cap.subject_id == subject_id:
            return cap
    raise ConfigError(f"unknown subject {subject_id!r}")


def _warp(ds, cap, mode):
    return ds.canonical_warp(cap) if mode == "canonical" else None


# --- commands -------------------------------------------------------------------

DATA_KEYS = ["n_subjects", "holdout", "grid", "vertical_span_deg", "horizontal_span_deg", "fov_deg", "distance",
             "resolution", "oracle_samples", "diversity", "seed"]


def cmd_gen_data(args) -> int:
    started = time.time()
    defaults = {k: v for k, v in asdict(DatasetConfig()).items() if k in DATA_KEYS}
    defaults.update(grid="5x5", resolution=64)
    merged = _merge(defaults, args, DATA_KEYS)
    rows, cols = _parse_grid(merged.pop("grid"))
    res = int(merged.pop("resolution"))
    cfg = DatasetConfig(grid_rows=rows, grid_cols=cols, width=res, height=res, **merged)
    out = Path(args.out)
    ds = gen_dataset(cfg)
    checksum = save_dataset(ds, out)
    write_manifest(out, "gen-data", asdict(cfg), {}, [out / "dataset.txt"], started,
                   {"train_subjects": " ".join(c.subject_id for c in ds.train),
                    "test_subjects": " ".join(c.subject_id for c in ds.test)})
    print(f"dataset {out}: {len(ds.train)} train + {len(ds.test)} test subjects, checksum {checksum}")
    return 0


def cmd_pretrain(args) -> int:
    started = time.time()
    cfg, arch, merged = _meta_arch(args)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = TrainLog()
    captures = ds.train if args.k_train is None else ds.train[: args.k_train]
    try:
        if args.mode == "meta":
            theta, _ = pretrain_meta(ds, cfg, arch, log, captures=captures)
            objective = "meta: sequential support/query updates"
        else:
            theta = pretrain_joint(ds, cfg, arch, log, captures=captures)
            objective = "joint: min sum_m L_support + L_query"
    finally:
        log.write_csv(out / "trainlog.csv")
    ckpt = out / "checkpoint.bin"
    save_checkpoint(theta, ckpt)
    merged.update(mode=args.mode, objective=objective, k_train=len(captures))
    write_manifest(out, "pretrain", merged, {"dataset": dataset_checksum(args.data)},
                   [ckpt, out / "trainlog.csv"], started)
    print(f"checkpoint {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    started = time.time()
    cfg, _, merged = _meta_arch(args)
    ds = load_dataset(args.data)
    theta = load_checkpoint(args.checkpoint)
    merged.update({k: v for k, v in asdict(theta.arch).items() if k in ARCH_KEYS})
    cap = _capture(ds, args.subject)
    order = input_view_order(cap)
    if not 1 <= args.views <= len(order):
        raise ConfigError(f"--views must be in [1, {len(order)}]")
    inputs = [cap.view(*cell) for cell in order[: args.views]]
    n_iters = cfg.n_support if args.iters is None else args.iters
    rate = cfg.alpha if args.rate is None else args.rate
    rng = substream(cfg.seed, f"finetune/{cap.subject_id}/{args.views}")
    log = TrainLog()
    theta_s = finetune(theta, [(v.camera, v.image) for v in inputs], _warp(ds, cap, cfg.warp_mode),
                       n_iters, rate, cfg, rng, log, optimizer=args.optimizer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "finetuned.bin"
    save_checkpoint(theta_s, ckpt)
    log.write_csv(out / "trainlog.csv")
    merged.update(subject=cap.subject_id, views=args.views, iters=n_iters, rate=rate, optimizer=args.optimizer)
    write_manifest(out, "finetune", merged,
                   {"dataset": dataset_checksum(args.data), "checkpoint": _sha256(args.checkpoint)},
                   [ckpt, out / "trainlog.csv"], started)
    print(f"finetuned checkpoint {ckpt}")
    return 0


def _spiral_cameras(cap, ds, frames: int):
    cfg = ds.config
    center = cap.subject.center
    cams = []
    for k in range(frames):
        phase = 2.0 * math.pi * k / frames
        el = math.radians(0.5 * cfg.vertical_span_deg * math.sin(phase))
        az = math.radians(0.5 * cfg.horizontal_span_deg * math.cos(phase))
        offset = cfg.distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
        cams.append(look_at_camera(center + offset, center, (0.0, 1.0, 0.0), cfg.fov_deg,
                                   cfg.width, cfg.height, cfg.near, cfg.far))
    return cams


def cmd_render(args) -> int:
    started = time.time()
    cfg, _, merged = _meta_arch(args)
    ds = load_dataset(args.data)
    theta = load_checkpoint(args.checkpoint)
    merged.update({k: v for k, v in asdict(theta.arch).items() if k in ARCH_KEYS})
    cap = _capture(ds, args.subject)
    warp = _warp(ds, cap, cfg.warp_mode)
    rcfg = RenderConfig(n_samples=cfg.n_samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.views == "spiral":
        cams = _spiral_cameras(cap, ds, args.frames)
    else:
        cams = [v.camera for v in cap.views]
    for k, cam in enumerate(cams):
        p = out / f"frame_{k:03d}.png"
        write_png(p, render_image(theta, cam, warp, rcfg))
        written.append(p)
    front = cap.view(*input_view_order(cap)[0]).camera
    if args.disparity:
        p = out / "disparity.png"
        write_png(p, disparity_map(theta, front, warp, rcfg))
        written.append(p)
    for s in args.perspective or []:
        p = out / f"perspective_{s:g}.png"
        write_png(p, render_perspective(theta, front, s, rcfg, warp))
        written.append(p)
    merged.update(subject=cap.subject_id, views=args.views, frames=len(cams), disparity=args.disparity,
                  perspective=args.perspective or [])
    write_manifest(out, "render", merged,
                   {"dataset": dataset_checksum(args.data), "checkpoint": _sha256(args.checkpoint)},
                   written, started)
    print(f"{len(written)} images in {out}")
    return 0


def cmd_eval(args) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred.glob("*.png"))
    if not names:
        raise ConfigError(f"no PNG files in {pred}")
    rows = []
    for name in names:
        if not (gt / name).exists():
            raise ConfigError(f"{name} missing from {gt}")
        a, b = read_png(pred / name), read_png(gt / name)
        rows.append((name, psnr(a, b), ssim(a, b)))
    out = Path(args.out) if args.out else pred / "eval.csv"
    with open(out, "w") as fh:
        fh.write("image,psnr,ssim\n")
        for name, p, s in rows:
            fh.write(f"{name},{p!r},{s!r}\n")
    finite = [p for _, p, _ in rows if math.isfinite(p)]
    mean_p = sum(p for _, p, _ in rows) / len(rows)
    print(f"{len(rows)} images: mean PSNR {mean_p:.3f} dB ({len(finite)} finite), "
          f"mean SSIM {sum(s for *_, s in rows) / len(rows):.4f}")
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg, arch, merged = _meta_arch(args)
    ds = load_dataset(args.data)
    if args.preset:
        conditions = PRESETS[args.preset]
    else:
        conditions = [Condition(args.init, args.coord, args.n_views)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_ablation(ds, conditions, cfg, arch, args.finetune_iters, args.finetune_rate,
                          out_dir=out / "renders" if args.save_images else None)
    report.write_csv(out / "report.csv")
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    merged.update(preset=args.preset, conditions=[c.label for c in conditions])
    outputs = [out / "report.csv", out / "summary.txt"]
    if args.save_images:
        outputs += sorted((out / "renders").rglob("*.png"))
    write_manifest(out, "ablate", merged, {"dataset": dataset_checksum(args.data)}, outputs, started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="portrait-nerf", description="Few-shot portrait radiance fields on synthetic heads.")
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV})")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-view dataset")
    g.add_argument("--subjects", dest="n_subjects", type=int)
    g.add_argument("--holdout", type=int)
    g.add_argument("--grid")
    g.add_argument("--vspan", dest="vertical_span_deg", type=float)
    g.add_argument("--hspan", dest="horizontal_span_deg", type=float)
    g.add_argument("--fov", dest="fov_deg", type=float)
    g.add_argument("--distance", type=float)
    g.add_argument("--resolution", type=int)
    g.add_argument("--oracle-samples", dest="oracle_samples", type=int)
    g.add_argument("--diversity", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="meta or joint pretraining")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["meta", "joint"], default="meta")
    t.add_argument("--k-train", dest="k_train", type=int)
    t.add_argument("--out", required=True)
    _add_meta_flags(t)
    t.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="adapt a checkpoint to a held-out subject")
    f.add_argument("--data", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--subject")
    f.add_argument("--views", type=int, default=1)
    f.add_argument("--iters", type=int)
    f.add_argument("--rate", type=float)
    f.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    f.add_argument("--out", required=True)
    _add_meta_flags(f)
    f.set_defaults(func=cmd_finetune)

    r = sub.add_parser("render", help="render novel views, disparity and perspective series")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--subject")
    r.add_argument("--views", choices=["grid", "spiral"], default="grid")
    r.add_argument("--frames", type=int, default=24)
    r.add_argument("--disparity", action="store_true")
    r.add_argument("--perspective", type=float, nargs="*")
    r.add_argument("--out", required=True)
    _add_meta_flags(r)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM between two directories of PNGs")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation preset")
    a.add_argument("--data", required=True)
    a.add_argument("--preset", choices=sorted(PRESETS))
    a.add_argument("--init", choices=["random", "joint", "meta"], default="meta")
    a.add_argument("--coord", choices=["canonical", "world"], default="canonical")
    a.add_argument("--n-views", dest="n_views", type=int, default=1)
    a.add_argument("--finetune-iters", dest="finetune_iters", type=int)
    a.add_argument("--finetune-rate", dest="finetune_rate", type=float)
    a.add_argument("--save-images", action="store_true")
    a.add_argument("--out", required=True)
    _add_meta_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NonFinite as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (PortraitNerfError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
