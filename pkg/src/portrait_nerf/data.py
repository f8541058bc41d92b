"""Procedural multi-view captures of synthetic heads.

Every subject is photographed by a ``rows x cols`` grid of cameras placed on
a sphere around the head center, spanning a fixed elevation/azimuth range,
all at the same distance and looking at the center. The central camera is
the support (frontal) view; the rest form the query set.

On disk a dataset is a directory with a top-level ``dataset.txt`` manifest
and one ``subject_###`` directory per subject holding ``manifest.txt``,
``cameras.txt``, ``keypoints.txt`` and ``view_###.png``. Floats are written
with 17 significant digits so everything except the 8-bit images
round-trips bit-exactly (the images are quantized before they are stored).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .align import KeypointSet, canonical_warp_for_subject, mean_geometry
from .errors import ChecksumMismatch, ConfigError, DatasetError, VersionMismatch
from .field.analytic import CANONICAL_LANDMARKS, HEAD_RADIUS, LANDMARK_NAMES, Blob, SyntheticSubject
from .geom import Camera, Similarity, look_at_camera, rotation_from_axis_angle
from .images import quantize, read_png, write_png
from .render import RenderConfig, render_image
from .seeding import derive_seed, substream

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    n_subjects: int = 12
    holdout: int = 4
    grid_rows: int = 5
    grid_cols: int = 5
    vertical_span_deg: float = 25.0
    horizontal_span_deg: float = 15.0
    fov_deg: float = 84.0
    distance: float = 0.30
    width: int = 64
    height: int = 64
    oracle_samples: int = 512
    diversity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_subjects < 1:
            problems.append("n_subjects must be >= 1")
        if not 0 <= self.holdout < self.n_subjects:
            problems.append("holdout must be in [0, n_subjects)")
        if self.grid_rows < 1 or self.grid_cols < 1 or self.grid_rows % 2 == 0 or self.grid_cols % 2 == 0:
            problems.append("grid dimensions must be odd so a center view exists")
        if not (self.vertical_span_deg > 0 and self.horizontal_span_deg > 0):
            problems.append("angular spans must be positive")
        if not 0 < self.fov_deg < 180:
            problems.append("fov_deg must be in (0, 180)")
        if self.distance <= 2 * HEAD_RADIUS:
            problems.append("camera distance must exceed twice the head radius")
        if self.width < 1 or self.height < 1:
            problems.append("image size must be positive")
        if self.oracle_samples < 2:
            problems.append("oracle_samples must be >= 2")
        if not 0.0 <= self.diversity <= 1.0:
            problems.append("diversity must be in [0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def near(self) -> float:
        return self.distance - 2.0 * HEAD_RADIUS

    @property
    def far(self) -> float:
        return self.distance + 2.0 * HEAD_RADIUS

    @property
    def n_views(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def center_view(self) -> int:
        return (self.grid_rows // 2) * self.grid_cols + self.grid_cols // 2

    def grid_angles(self, row: int, col: int) -> tuple[float, float]:
        """(elevation, azimuth) in degrees; row 0 is the top of the grid."""
        el = 0.0 if self.grid_rows == 1 else self.vertical_span_deg * (0.5 - row / (self.grid_rows - 1))
        az = 0.0 if self.grid_cols == 1 else self.horizontal_span_deg * (col / (self.grid_cols - 1) - 0.5)
        return el, az


@dataclass(eq=False)
class View:
    index: int
    row: int
    col: int
    camera: Camera
    image: np.ndarray


@dataclass(eq=False)
class Capture:
    subject_id: str
    subject: SyntheticSubject
    views: list
    support_index: int
    keypoints: KeypointSet

    @property
    def support(self) -> list:
        return [(v.camera, v.image) for v in self.views if v.index == self.support_index]

    @property
    def query(self) -> list:
        return [(v.camera, v.image) for v in self.views if v.index != self.support_index]

    @property
    def query_views(self) -> list:
        return [v for v in self.views if v.index != self.support_index]

    def view(self, row: int, col: int) -> View:
        for v in self.views:
            if v.row == row and v.col == col:
                return v
        raise KeyError((row, col))


@dataclass(eq=False)
class Dataset:
    config: DatasetConfig
    captures: list

    @property
    def train(self) -> list:
        return self.captures[: len(self.captures) - self.config.holdout]

    @property
    def test(self) -> list:
        return self.captures[len(self.captures) - self.config.holdout:]

    def mean_keypoints(self) -> KeypointSet:
        """Mean geometry over the training subjects."""
        return mean_geometry([c.keypoints for c in self.train])

    def canonical_warp(self, capture: Capture) -> Similarity:
        return canonical_warp_for_subject(capture.keypoints, self.mean_keypoints())


# --- subjects ---------------------------------------------------------------

SKIN_LIGHT = np.array([0.95, 0.80, 0.68])
SKIN_DARK = np.array([0.45, 0.30, 0.22])
HAIR_COLORS = np.array([[0.10, 0.07, 0.05], [0.35, 0.22, 0.12], [0.80, 0.65, 0.35], [0.55, 0.15, 0.08]])

MAX_SCALE_DEV = 0.2
MAX_ROT_DEG = 20.0
MAX_SHIFT = 0.03


def _jitter(rng, base, amount):
    return np.asarray(base, dtype=np.float64) + rng.uniform(-amount, amount, size=np.shape(base))


def gen_subject(seed: int, diversity: float = 1.0) -> SyntheticSubject:
    """Deterministic synthetic head for ``seed``.

    The planted subject-to-canonical transform has scale in
    ``1 +- 0.2 d``, a rotation of at most ``20 d`` degrees about a random
    axis and a translation within ``+-3 d`` cm per axis (``d`` = diversity).
    """
    if not 0.0 <= diversity <= 1.0:
        raise ValueError("diversity must be in [0, 1]")
    rng_t = substream(seed, "transform")
    s = 1.0 + diversity * rng_t.uniform(-MAX_SCALE_DEV, MAX_SCALE_DEV)
    axis = rng_t.standard_normal(3)
    angle = diversity * math.radians(rng_t.uniform(-MAX_ROT_DEG, MAX_ROT_DEG))
    R = rotation_from_axis_angle(axis, angle) if diversity > 0 else np.eye(3)
    t = diversity * rng_t.uniform(-MAX_SHIFT, MAX_SHIFT, size=3) if diversity > 0 else np.zeros(3)
    T = Similarity(s, R, t)

    rng = substream(seed, "appearance")
    skin = SKIN_LIGHT + rng.uniform(0, 1) * (SKIN_DARK - SKIN_LIGHT)
    head_r = np.array([0.085, 0.11, 0.095]) * rng.uniform(0.92, 1.08, size=3)
    blobs = [Blob((0.0, 0.0, 0.0), head_r, 3.0, _jitter(rng, skin, 0.03), 300.0, 1.0)]
    eye_y, eye_dx = _jitter(rng, 0.025, 0.004), _jitter(rng, 0.032, 0.004)
    eye_r = np.array([0.015, 0.010, 0.012]) * rng.uniform(0.85, 1.15)
    eye_c = _jitter(rng, (0.12, 0.10, 0.10), 0.08).clip(0, 1)
    for sx in (-1.0, 1.0):
        blobs.append(Blob((sx * eye_dx, eye_y, 0.093), eye_r, 2.0, eye_c, 300.0, 40.0))
    blobs.append(Blob(
        (0.0, _jitter(rng, -0.006, 0.004), 0.105),
        np.array([0.013, 0.024, 0.018]) * rng.uniform(0.85, 1.15),
        2.0, (skin * 0.85).clip(0, 1), 300.0, 3.0,
    ))
    blobs.append(Blob(
        (0.0, _jitter(rng, -0.05, 0.005), 0.082),
        np.array([0.024, 0.008, 0.010]) * rng.uniform(0.85, 1.15),
        2.0, _jitter(rng, (0.70, 0.22, 0.22), 0.08).clip(0, 1), 300.0, 30.0,
    ))
    if rng.uniform() < 0.75:
        hair = HAIR_COLORS[rng.integers(len(HAIR_COLORS))]
        blobs.append(Blob(
            (0.0, _jitter(rng, 0.045, 0.01), _jitter(rng, -0.015, 0.01)),
            np.array([0.092, 0.080, 0.095]) * rng.uniform(0.95, 1.08, size=3),
            3.0, _jitter(rng, hair, 0.03).clip(0, 1), 300.0, 20.0,
        ))
    if rng.uniform() < 0.4:
        blobs.append(Blob(
            (0.0, -0.085, 0.05), np.array([0.04, 0.03, 0.04]) * rng.uniform(0.9, 1.1),
            2.0, (skin * 0.7).clip(0, 1), 300.0, 8.0,
        ))

    keypoints = T.inverse().apply(CANONICAL_LANDMARKS)
    return SyntheticSubject(int(seed), T, tuple(blobs), keypoints, LANDMARK_NAMES)


def subject_seed(master_seed: int, index: int) -> int:
    return derive_seed(master_seed, f"subject/{index}")


def oracle_config(cfg: DatasetConfig) -> RenderConfig:
    return RenderConfig(n_samples=cfg.oracle_samples, near=cfg.near, far=cfg.far,
                        stratified=False, rays_per_batch=512)


def grid_cameras(center, cfg: DatasetConfig) -> list:
    cams = []
    center = np.asarray(center, dtype=np.float64)
    for r in range(cfg.grid_rows):
        for c in range(cfg.grid_cols):
            el, az = (math.radians(a) for a in cfg.grid_angles(r, c))
            offset = cfg.distance * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
            cams.append((r, c, look_at_camera(center + offset, center, (0.0, 1.0, 0.0), cfg.fov_deg,
                                              cfg.width, cfg.height, cfg.near, cfg.far)))
    return cams


def gen_capture(subject: SyntheticSubject, cfg: DatasetConfig, subject_id: str = "") -> Capture:
    rcfg = oracle_config(cfg)
    views = []
    for r, c, cam in grid_cameras(subject.center, cfg):
        img = quantize(render_image(subject, cam, None, rcfg))
        views.append(View(r * cfg.grid_cols + c, r, c, cam, img))
    kp = KeypointSet(subject.labels, subject.keypoints, subject_id)
    return Capture(subject_id, subject, views, cfg.center_view, kp)


def gen_dataset(cfg: DatasetConfig) -> Dataset:
    captures = []
    for m in range(cfg.n_subjects):
        subject = gen_subject(subject_seed(cfg.seed, m), cfg.diversity)
        captures.append(gen_capture(subject, cfg, f"subject_{m:03d}"))
    return Dataset(cfg, captures)


# --- serialization ----------------------------------------------------------

def _f(x) -> str:
    return format(float(x), ".17g")


def _floats(xs) -> str:
    return " ".join(_f(x) for x in np.ravel(xs))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_kv(path: Path, items) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items))


def _read_kv(path: Path) -> dict:
    out = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if " = " not in line:
            raise ChecksumMismatch(f"malformed manifest line in {path}: {line!r}")
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def _check_version(kv: dict, path: Path) -> None:
    v = kv.get("format_version")
    if v is None or int(v) != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format_version {v}, expected {FORMAT_VERSION}")


def config_items(cfg: DatasetConfig) -> list:
    return [(f.name, repr(getattr(cfg, f.name))) for f in fields(cfg)]


def config_from_kv(kv: dict) -> DatasetConfig:
    kw = {}
    for f in fields(DatasetConfig):
        raw = kv[f.name]
        kw[f.name] = float(raw) if f.type == "float" else int(raw)
    return DatasetConfig(**kw)


def _subject_items(subject: SyntheticSubject) -> list:
    T = subject.subject_to_canonical
    items = [
        ("subject_seed", str(subject.seed)),
        ("transform_scale", _f(T.s)),
        ("transform_rotation", _floats(T.R)),
        ("transform_translation", _floats(T.t)),
        ("blob_count", str(len(subject.blobs))),
    ]
    for k, b in enumerate(subject.blobs):
        items.append((f"blob_{k}", _floats(np.concatenate([
            b.center, b.radii, [b.falloff], b.albedo, [b.gain, b.color_weight]]))))
    return items


def save_capture(capture: Capture, directory) -> str:
    """Write one subject directory; returns the manifest's sha256."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for v in capture.views:
        cam = v.camera
        lines.append(" ".join([str(v.index), str(v.row), str(v.col), _floats(cam.pose.R), _floats(cam.eye),
                               _f(cam.fov_deg), str(cam.width), str(cam.height), _f(cam.near), _f(cam.far)]))
    (d / "cameras.txt").write_text("# index row col R(9) eye(3) fov width height near far\n" + "\n".join(lines) + "\n")
    kp = capture.keypoints
    (d / "keypoints.txt").write_text("".join(f"{lab} {_floats(p)}\n" for lab, p in zip(kp.labels, kp.points)))
    for v in capture.views:
        write_png(d / f"view_{v.index:03d}.png", v.image)
    files = ["cameras.txt", "keypoints.txt"] + [f"view_{v.index:03d}.png" for v in capture.views]
    items = [("format_version", str(FORMAT_VERSION)), ("subject_id", capture.subject_id),
             ("support_index", str(capture.support_index))]
    items += _subject_items(capture.subject)
    items += [(f"sha256:{name}", _sha256(d / name)) for name in files]
    _write_kv(d / "manifest.txt", items)
    return _sha256(d / "manifest.txt")


def save_dataset(dataset: Dataset, path) -> str:
    """Write the dataset; returns its checksum (sha256 of ``dataset.txt``)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    items = [("format_version", str(FORMAT_VERSION))] + config_items(dataset.config)
    ids = [c.subject_id for c in dataset.captures]
    items += [("subjects", " ".join(ids)),
              ("train_subjects", " ".join(c.subject_id for c in dataset.train)),
              ("test_subjects", " ".join(c.subject_id for c in dataset.test))]
    for m, cap in enumerate(dataset.captures):
        items.append((f"seed:{cap.subject_id}", str(cap.subject.seed)))
    for cap in dataset.captures:
        items.append((f"sha256:{cap.subject_id}", save_capture(cap, root / cap.subject_id)))
    _write_kv(root / "dataset.txt", items)
    return _sha256(root / "dataset.txt")


def dataset_checksum(path) -> str:
    return _sha256(Path(path) / "dataset.txt")


def _verify(d: Path, name: str, expected: str) -> None:
    p = d / name
    if not p.exists():
        raise ChecksumMismatch(f"missing file {p}")
    if _sha256(p) != expected:
        raise ChecksumMismatch(f"checksum mismatch for {p}")


def load_capture(directory, expected_sha: str | None = None) -> Capture:
    d = Path(directory)
    kv = _read_kv(d / "manifest.txt")
    _check_version(kv, d / "manifest.txt")
    if expected_sha is not None and _sha256(d / "manifest.txt") != expected_sha:
        raise ChecksumMismatch(f"checksum mismatch for {d / 'manifest.txt'}")
    for key, val in kv.items():
        if key.startswith("sha256:"):
            _verify(d, key[len("sha256:"):], val)
    try:
        rot = np.array(kv["transform_rotation"].split(), dtype=np.float64)
        T = Similarity(float(kv["transform_scale"]), rot.reshape(3, 3),
                       np.array(kv["transform_translation"].split(), dtype=np.float64))
        blobs = []
        for k in range(int(kv["blob_count"])):
            v = np.array(kv[f"blob_{k}"].split(), dtype=np.float64)
            blobs.append(Blob(v[0:3], v[3:6], float(v[6]), v[7:10], float(v[10]), float(v[11])))
        labels, pts = [], []
        for line in (d / "keypoints.txt").read_text().splitlines():
            parts = line.split()
            labels.append(parts[0])
            pts.append([float(x) for x in parts[1:4]])
        subject = SyntheticSubject(int(kv["subject_seed"]), T, tuple(blobs), np.array(pts), tuple(labels))
        views = []
        for line in (d / "cameras.txt").read_text().splitlines():
            if line.startswith("#") or not line.strip():
                continue
            p = line.split()
            idx, row, col = int(p[0]), int(p[1]), int(p[2])
            nums = np.array(p[3:15], dtype=np.float64)
            cam = Camera(Similarity(1.0, nums[:9].reshape(3, 3), nums[9:12]), float(p[15]),
                         int(p[16]), int(p[17]), float(p[18]), float(p[19]))
            views.append(View(idx, row, col, cam, read_png(d / f"view_{idx:03d}.png")))
    except (KeyError, ValueError, IndexError) as exc:
        raise ChecksumMismatch(f"corrupt subject directory {d}: {exc}") from exc
    sid = kv["subject_id"]
    return Capture(sid, subject, views, int(kv["support_index"]), KeypointSet(tuple(labels), np.array(pts), sid))


def load_dataset(path) -> Dataset:
    root = Path(path)
    kv = _read_kv(root / "dataset.txt")
    _check_version(kv, root / "dataset.txt")
    try:
        cfg = config_from_kv(kv)
        ids = kv["subjects"].split()
    except (KeyError, ValueError, ConfigError) as exc:
        raise ChecksumMismatch(f"corrupt dataset manifest: {exc}") from exc
    captures = [load_capture(root / sid, kv.get(f"sha256:{sid}")) for sid in ids]
    return Dataset(cfg, captures)


def captures_equal(a: Capture, b: Capture) -> bool:
    return (
        a.subject_id == b.subject_id
        and a.subject == b.subject
        and a.support_index == b.support_index
        and a.keypoints == b.keypoints
        and len(a.views) == len(b.views)
        and all(
            va.index == vb.index and va.row == vb.row and va.col == vb.col
            and va.camera == vb.camera and np.array_equal(va.image, vb.image)
            for va, vb in zip(a.views, b.views)
        )
    )


def config_dict(cfg: DatasetConfig) -> dict:
    return asdict(cfg)
