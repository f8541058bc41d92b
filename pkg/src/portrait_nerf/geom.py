"""Rotations, similarity transforms, pinhole cameras and ray generation.

Conventions used everywhere in the package:

* right-handed world coordinates, scene units are meters;
* a camera looks down its local ``-z`` axis, ``+x`` is right and ``+y`` is up;
* the stored camera pose maps camera space to world space;
* ``fov_deg`` is the horizontal field of view, the vertical one follows
  from the aspect ratio (square pixels);
* pixel ``(i, j)`` is column ``i`` and row ``j``, ``(0, 0)`` is top-left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFrame, OutOfBounds

_PARALLEL_TOL = 1e-9


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``angle`` in radians."""
    k = normalize(axis)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return (
        R.shape == (3, 3)
        and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
        and np.linalg.det(R) > 0
    )


@dataclass(frozen=True, eq=False)
class Similarity:
    """Scaled rigid transform ``x -> s * R @ x + t``."""

    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "s", float(self.s))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not self.s > 0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "Similarity":
        return cls()

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform points stored along the last axis."""
        x = np.asarray(x)
        return self.s * (x @ self.R.T) + self.t

    def apply_direction(self, d: np.ndarray) -> np.ndarray:
        return np.asarray(d) @ self.R.T

    def inverse(self) -> "Similarity":
        inv_s = 1.0 / self.s
        return Similarity(inv_s, self.R.T, -inv_s * (self.R.T @ self.t))

    def compose(self, other: "Similarity") -> "Similarity":
        """Return ``self o other`` (``other`` is applied first)."""
        return Similarity(
            self.s * other.s, self.R @ other.R, self.s * (self.R @ other.t) + self.t
        )

    def __matmul__(self, other: "Similarity") -> "Similarity":
        return self.compose(other)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.s * self.R
        M[:3, 3] = self.t
        return M

    def __eq__(self, other) -> bool:
        if not isinstance(other, Similarity):
            return NotImplemented
        return (
            self.s == other.s
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
        )

    def allclose(self, other: "Similarity", atol: float = 1e-9) -> bool:
        return (
            abs(self.s - other.s) <= atol
            and np.allclose(self.R, other.R, rtol=0.0, atol=atol)
            and np.allclose(self.t, other.t, rtol=0.0, atol=atol)
        )

    def __repr__(self) -> str:
        return f"Similarity(s={self.s!r}, R={self.R.tolist()!r}, t={self.t.tolist()!r})"


def similarity_apply(T: Similarity, x) -> np.ndarray:
    return T.apply(x)


def compose(a: Similarity, b: Similarity) -> Similarity:
    return a.compose(b)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    dir: np.ndarray


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera. ``pose`` is camera-to-world with unit scale."""

    pose: Similarity
    fov_deg: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg must lie in (0, 180), got {self.fov_deg}")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.pose.s != 1.0:
            raise ValueError("camera pose must have unit scale")

    @property
    def eye(self) -> np.ndarray:
        return self.pose.t

    @property
    def right(self) -> np.ndarray:
        return self.pose.R[:, 0]

    @property
    def up(self) -> np.ndarray:
        return self.pose.R[:, 1]

    @property
    def forward(self) -> np.ndarray:
        return -self.pose.R[:, 2]

    @property
    def tan_half_fov(self) -> float:
        return math.tan(math.radians(self.fov_deg) / 2.0)

    def replace(self, **changes) -> "Camera":
        kw = dict(
            pose=self.pose, fov_deg=self.fov_deg, width=self.width,
            height=self.height, near=self.near, far=self.far,
        )
        kw.update(changes)
        return Camera(**kw)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            self.pose == other.pose
            and self.fov_deg == other.fov_deg
            and self.width == other.width
            and self.height == other.height
            and self.near == other.near
            and self.far == other.far
        )


def look_at_camera(eye, target, up, fov_deg: float, width: int, height: int,
                   near: float, far: float) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    offset = target - eye
    if np.linalg.norm(offset) == 0.0:
        raise DegenerateFrame("eye and target coincide")
    forward = offset / np.linalg.norm(offset)
    side = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(side) <= _PARALLEL_TOL * max(np.linalg.norm(up), 1.0):
        raise DegenerateFrame("up vector is parallel to the viewing direction")
    right = side / np.linalg.norm(side)
    true_up = np.cross(right, forward)
    R = np.stack([right, true_up, -forward], axis=1)
    return Camera(Similarity(1.0, R, eye), float(fov_deg), int(width), int(height),
                  float(near), float(far))


def _camera_space_dirs(cam: Camera, i, j, jitter) -> np.ndarray:
    tx = cam.tan_half_fov
    ty = tx * cam.height / cam.width
    u = (np.asarray(i, dtype=np.float64) + jitter[0]) / cam.width * 2.0 - 1.0
    v = 1.0 - (np.asarray(j, dtype=np.float64) + jitter[1]) / cam.height * 2.0
    d = np.stack([u * tx, v * ty, -np.ones_like(u)], axis=-1)
    return normalize(d)


def ray_for_pixel(cam: Camera, i: int, j: int, jitter=(0.5, 0.5)) -> Ray:
    if not (0 <= i < cam.width and 0 <= j < cam.height):
        raise OutOfBounds(f"pixel ({i}, {j}) outside {cam.width}x{cam.height} image")
    d_cam = _camera_space_dirs(cam, i, j, jitter)
    return Ray(cam.eye.copy(), normalize(cam.pose.apply_direction(d_cam)))


def camera_rays(cam: Camera, jitter=(0.5, 0.5)) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major, shape (H*W, 3)."""
    jj, ii = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    d_cam = _camera_space_dirs(cam, ii.ravel(), jj.ravel(), jitter)
    dirs = normalize(cam.pose.apply_direction(d_cam))
    origins = np.broadcast_to(cam.eye, dirs.shape).copy()
    return origins, dirs
