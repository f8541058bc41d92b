"""Closed-form "head" radiance fields used as ground truth.

A subject is a handful of soft ellipsoids living in the canonical face
frame. Density of a blob is ``gain * exp(-(q^2)^p)`` where ``q`` is the
normalized ellipsoid radius and ``p`` the falloff exponent; color is the
falloff-weighted blend of blob albedos. Lighting is constant, so color does
not depend on the viewing direction. The field is truncated to a ball of
radius ``SUPPORT_RADIUS`` around the canonical origin, where every blob has
long since decayed below double precision relevance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..geom import Similarity

# Fixed canonical landmark positions (meters, face looks toward +z).
LANDMARK_NAMES = (
    "eye_left", "eye_right", "nose_tip", "mouth_center", "mouth_left",
    "mouth_right", "chin", "forehead", "ear_left", "ear_right",
)
CANONICAL_LANDMARKS = np.array([
    [-0.032, 0.025, 0.088],
    [0.032, 0.025, 0.088],
    [0.0, -0.008, 0.115],
    [0.0, -0.050, 0.088],
    [-0.022, -0.048, 0.082],
    [0.022, -0.048, 0.082],
    [0.0, -0.100, 0.045],
    [0.0, 0.080, 0.065],
    [-0.088, 0.0, 0.0],
    [0.088, 0.0, 0.0],
])

HEAD_RADIUS = 0.11
# Density and color are exactly zero beyond this canonical-frame radius.
SUPPORT_RADIUS = 0.25


@dataclass(frozen=True, eq=False)
class Blob:
    center: np.ndarray
    radii: np.ndarray
    falloff: float
    albedo: np.ndarray
    gain: float = 300.0
    color_weight: float = 1.0

    def __post_init__(self):
        for name in ("center", "radii", "albedo"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(3))
        if not self.falloff > 0 or np.any(self.radii <= 0):
            raise ValueError("blob falloff and radii must be positive")

    def weight(self, xc: np.ndarray) -> np.ndarray:
        u = (xc - self.center) / self.radii
        q2 = np.einsum("...i,...i->...", u, u)
        p = self.falloff
        if p == int(p):
            e = q2
            for _ in range(int(p) - 1):
                e = e * q2
        else:
            e = q2 ** p
        return np.exp(-e)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Blob):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.radii, other.radii)
            and self.falloff == other.falloff
            and np.array_equal(self.albedo, other.albedo)
            and self.gain == other.gain
            and self.color_weight == other.color_weight
        )


@dataclass(frozen=True, eq=False)
class SyntheticSubject:
    """Analytic subject with a planted subject-to-canonical similarity.

    ``blobs`` are expressed in the canonical frame; ``keypoints`` live in
    subject (world) space and are exactly ``T^-1(CANONICAL_LANDMARKS)``.
    """

    seed: int
    subject_to_canonical: Similarity
    blobs: tuple
    keypoints: np.ndarray
    labels: tuple = LANDMARK_NAMES

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(self.blobs))
        object.__setattr__(self, "keypoints", np.array(self.keypoints, dtype=np.float64))
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def center(self) -> np.ndarray:
        """World-space position of the canonical origin (the head center)."""
        return self.subject_to_canonical.inverse().apply(np.zeros(3))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticSubject):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.subject_to_canonical == other.subject_to_canonical
            and len(self.blobs) == len(other.blobs)
            and all(a == b for a, b in zip(self.blobs, other.blobs))
            and np.array_equal(self.keypoints, other.keypoints)
            and self.labels == other.labels
        )


def _blob_tables(blobs):
    centers = np.array([b.center for b in blobs])
    inv_r2 = np.array([1.0 / b.radii ** 2 for b in blobs])
    falloff = np.array([b.falloff for b in blobs])
    gains = np.array([b.gain for b in blobs])
    cw = np.array([b.color_weight for b in blobs])
    albedo = np.array([b.albedo for b in blobs])
    return centers, inv_r2, falloff, gains, cw, albedo


@numba.njit(cache=True)
def _eval_blobs(xc, centers, inv_r2, falloff, gains, cw, albedo, support_r2, rgb, sigma):
    n, nb = xc.shape[0], centers.shape[0]
    for i in range(n):
        x0, x1, x2 = xc[i, 0], xc[i, 1], xc[i, 2]
        if x0 * x0 + x1 * x1 + x2 * x2 >= support_r2:
            continue
        s = 0.0
        den = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for b in range(nb):
            u0 = x0 - centers[b, 0]
            u1 = x1 - centers[b, 1]
            u2 = x2 - centers[b, 2]
            q2 = u0 * u0 * inv_r2[b, 0] + u1 * u1 * inv_r2[b, 1] + u2 * u2 * inv_r2[b, 2]
            p = falloff[b]
            if p == 2.0:
                e = q2 * q2
            elif p == 3.0:
                e = q2 * q2 * q2
            elif p == 1.0:
                e = q2
            else:
                e = q2 ** p
            if e > 746.0:
                continue  # exp(-e) underflows to exactly 0
            f = np.exp(-e)
            s += gains[b] * f
            w = cw[b] * f
            den += w
            c0 += w * albedo[b, 0]
            c1 += w * albedo[b, 1]
            c2 += w * albedo[b, 2]
        sigma[i] = s
        if den > 0.0:
            rgb[i, 0] = min(max(c0 / den, 0.0), 1.0)
            rgb[i, 1] = min(max(c1 / den, 0.0), 1.0)
            rgb[i, 2] = min(max(c2 / den, 0.0), 1.0)


def analytic_query(subject: SyntheticSubject, x, d=None):
    """Batched ground-truth field; ``x`` of shape ``(..., 3)`` in world space."""
    xc = subject.subject_to_canonical.apply(np.asarray(x, dtype=np.float64))
    lead = xc.shape[:-1]
    xc = np.ascontiguousarray(xc.reshape(-1, 3))
    rgb = np.zeros(xc.shape)
    sigma = np.zeros(len(xc))
    _eval_blobs(xc, *_blob_tables(subject.blobs), SUPPORT_RADIUS ** 2, rgb, sigma)
    return rgb.reshape(*lead, 3), sigma.reshape(lead)


def analytic_field_eval(subject: SyntheticSubject, x, d=None):
    return analytic_query(subject, x, d)


class AnalyticField:
    differentiable = False
    dtype = np.float64

    def __init__(self, subject: SyntheticSubject):
        self.subject = subject

    def query(self, x, d):
        return analytic_query(self.subject, x, d)

    def support_sphere(self):
        """World-space ball outside which the field is exactly empty."""
        T = self.subject.subject_to_canonical
        return T.inverse().apply(np.zeros(3)), SUPPORT_RADIUS / T.s
