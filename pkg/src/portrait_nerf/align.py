"""Canonical face space: mean keypoint geometry and similarity fitting.

Each subject is registered to the dataset's mean keypoint set with a
least-squares similarity (Umeyama). The 3x3 SVD it needs is a small
one-sided Jacobi routine, kept here so the fit has no LAPACK dependency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, MismatchedLabels
from .geom import Similarity

_RANK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class KeypointSet:
    labels: tuple
    points: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != len(pts):
            raise MismatchedLabels(f"{len(self.labels)} labels for {len(pts)} points")

    def __len__(self) -> int:
        return len(self.labels)

    def transformed(self, T: Similarity) -> "KeypointSet":
        return KeypointSet(self.labels, T.apply(self.points), self.subject_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (
            self.labels == other.labels
            and self.subject_id == other.subject_id
            and np.array_equal(self.points, other.points)
        )


def svd3(A: np.ndarray, max_sweeps: int = 64):
    """SVD of a 3x3 matrix by one-sided (Hestenes) Jacobi rotations.

    Returns ``U, s, Vt`` with ``A = U @ diag(s) @ Vt``, ``s`` descending and
    non-negative, ``U`` and ``Vt`` orthogonal (determinant may be -1).
    """
    U = np.array(A, dtype=np.float64).reshape(3, 3)
    V = np.eye(3)
    eps = np.finfo(np.float64).eps
    for _ in range(max_sweeps):
        rotated = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            a = U[:, p] @ U[:, p]
            b = U[:, q] @ U[:, q]
            g = U[:, p] @ U[:, q]
            if g == 0.0 or abs(g) <= eps * np.sqrt(a * b):
                continue
            rotated = True
            zeta = (b - a) / (2.0 * g)
            t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for M in (U, V):
                mp = M[:, p].copy()
                M[:, p] = c * mp - s * M[:, q]
                M[:, q] = s * mp + c * M[:, q]
        if not rotated:
            break
    sv = np.linalg.norm(U, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, U, V = sv[order], U[:, order], V[:, order]
    tiny = eps * max(sv[0], np.finfo(np.float64).tiny) * 8
    for k in range(3):
        if sv[k] > tiny:
            U[:, k] /= sv[k]
        else:
            sv[k] = 0.0
            U[:, k] = _orthogonal_complement(U[:, :k], k)
    return U, sv, V.T


def _orthogonal_complement(cols: np.ndarray, k: int) -> np.ndarray:
    if k == 2:
        return np.cross(cols[:, 0], cols[:, 1])
    # Gram-Schmidt against the coordinate axes
    for e in np.eye(3):
        v = e - cols @ (cols.T @ e) if k else e.copy()
        n = np.linalg.norm(v)
        if n > 0.5:
            return v / n
    raise AssertionError("unreachable")


def mean_geometry(sets) -> KeypointSet:
    sets = list(sets)
    if not sets:
        raise ValueError("need at least one keypoint set")
    labels = sets[0].labels
    for ks in sets[1:]:
        if ks.labels != labels:
            raise MismatchedLabels("keypoint sets disagree on labels or order")
    stacked = np.stack([ks.points for ks in sets])
    return KeypointSet(labels, stacked.sum(axis=0) / len(sets), "mean")


def fit_similarity(src: KeypointSet, dst: KeypointSet) -> Similarity:
    """Least-squares ``(s, R, t)`` minimizing ``sum ||s R src_i + t - dst_i||^2``."""
    if src.labels != dst.labels:
        raise MismatchedLabels("source and target keypoints disagree on labels")
    X, Y = src.points, dst.points
    n = len(X)
    if n < 3:
        raise DegenerateConfiguration("need at least three keypoints")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    _, ev, _ = svd3(Xc.T @ Xc)
    if ev[0] == 0.0 or np.sqrt(ev[1] / ev[0]) <= _RANK_TOL:
        raise DegenerateConfiguration("source keypoints are collinear or coincident")
    var_x = np.sum(Xc * Xc) / n
    U, d, Vt = svd3(Yc.T @ Xc / n)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float(np.dot(d, S) / var_x)
    if not s > 0:
        raise DegenerateConfiguration("fitted scale is not positive")
    t = my - s * (R @ mx)
    return Similarity(s, R, t)


def canonical_warp_for_subject(subject_keypoints: KeypointSet, mean: KeypointSet) -> Similarity:
    """Warp taking a subject's world coordinates into the canonical face frame."""
    return fit_similarity(subject_keypoints, mean)


def rms_residual(src: KeypointSet, dst: KeypointSet, T: Similarity | None = None) -> float:
    X = src.points if T is None else T.apply(src.points)
    return float(np.sqrt(np.mean(np.sum((X - dst.points) ** 2, axis=1))))
