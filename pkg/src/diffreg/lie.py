"""Rigid-pose parameterizations and geodesics on SO(3), SE(3) and SO(4).

A pose ("twist") is a plain 6-vector ``theta = [omega, v]``: the first three
entries are an axis-angle rotation in radians, the last three a translation
in millimeters. ``se3_exp`` maps a twist to a rotation/translation pair using
the exact V-matrix coupling, so twists compose like true group elements.

Canonical log representatives keep ``norm(omega) <= pi``; the tie at exactly
pi is resolved by flipping the axis so its first nonzero component is
positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadFocal, NotARotation

# Below this angle exp/log/V switch to Taylor branches.
_SMALL_ANGLE = 1e-6


@dataclass
class Transform3:
    """Rigid transform: rotation matrix ``R`` and translation ``t`` (mm)."""

    R: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to a 3-point or an (N, 3) stack of points."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.R @ p + self.t
        return p @ self.R.T + self.t


def identity_transform() -> Transform3:
    return Transform3(np.eye(3), np.zeros(3))


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        # I + K + K^2/2, error O(theta^3)
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _rotation_residual(R: np.ndarray) -> float:
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def _quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) via Shepperd's method, w >= 0."""
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def so3_log(R: np.ndarray) -> np.ndarray:
    """Canonical axis-angle of a rotation matrix, ``norm(result) <= pi``.

    Raises NotARotation when the orthogonality residual exceeds 1e-6.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or _rotation_residual(R) > 1e-6 or np.linalg.det(R) < 0:
        raise NotARotation("input is not a rotation matrix")
    w, x, y, z = _quat_from_rotation(R)
    vec = np.array([x, y, z])
    n = float(np.linalg.norm(vec))
    if n < 1e-12:
        return np.zeros(3)
    angle = 2.0 * math.atan2(n, w)
    axis = vec / n
    if abs(angle - math.pi) < 1e-12:
        # tie at pi: fix the axis sign deterministically
        for c in axis:
            if c != 0.0:
                if c < 0.0:
                    axis = -axis
                break
    return angle * axis


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    """V(omega) coupling rotation and translation in the SE(3) exponential."""
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - math.cos(theta)) / (theta * theta)
    b = (theta - math.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * K + b * (K @ K)


def _v_inverse(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    K = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 12.0
    # A = (1 - (theta/2) cot(theta/2)) / theta^2, stable up to theta = pi
    half = 0.5 * theta
    a = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + a * (K @ K)


def se3_exp(theta: np.ndarray) -> Transform3:
    """Exponential map from a twist ``[omega, v]`` to a rigid transform."""
    theta = np.asarray(theta, dtype=float)
    omega, v = theta[:3], theta[3:]
    return Transform3(so3_exp(omega), _v_matrix(omega) @ v)


def se3_log(T: Transform3) -> np.ndarray:
    """Canonical twist of a rigid transform; inverse of ``se3_exp``."""
    omega = so3_log(T.R)
    v = _v_inverse(omega) @ np.asarray(T.t, dtype=float)
    return np.concatenate([omega, v])


def compose(A: Transform3, B: Transform3) -> Transform3:
    """(A compose B) acts as A after B on points."""
    return Transform3(A.R @ B.R, A.R @ B.t + A.t)


def invert(T: Transform3) -> Transform3:
    Rt = T.R.T
    return Transform3(Rt, -(Rt @ T.t))


def compose_twists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Twist of ``se3_exp(a) compose se3_exp(b)`` (left multiplication by a)."""
    return se3_log(compose(se3_exp(a), se3_exp(b)))


def geodesic_se3(theta_a: np.ndarray, theta_b: np.ndarray) -> float:
    """Left-invariant pose distance ``norm(LOG(EXP(-a) EXP(b)))``."""
    theta_a = np.asarray(theta_a, dtype=float)
    rel = compose(se3_exp(-theta_a), se3_exp(theta_b))
    return float(np.linalg.norm(se3_log(rel)))


def map_so4(theta: np.ndarray, f: float) -> np.ndarray:
    """Embed a pose as a 4x4 matrix ``[[R, t/(2f)], [-t^T R, 1]]``.

    ``f`` is the source-to-detector radius (mm). The block assembly is kept
    literal: the result is orthogonal only in the ``t = 0`` case.
    """
    if f <= 0:
        raise BadFocal(f"f must be positive, got {f}")
    T = se3_exp(theta)
    H = np.empty((4, 4))
    H[:3, :3] = T.R
    H[:3, 3] = T.t / (2.0 * f)
    H[3, :3] = -(T.t @ T.R)
    H[3, 3] = 1.0
    return H


def geodesic_so4(theta_a: np.ndarray, theta_b: np.ndarray, f: float) -> float:
    """Frobenius distance between the 4x4 pose embeddings."""
    return float(np.linalg.norm(map_so4(theta_a, f) - map_so4(theta_b, f)))


def sample_pose(
    center: np.ndarray,
    rot_deg,
    trans_mm,
    rng,
) -> np.ndarray:
    """Draw a pose near ``center`` by a left-multiplied uniform offset.

    ``rot_deg`` / ``trans_mm`` are scalar or per-axis half-ranges; offsets are
    uniform in ``[-range, +range]`` per axis. ``rng`` is an integer seed or a
    ``numpy.random.Generator`` (caller-owned).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    center = np.asarray(center, dtype=float)
    rot = np.broadcast_to(np.asarray(rot_deg, dtype=float), 3)
    trans = np.broadcast_to(np.asarray(trans_mm, dtype=float), 3)
    if np.any(rot < 0) or np.any(trans < 0):
        raise ValueError("sampling ranges must be non-negative")
    delta = np.concatenate(
        [
            np.deg2rad(rot) * rng.uniform(-1.0, 1.0, 3),
            trans * rng.uniform(-1.0, 1.0, 3),
        ]
    )
    if not np.any(delta):
        return center.copy()
    if not np.any(center):
        return delta
    return compose_twists(delta, center)
