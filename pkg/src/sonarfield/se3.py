"""Rigid-body transforms and the se(3) exponential map.

Rotations are stored as 3x3 matrices to keep the algebra close to how the
pose-correction update is usually written (T <- T * exp(xi)).  All functions
here are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this rotation angle the closed-form Rodrigues coefficients are
# replaced by their Taylor expansions to avoid 0/0.
_SMALL_ANGLE = 1e-8


class GimbalLockError(ValueError):
    """Pitch too close to +-pi/2 for a z-y-x euler decomposition."""


@dataclass(frozen=True)
class Pose:
    """Rigid transform: x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("Pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.isfinite(R).all() and np.isfinite(t).all()):
            raise ValueError("non-finite pose")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=float)
        return Pose(M[:3, :3].copy(), M[:3, 3].copy())

    def flat(self) -> np.ndarray:
        """12 numbers, row-major [R|t], the on-disk layout."""
        return np.hstack([self.rotation, self.translation[:, None]]).ravel()

    @staticmethod
    def from_flat(v: np.ndarray) -> "Pose":
        v = np.asarray(v, dtype=float).reshape(3, 4)
        return Pose(v[:, :3].copy(), v[:, 3].copy())


@dataclass(frozen=True)
class Twist:
    """se(3) element (omega, t): axis-angle rotation plus translation part."""

    omega: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if w.shape != (3,) or t.shape != (3,):
            raise ValueError("Twist needs two 3-vectors")
        if not (np.isfinite(w).all() and np.isfinite(t).all()):
            raise ValueError("non-finite twist")
        if np.linalg.norm(w) >= math.pi:
            raise ValueError("|omega| must be < pi (corrections are small)")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "t", t)

    @staticmethod
    def zero() -> "Twist":
        return Twist(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.t])

    @staticmethod
    def from_vector(v: np.ndarray) -> "Twist":
        v = np.asarray(v, dtype=float).reshape(6)
        return Twist(v[:3].copy(), v[3:].copy())


@dataclass(frozen=True)
class EulerDecomposition:
    """R = Rz(yaw) Ry(pitch) Rx(roll), plus the translation components."""

    roll: float
    pitch: float
    yaw: float
    x: float
    y: float
    z: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.roll, self.pitch, self.yaw])


def skew(omega: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with skew(a) @ b == cross(a, b)."""
    w = np.asarray(omega, dtype=float)
    if not np.isfinite(w).all():
        raise ValueError("non-finite input")
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """(A, B, C) with R = I + A*what + B*what^2 and V = I + C*what + ... .

    A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3.
    """
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    return (
        math.sin(theta) / theta,
        (1.0 - math.cos(theta)) / (theta * theta),
        (theta - math.sin(theta)) / (theta ** 3),
    )


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from an axis-angle vector."""
    w = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    A, B, _ = _rodrigues_coeffs(theta)
    return np.eye(3) + A * W + B * (W @ W)


def left_jacobian(omega: np.ndarray) -> np.ndarray:
    """V with exp([w,t]) translation = V @ t."""
    w = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    _, B, C = _rodrigues_coeffs(theta)
    return np.eye(3) + B * W + C * (W @ W)


def exp_se3(xi: Twist) -> Pose:
    """Matrix exponential of the se(3) element: Rodrigues + left Jacobian."""
    return Pose(exp_so3(xi.omega), left_jacobian(xi.omega) @ xi.t)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Axis-angle of a rotation matrix (angle < pi)."""
    R = np.asarray(R, dtype=float)
    cos_theta = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _SMALL_ANGLE:
        return vee
    if theta > math.pi - 1e-6:
        raise ValueError("rotation angle too close to pi for a stable log")
    return theta / math.sin(theta) * vee


def log_se3(P: Pose) -> Twist:
    """Inverse of exp_se3 for rotations with angle < pi."""
    omega = log_so3(P.rotation)
    V = left_jacobian(omega)
    return Twist(omega, np.linalg.solve(V, P.translation))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(P: Pose) -> Pose:
    Rt = P.rotation.T
    return Pose(Rt.copy(), -(Rt @ P.translation))


def apply_correction(T: Pose, xi: Twist) -> Pose:
    """Corrected pose T * exp(xi); right multiplication."""
    return compose(T, exp_se3(xi))


def relative(T_i: Pose, T_j: Pose) -> Pose:
    """Relative pose with T_i * relative(T_i, T_j) == T_j."""
    return compose(inverse(T_i), T_j)


def transform_points(P: Pose, pts: np.ndarray) -> np.ndarray:
    """Apply a pose to an (..., 3) array of points."""
    return np.asarray(pts) @ P.rotation.T + P.translation


def from_euler(e: EulerDecomposition) -> Pose:
    cr, sr = math.cos(e.roll), math.sin(e.roll)
    cp, sp = math.cos(e.pitch), math.sin(e.pitch)
    cy, sy = math.cos(e.yaw), math.sin(e.yaw)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Pose(Rz @ Ry @ Rx, np.array([e.x, e.y, e.z]))


def to_euler(T: Pose, gimbal_margin: float = 1e-3) -> EulerDecomposition:
    """z-y-x decomposition; rejects poses near gimbal lock."""
    R = T.rotation
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = math.asin(sp)
    if abs(pitch) > math.pi / 2 - gimbal_margin:
        raise GimbalLockError(f"pitch {pitch:.6f} within {gimbal_margin} of +-pi/2")
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    t = T.translation
    return EulerDecomposition(roll=roll, pitch=pitch, yaw=yaw, x=t[0], y=t[1], z=t[2])
