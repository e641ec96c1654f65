"""Rigid transforms in SE(3) and their twists in se(3).

Twists are ordered (rho | phi): the first three components are the
translational part, the last three the rotational part (radians).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
_ORTHO_DRIFT = 1e-12


class BranchError(ValueError):
    """The rotation angle is too close to pi for a unique logarithm."""


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with hat(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    # polar decomposition: closest rotation in Frobenius norm
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


@dataclass(frozen=True)
class TwistSE3:
    rho: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float).reshape(3)
        phi = np.array(self.phi, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(phi))):
            raise ValueError("twist components must be finite")
        rho.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def from_vector(cls, xi) -> "TwistSE3":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector()))


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose entries must be finite")
        drift = np.abs(R.T @ R - np.eye(3)).max()
        if drift > 1e-5:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {drift:.3g})")
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")
        if drift > _ORTHO_DRIFT:
            R = _orthonormalize(R)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def to_text(self) -> str:
        """12 numbers, row-major 3x4, shortest round-trip formatting."""
        rows = np.hstack([self.rotation, self.translation[:, None]])
        return " ".join(repr(float(v)) for v in rows.ravel())

    @classmethod
    def from_text(cls, text: str) -> "PoseSE3":
        return cls.from_values(text.split())

    @classmethod
    def from_values(cls, values) -> "PoseSE3":
        values = [float(v) for v in values]
        if len(values) != 12:
            raise ValueError(f"a pose needs 12 numbers, got {len(values)}")
        M = np.array(values).reshape(3, 4)
        return cls(M[:, :3], M[:, 3])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def _left_jacobian(phi) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * K + c * K @ K


def _left_jacobian_inv(phi) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = hat(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta > np.pi - 1e-6:
        raise BranchError(f"rotation angle {theta:.9f} too close to pi")
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return w
    # sin-based magnitude is better conditioned than arccos at small angles
    s = float(np.linalg.norm(w))
    theta = float(np.arctan2(s, cos_theta))
    return w * (theta / s)


def exp(xi: TwistSE3) -> PoseSE3:
    R = so3_exp(xi.phi)
    t = _left_jacobian(xi.phi) @ xi.rho
    return PoseSE3(R, t)


def log(T: PoseSE3) -> TwistSE3:
    phi = so3_log(T.rotation)
    rho = _left_jacobian_inv(phi) @ T.translation
    return TwistSE3(rho, phi)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    Ra, Rb = a.rotation, b.rotation
    return PoseSE3(Ra @ Rb, Ra @ b.translation + a.translation)


def inverse(T: PoseSE3) -> PoseSE3:
    Rt = T.rotation.T
    return PoseSE3(Rt, -(Rt @ T.translation))


def transform_point(T: PoseSE3, p) -> np.ndarray:
    """Apply T to a point (3,) or to an array of points (N, 3)."""
    p = np.asarray(p, dtype=float)
    return p @ T.rotation.T + T.translation


def rotation_angle(a: PoseSE3, b: PoseSE3) -> float:
    """Geodesic angle between the rotations of a and b."""
    # trace(Ra Rb^T) = sum(Ra * Rb) is symmetric in a and b
    tr = float(np.sum(a.rotation * b.rotation))
    return float(np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0)))


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    return so3_exp(axis / np.linalg.norm(axis) * angle)
