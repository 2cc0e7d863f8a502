"""Rotations, rigid transforms, and the error-state conventions shared by all modules.

Conventions, used consistently everywhere:
  * rotation error is left-multiplicative: R = exp(delta_theta^) @ R_hat
  * quaternions are scalar-first [w, x, y, z], unit norm, w >= 0
  * T_AB maps coordinates in {B} to {A}:  p_A = R_AB @ p_B + p_AB
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_SMALL_ANGLE = 1e-7


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(a) @ b = a x b."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula; series expansion below the small-angle cutoff."""
    omega = np.asarray(omega, dtype=float)
    angle = np.linalg.norm(omega)
    k = skew(omega)
    if angle < _SMALL_ANGLE:
        # sin(a)/a ~ 1 - a^2/6, (1-cos(a))/a^2 ~ 1/2 - a^2/24
        return np.eye(3) + (1.0 - angle**2 / 6.0) * k + (0.5 - angle**2 / 24.0) * (k @ k)
    return np.eye(3) + (np.sin(angle) / angle) * k + ((1.0 - np.cos(angle)) / angle**2) * (k @ k)


def log_so3(rot: np.ndarray) -> np.ndarray:
    """Principal logarithm, norm <= pi, computed through the quaternion.

    The quaternion extraction is stable at every angle including pi, where
    the axis sign is fixed so the first nonzero component is nonnegative.
    """
    q = rot_to_quat(rot)
    w, xyz = q[0], q[1:]
    n = np.linalg.norm(xyz)
    if n < _SMALL_ANGLE:
        return (2.0 / w) * xyz
    angle = 2.0 * np.arctan2(n, w)
    axis = xyz / n
    if angle > np.pi - 1e-9:
        for c in axis:
            if abs(c) > 1e-12:
                if c < 0:
                    axis = -axis
                break
    return angle * axis


def right_jacobian_so3(omega: np.ndarray) -> np.ndarray:
    """Right Jacobian of exp_so3: exp(w + dw) ~ exp(w) exp(J_r(w) dw)."""
    angle = np.linalg.norm(omega)
    k = skew(omega)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    return (np.eye(3)
            - (1.0 - np.cos(angle)) / a2 * k
            + (angle - np.sin(angle)) / (a2 * angle) * (k @ k))


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion, hemisphere fixed by w >= 0."""
    t = np.trace(rot)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (rot[2, 1] - rot[1, 2]) / s,
                      (rot[0, 2] - rot[2, 0]) / s,
                      (rot[1, 0] - rot[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(rot)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(rot[i, i] - rot[j, j] - rot[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (rot[k, j] - rot[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (rot[j, i] + rot[i, j]) / s
        q[1 + k] = (rot[k, i] + rot[i, k]) / s
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Transform:
    """Rigid transform T_AB = (R_AB, p_AB); immutable value."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "Transform":
        return Transform(np.eye(3), np.zeros(3))

    def compose(self, other: "Transform") -> "Transform":
        return Transform(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Transform":
        rt = self.rotation.T
        return Transform(rt, -rt @ self.translation)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ point + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class NavState:
    """Position, orientation, velocity at a stamped epoch (all in {W} except noted)."""

    p: np.ndarray           # m
    rot: np.ndarray         # R_WB
    v: np.ndarray           # m/s
    t: float = 0.0          # s, frozen once assigned to a frame bundle

    def pose(self) -> Transform:
        return Transform(self.rot, self.p)


def retract(nav: NavState, delta: np.ndarray) -> NavState:
    """Apply a 9-dof error [dp, dtheta, dv] with the left-multiplicative rotation rule."""
    delta = np.asarray(delta, dtype=float)
    return replace(nav,
                   p=nav.p + delta[0:3],
                   rot=exp_so3(delta[3:6]) @ nav.rot,
                   v=nav.v + delta[6:9])


def rotation_error(rot: np.ndarray, rot_ref: np.ndarray) -> np.ndarray:
    """Left-multiplicative error theta with rot = exp(theta^) @ rot_ref."""
    return log_so3(rot @ rot_ref.T)
