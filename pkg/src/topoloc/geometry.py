"""Manifold and camera primitives: SO(3)/SE(3), pinhole projection, depth unprojection.

Conventions used throughout the package:
  * quaternions are stored (w, x, y, z), Hamilton convention, unit norm
  * a Pose maps local coordinates into its parent frame: p_parent = R @ p_local + t
  * rotation error increments compose on the right: R <- R @ exp(skew(dtheta))
  * camera frame: x right, y down, z forward (pixels u along x, v along y)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDepth, NonPositiveDepth

# Below this angle (rad) exp/log/Jacobians switch to their Taylor branches.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 antisymmetric matrix with skew(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


class Rotation:
    """Unit-quaternion rotation, renormalized after every operation."""

    __slots__ = ("q",)

    def __init__(self, q_wxyz):
        q = np.asarray(q_wxyz, dtype=float)
        n = np.linalg.norm(q)
        if n < 1e-12 or not np.isfinite(n):
            raise ValueError("degenerate quaternion")
        self.q = q / n

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_quat_xyzw(cls, q_xyzw) -> "Rotation":
        x, y, z, w = q_xyzw
        return cls((w, x, y, z))

    def as_quat_xyzw(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([x, y, z, w])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Rotation":
        # Shepperd's method: pick the largest of (trace, diagonal) pivots.
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > 0.0:
            s = 0.5 / np.sqrt(t + 1.0)
            w = 0.25 / s
            x = (m[2, 1] - m[1, 2]) * s
            y = (m[0, 2] - m[2, 0]) * s
            z = (m[1, 0] - m[0, 1]) * s
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        return cls((w, x, y, z))

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def compose(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(
            (
                w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            )
        )

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return self.compose(other)

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation((w, -x, -y, -z))

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Rotate one (3,) vector or a stack (N, 3) of vectors."""
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            return self.as_matrix() @ v
        return v @ self.as_matrix().T

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm(so3_log(self.inverse() @ other)))

    def __repr__(self) -> str:
        return f"Rotation(wxyz={np.array2string(self.q, precision=6)})"


def so3_exp(theta: np.ndarray) -> Rotation:
    """Exponential map: rotation vector (rad) to Rotation (Rodrigues)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    half = 0.5 * angle
    if angle < SMALL_ANGLE:
        # sin(a/2)/a -> 1/2 - a^2/48
        k = 0.5 - angle * angle / 48.0
        return Rotation((1.0 - half * half / 2.0, *(k * theta)))
    axis = theta / angle
    s = np.sin(half)
    return Rotation((np.cos(half), s * axis[0], s * axis[1], s * axis[2]))


def so3_log(r: Rotation) -> np.ndarray:
    """Inverse of so3_exp on the ball ||theta|| < pi; the pi case picks a sign.

    Quaternion form stays well conditioned through pi (the vector part has
    unit norm there); the angle-pi pivot handling lives in
    Rotation.from_matrix, which feeds this function for matrix inputs.
    """
    w, x, y, z = r.q
    if w < 0.0:  # keep the short rotation
        w, x, y, z = -w, -x, -y, -z
    vec = np.array([x, y, z])
    vn = np.linalg.norm(vec)
    if vn < SMALL_ANGLE:
        return 2.0 * vec / w
    return 2.0 * np.arctan2(vn, w) * vec / vn


def right_jacobian_so3(theta: np.ndarray) -> np.ndarray:
    """Right Jacobian J_r of SO(3): exp(theta + d) ~ exp(theta) exp(J_r d)."""
    theta = np.asarray(theta, dtype=float)
    a = np.linalg.norm(theta)
    s = skew(theta)
    s2 = s @ s
    if a < SMALL_ANGLE:
        return np.eye(3) - 0.5 * s + s2 / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(a)) / (a * a) * s
        + (a - np.sin(a)) / (a * a * a) * s2
    )


def inv_right_jacobian_so3(theta: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: log(exp(phi) exp(d)) ~ phi + J_r^-1(phi) d."""
    theta = np.asarray(theta, dtype=float)
    a = np.linalg.norm(theta)
    s = skew(theta)
    s2 = s @ s
    if a < SMALL_ANGLE:
        return np.eye(3) + 0.5 * s + s2 / 12.0
    k = 1.0 / (a * a) - (1.0 + np.cos(a)) / (2.0 * a * np.sin(a))
    return np.eye(3) + 0.5 * s + k * s2


class Pose:
    """Rigid transform: p_parent = rotation @ p_local + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.as_matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or a stack (N, 3) into the parent frame."""
        return self.rotation.apply(p) + self.translation

    def __repr__(self) -> str:
        return f"Pose(t={np.array2string(self.translation, precision=4)}, {self.rotation!r})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def project(intr: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Pinhole projection of one camera-frame point to pixel (u, v).

    No clipping to image bounds; the caller decides what is visible.
    """
    x, y, z = np.asarray(p_cam, dtype=float)
    if z <= 0.0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def unproject(intr: CameraIntrinsics, f: np.ndarray, depth: float) -> np.ndarray:
    """Back-project pixel (u, v) at the given depth (camera z, meters)."""
    if not np.isfinite(depth) or depth <= 0.0:
        raise InvalidDepth(f"depth {depth} is not a positive finite value")
    u, v = np.asarray(f, dtype=float)
    return np.array(
        [depth * (u - intr.cx) / intr.fx, depth * (v - intr.cy) / intr.fy, depth]
    )


def project_points(intr: CameraIntrinsics, pts_cam: np.ndarray, min_depth: float = 0.0):
    """Vectorized projection of an (N, 3) stack.

    Returns (uv (N, 2), valid (N,)) where invalid rows (z <= min_depth) hold
    garbage and must be masked by the caller. Raises nothing.
    """
    pts_cam = np.asarray(pts_cam, dtype=float)
    z = pts_cam[:, 2]
    valid = z > min_depth
    zsafe = np.where(valid, z, 1.0)
    uv = np.empty((len(pts_cam), 2))
    uv[:, 0] = intr.fx * pts_cam[:, 0] / zsafe + intr.cx
    uv[:, 1] = intr.fy * pts_cam[:, 1] / zsafe + intr.cy
    return uv, valid
