"""Core SE(3) and pinhole-camera math shared by every pipeline stage.

Conventions used throughout the package:

  World frame   right-handed, meters. Scene-dependent axes; the synthetic
                scenes use z-up.
  Camera frame  right-handed: x right, y down, z forward (optical axis).
  Pose          maps world to camera coordinates, p_cam = R @ p_world + t.
                Rotation is stored as a unit quaternion in (w, x, y, z)
                order; translation in meters.
  Pixels        continuous (u, v) with (0, 0) at the top-left pixel center,
                u to the right, v down. A pixel is inside the image iff
                0 <= u < width and 0 <= v < height.

All types here are immutable values and all operations are pure functions,
so everything can be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Depth below which a point counts as behind the camera plane. Guards the
# projective division.
Z_MIN = 1e-6

_QUAT_NORM_TOL = 1e-9


def _as_vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    return a


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize a zero quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, both in (w, x, y, z) order."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z), Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = _as_vec(axis, 3, "axis")
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle_rad
    return np.concatenate([[math.cos(half)], math.sin(half) * axis / n])


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: 3-vector rotation increment to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    K = K / theta
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * (K @ K)


@dataclass(frozen=True)
class Pose:
    """SE(3) rigid transform mapping world coordinates to camera coordinates.

    q is a unit quaternion (w, x, y, z); t is the translation in meters:
    p_cam = R(q) @ p_world + t.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = quat_normalize(_as_vec(self.q, 4, "q"))
        t = _as_vec(self.t, 3, "t")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        q.setflags(write=False)
        t.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(R: np.ndarray, t) -> "Pose":
        return Pose(matrix_to_quat(R), np.asarray(t, dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self o other)(p) = self(other(p))."""
        q = quat_normalize(quat_multiply(self.q, other.q))
        t = self.R @ other.t + self.t
        return Pose(q, t)

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.q)
        return Pose(qc, -(quat_to_matrix(qc) @ self.t))

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -(self.R.T @ self.t)

    def equals(self, other: "Pose", tol: float = 1e-9) -> bool:
        te, re = pose_error(self, other)
        return te <= tol and math.radians(re) <= tol

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @staticmethod
    def from_json(obj: dict) -> "Pose":
        return Pose(np.asarray(obj["q"], dtype=np.float64),
                    np.asarray(obj["t"], dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (isinstance(self.width, int) and isinstance(self.height, int)
                and self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive integers")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_json(obj: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(float(obj["fx"]), float(obj["fy"]),
                                float(obj["cx"]), float(obj["cy"]),
                                int(obj["width"]), int(obj["height"]))


def transform_to_camera(pose: Pose, p) -> np.ndarray:
    """Apply the world-to-camera transform: R @ p + t.

    Accepts a single 3-vector or an (n, 3) array.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 1:
        return pose.R @ p + pose.t
    return p @ pose.R.T + pose.t


def project(intr: CameraIntrinsics, p) -> tuple[float, float] | None:
    """Project a camera-frame point; None when at or behind the camera plane."""
    x, y, z = np.asarray(p, dtype=np.float64)
    if z <= Z_MIN:
        return None
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def project_many(intr: CameraIntrinsics, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (n, 3) camera-frame points.

    Returns (uv, valid): uv is (n, 2); rows where valid is False (depth
    <= Z_MIN) hold garbage and must be ignored.
    """
    p = np.asarray(p, dtype=np.float64)
    z = p[:, 2]
    valid = z > Z_MIN
    safe_z = np.where(valid, z, 1.0)
    uv = np.empty((len(p), 2))
    uv[:, 0] = intr.fx * p[:, 0] / safe_z + intr.cx
    uv[:, 1] = intr.fy * p[:, 1] / safe_z + intr.cy
    return uv, valid


def backproject(intr: CameraIntrinsics, uv, depth: float) -> np.ndarray:
    """Pixel plus camera-frame depth (z) back to a camera-frame point."""
    u, v = uv
    return np.array([(u - intr.cx) / intr.fx * depth,
                     (v - intr.cy) / intr.fy * depth,
                     depth])


def pixel_in_image(intr: CameraIntrinsics, uv) -> bool:
    u, v = uv
    return 0 <= u < intr.width and 0 <= v < intr.height


def viewing_direction(pose: Pose) -> np.ndarray:
    """World-frame optical-axis direction of the camera, R^T @ (0, 0, 1)."""
    d = pose.R.T @ np.array([0.0, 0.0, 1.0])
    return d / np.linalg.norm(d)


def rotation_angle_deg(R: np.ndarray) -> float:
    """Angle of a rotation matrix in degrees."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """(translation error in meters, rotation error in degrees).

    Translation error is the distance between camera centers, not between
    t vectors; rotation error is the angle of the relative rotation.
    """
    t_err = float(np.linalg.norm(estimate.center() - truth.center()))
    r_err = rotation_angle_deg(estimate.R @ truth.R.T)
    return (t_err, r_err)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at `position` looking toward `target`.

    `up` is a world-frame hint for the camera's up direction (image y
    points the opposite way). Falls back to the world x axis when the view
    direction is parallel to `up`.
    """
    position = _as_vec(position, 3, "position")
    target = _as_vec(target, 3, "target")
    f = target - position
    n = np.linalg.norm(f)
    if n < 1e-12:
        raise ValueError("look_at target coincides with the camera position")
    f = f / n
    up = _as_vec(up, 3, "up")
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(f, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(f, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f])
    return Pose(matrix_to_quat(R), -(R @ position))
