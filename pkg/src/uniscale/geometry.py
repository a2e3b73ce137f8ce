"""Rotation codecs, pinhole camera model, raymaps, unprojection, rigid transforms.

Conventions, stated once and asserted in tests:
  - poses are world-from-camera (x_world = R @ x_cam + t)
  - pixel centers at (u + 0.5, v + 0.5)
  - quaternions are Hamilton [w, x, y, z], sign-canonicalized to w >= 0
  - fov is in radians
All functions are pure numpy; safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class Intrinsics:
    """Pinhole calibration in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie strictly inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class Pose:
    """World-from-camera rigid transform (meters)."""

    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(self.rotation)

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self):
        r_t = self.rotation.T
        return Pose(r_t, -r_t @ self.translation)

    def compose(self, other):
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class CameraParam:
    """Quaternion + translation + fov camera parameterization."""

    q: np.ndarray  # (4,) unit, w >= 0
    t: np.ndarray  # (3,) scale-normalized units
    f: np.ndarray  # (2,) fov radians in (0, pi)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64).reshape(4)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.f = np.asarray(self.f, dtype=np.float64).reshape(2)
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-9:
            raise GeometryError("quaternion must be unit-norm")
        if np.any(self.f <= 0) or np.any(self.f >= np.pi):
            raise GeometryError("fov components must lie in (0, pi)")

    def vector(self):
        return np.concatenate([self.q, self.t, self.f])


def check_rotation(r, tol=1e-6):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        raise GeometryError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise GeometryError("rotation determinant is not +1")
    return r


# ---------------------------------------------------------------------------
# 6D rotation representation (first two columns, Gram-Schmidt decode)


def rot6d_to_matrix(r6):
    """Decode a 6-vector (two stacked column hints) into a rotation matrix."""
    r6 = np.asarray(r6, dtype=np.float64).reshape(6)
    a, b = r6[:3], r6[3:]
    na = np.linalg.norm(a)
    if na < 1e-9:
        raise GeometryError("rot6d: first column hint is near zero")
    x = a / na
    b_perp = b - (x @ b) * x
    nb = np.linalg.norm(b_perp)
    if nb < 1e-9:
        raise GeometryError("rot6d: column hints are near parallel")
    y = b_perp / nb
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(r):
    check_rotation(r)
    return np.concatenate([r[:, 0], r[:, 1]])


# ---------------------------------------------------------------------------
# quaternions (Hamilton, [w, x, y, z])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise GeometryError("zero quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(r):
    """Rotation matrix to unit quaternion, canonicalized to w >= 0."""
    r = check_rotation(r)
    # Shepperd's method: pick the largest of the four squared components
    tr = np.trace(r)
    cand = np.array([tr, r[0, 0], r[1, 1], r[2, 2]])
    i = int(np.argmax(cand))
    if i == 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s,
                      (r[1, 0] - r[0, 1]) / s])
    elif i == 1:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s,
                      0.25 * s,
                      (r[0, 1] + r[1, 0]) / s,
                      (r[0, 2] + r[2, 0]) / s])
    elif i == 2:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s,
                      (r[0, 1] + r[1, 0]) / s,
                      0.25 * s,
                      (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s,
                      (r[0, 2] + r[2, 0]) / s,
                      (r[1, 2] + r[2, 1]) / s,
                      0.25 * s])
    q = q / np.linalg.norm(q)
    return canonicalize_quat(q)


def canonicalize_quat(q):
    q = np.asarray(q, dtype=np.float64).reshape(4)
    return -q if q[0] < 0 else q.copy()


# ---------------------------------------------------------------------------
# raymaps and projection


def make_raymap(k: Intrinsics):
    """H x W x 3 unit viewing directions in the camera frame (origin-free)."""
    u = (np.arange(k.width) + 0.5 - k.cx) / k.fx
    v = (np.arange(k.height) + 0.5 - k.cy) / k.fy
    uu, vv = np.meshgrid(u, v)
    rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def unproject(depth, k: Intrinsics):
    """Back-project a z-depth map into camera-frame points (zero depth = invalid)."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (k.height, k.width):
        raise GeometryError(f"depth shape {depth.shape} does not match intrinsics "
                            f"({k.height}, {k.width})")
    if np.any(depth < 0):
        raise GeometryError("negative depth")
    u = (np.arange(k.width) + 0.5 - k.cx) / k.fx
    v = (np.arange(k.height) + 0.5 - k.cy) / k.fy
    uu, vv = np.meshgrid(u, v)
    return np.stack([depth * uu, depth * vv, depth], axis=-1)


def project(points, k: Intrinsics):
    """Camera-frame points to pixel coordinates (u, v); inverse of unproject."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    u = points[..., 0] / z * k.fx + k.cx - 0.5
    v = points[..., 1] / z * k.fy + k.cy - 0.5
    return np.stack([u, v], axis=-1)


def transform_points(points, pose: Pose):
    """Apply a world-from-camera pose: x_world = R x + t."""
    points = np.asarray(points, dtype=np.float64)
    return points @ pose.rotation.T + pose.translation


# ---------------------------------------------------------------------------
# field of view


def fov_from_K(k: Intrinsics):
    return np.array([2.0 * np.arctan(k.width / (2.0 * k.fx)),
                     2.0 * np.arctan(k.height / (2.0 * k.fy))])


def K_from_fov(f, width, height):
    """Intrinsics with centered principal point from a fov pair (radians)."""
    f = np.asarray(f, dtype=np.float64).reshape(2)
    if np.any(f <= 0) or np.any(f >= np.pi):
        raise GeometryError("fov components must lie in (0, pi)")
    fx = width / (2.0 * np.tan(f[0] / 2.0))
    fy = height / (2.0 * np.tan(f[1] / 2.0))
    return Intrinsics(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height)


def random_rotation(rng):
    """Uniform random rotation from a random quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-6:
        q = rng.standard_normal(4)
    return quat_to_matrix(q / np.linalg.norm(q))
