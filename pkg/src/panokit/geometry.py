"""SE(3) pose algebra, pinhole projection and dense correspondence geometry.

Conventions used throughout the package:

* rotations are stored as unit quaternions ``(w, x, y, z)`` and renormalized
  after every composition,
* tangent vectors are 6-vectors ``[wx, wy, wz, vx, vy, vz]`` (rotation first),
* pixel coordinates are ``(x, y)`` with ``x`` along image columns, so the
  canonical grid entry at row ``r``, column ``c`` is ``(c, r)``,
* depths are camera-frame Z values in scene units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Projection rejects points closer than this to the camera plane.
Z_MIN = 1e-4
# Depths retracted below this are marked invalid instead of clamped.
MIN_DEPTH = 1e-4
# exp/log switch to Taylor series below this rotation angle.
SMALL_ANGLE = 1e-6


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (bad shapes, bad depths)."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "CameraModel":
        """Intrinsics for an image resized by ``factor`` (ceil of size)."""
        return CameraModel(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(np.ceil(self.width * factor)),
            height=int(np.ceil(self.height * factor)),
        )


def _quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise GeometryError("cannot normalize zero or non-finite quaternion")
    q = q / n
    # canonical sign keeps serialization deterministic
    if q[0] < 0 or (q[0] == 0 and (q[np.nonzero(q)[0][0]] < 0 if np.any(q) else False)):
        q = -q
    return q


def _quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return _quat_normalize(q)


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform. ``apply`` maps points from the source frame of the
    transform to its target frame: ``p' = R p + t``."""

    q: np.ndarray  # unit quaternion (w, x, y, z)
    t: np.ndarray  # translation 3-vector

    def __post_init__(self):
        object.__setattr__(self, "q", _quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        if not np.all(np.isfinite(self.t)):
            raise GeometryError("non-finite translation")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(_matrix_to_quat(T[:3, :3]), T[:3, 3])

    @staticmethod
    def from_rt(R, t) -> "Pose":
        return Pose(_matrix_to_quat(R), t)

    def rotation_matrix(self) -> np.ndarray:
        return _quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self @ other`` (apply ``other`` first, then ``self``)."""
        q = _quat_multiply(self.q, other.q)
        t = self.rotation_matrix() @ other.t + self.t
        return Pose(q, t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        Ri = _quat_to_matrix(_quat_normalize(qi))
        return Pose(qi, -(Ri @ self.t))

    def apply(self, points) -> np.ndarray:
        """Transform one point or an array of points with shape ``(..., 3)``."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.t


def se3_exp(delta) -> Pose:
    """Exponential map from a tangent 6-vector ``[w, v]`` to a Pose.

    ``exp(0)`` is the identity and a pure translation tangent maps to a
    translation-only pose.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(delta)):
        raise GeometryError("non-finite tangent vector")
    w, v = delta[:3], delta[3:]
    theta = np.linalg.norm(w)
    K = _skew(w)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        # sin(t/2)/t -> 1/2, V coefficients via series
        q = np.concatenate([[1.0 - theta**2 / 8.0], 0.5 * w])
        V = np.eye(3) + (0.5 - theta**2 / 24.0) * K + (1.0 / 6.0 - theta**2 / 120.0) * K2
    else:
        half = 0.5 * theta
        q = np.concatenate([[np.cos(half)], np.sin(half) / theta * w])
        V = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K2
        )
    return Pose(q, V @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Logarithm map, inverse of :func:`se3_exp` for rotation angles below pi."""
    qw, qx, qy, qz = pose.q
    s = np.linalg.norm([qx, qy, qz])
    if s < SMALL_ANGLE:
        w = 2.0 / qw * np.array([qx, qy, qz])
        theta = np.linalg.norm(w)
    else:
        theta = 2.0 * np.arctan2(s, qw)
        w = theta / s * np.array([qx, qy, qz])
    K = _skew(w)
    K2 = K @ K
    if theta < SMALL_ANGLE:
        Vinv = np.eye(3) - 0.5 * K + (1.0 / 12.0 + theta**2 / 720.0) * K2
    else:
        coeff = (1.0 / theta**2) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
        Vinv = np.eye(3) - 0.5 * K + coeff * K2
    return np.concatenate([w, Vinv @ pose.t])


def pose_relative(xi_i: Pose, xi_j: Pose) -> Pose:
    """Relative transform ``xi_j @ xi_i^-1`` between two poses."""
    return xi_j.compose(xi_i.inverse())


def tangent_norm(delta) -> float:
    return float(np.linalg.norm(np.asarray(delta, dtype=np.float64).reshape(6)))


@dataclass
class DepthMap:
    """Per-pixel depth with validity. Valid entries are positive and finite."""

    values: np.ndarray  # (H, W) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise GeometryError("depth values and validity mask must both be (H, W)")
        bad = self.valid & ~(np.isfinite(self.values) & (self.values > 0))
        if np.any(bad):
            raise GeometryError("valid depth entries must be strictly positive and finite")

    @staticmethod
    def from_values(values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return DepthMap(values, np.isfinite(values) & (values > 0))

    @property
    def shape(self):
        return self.values.shape

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.valid.copy())


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Canonical (H, W, 2) grid of pixel coordinates; entry (r, c) is (c, r)."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


def project(cam: CameraModel, points):
    """Project points ``(..., 3)`` to pixels.

    Returns ``(uv, valid)`` where ``valid`` is False for points with
    ``Z <= Z_MIN`` (behind or grazing the camera). Rejected entries hold
    zeros, never NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    X, Y, Z = pts[..., 0], pts[..., 1], pts[..., 2]
    valid = np.isfinite(Z) & (Z > Z_MIN)
    Zs = np.where(valid, Z, 1.0)
    uv = np.zeros(pts.shape[:-1] + (2,))
    uv[..., 0] = np.where(valid, cam.fx * X / Zs + cam.cx, 0.0)
    uv[..., 1] = np.where(valid, cam.fy * Y / Zs + cam.cy, 0.0)
    return uv, valid


def backproject(cam: CameraModel, pixels, depth):
    """Lift pixels ``(..., 2)`` at given depths to camera-frame 3D points."""
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("backproject requires strictly positive depth")
    out = np.empty(px.shape[:-1] + (3,))
    out[..., 0] = (px[..., 0] - cam.cx) / cam.fx * d
    out[..., 1] = (px[..., 1] - cam.cy) / cam.fy * d
    out[..., 2] = d
    return out


def correspondence_field(cam: CameraModel, xi_ij: Pose, depth_i: DepthMap):
    """Dense correspondence of every pixel of frame i into frame j.

    ``u_ij(r, c) = project(xi_ij @ backproject(grid(r, c), D_i(r, c)))``.
    Returns the (H, W, 2) target coordinates and a visibility mask that is
    False where the depth is invalid or the transformed point is rejected
    by the projection.
    """
    h, w = depth_i.shape
    if (w, h) != (cam.width, cam.height):
        raise GeometryError("depth map size does not match camera model")
    grid = pixel_grid(h, w)
    if np.array_equal(xi_ij.q, [1.0, 0.0, 0.0, 0.0]) and not np.any(xi_ij.t):
        # identity motion maps every pixel to itself; skipping the projection
        # roundtrip keeps the result exactly on the grid
        uv = grid.copy()
        uv[~depth_i.valid] = 0.0
        return uv, depth_i.valid.copy()
    safe = np.where(depth_i.valid, depth_i.values, 1.0)
    pts = backproject(cam, grid, safe)
    uv, proj_ok = project(cam, xi_ij.apply(pts))
    visible = depth_i.valid & proj_ok
    uv[~visible] = 0.0
    return uv, visible


def retract_state(xi: Pose, delta_xi, theta, delta_theta):
    """Apply one optimizer increment to a pose and a per-pixel state.

    The pose is updated multiplicatively on the left, ``exp(delta_xi) @ xi``;
    the per-pixel state additively. When ``theta`` is a :class:`DepthMap` the
    updated depths below ``MIN_DEPTH`` are marked invalid rather than clamped.
    """
    new_pose = se3_exp(delta_xi).compose(xi)
    if isinstance(theta, DepthMap):
        delta = np.asarray(delta_theta, dtype=np.float64)
        if delta.shape != theta.values.shape:
            raise GeometryError("state increment shape mismatch")
        values = theta.values + delta
        valid = theta.valid & np.isfinite(values) & (values >= MIN_DEPTH)
        values = np.where(valid, values, np.nan)
        return new_pose, DepthMap(values, valid)
    theta = np.asarray(theta, dtype=np.float64)
    delta = np.asarray(delta_theta, dtype=np.float64)
    if theta.shape != delta.shape:
        raise GeometryError("state increment shape mismatch")
    return new_pose, theta + delta
