"""Pinhole cameras, rigid poses, raymaps, pointmaps and similarity alignment.

Conventions used throughout the package:

* quaternions are ``(w, x, y, z)`` with the Hamilton product;
* a :class:`Pose` maps camera coordinates to world coordinates;
* cameras follow the OpenCV axis convention (x right, y down, z forward);
* pixel ``(u, v)`` is sampled at integer coordinates, ``u`` along width.

Everything here is plain float64 numpy and non-differentiable.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from streampoint.errors import DegenerateError, InvalidInputError, ShapeError

QUAT_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_list(self) -> list[float]:
        return [float(self.fx), float(self.fy), float(self.cx), float(self.cy)]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix.

    Uses ``atan2(|skew|, (trace - 1) / 2)``, which keeps full precision near
    zero where ``arccos`` of the trace alone does not.
    """
    R = np.asarray(R, dtype=np.float64)
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(0.5 * np.linalg.norm(skew), 0.5 * (np.trace(R) - 1.0))))


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform ``x_world = R(q) x_cam + t``."""

    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or abs(n - 1.0) > QUAT_TOL:
            raise InvalidInputError(f"quaternion norm {n} is not unit within {QUAT_TOL}")
        object.__setattr__(self, "q", q / n)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(rotmat_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def as_list(self) -> list[float]:
        return [float(v) for v in np.concatenate([self.q, self.t])]

    @classmethod
    def from_list(cls, values) -> "Pose":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (7,):
            raise InvalidInputError(f"pose needs 7 numbers (qw qx qy qz tx ty tz), got {values.shape}")
        return cls(values[:4], values[4:])


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a o b``: first apply ``b``, then ``a``."""
    q = quat_multiply(a.q, b.q)
    return Pose(q / np.linalg.norm(q), a.R @ b.t + a.t)


def pose_inverse(a: Pose) -> Pose:
    q_inv = np.array([a.q[0], -a.q[1], -a.q[2], -a.q[3]])
    return Pose(q_inv, -(a.R.T @ a.t))


def relative_pose(ref: Pose, pose: Pose) -> Pose:
    """``pose`` expressed in the camera frame of ``ref``."""
    return pose_compose(pose_inverse(ref), pose)


class Frame(enum.Enum):
    SELF = "self"
    WORLD = "world"


@dataclass(frozen=True)
class Pointmap:
    points: np.ndarray
    frame: Frame
    valid: np.ndarray

    def __post_init__(self):
        if self.points.shape[:2] != self.valid.shape or self.points.shape[-1] != 3:
            raise ShapeError(f"points {self.points.shape} do not match mask {self.valid.shape}")


@dataclass(frozen=True)
class Raymap:
    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        if self.origins.shape != self.directions.shape or self.origins.shape[-1] != 3:
            raise ShapeError(f"origins {self.origins.shape} vs directions {self.directions.shape}")

    @property
    def height(self) -> int:
        return self.origins.shape[0]

    @property
    def width(self) -> int:
        return self.origins.shape[1]

    def as_array(self) -> np.ndarray:
        """H x W x 6 stack, origins first."""
        return np.concatenate([self.origins, self.directions], axis=-1)


@dataclass(frozen=True)
class Sim3:
    s: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.s * (np.asarray(points) @ self.R.T) + self.t


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixel coordinates ``(u, v)`` each of shape ``(height, width)``."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def camera_rays(K: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame rays ``((u-cx)/fx, (v-cy)/fy, 1)``."""
    u, v = pixel_grid(K.width, K.height)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def depth_to_pointmap(depth: np.ndarray, K: CameraIntrinsics) -> Pointmap:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (K.height, K.width):
        raise ShapeError(f"depth {depth.shape} does not match intrinsics {K.height}x{K.width}")
    if np.any(depth < 0):
        raise InvalidInputError("depth must be non-negative")
    valid = depth > 0
    points = camera_rays(K) * depth[..., None]
    points[~valid] = 0.0
    return Pointmap(points, Frame.SELF, valid)


def transform_pointmap(pm: Pointmap, pose: Pose) -> Pointmap:
    if pm.frame is not Frame.SELF:
        raise InvalidInputError("transform_pointmap expects a self-frame pointmap")
    out = pose.apply(pm.points)
    out[~pm.valid] = 0.0
    return Pointmap(out, Frame.WORLD, pm.valid.copy())


def project_points(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Perspective projection of camera-frame points to ``(u, v)``."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([K.fx * points[..., 0] / z + K.cx, K.fy * points[..., 1] / z + K.cy], axis=-1)


def camera_to_raymap(K: CameraIntrinsics, pose: Pose) -> Raymap:
    rays = camera_rays(K) @ pose.R.T
    directions = rays / np.linalg.norm(rays, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.t, directions.shape).copy()
    return Raymap(origins, directions)


def raymap_to_camera(R: Raymap, tol: float = 1e-3) -> tuple[CameraIntrinsics, Pose]:
    """Recover the pinhole camera that produced ``R``.

    Directions satisfy ``d ~ M (u, v, 1)`` with ``M = R_wc K^-1``; ``M`` is
    found by a homogeneous linear fit over all pixels and split into rotation
    and intrinsics by a QR decomposition.
    """
    origins = np.asarray(R.origins, dtype=np.float64).reshape(-1, 3)
    center = origins.mean(axis=0)
    if np.max(np.abs(origins - center)) > 1e-6 * (1.0 + np.max(np.abs(center))):
        raise DegenerateError("raymap origins are not a single camera center")
    H, W = R.height, R.width
    d = np.asarray(R.directions, dtype=np.float64).reshape(-1, 3)
    u, v = pixel_grid(W, H)
    # conditioned pixel coordinates; undone after the fit
    s = max(W, H) / 2.0
    T = np.array([[1 / s, 0, -W / (2 * s)], [0, 1 / s, -H / (2 * s)], [0, 0, 1.0]])
    pix = np.stack([u.ravel(), v.ravel(), np.ones(H * W)], axis=-1)
    p = pix @ T.T

    # d x (M p) = 0, linear in the row-major entries of M
    n = p.shape[0]
    A = np.zeros((3 * n, 9))
    zeros = np.zeros((n, 3))
    dx, dy, dz = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    A[0::3] = np.hstack([zeros, -dz * p, dy * p])
    A[1::3] = np.hstack([dz * p, zeros, -dx * p])
    A[2::3] = np.hstack([-dy * p, dx * p, zeros])
    _, sv, vt = np.linalg.svd(A, full_matrices=False)
    M = vt[-1].reshape(3, 3) @ T
    if np.sum((pix @ M.T) * d) < 0:
        M = -M

    Q, U = np.linalg.qr(M)
    signs = np.sign(np.diag(U))
    signs[signs == 0] = 1.0
    Q = Q * signs
    U = signs[:, None] * U
    if np.linalg.det(Q) < 0:
        raise DegenerateError("raymap is mirrored; not a right-handed pinhole camera")
    K_inv = U / U[2, 2]
    Kmat = np.linalg.inv(K_inv)
    try:
        K = CameraIntrinsics(Kmat[0, 0], Kmat[1, 1], Kmat[0, 2], Kmat[1, 2], W, H)
    except InvalidInputError as exc:
        raise DegenerateError(f"recovered intrinsics are invalid: {exc}") from exc
    pose = Pose.from_rt(Q, center)

    rebuilt = camera_to_raymap(K, pose)
    residual = np.max(np.abs(rebuilt.directions - R.directions))
    if residual > tol or abs(Kmat[0, 1]) > tol * Kmat[0, 0]:
        raise DegenerateError(f"rays are not consistent with a pinhole camera (residual {residual:.3g})")
    return K, pose


def umeyama_sim3(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Closed-form least-squares similarity with ``s R src + t ~ dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"expected matching N x 3 arrays, got {src.shape} and {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise DegenerateError(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if var_s <= 0 or D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateError("rank-deficient covariance: points are collinear or coincident")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(D * np.diag(S)) / var_s)
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


def pose_interpolate(a: Pose, b: Pose, w: float) -> Pose:
    """Blend two poses: linear in translation, normalized-lerp in rotation."""
    qb = b.q if np.dot(a.q, b.q) >= 0 else -b.q
    q = (1.0 - w) * a.q + w * qb
    return Pose(q / np.linalg.norm(q), (1.0 - w) * a.t + w * b.t)
