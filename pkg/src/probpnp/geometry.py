"""Pose parameterizations, pinhole projection and reprojection Jacobians.

Two pose families are supported:

* ``"4dof"``: translation plus yaw about the camera y axis (vector ``[tx, ty, tz, theta]``).
* ``"6dof"``: translation plus unit quaternion ``[w, x, y, z]`` (vector of length 7).

Quaternion Jacobians live in the tangent space of the unit sphere. Internally the
solver works in an orthonormal tangent basis (6 columns for ``"6dof"``); the public
:func:`pose_jacobian` returns the 7-column raw Jacobian projected onto the tangent
space so that ``J_l @ l == 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import NonPositiveDepth

Z_MIN = 1e-4

POSE_TYPES = ("4dof", "6dof")
PARAM_DIM = {"4dof": 4, "6dof": 7}
TANGENT_DIM = {"4dof": 4, "6dof": 6}


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    wrapped = theta - 2.0 * np.pi * np.floor((theta + np.pi) / (2.0 * np.pi))
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def canonical_quaternion(q):
    """Normalize quaternion(s) and make the first nonzero component positive."""
    q = np.array(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    nonzero = np.abs(q) > 0.0
    first = np.argmax(nonzero, axis=-1)
    sign = np.sign(q[np.arange(len(q)), first])
    sign[sign == 0] = 1.0
    q = q * sign[:, None]
    return q[0] if single else q


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose4:
    """Translation (m) and yaw (rad) about the camera y axis."""

    t: np.ndarray
    theta: float

    pose_type = "4dof"

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.t, [self.theta]])

    @property
    def rotation(self) -> np.ndarray:
        return rotations("4dof", self.vector[None])[0]

    def __eq__(self, other):
        return (isinstance(other, Pose4) and np.array_equal(self.t, other.t)
                and self.theta == other.theta)

    def __repr__(self):
        return f"Pose4(t={self.t.tolist()}, theta={self.theta!r})"


@dataclass(frozen=True, eq=False)
class Pose6:
    """Translation (m) and unit quaternion ``[w, x, y, z]``."""

    t: np.ndarray
    l: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    pose_type = "6dof"

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        l = np.array(self.l, dtype=float).reshape(4)
        if not np.all(np.isfinite(l)) or np.linalg.norm(l) == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "l", canonical_quaternion(l))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.l])

    @property
    def rotation(self) -> np.ndarray:
        return rotations("6dof", self.vector[None])[0]

    def __eq__(self, other):
        return (isinstance(other, Pose6) and np.array_equal(self.t, other.t)
                and np.array_equal(self.l, other.l))

    def __repr__(self):
        return f"Pose6(t={self.t.tolist()}, l={self.l.tolist()})"


Pose = Union[Pose4, Pose6]


def pose_from_vector(pose_type: str, vec) -> Pose:
    vec = np.asarray(vec, dtype=float)
    if pose_type == "4dof":
        return Pose4(vec[:3], vec[3])
    if pose_type == "6dof":
        return Pose6(vec[:3], vec[3:7])
    raise ValueError(f"unknown pose type {pose_type!r}")


def canonicalize_vectors(pose_type: str, Y: np.ndarray) -> np.ndarray:
    """Apply yaw wrapping / quaternion canonicalization to a batch of pose vectors."""
    Y = np.array(Y, dtype=float)
    if pose_type == "4dof":
        Y[..., 3] = wrap_angle(Y[..., 3])
    else:
        Y[..., 3:] = canonical_quaternion(Y[..., 3:].reshape(-1, 4)).reshape(Y[..., 3:].shape)
    return Y


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """N weighted 2D-3D point pairs."""

    x3d: np.ndarray
    x2d: np.ndarray
    w2d: np.ndarray

    def __post_init__(self):
        x3d = np.array(self.x3d, dtype=float).reshape(-1, 3)
        x2d = np.array(self.x2d, dtype=float).reshape(-1, 2)
        w2d = np.array(self.w2d, dtype=float).reshape(-1, 2)
        if not (len(x3d) == len(x2d) == len(w2d)):
            raise ValueError("x3d, x2d and w2d must have the same length")
        if not (np.all(np.isfinite(x3d)) and np.all(np.isfinite(x2d))):
            raise ValueError("coordinates must be finite")
        if not (np.all(np.isfinite(w2d)) and np.all(w2d > 0)):
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "x3d", x3d)
        object.__setattr__(self, "x2d", x2d)
        object.__setattr__(self, "w2d", w2d)

    @property
    def n(self) -> int:
        return len(self.x3d)

    def with_arrays(self, x3d=None, x2d=None, w2d=None) -> "CorrespondenceSet":
        return CorrespondenceSet(
            self.x3d if x3d is None else x3d,
            self.x2d if x2d is None else x2d,
            self.w2d if w2d is None else w2d,
        )

    def scaled(self, c: float) -> "CorrespondenceSet":
        """Same correspondences with all weights multiplied by ``c``."""
        return self.with_arrays(w2d=self.w2d * c)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.x3d[idx], self.x2d[idx], self.w2d[idx])


# ---------------------------------------------------------------------------
# Batched rotation helpers. Y has shape (K, 4) or (K, 7).


def rotations(pose_type: str, Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=float)
    if pose_type == "4dof":
        c, s = np.cos(Y[:, 3]), np.sin(Y[:, 3])
        R = np.zeros((len(Y), 3, 3))
        R[:, 0, 0] = c
        R[:, 0, 2] = s
        R[:, 1, 1] = 1.0
        R[:, 2, 0] = -s
        R[:, 2, 2] = c
        return R
    w, x, y, z = Y[:, 3], Y[:, 4], Y[:, 5], Y[:, 6]
    # homogeneous form: identical to the usual formula on the unit sphere
    return np.stack([
        np.stack([w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z], -1),
    ], -2)


def rotation_partials(pose_type: str, Y) -> np.ndarray:
    """Partial derivatives of R wrt the raw rotation parameters, shape (K, dr, 3, 3)."""
    Y = np.asarray(Y, dtype=float)
    K = len(Y)
    if pose_type == "4dof":
        c, s = np.cos(Y[:, 3]), np.sin(Y[:, 3])
        dR = np.zeros((K, 1, 3, 3))
        dR[:, 0, 0, 0] = -s
        dR[:, 0, 0, 2] = c
        dR[:, 0, 2, 0] = -c
        dR[:, 0, 2, 2] = -s
        return dR
    w, x, y, z = Y[:, 3], Y[:, 4], Y[:, 5], Y[:, 6]

    def mat(rows):
        return np.stack([np.stack(r, -1) for r in rows], -2)

    dw = mat([[w, -z, y], [z, w, -x], [-y, x, w]])
    dx = mat([[x, y, z], [y, -x, -w], [z, w, -x]])
    dy = mat([[-y, x, w], [x, y, z], [-w, z, -y]])
    dz = mat([[-z, -w, x], [w, -z, y], [x, y, z]])
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def tangent_basis(pose_type: str, Y) -> np.ndarray:
    """Orthonormal basis of the pose tangent space, shape (K, d, dt).

    For quaternions the rotational columns are ``l * (0, e_k)``, i.e. body-frame
    rotation directions, which are orthonormal and orthogonal to ``l``.
    """
    Y = np.asarray(Y, dtype=float)
    K = len(Y)
    if pose_type == "4dof":
        return np.broadcast_to(np.eye(4), (K, 4, 4)).copy()
    w, x, y, z = Y[:, 3], Y[:, 4], Y[:, 5], Y[:, 6]
    B = np.zeros((K, 7, 6))
    B[:, :3, :3] = np.eye(3)
    B[:, 3:, 3] = np.stack([-x, w, z, -y], -1)
    B[:, 3:, 4] = np.stack([-y, -z, w, x], -1)
    B[:, 3:, 5] = np.stack([-z, y, -x, w], -1)
    return B


def retract(pose_type: str, Y, delta) -> np.ndarray:
    """Apply tangent-space increments ``delta`` (K, dt) to poses ``Y``."""
    Y = np.asarray(Y, dtype=float)
    step = np.einsum("kde,ke->kd", tangent_basis(pose_type, Y), delta)
    return canonicalize_vectors(pose_type, Y + step)


def transform_points(pose_type: str, Y, x3d) -> np.ndarray:
    """Camera-frame points for each pose: (K, N, 3). ``x3d`` is (N, 3) or (K, N, 3)."""
    Y = np.asarray(Y, dtype=float)
    R = rotations(pose_type, Y)
    return np.einsum("kab,knb->kna", R, np.broadcast_to(x3d, (len(Y),) + np.shape(x3d)[-2:])) \
        + Y[:, None, :3]


def _project_array(camera: CameraIntrinsics, p):
    z = p[..., 2]
    u = np.stack([camera.fx * p[..., 0] / z + camera.cx, camera.fy * p[..., 1] / z + camera.cy], -1)
    return u


def forward(pose_type, Y, camera, x3d, x2d, w2d, z_min=Z_MIN):
    """Batched residuals.

    Returns camera-frame points ``p`` (K, N, 3), unweighted residuals ``r`` and
    weighted residuals ``f`` (K, N, 2), and the positive-depth mask (K, N).
    Residuals of points failing the depth check are set to zero.
    """
    p = transform_points(pose_type, Y, x3d)
    valid = p[..., 2] > z_min
    safe = np.where(valid[..., None], p, np.array([0.0, 0.0, 1.0]))
    r = _project_array(camera, safe) - x2d
    r = np.where(valid[..., None], r, 0.0)
    f = w2d * r
    return p, r, f, valid


def projection_jacobian(camera, p) -> np.ndarray:
    """d pi / d p, shape (..., 2, 3)."""
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    zero = np.zeros_like(z)
    return np.stack([
        np.stack([camera.fx / z, zero, -camera.fx * x / z ** 2], -1),
        np.stack([zero, camera.fy / z, -camera.fy * y / z ** 2], -1),
    ], -2)


def raw_jacobian(pose_type, Y, camera, x3d, x2d, w2d, z_min=Z_MIN):
    """Weighted residuals and their Jacobian wrt the raw pose vector.

    Returns ``(f, J, valid)`` with ``J`` of shape (K, N, 2, d). Rows of invalid points are zero.
    """
    Y = np.asarray(Y, dtype=float)
    p, r, f, valid = forward(pose_type, Y, camera, x3d, x2d, w2d, z_min)
    safe = np.where(valid[..., None], p, np.array([0.0, 0.0, 1.0]))
    Pp = projection_jacobian(camera, safe)
    dR = rotation_partials(pose_type, Y)
    x3b = np.broadcast_to(x3d, p.shape)
    dp_drot = np.einsum("krab,knb->knar", dR, x3b)
    J = np.concatenate([Pp, np.einsum("knab,knbr->knar", Pp, dp_drot)], axis=-1)
    J = J * w2d[..., :, None]
    J = np.where(valid[..., None, None], J, 0.0)
    return f, J, valid


def tangent_jacobian(pose_type, Y, camera, x3d, x2d, w2d, z_min=Z_MIN):
    """Weighted residuals and Jacobian in the orthonormal tangent basis, (K, N, 2, dt)."""
    f, J, valid = raw_jacobian(pose_type, Y, camera, x3d, x2d, w2d, z_min)
    B = tangent_basis(pose_type, Y)
    return f, np.einsum("kncd,kde->knce", J, B), valid


# ---------------------------------------------------------------------------
# Single-pose public operations.


def project(camera: CameraIntrinsics, p_cam, z_min: float = Z_MIN) -> np.ndarray:
    p_cam = np.asarray(p_cam, dtype=float)
    if not p_cam[2] > z_min:
        raise NonPositiveDepth(f"point depth {p_cam[2]!r} <= z_min {z_min!r}")
    return _project_array(camera, p_cam)


def residual(pose: Pose, camera: CameraIntrinsics, corr: CorrespondenceSet, i: int,
             z_min: float = Z_MIN):
    """Return ``(f_i, r_i)``: weighted and unweighted reprojection residual of point i."""
    p = pose.rotation @ corr.x3d[i] + pose.t
    r = project(camera, p, z_min) - corr.x2d[i]
    return corr.w2d[i] * r, r


def pose_jacobian(pose: Pose, camera: CameraIntrinsics, corr: CorrespondenceSet, i: int,
                  z_min: float = Z_MIN) -> np.ndarray:
    """Jacobian of ``f_i`` wrt the pose vector (2x4 or 2x7, quaternion block tangent-projected)."""
    p = pose.rotation @ corr.x3d[i] + pose.t
    if not p[2] > z_min:
        raise NonPositiveDepth(f"point {i} depth {p[2]!r} <= z_min {z_min!r}")
    Y = pose.vector[None]
    _, J, _ = raw_jacobian(pose.pose_type, Y, camera, corr.x3d[i:i + 1], corr.x2d[i:i + 1],
                           corr.w2d[i:i + 1], z_min)
    J = J[0, 0]
    if pose.pose_type == "6dof":
        l = pose.l
        J = J.copy()
        J[:, 3:] = J[:, 3:] @ (np.eye(4) - np.outer(l, l))
    return J


def geodesic_distance(a: Pose, b: Pose):
    """Return ``(pos_err, angle_err)`` between two poses of the same type."""
    if a.pose_type != b.pose_type:
        raise ValueError("poses must share a parameterization")
    pos_err = float(np.linalg.norm(a.t - b.t))
    if a.pose_type == "4dof":
        angle_err = abs(wrap_angle(a.theta - b.theta))
    else:
        dot = min(1.0, abs(float(a.l @ b.l)))
        angle_err = 2.0 * np.arccos(dot)
    return pos_err, float(angle_err)


def yaw_rotated(pose: Pose, angle: float) -> Pose:
    """Pose whose object frame is additionally rotated by ``angle`` about its own y axis."""
    if pose.pose_type == "4dof":
        return Pose4(pose.t, pose.theta + angle)
    h = 0.5 * angle
    qy = np.array([np.cos(h), 0.0, np.sin(h), 0.0])
    return Pose6(pose.t, quat_multiply(pose.l, qy))


def quat_multiply(a, b) -> np.ndarray:
    aw, av = a[0], np.asarray(a[1:])
    bw, bv = b[0], np.asarray(b[1:])
    return np.concatenate([[aw * bw - av @ bv], aw * bv + bw * av + np.cross(av, bv)])


def residual_vjp(pose_type, Y, camera, x3d, x2d, w2d, a, z_min=Z_MIN):
    """Gradient of ``sum_i a_i . f_i`` wrt (x3d, x2d, w2d) for each pose.

    ``a`` has shape (K, N, 2). Returns arrays of shape (K, N, 3), (K, N, 2), (K, N, 2).
    Points failing the depth check contribute nothing.
    """
    Y = np.asarray(Y, dtype=float)
    p, r, f, valid = forward(pose_type, Y, camera, x3d, x2d, w2d, z_min)
    a = np.where(valid[..., None], a, 0.0)
    safe = np.where(valid[..., None], p, np.array([0.0, 0.0, 1.0]))
    Pp = projection_jacobian(camera, safe)
    aw = a * w2d
    R = rotations(pose_type, Y)
    g_p = np.einsum("knab,kna->knb", Pp, aw)
    g_x3 = np.einsum("kab,kna->knb", R, g_p)
    return g_x3, -aw * np.ones_like(r), a * r
