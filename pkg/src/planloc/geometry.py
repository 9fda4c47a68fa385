"""Pose and plane algebra shared by the particle filter and the graph back-end.

Conventions used throughout the package:

* quaternions are stored scalar-first ``(w, x, y, z)`` with ``w >= 0``;
* a plane ``(n, d)`` is the set of points ``p`` with ``n . p + d = 0``;
* wall faces carry normals pointing *into* the wall body, so an observer in
  front of a face sees ``n . p + d < 0``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-9
CP_EPS = 1e-6
VERTICAL_LIMIT = 0.707


def wrap_angle(a):
    """Wrap angles to (-pi, pi]. Works on scalars and arrays."""
    out = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    if np.ndim(out) == 0:
        return float(out)
    return out


# --------------------------------------------------------------------------
# quaternion helpers, vectorised over leading axes
# --------------------------------------------------------------------------

def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_canonical(q):
    """Normalise and flip sign so that w >= 0."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_matrix(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonical(q)


def quat_from_yaw(yaw):
    yaw = np.asarray(yaw, dtype=float)
    h = 0.5 * yaw
    z = np.zeros_like(h)
    return quat_canonical(np.stack([np.cos(h), z, z, np.sin(h)], axis=-1))


def quat_from_rotvec(w):
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a, with its series near zero
    small = angle < 1e-8
    k = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), k * w], axis=-1)


def quat_to_rotvec(q):
    q = quat_canonical(q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, q[..., :1])
    small = s < 1e-8
    k = np.where(small, 2.0 / q[..., :1], angle / np.where(small, 1.0, s))
    return k * v


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w):
    return quat_to_matrix(quat_from_rotvec(w))


def so3_log(R):
    return quat_to_rotvec(quat_from_matrix(R))


def so3_right_jacobian_inv(w):
    """Inverse right Jacobian of SO(3): Log(Exp(w) Exp(dw)) ~ w + Jr^-1(w) dw."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + (W @ W) / 12.0
    c = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * W + c * (W @ W)


# --------------------------------------------------------------------------
# poses
# --------------------------------------------------------------------------

def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform: position ``t`` and unit quaternion ``q`` (w, x, y, z)."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(3)
        q = np.asarray(self.q, dtype=float).reshape(4)
        norm = float(np.linalg.norm(q))
        if not np.all(np.isfinite(t)) or not np.isfinite(norm) or abs(norm - 1.0) > 1e-6:
            raise ValueError(f"invalid pose: t={t}, |q|={norm}")
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "q", _frozen(quat_canonical(q)))

    @classmethod
    def identity(cls) -> Pose3:
        return cls()

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float = 0.0, yaw: float = 0.0) -> Pose3:
        return cls((x, y, z), quat_from_yaw(yaw))

    @classmethod
    def from_matrix(cls, T) -> Pose3:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], quat_from_matrix(T[:3, :3]))

    @classmethod
    def from_list(cls, v) -> Pose3:
        """Inverse of :meth:`to_list`: ``[x, y, z, qw, qx, qy, qz]``."""
        v = [float(x) for x in v]
        if len(v) != 7:
            raise ValueError(f"pose needs 7 numbers, got {len(v)}")
        return cls(v[:3], v[3:])

    def to_list(self) -> list[float]:
        return [float(x) for x in self.t] + [float(x) for x in self.q]

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def yaw(self) -> float:
        R = self.R
        return math.atan2(R[1, 0], R[0, 0])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: Pose3) -> Pose3:
        return pose_compose(self, other)

    def __matmul__(self, other: Pose3) -> Pose3:
        return pose_compose(self, other)

    def inverse(self) -> Pose3:
        return pose_inverse(self)

    def transform_points(self, pts):
        """Map points from this pose's frame into the parent frame."""
        return np.asarray(pts, dtype=float) @ self.R.T + self.t

    def allclose(self, other: Pose3, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.t, other.t, atol=atol)
                    and np.allclose(self.q, other.q, atol=atol))

    def __repr__(self):
        return f"Pose3(t={np.round(self.t, 6).tolist()}, yaw={math.degrees(self.yaw):.3f}deg)"


def pose_compose(a: Pose3, b: Pose3) -> Pose3:
    """``a (+) b``: apply ``b`` expressed in the frame of ``a``."""
    return Pose3(a.t + quat_to_matrix(a.q) @ b.t, quat_multiply(a.q, b.q))


def pose_inverse(a: Pose3) -> Pose3:
    qi = quat_conjugate(a.q)
    return Pose3(-(quat_to_matrix(qi) @ a.t), qi)


def pose_between(a: Pose3, b: Pose3) -> Pose3:
    """Relative pose ``a^-1 (+) b``."""
    return pose_compose(pose_inverse(a), b)


def pose_log(p: Pose3) -> np.ndarray:
    """6-vector (translation, rotation vector); the translation part is not coupled."""
    return np.concatenate([p.t, quat_to_rotvec(p.q)])


def pose_retract(p: Pose3, delta) -> Pose3:
    """Local update used by the optimiser: t += dt, R <- R Exp(dw)."""
    delta = np.asarray(delta, dtype=float)
    return Pose3(p.t + delta[:3], quat_multiply(p.q, quat_from_rotvec(delta[3:])))


# --------------------------------------------------------------------------
# planes
# --------------------------------------------------------------------------

class WallClass(enum.Enum):
    X_VERTICAL = "XVertical"
    Y_VERTICAL = "YVertical"
    NON_WALL = "NonWall"


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``n . p + d = 0`` with unit normal ``n``."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(3)
        if abs(float(np.linalg.norm(n)) - 1.0) > UNIT_TOL:
            raise ValueError(f"plane normal is not unit length: {n}")
        object.__setattr__(self, "n", _frozen(n))
        object.__setattr__(self, "d", float(self.d))

    @classmethod
    def from_normal(cls, n, d: float) -> Plane:
        """Build a plane from a non-unit normal, scaling ``d`` consistently."""
        n = np.asarray(n, dtype=float)
        s = float(np.linalg.norm(n))
        return cls(n / s, d / s)

    def signed_distance(self, p):
        return np.asarray(p, dtype=float) @ self.n + self.d

    def flipped(self) -> Plane:
        """Same geometric plane, opposite orientation."""
        return Plane(-self.n, -self.d)

    def to_list(self) -> list[float]:
        return [float(x) for x in self.n] + [self.d]

    def allclose(self, other: Plane, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.n, other.n, atol=atol) and abs(self.d - other.d) <= atol)

    def __repr__(self):
        return f"Plane(n={np.round(self.n, 6).tolist()}, d={self.d:.6f})"


@dataclass(frozen=True)
class PlaneMinimal:
    """Azimuth, elevation and offset of a plane."""

    phi: float
    theta: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.theta, self.d])


@dataclass(frozen=True, eq=False)
class CPVector:
    """Closest-point form. ``flipped`` records that the source plane had ``d > 0``."""

    pi: np.ndarray
    flipped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pi", _frozen(np.asarray(self.pi, dtype=float).reshape(3)))


class DegeneratePlaneError(ValueError):
    """Plane passes (numerically) through the origin; CP form is undefined."""


def to_cp(p: Plane) -> CPVector:
    if abs(p.d) <= CP_EPS:
        raise DegeneratePlaneError(f"plane through origin has no CP form (d={p.d:g})")
    return CPVector(-p.d * p.n, flipped=p.d > 0)


def from_cp(c: CPVector, keep_side: bool = False) -> Plane:
    """Recover ``(n, d)`` from a CP vector.

    The CP vector alone fixes the orientation with the origin on the negative
    side (``d < 0``). With ``keep_side`` the stored side bit restores the
    orientation of the plane ``c`` was made from.
    """
    norm = float(np.linalg.norm(c.pi))
    if norm <= CP_EPS:
        raise DegeneratePlaneError(f"CP vector too short to recover a plane (|pi|={norm:g})")
    plane = Plane(c.pi / norm, -norm)
    if keep_side and c.flipped:
        return plane.flipped()
    return plane


def to_minimal(p: Plane) -> PlaneMinimal:
    nz = float(np.clip(p.n[2], -1.0, 1.0))
    theta = math.asin(nz)
    if abs(abs(nz) - 1.0) < 1e-12:
        phi = 0.0
    else:
        phi = math.atan2(p.n[1], p.n[0])
        if phi == -math.pi:
            phi = math.pi
    return PlaneMinimal(phi, theta, p.d)


def from_minimal(m: PlaneMinimal) -> Plane:
    ct = math.cos(m.theta)
    n = np.array([ct * math.cos(m.phi), ct * math.sin(m.phi), math.sin(m.theta)])
    return Plane(n / np.linalg.norm(n), m.d)


def minimal_arrays(n, d):
    """Vectorised :func:`to_minimal` on normals ``(..., 3)`` and offsets ``(...)``."""
    n = np.asarray(n, dtype=float)
    phi = np.arctan2(n[..., 1], n[..., 0])
    theta = np.arcsin(np.clip(n[..., 2], -1.0, 1.0))
    return np.stack([phi, theta, np.broadcast_to(d, phi.shape)], axis=-1)


def transform_plane(T: Pose3, p: Plane) -> Plane:
    """Express a plane given in the frame of ``T`` in ``T``'s parent frame."""
    n = T.R @ p.n
    n = n / np.linalg.norm(n)
    return Plane(n, p.d - float(n @ T.t))


@dataclass(frozen=True, eq=False)
class MahalanobisGate:
    """Information matrix and acceptance threshold for plane matching."""

    info: np.ndarray = field(default_factory=lambda: np.diag([25.0, 25.0, 100.0]))
    threshold: float = 7.81

    def __post_init__(self):
        info = np.asarray(self.info, dtype=float).reshape(3, 3)
        if not np.allclose(info, info.T):
            raise ValueError("gate information matrix must be symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise ValueError("gate information matrix must be positive definite") from None
        if not self.threshold > 0:
            raise ValueError("gate threshold must be positive")
        object.__setattr__(self, "info", _frozen(info))
        object.__setattr__(self, "threshold", float(self.threshold))


def minimal_difference(a, b):
    """Component-wise difference of minimal planes with the azimuth wrapped."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    delta = a - b
    delta[..., 0] = wrap_angle(delta[..., 0])
    return delta


def plane_error(obs: PlaneMinimal, landmark: PlaneMinimal, gate: MahalanobisGate) -> float:
    delta = minimal_difference(obs.as_array(), landmark.as_array())
    return float(delta @ gate.info @ delta)


def classify_wall(p: Plane) -> WallClass:
    return classify_normals(p.n)


def classify_normals(n):
    """Classify one normal (returns :class:`WallClass`) or an array of them (returns codes).

    Array codes: 0 = x-vertical, 1 = y-vertical, 2 = not a wall.
    """
    n = np.asarray(n, dtype=float)
    ax, ay, az = np.abs(n[..., 0]), np.abs(n[..., 1]), np.abs(n[..., 2])
    codes = np.where(az >= VERTICAL_LIMIT, 2, np.where(ax >= ay, 0, 1))
    if n.ndim == 1:
        return (WallClass.X_VERTICAL, WallClass.Y_VERTICAL, WallClass.NON_WALL)[int(codes)]
    return codes


CLASS_CODES = {WallClass.X_VERTICAL: 0, WallClass.Y_VERTICAL: 1, WallClass.NON_WALL: 2}
