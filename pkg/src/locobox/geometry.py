"""Rigid-body poses, twists, and quaternion math.

Conventions used across the package:

* world frame is right-handed with the z axis pointing up,
* quaternions are stored as ``(w, x, y, z)`` unit tuples with ``w >= 0``
  (the canonical representative of the double cover),
* rotation vectors are axis * angle with angle in ``[0, pi]``.

Everything in this module is a pure function of plain Python floats so the
simulation hot path never pays numpy small-array overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]

_EPS = 1e-12
# Below this angle the sin(x)/x style ratios switch to their Taylor series.
_SMALL_ANGLE = 1e-8

IDENTITY_QUAT: Quat = (1.0, 0.0, 0.0, 0.0)
ZERO_VEC: Vec3 = (0.0, 0.0, 0.0)


@dataclass(slots=True)
class Pose6:
    """Position plus orientation of a frame relative to its parent."""

    position: Vec3
    orientation: Quat

    def copy(self) -> "Pose6":
        return Pose6(self.position, self.orientation)


@dataclass(slots=True)
class Twist6:
    """Linear and angular velocity, expressed in a stated frame."""

    linear: Vec3
    angular: Vec3


def identity_pose() -> Pose6:
    return Pose6(ZERO_VEC, IDENTITY_QUAT)


def quat_normalize(q: Quat) -> Quat:
    """Unit-normalize and pick the w >= 0 representative."""
    w, x, y, z = q
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    if w < 0.0:
        n = -n
    return (w / n, x / n, y / n, z / n)


def quat_is_canonical(q: Quat, tol: float = 1e-6) -> bool:
    w, x, y, z = q
    n = math.sqrt(w * w + x * x + y * y + z * z)
    return abs(n - 1.0) <= tol and w >= -tol


def quat_mul(a: Quat, b: Quat) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_conj(q: Quat) -> Quat:
    w, x, y, z = q
    return (w, -x, -y, -z)


def quat_rotate(q: Quat, v: Vec3) -> Vec3:
    """Rotate v from the local frame of q into the parent frame."""
    w, x, y, z = q
    vx, vy, vz = v
    # t = 2 * (q_vec x v); v' = v + w * t + q_vec x t
    tx = 2.0 * (y * vz - z * vy)
    ty = 2.0 * (z * vx - x * vz)
    tz = 2.0 * (x * vy - y * vx)
    return (
        vx + w * tx + y * tz - z * ty,
        vy + w * ty + z * tx - x * tz,
        vz + w * tz + x * ty - y * tx,
    )


def quat_rotate_inv(q: Quat, v: Vec3) -> Vec3:
    """Rotate v from the parent frame of q into the local frame."""
    return quat_rotate(quat_conj(q), v)


def quat_from_axis_angle(axis: Vec3, angle: float) -> Quat:
    ax, ay, az = axis
    n = math.sqrt(ax * ax + ay * ay + az * az)
    if n < _EPS:
        return IDENTITY_QUAT
    half = 0.5 * angle
    s = math.sin(half) / n
    return quat_normalize((math.cos(half), ax * s, ay * s, az * s))


def quat_from_yaw(yaw: float) -> Quat:
    half = 0.5 * yaw
    return quat_normalize((math.cos(half), 0.0, 0.0, math.sin(half)))


def quat_from_rpy(roll: float, pitch: float, yaw: float) -> Quat:
    """Intrinsic z-y-x (yaw, then pitch, then roll) Euler angles."""
    qz = quat_from_axis_angle((0.0, 0.0, 1.0), yaw)
    qy = quat_from_axis_angle((0.0, 1.0, 0.0), pitch)
    qx = quat_from_axis_angle((1.0, 0.0, 0.0), roll)
    return quat_normalize(quat_mul(quat_mul(qz, qy), qx))


def yaw_of_quat(q: Quat) -> float:
    """Heading of the body x axis projected onto the world xy plane."""
    fx, fy, _ = quat_rotate(q, (1.0, 0.0, 0.0))
    if abs(fx) < _EPS and abs(fy) < _EPS:
        return 0.0
    return math.atan2(fy, fx)


def quat_from_rotvec(r: Vec3) -> Quat:
    rx, ry, rz = r
    angle = math.sqrt(rx * rx + ry * ry + rz * rz)
    if angle < _SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48
        s = 0.5 - angle * angle / 48.0
        return quat_normalize((1.0, rx * s, ry * s, rz * s))
    s = math.sin(0.5 * angle) / angle
    return quat_normalize((math.cos(0.5 * angle), rx * s, ry * s, rz * s))


def rotvec_from_quat(q: Quat) -> Vec3:
    """Log map; returns axis * angle with angle in [0, pi]."""
    w, x, y, z = quat_normalize(q)
    vn = math.sqrt(x * x + y * y + z * z)
    angle = 2.0 * math.atan2(vn, w)
    if vn < _SMALL_ANGLE:
        # angle/sin(angle/2) ~ 2 + angle^2/12
        k = 2.0 + angle * angle / 12.0
        return (x * k, y * k, z * k)
    k = angle / vn
    return (x * k, y * k, z * k)


def quat_geodesic_angle(a: Quat, b: Quat) -> float:
    """Smallest rotation angle taking a to b, in [0, pi]."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    dot = aw * bw + ax * bx + ay * by + az * bz
    if dot < 0.0:
        bw, bx, by, bz = -bw, -bx, -by, -bz
    # 4 * atan2(|a - b|, |a + b|) is accurate for both tiny and near-pi angles.
    dn = math.sqrt((aw - bw) ** 2 + (ax - bx) ** 2 + (ay - by) ** 2 + (az - bz) ** 2)
    sn = math.sqrt((aw + bw) ** 2 + (ax + bx) ** 2 + (ay + by) ** 2 + (az + bz) ** 2)
    return 4.0 * math.atan2(dn, sn)


def quat_slerp(a: Quat, b: Quat, t: float) -> Quat:
    """Shortest-path spherical interpolation, t in [0, 1]."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    dot = aw * bw + ax * bx + ay * by + az * bz
    if dot < 0.0:
        bw, bx, by, bz, dot = -bw, -bx, -by, -bz, -dot
    dot = min(dot, 1.0)
    theta = math.acos(dot)
    if theta < 1e-6:
        # Nearly parallel: linear blend then renormalize.
        return quat_normalize(
            (
                aw + t * (bw - aw),
                ax + t * (bx - ax),
                ay + t * (by - ay),
                az + t * (bz - az),
            )
        )
    s = math.sin(theta)
    ka = math.sin((1.0 - t) * theta) / s
    kb = math.sin(t * theta) / s
    return quat_normalize(
        (ka * aw + kb * bw, ka * ax + kb * bx, ka * ay + kb * by, ka * az + kb * bz)
    )


def pose_compose(frame: Pose6, local: Pose6) -> Pose6:
    """Pose of ``local`` (given in ``frame``) expressed in frame's parent."""
    px, py, pz = frame.position
    lx, ly, lz = quat_rotate(frame.orientation, local.position)
    return Pose6(
        (px + lx, py + ly, pz + lz),
        quat_normalize(quat_mul(frame.orientation, local.orientation)),
    )


def pose_inverse(pose: Pose6) -> Pose6:
    qi = quat_conj(pose.orientation)
    ix, iy, iz = quat_rotate(qi, pose.position)
    return Pose6((-ix, -iy, -iz), quat_normalize(qi))


def relative_pose(world: Pose6, frame: Pose6) -> Pose6:
    """Pose of ``world`` expressed in ``frame``.

    Satisfies ``pose_compose(frame, relative_pose(world, frame)) == world``.
    """
    return pose_compose(pose_inverse(frame), world)


def pose_to_vec(pose: Pose6) -> tuple[float, float, float, float, float, float]:
    """Flatten to position + rotation vector, the network-facing encoding."""
    return pose.position + rotvec_from_quat(pose.orientation)


def pose_from_vec(v) -> Pose6:
    return Pose6(
        (float(v[0]), float(v[1]), float(v[2])),
        quat_from_rotvec((float(v[3]), float(v[4]), float(v[5]))),
    )


def projected_gravity(q: Quat) -> Vec3:
    """Unit gravity direction expressed in the body frame of q.

    Upright (identity) orientation gives (0, 0, -1); the xy components grow
    with body tilt and are what the tilt penalties consume.
    """
    return quat_rotate_inv(q, (0.0, 0.0, -1.0))


def twist_in_frame(twist: Twist6, q: Quat) -> Twist6:
    """Re-express a world-frame twist in the body frame of q."""
    return Twist6(quat_rotate_inv(q, twist.linear), quat_rotate_inv(q, twist.angular))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a
