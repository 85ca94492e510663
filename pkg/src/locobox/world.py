"""Reduced 2.5-D rigid-body world: planar base, two 3-joint arms, box, table.

The walking controller is abstracted into a first-order command-tracking base
(planar velocity, yaw rate, height) plus a synthetic gait clock that produces
foot contact flags, air times, heights, and landing impacts, so every gait
reward term has a live signal. Arms are torque-controlled chains (shoulder
yaw, shoulder pitch, elbow) with PD actuation; hands are friction points.
The box is a full 6-DOF rigid body resting on a fixed table.

Contacts use penalty springs for the normal force and an anchor-spring
(stick-slip) Coulomb model for friction: while the requested tangential force
stays inside the static cone the contact point is pinned to a drag anchor,
otherwise the anchor slides and the force is capped at the dynamic cone.
A pure velocity-damped friction model creeps under sustained load at the
tangential gains that remain stable at the 200 Hz substep rate, which would
make multi-second frictional carries impossible; the anchor model holds load
indefinitely while never exceeding the cone.

Integration is semi-implicit Euler: all forces are evaluated on the current
state, velocities are updated first, then positions, at 4 substeps per
control step (200 Hz physics under 50 Hz control).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .geometry import (
    Pose6,
    Quat,
    Twist6,
    Vec3,
    quat_conj,
    quat_from_rotvec,
    quat_from_rpy,
    quat_mul,
    quat_normalize,
    quat_rotate,
    quat_rotate_inv,
    rotvec_from_quat,
)

GRAVITY = 9.81


class SimulationFault(RuntimeError):
    """Raised when integration produces a non-finite state."""


# ---------------------------------------------------------------------------
# Parameter blocks
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class RobotModel:
    """Kinematic and actuation parameters of the reduced humanoid.

    Arms have 3 joints each: shoulder yaw (about base z), shoulder pitch
    (about the yawed y axis, positive pitches the arm down), elbow pitch.
    Joint order in all 6-vectors is left arm then right arm. With all joints
    at zero each arm points straight forward, so the rest hand offsets from
    the root are (shoulder_x + upper + forearm, +/-shoulder_y, shoulder_z).
    """

    n_arm_joints: int = 3
    upper_arm_length: float = 0.25
    forearm_length: float = 0.27
    shoulder_offset: Vec3 = (0.10, 0.18, 0.33)  # forward, lateral, up from root
    q_def: tuple[float, ...] = (0.0, 1.38, -1.74, 0.0, 1.38, -1.74)
    kp: tuple[float, ...] = (80.0,) * 6
    kd: tuple[float, ...] = (4.0,) * 6
    joint_pos_lower: tuple[float, ...] = (-1.3, -0.8, -2.2, -1.3, -0.8, -2.2)
    joint_pos_upper: tuple[float, ...] = (1.3, 1.8, 2.2, 1.3, 1.8, 2.2)
    joint_vel_limit: float = 8.0
    torque_limit: float = 40.0
    joint_inertia: float = 0.15
    joint_damping: float = 0.3
    base_mass: float = 35.0
    yaw_inertia: float = 2.0
    attitude_stiffness: float = 400.0
    attitude_damping: float = 40.0
    attitude_inertia: float = 2.0
    base_radius: float = 0.25
    hand_friction: float = 0.8  # non-paper default, see config notes

    @property
    def n_joints(self) -> int:
        return 2 * self.n_arm_joints


@dataclass(slots=True)
class TableParams:
    center: tuple[float, float] = (1.5, 0.0)
    half_extents: tuple[float, float] = (0.4, 0.5)
    height: float = 0.75
    static_friction: float = 0.7
    dynamic_friction: float = 0.6
    restitution: float = 0.1


@dataclass(slots=True)
class BoxParams:
    size: Vec3 = (0.30, 0.30, 0.30)
    mass: float = 2.0  # non-paper default, see config notes
    com_offset: Vec3 = (0.0, 0.0, 0.0)
    static_friction: float = 0.8
    dynamic_friction: float = 0.7
    restitution: float = 0.1


@dataclass(slots=True)
class ContactParams:
    stiffness: float = 1.0e4
    damping: float = 100.0
    tangential_stiffness: float = 1.0e4
    tangential_damping: float = 50.0
    max_penetration: float = 0.05
    friction_model: str = "clamp"  # "clamp" or "tanh" (smooth cone edge)
    # Hands are finite patches, not points: relative box/chassis rotation is
    # resisted by a torsional anchor spring capped at mu * f_n * patch_radius.
    # Without it a gripped box is an unrestrained pendulum about the grip axis.
    patch_radius: float = 0.03
    rotational_stiffness: float = 9.0
    rotational_damping: float = 0.5


@dataclass(slots=True)
class GaitParams:
    period: float = 0.8
    duty: float = 0.5
    swing_height: float = 0.05
    walk_speed_threshold: float = 0.1
    # Synthetic imperfections: residual stance slip per unit of planar accel
    # demand above the ground friction budget, and landing speed per unit of
    # base speed (the swing profile itself touches down with zero velocity).
    slip_accel_gain: float = 0.05
    slip_yaw_gain: float = 0.05
    impact_speed_gain: float = 0.1
    swing_speed_ratio: float = 2.0


@dataclass(slots=True)
class BaseTrackParams:
    vel_time_constant: float = 0.25
    yaw_time_constant: float = 0.2
    height_time_constant: float = 0.3
    max_climb_rate: float = 0.5
    default_height: float = 0.72
    ground_static_friction: float = 1.0
    ground_dynamic_friction: float = 0.8


@dataclass(slots=True)
class WorldParams:
    control_dt: float = 0.02
    substeps: int = 4
    gravity: float = GRAVITY
    robot: RobotModel = field(default_factory=RobotModel)
    table: TableParams = field(default_factory=TableParams)
    box: BoxParams = field(default_factory=BoxParams)
    contact: ContactParams = field(default_factory=ContactParams)
    gait: GaitParams = field(default_factory=GaitParams)
    base: BaseTrackParams = field(default_factory=BaseTrackParams)
    # Per-episode disturbance wrench on the base (domain randomization).
    disturbance_force: Vec3 = (0.0, 0.0, 0.0)
    disturbance_torque: Vec3 = (0.0, 0.0, 0.0)

    @property
    def dt(self) -> float:
        return self.control_dt / self.substeps


# ---------------------------------------------------------------------------
# State blocks
# ---------------------------------------------------------------------------


@dataclass(slots=True)
class BaseState:
    position: Vec3  # x, y, root height
    yaw: float
    roll: float
    pitch: float
    orientation: Quat  # cached quat_from_rpy(roll, pitch, yaw)
    lin_vel: Vec3  # world frame; z from the height-tracking law
    ang_vel: Vec3  # (roll rate, pitch rate, yaw rate)

    def pose(self) -> Pose6:
        return Pose6(self.position, self.orientation)


@dataclass(slots=True)
class JointState:
    q: tuple[float, ...]
    qd: tuple[float, ...]
    applied_torque: tuple[float, ...]
    acc: tuple[float, ...]


@dataclass(slots=True)
class BoxState:
    pose: Pose6
    twist: Twist6  # world-frame linear/angular velocity of the CoM

    def yaw(self) -> float:
        fx, fy, _ = quat_rotate(self.pose.orientation, (1.0, 0.0, 0.0))
        return math.atan2(fy, fx)


@dataclass(slots=True)
class HandContact:
    touching: bool = False  # box contact flag
    normal_force: float = 0.0
    friction_force: Vec3 = (0.0, 0.0, 0.0)
    force_magnitude: float = 0.0  # |normal + friction| from the box
    slip_speed: float = 0.0
    vertical_velocity: float = 0.0  # world hand vz
    position: Vec3 = (0.0, 0.0, 0.0)
    anchor: Vec3 | None = None  # grip point, box frame
    rot_anchor: Quat | None = None  # box-in-base orientation at grip time
    table_normal_force: float = 0.0
    table_friction: tuple[float, float] = (0.0, 0.0)
    table_anchor: tuple[float, float] | None = None


@dataclass(slots=True)
class FootContact:
    in_contact: bool = True
    force: float = 0.0
    air_time: float = 0.0
    height: float = 0.0
    speed: float = 0.0  # |v_f|; slip proxy while in stance
    touchdown: bool = False  # touched down during the last control step
    impact_speed: float = 0.0  # downward speed at that touchdown


@dataclass(slots=True)
class ContactState:
    hands: tuple[HandContact, HandContact]
    feet: tuple[FootContact, FootContact]
    # Box/table corner contacts: per geometric corner, world-frame planar
    # anchor and last applied (normal, friction) forces for auditing.
    corner_anchors: tuple[tuple[float, float] | None, ...]
    corner_forces: tuple[tuple[float, float, float] | None, ...]  # fn, |ft|, mu bound
    box_table_force: float = 0.0
    box_table_contacts: int = 0
    box_net_force: Vec3 = (0.0, 0.0, 0.0)
    vel_limit_violations: int = 0  # joints that hit the speed clamp this step
    torque_limit_violations: int = 0


@dataclass(slots=True)
class WorldState:
    base: BaseState
    joints: JointState
    box: BoxState
    contacts: ContactState
    table_height: float
    time: float
    gait_phase: float = 0.0
    walking: bool = False


# ---------------------------------------------------------------------------
# Small vector helpers (plain floats; the hot path avoids numpy)
# ---------------------------------------------------------------------------


def _add(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def _sub(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _scale(a: Vec3, s: float) -> Vec3:
    return (a[0] * s, a[1] * s, a[2] * s)


def _dot(a: Vec3, b: Vec3) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _cross(a: Vec3, b: Vec3) -> Vec3:
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _norm(a: Vec3) -> float:
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------


def _arm_chain(
    model: RobotModel, q: tuple[float, ...], side: int
) -> tuple[Vec3, Vec3, tuple[Vec3, Vec3, Vec3]]:
    """Elbow and hand position plus hand Jacobian columns, base frame.

    side is 0 for left (+y shoulder), 1 for right.
    """
    sx, sy, sz = model.shoulder_offset
    if side == 1:
        sy = -sy
    i = side * model.n_arm_joints
    q1, q2, q3 = q[i], q[i + 1], q[i + 2]
    c1, s1 = math.cos(q1), math.sin(q1)
    c2, s2 = math.cos(q2), math.sin(q2)
    c23, s23 = math.cos(q2 + q3), math.sin(q2 + q3)
    l1, l2 = model.upper_arm_length, model.forearm_length
    # Upper arm direction Rz(q1) Ry(q2) x, forearm Rz(q1) Ry(q2+q3) x.
    u = (c1 * c2, s1 * c2, -s2)
    f = (c1 * c23, s1 * c23, -s23)
    elbow = (sx + l1 * u[0], sy + l1 * u[1], sz + l1 * u[2])
    hand = (elbow[0] + l2 * f[0], elbow[1] + l2 * f[1], elbow[2] + l2 * f[2])
    # Column 1: z-axis at the shoulder; columns 2, 3: yawed y-axis at the
    # shoulder and at the elbow respectively.
    axis_y = (-s1, c1, 0.0)
    r_sh = (hand[0] - sx, hand[1] - sy, hand[2] - sz)
    r_el = (hand[0] - elbow[0], hand[1] - elbow[1], hand[2] - elbow[2])
    j1 = _cross((0.0, 0.0, 1.0), r_sh)
    j2 = _cross(axis_y, r_sh)
    j3 = _cross(axis_y, r_el)
    return elbow, hand, (j1, j2, j3)


def hand_positions_local(model: RobotModel, q: tuple[float, ...]) -> tuple[Vec3, Vec3]:
    """Hand positions in the base frame (used by FK observations)."""
    _, hl, _ = _arm_chain(model, q, 0)
    _, hr, _ = _arm_chain(model, q, 1)
    return hl, hr


def hand_jacobians(
    model: RobotModel, q: tuple[float, ...]
) -> tuple[tuple[Vec3, Vec3], tuple[tuple[Vec3, Vec3, Vec3], ...]]:
    """Base-frame hand positions and per-arm Jacobian columns (3 each)."""
    _, hl, jl = _arm_chain(model, q, 0)
    _, hr, jr = _arm_chain(model, q, 1)
    return (hl, hr), (jl, jr)


def forward_kinematics(
    joints: JointState, base: BaseState, model: RobotModel
) -> tuple[Vec3, Vec3]:
    """World-frame hand positions, consistent with contact geometry."""
    hl, hr = hand_positions_local(model, joints.q)
    p = base.position
    return (
        _add(p, quat_rotate(base.orientation, hl)),
        _add(p, quat_rotate(base.orientation, hr)),
    )


# ---------------------------------------------------------------------------
# Actuation and contact primitives
# ---------------------------------------------------------------------------


def pd_torque(
    target: tuple[float, ...],
    q: tuple[float, ...],
    qd: tuple[float, ...],
    model: RobotModel,
) -> tuple[tuple[float, ...], int]:
    """PD torque tau = kp (target - q) - kd qd, clamped to the torque limit.

    Returns the torques and the count of joints whose torque was clamped.
    """
    n = model.n_joints
    if not (len(target) == len(q) == len(qd) == n):
        raise ValueError(
            f"dimension mismatch: target {len(target)}, q {len(q)}, "
            f"qd {len(qd)}, model expects {n}"
        )
    lim = model.torque_limit
    out = []
    clipped = 0
    for j in range(n):
        t = model.kp[j] * (target[j] - q[j]) - model.kd[j] * qd[j]
        if t > lim:
            t = lim
            clipped += 1
        elif t < -lim:
            t = -lim
            clipped += 1
        out.append(t)
    return tuple(out), clipped


def contact_resolve(
    penetration: float,
    normal_rel_vel: float,
    tangential_rel_vel: float,
    stiffness: float,
    damping: float,
    mu: float,
) -> tuple[float, float]:
    """Scalar penalty contact: spring-damper normal plus Coulomb-clamped
    viscous friction. normal_rel_vel > 0 means separating.

    Returns (f_n, f_t) with f_n >= 0 and |f_t| <= mu * f_n exactly; f_t
    opposes the tangential velocity.
    """
    if penetration <= 0.0:
        return 0.0, 0.0
    f_n = max(0.0, stiffness * penetration - damping * normal_rel_vel)
    f_t = -damping * tangential_rel_vel
    bound = mu * f_n
    if f_t > bound:
        f_t = bound
    elif f_t < -bound:
        f_t = -bound
    return f_n, f_t


def _normal_force(
    pen: float, vn: float, contact: ContactParams, restitution: float
) -> float:
    """Spring-damper normal force; restitution scales down the damping."""
    pen = min(pen, contact.max_penetration)
    c = contact.damping * (1.0 - restitution)
    return max(0.0, contact.stiffness * pen - c * vn)


def _friction_2d(
    disp: tuple[float, float],
    vel: tuple[float, float],
    fn: float,
    mu_s: float,
    mu_d: float,
    contact: ContactParams,
) -> tuple[tuple[float, float], bool, float]:
    """Anchor-spring tangential force in a plane.

    Returns (force, sliding, slip_speed). When sliding the caller must move
    the anchor so the spring reproduces the capped force next step.
    """
    kt, ct = contact.tangential_stiffness, contact.tangential_damping
    fx = -kt * disp[0] - ct * vel[0]
    fy = -kt * disp[1] - ct * vel[1]
    mag = math.hypot(fx, fy)
    limit_s = mu_s * fn
    if mag <= limit_s or mag < 1e-12:
        return (fx, fy), False, 0.0
    limit_d = mu_d * fn
    if contact.friction_model == "tanh":
        # Smooth cone edge: magnitude saturates at the dynamic bound.
        out = limit_d * math.tanh(mag / max(limit_d, 1e-9))
    else:
        out = limit_d
    k = out / mag
    return (fx * k, fy * k), True, math.hypot(vel[0], vel[1])


def support_height(params: WorldParams, x: float, y: float) -> float:
    """Height of the support surface (table top inside its footprint,
    ground elsewhere)."""
    cx, cy = params.table.center
    hx, hy = params.table.half_extents
    if abs(x - cx) <= hx and abs(y - cy) <= hy:
        return params.table.height
    return 0.0


def _surface_friction(params: WorldParams, x: float, y: float) -> tuple[float, float, float]:
    """(mu_static, mu_dynamic, restitution) of the support surface at x, y."""
    cx, cy = params.table.center
    hx, hy = params.table.half_extents
    t = params.table
    if abs(x - cx) <= hx and abs(y - cy) <= hy:
        return t.static_friction, t.dynamic_friction, t.restitution
    b = params.base
    return b.ground_static_friction, b.ground_dynamic_friction, 0.0


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------


def box_inertia_body(params: BoxParams) -> Vec3:
    sx, sy, sz = params.size
    m = params.mass
    return (
        m / 12.0 * (sy * sy + sz * sz),
        m / 12.0 * (sx * sx + sz * sz),
        m / 12.0 * (sx * sx + sy * sy),
    )


def make_initial_state(
    params: WorldParams,
    base_xy: tuple[float, float] = (0.0, 0.0),
    base_yaw: float = 0.0,
    box_xy: tuple[float, float] | None = None,
    box_yaw: float = 0.0,
) -> WorldState:
    """Robot standing at rest, box seated on the table at static penetration."""
    if box_xy is None:
        # Near the robot-side table edge so the box stays within arm reach.
        bx = params.table.center[0] - params.table.half_extents[0] + 0.5 * params.box.size[0] + 0.015
        box_xy = (bx, params.table.center[1])
    # Seat at the 4-corner static equilibrium depth to avoid a settle bounce.
    settle = params.box.mass * params.gravity / (4.0 * params.contact.stiffness)
    box_z = support_height(params, *box_xy) + 0.5 * params.box.size[2] - settle
    base = BaseState(
        position=(base_xy[0], base_xy[1], params.base.default_height),
        yaw=base_yaw,
        roll=0.0,
        pitch=0.0,
        orientation=quat_from_rpy(0.0, 0.0, base_yaw),
        lin_vel=(0.0, 0.0, 0.0),
        ang_vel=(0.0, 0.0, 0.0),
    )
    n = params.robot.n_joints
    joints = JointState(
        q=tuple(params.robot.q_def),
        qd=(0.0,) * n,
        applied_torque=(0.0,) * n,
        acc=(0.0,) * n,
    )
    box = BoxState(
        pose=Pose6((box_xy[0], box_xy[1], box_z), quat_from_rpy(0.0, 0.0, box_yaw)),
        twist=Twist6((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
    )
    contacts = ContactState(
        hands=(HandContact(), HandContact()),
        feet=(FootContact(), FootContact()),
        corner_anchors=(None,) * 8,
        corner_forces=(None,) * 8,
    )
    return WorldState(
        base=base,
        joints=joints,
        box=box,
        contacts=contacts,
        table_height=params.table.height,
        time=0.0,
    )


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

_CORNER_SIGNS = (
    (-1, -1, -1), (1, -1, -1), (-1, 1, -1), (1, 1, -1),
    (-1, -1, 1), (1, -1, 1), (-1, 1, 1), (1, 1, 1),
)


def step(
    params: WorldParams,
    state: WorldState,
    joint_targets: tuple[float, ...],
    base_command: tuple[float, float, float, float],
) -> WorldState:
    """Advance one control period (params.substeps physics substeps).

    joint_targets are absolute PD position targets; base_command is
    (vx, vy, yaw rate, height) in the base frame.
    """
    p = params
    model = p.robot
    h = p.dt
    n = model.n_joints
    if len(joint_targets) != n:
        raise ValueError(f"expected {n} joint targets, got {len(joint_targets)}")
    targets = tuple(
        min(max(joint_targets[j], model.joint_pos_lower[j]), model.joint_pos_upper[j])
        for j in range(n)
    )
    cmd_vx, cmd_vy, cmd_wz, cmd_h = base_command

    # Unpack mutable locals.
    bx, by, bz = state.base.position
    yaw, roll, pitch = state.base.yaw, state.base.roll, state.base.pitch
    vx, vy, vz = state.base.lin_vel
    wx, wy, wz = state.base.ang_vel
    q = list(state.joints.q)
    qd = list(state.joints.qd)
    tau = list(state.joints.applied_torque)
    qdd = list(state.joints.acc)
    box_pos = state.box.pose.position
    box_q = state.box.pose.orientation
    box_v = state.box.twist.linear
    box_w = state.box.twist.angular
    hand_anchor: list[Vec3 | None] = [state.contacts.hands[0].anchor, state.contacts.hands[1].anchor]
    hand_rot_anchor: list[Quat | None] = [
        state.contacts.hands[0].rot_anchor,
        state.contacts.hands[1].rot_anchor,
    ]
    hand_tab_anchor: list[tuple[float, float] | None] = [
        state.contacts.hands[0].table_anchor,
        state.contacts.hands[1].table_anchor,
    ]
    corner_anchor = list(state.contacts.corner_anchors)
    gait_phase = state.gait_phase
    feet_air = [state.contacts.feet[0].air_time, state.contacts.feet[1].air_time]
    feet_contact = [state.contacts.feet[0].in_contact, state.contacts.feet[1].in_contact]
    time = state.time

    m_box = p.box.mass
    ib = box_inertia_body(p.box)
    vel_viol: set[int] = set()
    tau_viol: set[int] = set()
    touchdown = [False, False]
    impact_speed = [0.0, 0.0]
    hands_out = [HandContact(), HandContact()]
    feet_out = [FootContact(), FootContact()]
    corner_forces: list[tuple[float, float, float] | None] = [None] * 8
    box_table_force = 0.0
    box_table_contacts = 0
    box_net_force: Vec3 = (0.0, 0.0, 0.0)

    mu_g_s = p.base.ground_static_friction
    swing_dur = (1.0 - p.gait.duty) * p.gait.period

    for _ in range(p.substeps):
        base_quat = quat_from_rpy(roll, pitch, yaw)
        base_pos = (bx, by, bz)

        # ---- gait clock -------------------------------------------------
        cmd_speed = math.hypot(cmd_vx, cmd_vy)
        act_speed = math.hypot(vx, vy)
        walking = max(cmd_speed, act_speed, 0.3 * abs(cmd_wz), 0.3 * abs(wz)) > p.gait.walk_speed_threshold
        if walking:
            gait_phase = (gait_phase + h / p.gait.period) % 1.0
        feet_height = [0.0, 0.0]
        feet_speed = [0.0, 0.0]
        feet_force = [0.0, 0.0]
        for f in range(2):
            pf = (gait_phase + 0.5 * f) % 1.0
            in_contact = (pf < p.gait.duty) or not walking
            if in_contact:
                if not feet_contact[f]:
                    touchdown[f] = True
                    impact_speed[f] = p.gait.impact_speed_gain * act_speed
                    feet_air[f] = 0.0
                feet_contact[f] = True
                feet_height[f] = 0.0
            else:
                if feet_contact[f]:
                    feet_air[f] = 0.0  # liftoff
                feet_contact[f] = False
                feet_air[f] += h
                s = (pf - p.gait.duty) / (1.0 - p.gait.duty)
                sin_pis = math.sin(math.pi * s)
                feet_height[f] = p.gait.swing_height * sin_pis * sin_pis
                dz = p.gait.swing_height * math.pi * math.sin(2.0 * math.pi * s) / swing_dur
                feet_speed[f] = math.hypot(p.gait.swing_speed_ratio * act_speed, dz)
        n_stance = feet_contact[0] + feet_contact[1]
        if n_stance:
            share = model.base_mass * p.gravity / n_stance
            for f in range(2):
                feet_force[f] = share if feet_contact[f] else 0.0

        # ---- kinematics -------------------------------------------------
        hands_world: list[Vec3] = [(0.0, 0.0, 0.0)] * 2
        hand_vel: list[Vec3] = [(0.0, 0.0, 0.0)] * 2
        jacs = []
        omega_base = (wx, wy, wz)
        for a in range(2):
            _, hand_local, jac = _arm_chain(model, tuple(q), a)
            hw = _add(base_pos, quat_rotate(base_quat, hand_local))
            jw = tuple(quat_rotate(base_quat, col) for col in jac)
            i = a * 3
            vj = (
                jw[0][0] * qd[i] + jw[1][0] * qd[i + 1] + jw[2][0] * qd[i + 2],
                jw[0][1] * qd[i] + jw[1][1] * qd[i + 1] + jw[2][1] * qd[i + 2],
                jw[0][2] * qd[i] + jw[1][2] * qd[i + 1] + jw[2][2] * qd[i + 2],
            )
            r = _sub(hw, base_pos)
            hand_vel[a] = _add(_add((vx, vy, vz), _cross(omega_base, r)), vj)
            hands_world[a] = hw
            jacs.append(jw)

        # ---- contacts ---------------------------------------------------
        box_r = box_q
        com_world = _add(box_pos, quat_rotate(box_r, p.box.com_offset))
        half = (0.5 * p.box.size[0], 0.5 * p.box.size[1], 0.5 * p.box.size[2])
        kt = p.contact.tangential_stiffness
        box_force: Vec3 = (0.0, 0.0, -m_box * p.gravity)
        box_torque: Vec3 = (0.0, 0.0, 0.0)
        hand_force: list[Vec3] = [(0.0, 0.0, 0.0)] * 2
        box_contact_force: Vec3 = (0.0, 0.0, 0.0)
        react_patch_torque: Vec3 = (0.0, 0.0, 0.0)

        # Hand-box contacts (nearest-face projection).
        for a in range(2):
            hc = hands_out[a]
            hw = hands_world[a]
            local = quat_rotate_inv(box_r, _sub(hw, box_pos))
            inside = (
                abs(local[0]) < half[0]
                and abs(local[1]) < half[1]
                and abs(local[2]) < half[2]
            )
            if inside:
                gaps = (
                    half[0] - abs(local[0]),
                    half[1] - abs(local[1]),
                    half[2] - abs(local[2]),
                )
                axis = gaps.index(min(gaps))
                pen = gaps[axis]
                sign = 1.0 if local[axis] >= 0.0 else -1.0
                n_local = [0.0, 0.0, 0.0]
                n_local[axis] = sign
                n_world = quat_rotate(box_r, tuple(n_local))
                v_box_pt = _add(box_v, _cross(box_w, _sub(hw, com_world)))
                v_rel = _sub(hand_vel[a], v_box_pt)
                vn = _dot(v_rel, n_world)
                fn = _normal_force(pen, vn, p.contact, 0.0)
                if fn > 0.0:
                    if hand_anchor[a] is None:
                        hand_anchor[a] = local
                    anchor_world = _add(box_pos, quat_rotate(box_r, hand_anchor[a]))
                    disp = _sub(hw, anchor_world)
                    disp_t = _sub(disp, _scale(n_world, _dot(disp, n_world)))
                    v_t = _sub(v_rel, _scale(n_world, vn))
                    # Project onto two tangent directions for the 2-D model.
                    t1 = _cross(n_world, (0.0, 0.0, 1.0))
                    if _norm(t1) < 1e-6:
                        t1 = _cross(n_world, (1.0, 0.0, 0.0))
                    t1 = _scale(t1, 1.0 / _norm(t1))
                    t2 = _cross(n_world, t1)
                    mu = model.hand_friction
                    (f1, f2), sliding, slip = _friction_2d(
                        (_dot(disp_t, t1), _dot(disp_t, t2)),
                        (_dot(v_t, t1), _dot(v_t, t2)),
                        fn,
                        mu,
                        mu,
                        p.contact,
                    )
                    ft_vec = _add(_scale(t1, f1), _scale(t2, f2))
                    if sliding:
                        slid_world = _sub(hw, _scale(ft_vec, -1.0 / kt))
                        hand_anchor[a] = quat_rotate_inv(box_r, _sub(slid_world, box_pos))
                    f_on_hand = _add(_scale(n_world, fn), ft_vec)
                    hand_force[a] = _add(hand_force[a], f_on_hand)
                    box_force = _sub(box_force, f_on_hand)
                    box_torque = _sub(box_torque, _cross(_sub(hw, com_world), f_on_hand))
                    box_contact_force = _sub(box_contact_force, f_on_hand)
                    # Torsional patch friction: a rotational anchor spring on
                    # the box-in-base orientation, capped at mu * f_n * r_patch.
                    q_rel = quat_normalize(quat_mul(quat_conj(base_quat), box_r))
                    if hand_rot_anchor[a] is None:
                        hand_rot_anchor[a] = q_rel
                    err = rotvec_from_quat(
                        quat_mul(quat_conj(hand_rot_anchor[a]), q_rel)
                    )
                    w_rel = quat_rotate_inv(base_quat, _sub(box_w, omega_base))
                    k_rot = p.contact.rotational_stiffness
                    tq = (
                        -k_rot * err[0] - p.contact.rotational_damping * w_rel[0],
                        -k_rot * err[1] - p.contact.rotational_damping * w_rel[1],
                        -k_rot * err[2] - p.contact.rotational_damping * w_rel[2],
                    )
                    cap = mu * fn * p.contact.patch_radius
                    tq_mag = _norm(tq)
                    if tq_mag > cap:
                        tq = _scale(tq, cap / tq_mag)
                        hand_rot_anchor[a] = quat_normalize(
                            quat_mul(q_rel, quat_from_rotvec(_scale(tq, 1.0 / k_rot)))
                        )
                    tq_world = quat_rotate(base_quat, tq)
                    box_torque = _add(box_torque, tq_world)
                    react_patch_torque = _sub(react_patch_torque, tq_world)
                    hc.touching = True
                    hc.normal_force = fn
                    hc.friction_force = ft_vec
                    hc.force_magnitude = _norm(f_on_hand)
                    hc.slip_speed = slip
                else:
                    hand_anchor[a] = None
                    hand_rot_anchor[a] = None
            else:
                hand_anchor[a] = None
                hand_rot_anchor[a] = None
                hc.touching = False
                hc.normal_force = 0.0
                hc.friction_force = (0.0, 0.0, 0.0)
                hc.force_magnitude = 0.0
                hc.slip_speed = 0.0

            # Hand-table/ground contact.
            sh = support_height(p, hw[0], hw[1])
            pen_t = sh - hw[2]
            if pen_t > 0.0:
                mu_s, mu_d, rest = _surface_friction(p, hw[0], hw[1])
                fn_t = _normal_force(pen_t, hand_vel[a][2], p.contact, rest)
                if hand_tab_anchor[a] is None:
                    hand_tab_anchor[a] = (hw[0], hw[1])
                ax, ay = hand_tab_anchor[a]
                mu = model.hand_friction
                (fx, fy), sliding, _ = _friction_2d(
                    (hw[0] - ax, hw[1] - ay),
                    (hand_vel[a][0], hand_vel[a][1]),
                    fn_t,
                    min(mu, mu_s),
                    min(mu, mu_d),
                    p.contact,
                )
                if sliding:
                    hand_tab_anchor[a] = (hw[0] + fx / kt, hw[1] + fy / kt)
                hand_force[a] = _add(hand_force[a], (fx, fy, fn_t))
                hc.table_normal_force = fn_t
                hc.table_friction = (fx, fy)
            else:
                hand_tab_anchor[a] = None
                hc.table_normal_force = 0.0
                hc.table_friction = (0.0, 0.0)
            hc.position = hw
            hc.vertical_velocity = hand_vel[a][2]
            hc.anchor = hand_anchor[a]
            hc.rot_anchor = hand_rot_anchor[a]
            hc.table_anchor = hand_tab_anchor[a]

        # Box corner contacts with table/ground.
        box_table_force = 0.0
        box_table_contacts = 0
        for ci, (sgx, sgy, sgz) in enumerate(_CORNER_SIGNS):
            corner_local = (sgx * half[0], sgy * half[1], sgz * half[2])
            cw = _add(box_pos, quat_rotate(box_r, corner_local))
            sh = support_height(p, cw[0], cw[1])
            pen = sh - cw[2]
            if pen <= 0.0:
                corner_anchor[ci] = None
                corner_forces[ci] = None
                continue
            mu_surf_s, mu_surf_d, rest = _surface_friction(p, cw[0], cw[1])
            mu_s = math.sqrt(p.box.static_friction * mu_surf_s)
            mu_d = math.sqrt(p.box.dynamic_friction * mu_surf_d)
            rest_pair = 0.5 * (p.box.restitution + rest)
            v_pt = _add(box_v, _cross(box_w, _sub(cw, com_world)))
            fn = _normal_force(pen, v_pt[2], p.contact, rest_pair)
            if fn <= 0.0:
                corner_anchor[ci] = None
                corner_forces[ci] = None
                continue
            if corner_anchor[ci] is None:
                corner_anchor[ci] = (cw[0], cw[1])
            ax, ay = corner_anchor[ci]
            (fx, fy), sliding, _ = _friction_2d(
                (cw[0] - ax, cw[1] - ay), (v_pt[0], v_pt[1]), fn, mu_s, mu_d, p.contact
            )
            if sliding:
                corner_anchor[ci] = (cw[0] + fx / kt, cw[1] + fy / kt)
            f_c = (fx, fy, fn)
            box_force = _add(box_force, f_c)
            box_torque = _add(box_torque, _cross(_sub(cw, com_world), f_c))
            box_contact_force = _add(box_contact_force, f_c)
            box_table_force += fn
            box_table_contacts += 1
            corner_forces[ci] = (fn, math.hypot(fx, fy), max(mu_s, mu_d))

        # ---- joint dynamics ----------------------------------------------
        tau_pd, n_clip = pd_torque(targets, tuple(q), tuple(qd), model)
        if n_clip:
            for j in range(n):
                t_unc = model.kp[j] * (targets[j] - q[j]) - model.kd[j] * qd[j]
                if abs(t_unc) > model.torque_limit:
                    tau_viol.add(j)
        for a in range(2):
            jw = jacs[a]
            fh = hand_force[a]
            i = a * 3
            for c in range(3):
                tau_c = _dot(jw[c], fh)
                j = i + c
                qdd[j] = (tau_pd[j] + tau_c - model.joint_damping * qd[j]) / model.joint_inertia
                tau[j] = tau_pd[j]
        vlim = model.joint_vel_limit
        for j in range(n):
            qd[j] += qdd[j] * h
            if qd[j] > vlim:
                qd[j] = vlim
                vel_viol.add(j)
            elif qd[j] < -vlim:
                qd[j] = -vlim
                vel_viol.add(j)
        for j in range(n):
            q[j] += qd[j] * h
            if q[j] < model.joint_pos_lower[j]:
                q[j] = model.joint_pos_lower[j]
                qd[j] = max(qd[j], 0.0)
            elif q[j] > model.joint_pos_upper[j]:
                q[j] = model.joint_pos_upper[j]
                qd[j] = min(qd[j], 0.0)

        # ---- box dynamics -------------------------------------------------
        box_v = _add(box_v, _scale(box_force, h / m_box))
        # World-frame inertia: R I_body R^T (gyroscopic term dropped; the box
        # spins slowly in every scenario this world models).
        tb = quat_rotate_inv(box_r, box_torque)
        wb = quat_rotate_inv(box_r, box_w)
        wb = (
            wb[0] + h * tb[0] / ib[0],
            wb[1] + h * tb[1] / ib[1],
            wb[2] + h * tb[2] / ib[2],
        )
        box_w = quat_rotate(box_r, wb)
        # Mild angular drag for numerical robustness.
        box_w = _scale(box_w, 1.0 / (1.0 + 0.02 * h))
        sp = _norm(box_v)
        if sp > 20.0:
            box_v = _scale(box_v, 20.0 / sp)
        sw = _norm(box_w)
        if sw > 50.0:
            box_w = _scale(box_w, 50.0 / sw)
        box_pos = _add(box_pos, _scale(box_v, h))
        dq = quat_mul((0.0, 0.5 * h * box_w[0], 0.5 * h * box_w[1], 0.5 * h * box_w[2]), box_q)
        box_q = quat_normalize(
            (box_q[0] + dq[0], box_q[1] + dq[1], box_q[2] + dq[2], box_q[3] + dq[3])
        )

        # ---- base dynamics -------------------------------------------------
        react = _add(hand_force[0], hand_force[1])
        react_torque = _add(
            _add(
                _cross(_sub(hands_world[0], base_pos), hand_force[0]),
                _cross(_sub(hands_world[1], base_pos), hand_force[1]),
            ),
            react_patch_torque,
        )
        cy, sy_ = math.cos(yaw), math.sin(yaw)
        cmd_wx = cmd_vx * cy - cmd_vy * sy_
        cmd_wy = cmd_vx * sy_ + cmd_vy * cy
        ax = (cmd_wx - vx) / p.base.vel_time_constant + (
            p.disturbance_force[0] + react[0]
        ) / model.base_mass
        ay = (cmd_wy - vy) / p.base.vel_time_constant + (
            p.disturbance_force[1] + react[1]
        ) / model.base_mass
        # Feet can only transmit what ground friction allows.
        a_mag = math.hypot(ax, ay)
        a_cap = mu_g_s * p.gravity
        slip_speed = 0.0
        if a_mag > a_cap:
            k = a_cap / a_mag
            slip_speed = p.gait.slip_accel_gain * (a_mag - a_cap)
            ax *= k
            ay *= k
        slip_speed += p.gait.slip_yaw_gain * abs(wz) * 0.3
        # Base-table collision keeps the chassis out of the tabletop.
        cxv, cyv = p.table.center
        hxe, hye = p.table.half_extents
        dx = max(abs(bx - cxv) - hxe, 0.0)
        dy = max(abs(by - cyv) - hye, 0.0)
        clearance = math.hypot(dx, dy)
        inside_pen = model.base_radius - clearance
        if inside_pen > 0.0 and clearance > 1e-9:
            nxp = (bx - cxv) / abs(bx - cxv) if dx > 0 else 0.0
            nyp = (by - cyv) / abs(by - cyv) if dy > 0 else 0.0
            nmag = math.hypot(nxp * dx, nyp * dy)
            if nmag > 1e-9:
                nx2, ny2 = nxp * dx / nmag, nyp * dy / nmag
                push = 150.0 * inside_pen  # m/s^2 per meter of overlap
                ax += push * nx2
                ay += push * ny2
        elif inside_pen > 0.0:
            ax += 150.0 * inside_pen  # fully inside footprint: push along +x
        vx += ax * h
        vy += ay * h
        az = (cmd_wz - wz) / p.base.yaw_time_constant + (
            p.disturbance_torque[2] + react_torque[2]
        ) / model.yaw_inertia
        wz += az * h
        i_att = model.attitude_inertia
        wx += (
            (p.disturbance_torque[0] + react_torque[0])
            - model.attitude_stiffness * roll
            - model.attitude_damping * wx
        ) / i_att * h
        wy += (
            (p.disturbance_torque[1] + react_torque[1])
            - model.attitude_stiffness * pitch
            - model.attitude_damping * wy
        ) / i_att * h
        vz_cmd = (cmd_h - bz) / p.base.height_time_constant
        vz = min(max(vz_cmd, -p.base.max_climb_rate), p.base.max_climb_rate)
        bx += vx * h
        by += vy * h
        bz = max(bz + vz * h, 0.0)
        yaw += wz * h
        roll += wx * h
        pitch += wy * h
        time += h

        for f in range(2):
            feet_out[f].in_contact = feet_contact[f]
            feet_out[f].force = feet_force[f]
            feet_out[f].air_time = feet_air[f]
            feet_out[f].height = feet_height[f]
            feet_out[f].speed = slip_speed if feet_contact[f] else feet_speed[f]
            if feet_contact[f] and not walking and act_speed > 0.02:
                feet_out[f].speed = act_speed  # dragging planted feet

    check = (
        bx + by + bz + yaw + roll + pitch + vx + vy + wz
        + box_pos[0] + box_pos[1] + box_pos[2]
        + sum(q) + sum(qd)
    )
    if not math.isfinite(check):
        raise SimulationFault(
            "non-finite state at t={:.3f}: base=({}, {}, {}) yaw={} box={} q={}".format(
                time, bx, by, bz, yaw, box_pos, q
            )
        )

    for f in range(2):
        feet_out[f].touchdown = touchdown[f]
        feet_out[f].impact_speed = impact_speed[f] if touchdown[f] else 0.0

    base = BaseState(
        position=(bx, by, bz),
        yaw=yaw,
        roll=roll,
        pitch=pitch,
        orientation=quat_from_rpy(roll, pitch, yaw),
        lin_vel=(vx, vy, vz),
        ang_vel=(wx, wy, wz),
    )
    joints = JointState(q=tuple(q), qd=tuple(qd), applied_torque=tuple(tau), acc=tuple(qdd))
    box = BoxState(
        pose=Pose6(box_pos, box_q), twist=Twist6(box_v, box_w)
    )
    contacts = ContactState(
        hands=(hands_out[0], hands_out[1]),
        feet=(feet_out[0], feet_out[1]),
        corner_anchors=tuple(corner_anchor),
        corner_forces=tuple(corner_forces),
        box_table_force=box_table_force,
        box_table_contacts=box_table_contacts,
        box_net_force=box_contact_force,
        vel_limit_violations=len(vel_viol),
        torque_limit_violations=len(tau_viol),
    )
    return WorldState(
        base=base,
        joints=joints,
        box=box,
        contacts=contacts,
        table_height=p.table.height,
        time=time,
        gait_phase=gait_phase,
        walking=state.walking or False,
    )


def tilt_angle(state: WorldState) -> float:
    """Angle between the body z axis and world up, in radians."""
    bzx, bzy, bzz = quat_rotate(state.base.orientation, (0.0, 0.0, 1.0))
    return math.acos(min(1.0, max(-1.0, bzz)))


def mechanical_energy(params: WorldParams, state: WorldState) -> float:
    """Box + base + joint mechanical energy, for damping sanity checks."""
    m = params.box.mass
    v = state.box.twist.linear
    w = state.box.twist.angular
    ib = box_inertia_body(params.box)
    wb = quat_rotate_inv(state.box.pose.orientation, w)
    e = 0.5 * m * _dot(v, v) + m * params.gravity * state.box.pose.position[2]
    e += 0.5 * (ib[0] * wb[0] ** 2 + ib[1] * wb[1] ** 2 + ib[2] * wb[2] ** 2)
    vx, vy, _ = state.base.lin_vel
    e += 0.5 * params.robot.base_mass * (vx * vx + vy * vy)
    e += 0.5 * params.robot.joint_inertia * sum(qd * qd for qd in state.joints.qd)
    return e
