"""Locomotion and manipulation reward terms with per-term breakdowns.

The locomotion reward groups command tracking, gait shaping, motion
regularization, and constraint-violation penalties. The manipulation reward
adds kinematic tracking toward the grasp configuration, box pose/velocity
stabilization, a clamped contact-quality bonus, and a vertical slip penalty
on top of the locomotion total.

Breakdown entries store the *weighted* contribution of each term, so the
total always equals the sum of the reported terms. Exponential kernels are
exp(-k * error), hence always in (0, 1] with the maximum at zero error.

Interpretation notes (all constants live in this module):
* the air-time term evaluates current air times every step, so it is
  negative while a foot has been airborne for less than AIR_TIME_TARGET;
* the tilt penalty uses the xy components of the body-frame gravity
  direction (the full norm is identically 1 and carries no tilt signal);
* the slip penalty applies the magnitude of downward hand motion relative
  to the box, gated on box contact;
* limit violations are counts of violating joints per control step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .geometry import projected_gravity, wrap_angle
from .world import WorldState

AIR_TIME_TARGET = 0.4  # s
SPEED_GATE = 0.1  # m/s, gates the air-time term
CLEARANCE_TARGET = 0.05  # m, desired swing-foot height


class ContractViolation(ValueError):
    """Raised when a reward input is non-finite."""


@dataclass(slots=True)
class RewardWeights:
    """Group weights. Magnitudes are artifact defaults, tunable in config."""

    w_track: float = 1.0
    w_gait: float = 0.5
    w_reg: float = 1e-4
    w_vio: float = 0.5
    w_kin: float = 1.0
    w_box: float = 2.0
    w_contact: float = 1.0

    def validate(self) -> None:
        for name in (
            "w_track", "w_gait", "w_reg", "w_vio", "w_kin", "w_box", "w_contact"
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"reward weight {name} must be >= 0")


@dataclass(slots=True)
class Command:
    """Base command: planar velocity, yaw rate, and root height."""

    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    height: float = 0.72


@dataclass(slots=True)
class ActionTrace:
    """Rolling window of the last three actions.

    Differences are recomputed from the stored history on demand; resetting
    seeds the whole history with the first action so the first step carries
    no spurious rate penalty.
    """

    current: tuple[float, ...]
    previous: tuple[float, ...]
    preprevious: tuple[float, ...]

    @classmethod
    def reset(cls, action: tuple[float, ...]) -> "ActionTrace":
        return cls(tuple(action), tuple(action), tuple(action))

    def push(self, action: tuple[float, ...]) -> "ActionTrace":
        return ActionTrace(tuple(action), self.current, self.previous)

    def rate(self) -> tuple[float, ...]:
        return tuple(c - p for c, p in zip(self.current, self.previous))

    def accel(self) -> tuple[float, ...]:
        return tuple(
            c - 2.0 * p + pp
            for c, p, pp in zip(self.current, self.previous, self.preprevious)
        )


@dataclass(slots=True)
class TaskGoal:
    """Desired box pose plus the grasp geometry derived from it."""

    box_position: tuple[float, float, float]
    box_orientation: tuple[float, float, float, float]  # unit quaternion
    hand_targets: tuple[tuple[float, float, float], tuple[float, float, float]]
    pregrasp_point: tuple[float, float, float]


@dataclass(slots=True)
class RewardBreakdown:
    terms: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def add(self, name: str, value: float) -> None:
        if not math.isfinite(value):
            raise ContractViolation(f"reward term {name!r} is non-finite")
        self.terms[name] = value
        self.total += value


def _check(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ContractViolation(f"non-finite input in term {name!r}")


def locomotion_reward(
    state: WorldState, cmd: Command, trace: ActionTrace, w: RewardWeights
) -> RewardBreakdown:
    """Command tracking + gait shaping - regularization - violations."""
    b = RewardBreakdown()
    base = state.base

    # Command tracking, body frame planar velocity.
    cy, sy = math.cos(base.yaw), math.sin(base.yaw)
    vx_w, vy_w, _ = base.lin_vel
    vx = cy * vx_w + sy * vy_w
    vy = -sy * vx_w + cy * vy_w
    _check("track_lin_vel", vx, vy, cmd.vx, cmd.vy)
    err_v = math.hypot(vx - cmd.vx, vy - cmd.vy)
    b.add("track_lin_vel", w.w_track * math.exp(-err_v))
    wz = base.ang_vel[2]
    _check("track_yaw_rate", wz, cmd.yaw_rate)
    b.add("track_yaw_rate", w.w_track * math.exp(-abs(wz - cmd.yaw_rate)))
    _check("track_height", base.position[2], cmd.height)
    b.add("track_height", w.w_track * math.exp(-abs(base.position[2] - cmd.height)))

    # Gait shaping on the synthetic foot states.
    speed = math.hypot(vx_w, vy_w)
    air = 0.0
    if speed > SPEED_GATE:
        air = sum(f.air_time - AIR_TIME_TARGET for f in state.contacts.feet)
    b.add("gait_air_time", w.w_gait * air)
    clearance = sum(abs(f.height - CLEARANCE_TARGET) for f in state.contacts.feet)
    b.add("gait_clearance", w.w_gait * math.exp(-0.5 * clearance))

    # Motion regularization over joints and action channels.
    j = state.joints
    reg = sum(
        t * t + v * v + a * a for t, v, a in zip(j.applied_torque, j.qd, j.acc)
    )
    reg += sum(a * a for a in trace.current)
    reg += sum(a * a for a in trace.rate())
    reg += sum(a * a for a in trace.accel())
    _check("reg_motion", reg)
    b.add("reg_motion", -w.w_reg * reg)

    # Constraint violations.
    slip = sum(f.speed for f in state.contacts.feet if f.in_contact)
    b.add("vio_foot_slip", -w.w_vio * slip)
    impact = sum(
        f.impact_speed * f.force for f in state.contacts.feet if f.touchdown
    )
    b.add("vio_impact", -w.w_vio * impact)
    gx, gy, _ = projected_gravity(base.orientation)
    b.add("vio_tilt", -w.w_vio * (gx * gx + gy * gy))
    b.add("vio_joint_vel_limit", -w.w_vio * state.contacts.vel_limit_violations)
    b.add("vio_torque_limit", -w.w_vio * state.contacts.torque_limit_violations)
    return b


def manipulation_reward(
    state: WorldState, goal: TaskGoal, loco: RewardBreakdown, w: RewardWeights
) -> RewardBreakdown:
    """Locomotion total plus kinematic, box, and contact objectives."""
    b = RewardBreakdown(terms=dict(loco.terms), total=loco.total)
    base = state.base
    box = state.box

    # Kinematic tracking toward the grasp configuration.
    dyaw = wrap_angle(base.yaw - box.yaw())
    _check("kin_yaw_align", dyaw)
    b.add("kin_yaw_align", w.w_kin * math.exp(-abs(dyaw)))
    hand_sq = 0.0
    for h in range(2):
        hp = state.contacts.hands[h].position
        tp = goal.hand_targets[h]
        hand_sq += (
            (hp[0] - tp[0]) ** 2 + (hp[1] - tp[1]) ** 2 + (hp[2] - tp[2]) ** 2
        )
    _check("kin_hand_tracking", hand_sq)
    b.add("kin_hand_tracking", w.w_kin * math.exp(-4.0 * math.sqrt(hand_sq)))
    root_err = math.hypot(
        base.position[0] - goal.pregrasp_point[0],
        base.position[1] - goal.pregrasp_point[1],
    )
    b.add("kin_root_tracking", w.w_kin * math.exp(-1.5 * root_err))

    # Box stabilization toward the commanded pose.
    bp, gp = box.pose.position, goal.box_position
    l1_pos = abs(bp[0] - gp[0]) + abs(bp[1] - gp[1]) + abs(bp[2] - gp[2])
    bq, gq = box.pose.orientation, goal.box_orientation
    l1_quat = sum(abs(a - b_) for a, b_ in zip(bq, gq))
    _check("box_pose_tracking", l1_pos, l1_quat)
    b.add("box_pose_tracking", w.w_box * math.exp(-2.0 * l1_pos - l1_quat))
    vr, vb = base.lin_vel, box.twist.linear
    dv = math.sqrt(
        (vr[0] - vb[0]) ** 2 + (vr[1] - vb[1]) ** 2 + (vr[2] - vb[2]) ** 2
    )
    b.add("box_velocity_match", w.w_box * math.exp(-dv))

    # Contact quality and vertical slip, gated on box contact.
    force_sum = sum(
        hc.force_magnitude for hc in state.contacts.hands if hc.touching
    )
    _check("contact_quality", force_sum)
    b.add("contact_quality", w.w_contact * min(max(force_sum, 0.0), 1.0))
    slip = sum(
        min(0.0, hc.vertical_velocity - vb[2])
        for hc in state.contacts.hands
        if hc.touching
    )
    b.add("contact_slip", w.w_contact * slip)
    return b
