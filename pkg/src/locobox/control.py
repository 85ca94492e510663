"""Observation packing, action decoding, and the two-level control stack.

The policy acts through a frozen base layer: locomotion commands
(v_x, v_y, yaw rate, height) go to the analytic base tracking law inside
the simulator, and upper-body outputs are residual PD position targets
added to the default arm posture. Observation layouts are explicit ordered
spans so checkpoints can carry a layout manifest and the bilateral mirror
transform can be derived channel by channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Pose6,
    projected_gravity,
    quat_rotate_inv,
    relative_pose,
    rotvec_from_quat,
)
from .randomization import NoiseScales, add_uniform_noise
from .rewards import Command, TaskGoal
from .world import RobotModel, WorldState, hand_positions_local

# Kinematic lengths are never randomized, so one nominal model serves FK.
DEFAULT_MODEL = RobotModel()

ARM_JOINTS = 6
LOCO_CHANNELS = 4  # v_x, v_y, yaw rate, height
RESIDUAL_ACTION_DIM = LOCO_CHANNELS + ARM_JOINTS
HISTORY_STEPS = 3


class LayoutError(ValueError):
    """Observation spans do not match the declared layout."""


@dataclass(frozen=True)
class ActorObsLayout:
    """Ordered, contiguous channel spans; total dimension is their sum."""

    spans: tuple[tuple[str, int], ...]

    @property
    def total(self) -> int:
        return sum(n for _, n in self.spans)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.spans)

    def span(self, name: str) -> slice:
        start = 0
        for n, size in self.spans:
            if n == name:
                return slice(start, start + size)
            start += size
        raise LayoutError(f"no span named {name!r}")

    def pack(self, values: dict[str, tuple[float, ...]]) -> np.ndarray:
        if set(values) != set(self.names):
            raise LayoutError(
                f"fields {sorted(values)} != layout {sorted(self.names)}")
        out = np.empty(self.total)
        start = 0
        for name, size in self.spans:
            v = values[name]
            if len(v) != size:
                raise LayoutError(f"span {name!r} expects {size}, got {len(v)}")
            out[start:start + size] = v
            start += size
        return out

    def unpack(self, vec: np.ndarray) -> dict[str, tuple[float, ...]]:
        if len(vec) != self.total:
            raise LayoutError(f"vector length {len(vec)} != {self.total}")
        out = {}
        start = 0
        for name, size in self.spans:
            out[name] = tuple(float(x) for x in vec[start:start + size])
            start += size
        return out

    def manifest(self) -> list[list]:
        return [[name, size] for name, size in self.spans]


RESIDUAL_LAYOUT = ActorObsLayout((
    ("joint_pos", ARM_JOINTS),
    ("joint_vel", ARM_JOINTS),
    ("ang_vel", 3),
    ("gravity", 3),
    ("box_pose", 6),
    ("goal_pose", 6),
    ("prev_action", RESIDUAL_ACTION_DIM),
))

BASE_LAYOUT = ActorObsLayout((
    ("joint_pos", ARM_JOINTS),
    ("joint_vel", ARM_JOINTS),
    ("ang_vel", 3),
    ("gravity", 3),
    ("cmd_lin", 2),
    ("cmd_yaw", 1),
    ("cmd_height", 1),
    ("prev_action", LOCO_CHANNELS),
))

# Variant layout with forward-kinematics hand positions as extra context.
RESIDUAL_FK_LAYOUT = ActorObsLayout(
    RESIDUAL_LAYOUT.spans[:-1] + (("fk_hands", 6),)
    + (RESIDUAL_LAYOUT.spans[-1],))

# Privileged critic block: ground-truth box pose (6), box linear and angular
# velocity (3 + 3), per-hand normal force (2), net contact force on the box
# (3). The base variant sees the base linear velocity (3) instead.
RESIDUAL_PRIVILEGED_DIM = 17
BASE_PRIVILEGED_DIM = 3


# ---------------------------------------------------------------------------
# Field extraction
# ---------------------------------------------------------------------------


def pose_channels(pose: Pose6) -> tuple[float, ...]:
    return pose.position + rotvec_from_quat(pose.orientation)


def goal_box_pose(goal: TaskGoal) -> Pose6:
    return Pose6(goal.box_position, goal.box_orientation)


def build_actor_obs(world: WorldState, pose_in: Pose6, goal: TaskGoal,
                    prev_action: tuple[float, ...],
                    layout: ActorObsLayout = RESIDUAL_LAYOUT,
                    noise: NoiseScales | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Residual actor observation. ``pose_in`` is the box pose input (already
    expressed in the base frame, whatever its source: truth, blend, estimate,
    or raw vision)."""
    base_pose = world.base.pose()
    q = world.joints.q
    qd = world.joints.qd
    ang = world.base.ang_vel
    grav = projected_gravity(world.base.orientation)
    if noise is not None and rng is not None:
        q = add_uniform_noise(q, noise.joint_pos, rng)
        qd = add_uniform_noise(qd, noise.joint_vel, rng)
        ang = add_uniform_noise(ang, noise.ang_vel, rng)
        grav = add_uniform_noise(grav, noise.gravity, rng)
    values = {
        "joint_pos": q,
        "joint_vel": qd,
        "ang_vel": ang,
        "gravity": grav,
        "box_pose": pose_channels(pose_in),
        "goal_pose": pose_channels(relative_pose(goal_box_pose(goal), base_pose)),
        "prev_action": prev_action,
    }
    if any(name == "fk_hands" for name, _ in layout.spans):
        hl, hr = hand_positions_local(DEFAULT_MODEL, world.joints.q)
        values["fk_hands"] = hl + hr
    return layout.pack(values)


def build_base_obs(world: WorldState, cmd: Command,
                   prev_action: tuple[float, ...],
                   layout: ActorObsLayout = BASE_LAYOUT,
                   noise: NoiseScales | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    q = world.joints.q
    qd = world.joints.qd
    ang = world.base.ang_vel
    grav = projected_gravity(world.base.orientation)
    if noise is not None and rng is not None:
        q = add_uniform_noise(q, noise.joint_pos, rng)
        qd = add_uniform_noise(qd, noise.joint_vel, rng)
        ang = add_uniform_noise(ang, noise.ang_vel, rng)
        grav = add_uniform_noise(grav, noise.gravity, rng)
    return layout.pack({
        "joint_pos": q,
        "joint_vel": qd,
        "ang_vel": ang,
        "gravity": grav,
        "cmd_lin": (cmd.vx, cmd.vy),
        "cmd_yaw": (cmd.yaw_rate,),
        "cmd_height": (cmd.height,),
        "prev_action": prev_action,
    })


def estimator_proprio(world: WorldState) -> tuple[float, ...]:
    """Proprioception block fed to the estimator: q, qd, body rates, gravity."""
    return (world.joints.q + world.joints.qd + world.base.ang_vel
            + projected_gravity(world.base.orientation))


def build_privileged(world: WorldState) -> np.ndarray:
    base_pose = world.base.pose()
    rel = relative_pose(world.box.pose, base_pose)
    v_box = quat_rotate_inv(world.base.orientation, world.box.twist.linear)
    w_box = quat_rotate_inv(world.base.orientation, world.box.twist.angular)
    hands = world.contacts.hands
    return np.array(
        pose_channels(rel) + v_box + w_box
        + (hands[0].normal_force, hands[1].normal_force)
        + world.contacts.box_net_force)


def build_base_privileged(world: WorldState) -> np.ndarray:
    return np.array(world.base.lin_vel)


class HistoryBuffer:
    """Fixed-depth actor-observation history, zero-padded before step 3."""

    def __init__(self, dim: int, depth: int = HISTORY_STEPS) -> None:
        self.dim = dim
        self.depth = depth
        self._slots: list[np.ndarray] = []

    def push(self, obs: np.ndarray) -> None:
        if len(obs) != self.dim:
            raise LayoutError(f"history expects dim {self.dim}, got {len(obs)}")
        self._slots.append(np.asarray(obs, dtype=np.float64))
        if len(self._slots) > self.depth:
            self._slots.pop(0)

    def stacked(self) -> np.ndarray:
        """Oldest-first concatenation, zero-padded to depth slots."""
        pad = self.depth - len(self._slots)
        parts = [np.zeros(self.dim)] * pad + self._slots
        return np.concatenate(parts)

    def reset(self) -> None:
        self._slots.clear()


def build_critic_obs(history: HistoryBuffer, privileged: np.ndarray) -> np.ndarray:
    return np.concatenate([history.stacked(), privileged])


def critic_dim(layout: ActorObsLayout, privileged_dim: int) -> int:
    return HISTORY_STEPS * layout.total + privileged_dim


# ---------------------------------------------------------------------------
# Action decoding and target composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionRanges:
    vx: float = 1.0              # symmetric bound, m/s
    vy: float = 0.5
    yaw_rate: float = 1.5        # rad/s
    height_center: float = 0.70  # m
    height_half: float = 0.15
    residual_bound: float = 0.5  # rad


@dataclass(frozen=True)
class ResidualAction:
    u_loco: Command
    upper: tuple[float, ...]  # arm residuals, rad


def decode_loco(raw4, ranges: ActionRanges) -> Command:
    t = [math.tanh(float(v)) for v in raw4]
    return Command(
        vx=t[0] * ranges.vx,
        vy=t[1] * ranges.vy,
        yaw_rate=t[2] * ranges.yaw_rate,
        height=ranges.height_center + t[3] * ranges.height_half,
    )


def decode_action(raw, ranges: ActionRanges = ActionRanges(),
                  n_upper: int = ARM_JOINTS) -> ResidualAction:
    if len(raw) != LOCO_CHANNELS + n_upper:
        raise ValueError(
            f"expected {LOCO_CHANNELS + n_upper} action channels, got {len(raw)}")
    upper = tuple(
        ranges.residual_bound * math.tanh(float(v)) for v in raw[LOCO_CHANNELS:])
    return ResidualAction(decode_loco(raw[:LOCO_CHANNELS], ranges), upper)


def decode_base_action(raw, ranges: ActionRanges = ActionRanges()) -> Command:
    if len(raw) != LOCO_CHANNELS:
        raise ValueError(f"expected {LOCO_CHANNELS} action channels, got {len(raw)}")
    return decode_loco(raw, ranges)


def _atanh_frac(value: float, bound: float) -> float:
    # Clamp inside the open interval so the inverse stays finite.
    frac = min(max(value / bound, -1.0 + 1e-9), 1.0 - 1e-9)
    return math.atanh(frac)


def encode_action(action: ResidualAction,
                  ranges: ActionRanges = ActionRanges()) -> tuple[float, ...]:
    """Inverse of decode_action; saturated channels clamp just inside the range."""
    cmd = action.u_loco
    loco = (
        _atanh_frac(cmd.vx, ranges.vx),
        _atanh_frac(cmd.vy, ranges.vy),
        _atanh_frac(cmd.yaw_rate, ranges.yaw_rate),
        _atanh_frac(cmd.height - ranges.height_center, ranges.height_half),
    )
    upper = tuple(_atanh_frac(r, ranges.residual_bound) for r in action.upper)
    return loco + upper


def base_controller(cmd: Command, model: RobotModel) -> tuple[float, ...]:
    """Frozen base layer: hold the default arm posture; the tracking law in
    the simulator consumes ``cmd`` directly."""
    return tuple(model.q_def)


def compose_targets(base_targets: tuple[float, ...], action: ResidualAction,
                    ranges: ActionRanges = ActionRanges()) -> tuple[float, ...]:
    if len(base_targets) != len(action.upper):
        raise ValueError("residual dimension does not match joint targets")
    b = ranges.residual_bound
    return tuple(
        t + min(max(r, -b), b) for t, r in zip(base_targets, action.upper))


def command_tuple(cmd: Command) -> tuple[float, float, float, float]:
    return (cmd.vx, cmd.vy, cmd.yaw_rate, cmd.height)


# ---------------------------------------------------------------------------
# Bilateral mirror transform
# ---------------------------------------------------------------------------

# Per-arm-joint mirror signs: shoulder yaw rotates about z and flips under a
# y reflection; shoulder pitch and elbow pitch rotate about y and keep sign.
_ARM_SIGNS = (-1.0, 1.0, 1.0)


def _arm_mirror(offset: int) -> tuple[list[int], list[float]]:
    half = ARM_JOINTS // 2
    perm = [offset + (i + half) % ARM_JOINTS for i in range(ARM_JOINTS)]
    sign = [_ARM_SIGNS[i % half] for i in range(ARM_JOINTS)]
    return perm, sign


def action_mirror(n_action: int) -> tuple[np.ndarray, np.ndarray]:
    """(perm, sign) arrays: mirrored = sign * a[perm]."""
    if n_action == LOCO_CHANNELS:
        return np.arange(4), np.array([1.0, -1.0, -1.0, 1.0])
    if n_action != RESIDUAL_ACTION_DIM:
        raise LayoutError(f"no mirror rule for action dim {n_action}")
    arm_perm, arm_sign = _arm_mirror(LOCO_CHANNELS)
    perm = np.array([0, 1, 2, 3] + arm_perm)
    sign = np.array([1.0, -1.0, -1.0, 1.0] + arm_sign)
    return perm, sign


_SPAN_MIRRORS: dict[str, tuple[list[int] | None, list[float]]] = {
    # None permutation means identity within the span.
    "joint_pos": ("arm", []),
    "joint_vel": ("arm", []),
    "ang_vel": (None, [-1.0, 1.0, -1.0]),    # pseudovector under y flip
    "gravity": (None, [1.0, -1.0, 1.0]),
    "box_pose": (None, [1.0, -1.0, 1.0, -1.0, 1.0, -1.0]),
    "goal_pose": (None, [1.0, -1.0, 1.0, -1.0, 1.0, -1.0]),
    "cmd_lin": (None, [1.0, -1.0]),
    "cmd_yaw": (None, [-1.0]),
    "cmd_height": (None, [1.0]),
    # Hand positions swap arms and reflect y.
    "fk_hands": ("swap3", [1.0, -1.0, 1.0, 1.0, -1.0, 1.0]),
}


def obs_mirror(layout: ActorObsLayout) -> tuple[np.ndarray, np.ndarray]:
    """(perm, sign) for a full actor observation; raises on unknown spans."""
    perm: list[int] = []
    sign: list[float] = []
    start = 0
    for name, size in layout.spans:
        if name == "prev_action":
            p, s = action_mirror(size)
            perm.extend(start + p)
            sign.extend(s)
        elif name in _SPAN_MIRRORS:
            rule, signs = _SPAN_MIRRORS[name]
            if rule == "arm":
                p, s = _arm_mirror(start)
                perm.extend(p)
                sign.extend(s)
            elif rule == "swap3":
                half = size // 2
                perm.extend(start + (i + half) % size for i in range(size))
                sign.extend(signs)
            else:
                perm.extend(range(start, start + size))
                sign.extend(signs)
        else:
            raise LayoutError(f"no mirror rule for span {name!r}")
        start += size
    return np.array(perm), np.array(sign)


def critic_mirror(layout: ActorObsLayout, privileged_dim: int
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Mirror for stacked history plus the privileged block."""
    p_obs, s_obs = obs_mirror(layout)
    d = layout.total
    perm = [np.asarray(p_obs) + k * d for k in range(HISTORY_STEPS)]
    sign = [s_obs] * HISTORY_STEPS
    base = HISTORY_STEPS * d
    if privileged_dim == RESIDUAL_PRIVILEGED_DIM:
        # box pose (6), v_box (3), w_box (3), hand forces (2 swap), f_box (3).
        p = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 12, 14, 15, 16]
        s = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0,
             1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, 1.0, 1.0, -1.0, 1.0]
    elif privileged_dim == BASE_PRIVILEGED_DIM:
        p = [0, 1, 2]
        s = [1.0, -1.0, 1.0]
    else:
        raise LayoutError(f"no mirror rule for privileged dim {privileged_dim}")
    perm.append(base + np.array(p))
    sign.append(np.array(s))
    return np.concatenate(perm), np.concatenate(sign)
