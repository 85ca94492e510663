"""Task structure: the three-stage state machine, terminations, scenario and
goal generation, odometry drift, and the episode environment.

The environment composes the physics world, reward shaping, goal scheduling,
and observation assembly, but deliberately does not choose the policy's box
pose input: the caller supplies it per step (ground truth, curriculum blend,
estimator output, raw vision, or odometry), so one episode loop serves
training and every evaluation variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .control import (
    ActionRanges,
    ActorObsLayout,
    RESIDUAL_LAYOUT,
    ResidualAction,
    base_controller,
    build_actor_obs,
    build_privileged,
    command_tuple,
    compose_targets,
    decode_action,
    encode_action,
    estimator_proprio,
)
from .estimator import (
    CameraConfig,
    MeasurementNoise,
    VisionMeasurement,
    measure,
    true_relative_pose,
    visibility,
)
from .geometry import (
    Pose6,
    quat_from_yaw,
    quat_mul,
    quat_rotate,
    quat_rotate_inv,
    relative_pose,
    projected_gravity,
    wrap_angle,
    yaw_of_quat,
)
from .randomization import (
    ConfigError,
    DEFAULT_ENTRIES,
    DisturbanceInjector,
    NoiseScales,
    RandEntry,
    apply,
    sample,
)
from .rewards import (
    ActionTrace,
    Command,
    RewardBreakdown,
    RewardWeights,
    TaskGoal,
    locomotion_reward,
    manipulation_reward,
)
from .world import (
    WorldParams,
    WorldState,
    hand_jacobians,
    make_initial_state,
    step as world_step,
    support_height,
)

_SEED_MASK = 0x7FFFFFFF


# ---------------------------------------------------------------------------
# Stages and terminations
# ---------------------------------------------------------------------------


class Stage(Enum):
    NAVIGATION = "navigation"
    GRASP_LIFT = "grasp_lift"
    CARRY = "carry"
    DONE = "done"


class Termination(Enum):
    TIMEOUT = "timeout"
    ROBOT_TILT = "robot_tilt"
    ROBOT_FALL = "robot_fall"
    BOX_FALL = "box_fall"


@dataclass(frozen=True)
class StageThresholds:
    approach_distance: float = 0.5   # m, Navigation -> GraspLift
    lift_height: float = 0.10       # m of clearance between box bottom and table
    lift_hold: float = 0.5          # s of held bimanual lift before Carry
    goal_pos_tol: float = 0.15      # m, delivery position tolerance
    goal_yaw_tol: float = math.radians(30.0)
    settle_speed: float = 0.20      # m/s, "resting stably" linear bound
    settle_ang_speed: float = 1.0   # rad/s
    resettle_speed: float = 0.10    # m/s vertical, box back on a support


@dataclass(frozen=True)
class TerminationLimits:
    time_limit: float = 20.0
    max_tilt: float = math.radians(60.0)
    min_root_height: float = 0.15
    min_box_height: float = 0.25


def horizontal_distance(world: WorldState) -> float:
    bx, by, _ = world.base.position
    px, py, _ = world.box.pose.position
    return math.hypot(px - bx, py - by)


def bimanual_contact(world: WorldState) -> bool:
    return all(h.touching for h in world.contacts.hands)


def any_hand_contact(world: WorldState) -> bool:
    return any(h.touching for h in world.contacts.hands)


def lift_clearance(world: WorldState, params: WorldParams) -> float:
    """Box bottom height above the table top (negative while seated)."""
    return (world.box.pose.position[2] - 0.5 * params.box.size[2]
            - params.table.height)


def box_lifted(world: WorldState, params: WorldParams,
               th: StageThresholds = StageThresholds()) -> bool:
    return lift_clearance(world, params) > th.lift_height


def resettled_on_support(world: WorldState,
                         th: StageThresholds = StageThresholds()) -> bool:
    return (world.contacts.box_table_contacts > 0
            and abs(world.box.twist.linear[2]) <= th.resettle_speed)


def at_goal(world: WorldState, goal: TaskGoal,
            th: StageThresholds = StageThresholds()) -> bool:
    """Box within delivery tolerance and resting stably (held or set down)."""
    bp = world.box.pose.position
    gp = goal.box_position
    err = math.sqrt(sum((a - b) ** 2 for a, b in zip(bp, gp)))
    if err > th.goal_pos_tol:
        return False
    dyaw = wrap_angle(world.box.yaw() - yaw_of_quat(goal.box_orientation))
    if abs(dyaw) > th.goal_yaw_tol:
        return False
    v = world.box.twist.linear
    w = world.box.twist.angular
    return (math.sqrt(sum(c * c for c in v)) <= th.settle_speed
            and math.sqrt(sum(c * c for c in w)) <= th.settle_ang_speed)


def stage_transition(stage: Stage, world: WorldState, params: WorldParams,
                     goal: TaskGoal, th: StageThresholds = StageThresholds(),
                     lift_hold: float = 0.0) -> Stage:
    """One forward step of the stage machine (pure; hold timers passed in)."""
    if stage is Stage.NAVIGATION:
        if horizontal_distance(world) <= th.approach_distance:
            return Stage.GRASP_LIFT
    elif stage is Stage.GRASP_LIFT:
        if (box_lifted(world, params, th) and bimanual_contact(world)
                and lift_hold >= th.lift_hold):
            return Stage.CARRY
    elif stage is Stage.CARRY:
        if at_goal(world, goal, th):
            return Stage.DONE
        if not any_hand_contact(world) and resettled_on_support(world, th):
            return Stage.GRASP_LIFT
    return stage


def tilt_angle(world: WorldState) -> float:
    g = projected_gravity(world.base.orientation)
    return math.acos(min(max(-g[2], -1.0), 1.0))


def terminal_check(world: WorldState, t: float,
                   limits: TerminationLimits = TerminationLimits()
                   ) -> Termination | None:
    """First matching reason in the fixed priority order, else None."""
    if t >= limits.time_limit:
        return Termination.TIMEOUT
    if tilt_angle(world) > limits.max_tilt:
        return Termination.ROBOT_TILT
    if world.base.position[2] < limits.min_root_height:
        return Termination.ROBOT_FALL
    if world.box.pose.position[2] < limits.min_box_height:
        return Termination.BOX_FALL
    return None


# ---------------------------------------------------------------------------
# Stage tracker with drop/regrasp event bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class StageTracker:
    stage: Stage = Stage.NAVIGATION
    lift_hold: float = 0.0
    ever_grasped: bool = False
    held: bool = False          # currently carrying a lifted box
    pending_drop: bool = False  # contact lost while lifted, descent not seen yet
    bimanual_prev: bool = False
    drops: int = 0
    regrasps: int = 0

    def update(self, world: WorldState, params: WorldParams, goal: TaskGoal,
               th: StageThresholds, dt: float) -> list[dict]:
        """Advance timers, count drop/regrasp events, and step the stage."""
        events: list[dict] = []
        t = world.time
        both = bimanual_contact(world)
        lifted = box_lifted(world, params, th)

        if both and lifted:
            self.lift_hold += dt
        else:
            self.lift_hold = 0.0

        if both and not self.bimanual_prev:
            if self.ever_grasped:
                self.regrasps += 1
                events.append({"t": t, "event": "regrasp"})
            else:
                self.ever_grasped = True
                events.append({"t": t, "event": "grasp"})
        self.bimanual_prev = both

        if both and lifted:
            self.held = True
            self.pending_drop = False
        elif self.held and not any_hand_contact(world):
            self.held = False
            self.pending_drop = True
            events.append({"t": t, "event": "contact_lost"})
        if self.pending_drop:
            if not lifted:
                self.drops += 1
                self.pending_drop = False
                events.append({"t": t, "event": "drop"})
            elif both:
                self.pending_drop = False  # caught before it descended

        new_stage = stage_transition(
            self.stage, world, params, goal, th, self.lift_hold)
        if new_stage is not self.stage:
            events.append(
                {"t": t, "event": "stage", "stage": new_stage.value})
            self.stage = new_stage
        return events


# ---------------------------------------------------------------------------
# Odometry drift (stand-in for onboard localization)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OdometryModel:
    pos_rate: float = 0.01    # m / sqrt(s) per horizontal axis
    yaw_rate: float = 0.005   # rad / sqrt(s)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pos_rate < 0.0 or self.yaw_rate < 0.0:
            raise ConfigError("odometry drift rates must be >= 0")


def odometry(true_pose: Pose6, model: OdometryModel, elapsed: float) -> Pose6:
    """True pose plus one Brownian-drift draw at the given elapsed time."""
    if elapsed < 0.0:
        raise ValueError("elapsed must be >= 0")
    if elapsed == 0.0 or (model.pos_rate == 0.0 and model.yaw_rate == 0.0):
        return true_pose
    rng = np.random.default_rng((model.seed & _SEED_MASK, 0x0D0))
    root = math.sqrt(elapsed)
    dx, dy = rng.normal(0.0, model.pos_rate * root, size=2)
    dyaw = rng.normal(0.0, model.yaw_rate * root)
    x, y, z = true_pose.position
    return Pose6((x + dx, y + dy, z),
                 quat_mul(quat_from_yaw(dyaw), true_pose.orientation))


class OdometryTracker:
    """Path-consistent drift: independent increments accumulated per step,
    so the marginal std after time t matches rate * sqrt(t)."""

    def __init__(self, model: OdometryModel, rng: np.random.Generator) -> None:
        self.model = model
        self.rng = rng
        self.offset = np.zeros(2)
        self.yaw_offset = 0.0

    def advance(self, dt: float) -> None:
        root = math.sqrt(dt)
        self.offset += self.rng.normal(0.0, self.model.pos_rate * root, size=2)
        self.yaw_offset += self.rng.normal(0.0, self.model.yaw_rate * root)

    def estimate(self, true_pose: Pose6) -> Pose6:
        x, y, z = true_pose.position
        return Pose6((x + self.offset[0], y + self.offset[1], z),
                     quat_mul(quat_from_yaw(self.yaw_offset),
                              true_pose.orientation))


# ---------------------------------------------------------------------------
# Scenario generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskConfig:
    start_distance: tuple[float, float] = (1.5, 3.0)
    target_distance: tuple[float, float] = (1.0, 2.0)
    box_lateral: tuple[float, float] = (-0.2, 0.2)
    box_yaw: tuple[float, float] = (-0.25, 0.25)
    approach_spread: float = 0.6     # rad around the table-front direction
    robot_yaw_jitter: float = 0.3
    target_spread: float = 1.0       # rad around the table-front direction
    target_yaw: tuple[float, float] = (-0.5, 0.5)
    carry_height: float = 1.0        # delivered box center height, held in air
    table_clearance: float = 0.4     # planar margin to the table footprint

    def validate(self) -> None:
        for name in ("start_distance", "target_distance", "box_lateral",
                     "box_yaw", "target_yaw"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is inverted")
        if self.start_distance[0] <= 0.5:
            raise ConfigError(
                "start_distance must exceed the 0.5 m approach threshold")
        if self.target_distance[0] < 1.0:
            raise ConfigError("target_distance must start at >= 1.0 m")


@dataclass(frozen=True)
class Scenario:
    seed: int
    robot_xy: tuple[float, float]
    robot_yaw: float
    box_xy: tuple[float, float]
    box_yaw: float
    goal: TaskGoal  # delivery reference

    def box_start_pose(self, params: WorldParams) -> Pose6:
        # Same static-settle depth as the initial state, so this is the exact
        # world pose the box is seated at.
        settle = params.box.mass * params.gravity / (
            4.0 * params.contact.stiffness)
        z = (support_height(params, *self.box_xy)
             + 0.5 * params.box.size[2] - settle)
        return Pose6((self.box_xy[0], self.box_xy[1], z),
                     quat_from_yaw(self.box_yaw))


def grasp_targets(box_position, box_orientation, size,
                  press: float = 0.01):
    """Hand goal points just inside the two lateral box faces.

    The first slot is the robot's left hand; faces are assigned by world-frame
    y so the arms do not cross for front approaches.
    """
    axis = quat_rotate(box_orientation, (0.0, 1.0, 0.0))
    off = 0.5 * size[1] - press
    a = tuple(p + off * c for p, c in zip(box_position, axis))
    b = tuple(p - off * c for p, c in zip(box_position, axis))
    return (a, b) if a[1] >= b[1] else (b, a)


def _clear_of_table(params: WorldParams, x: float, y: float,
                    margin: float) -> bool:
    cx, cy = params.table.center
    hx, hy = params.table.half_extents
    return (abs(x - cx) > hx + margin) or (abs(y - cy) > hy + margin)


def make_goal(seed: int, config: TaskConfig = TaskConfig(),
              params: WorldParams | None = None) -> Scenario:
    """Sample box placement, robot start, and delivery target for one episode."""
    config.validate()
    if params is None:
        params = WorldParams()
    rng = np.random.default_rng((int(seed) & _SEED_MASK, 0x60A1))

    # Box near the front table edge, within reach of a robot on the floor.
    # Footprint margins use the yaw-rotated extents so every corner stays on
    # the table.
    table = params.table
    byaw = rng.uniform(*config.box_yaw)
    ext_x = 0.5 * (params.box.size[0] * abs(math.cos(byaw))
                   + params.box.size[1] * abs(math.sin(byaw)))
    ext_y = 0.5 * (params.box.size[0] * abs(math.sin(byaw))
                   + params.box.size[1] * abs(math.cos(byaw)))
    bx = table.center[0] - table.half_extents[0] + ext_x + 0.02
    lat_lo, lat_hi = config.box_lateral
    margin = table.half_extents[1] - ext_y - 0.01
    by = table.center[1] + min(max(rng.uniform(lat_lo, lat_hi), -margin), margin)

    # The outward normal of the front edge points along -x.
    def _place(dist_range, spread):
        for _ in range(100):
            d = rng.uniform(*dist_range)
            phi = math.pi + rng.uniform(-spread, spread)
            x = bx + d * math.cos(phi)
            y = by + d * math.sin(phi)
            if _clear_of_table(params, x, y, config.table_clearance):
                return x, y
        raise ConfigError("no feasible placement outside the table footprint")

    rx, ry = _place(config.start_distance, config.approach_spread)
    ryaw = (math.atan2(by - ry, bx - rx)
            + rng.uniform(-config.robot_yaw_jitter, config.robot_yaw_jitter))

    tx, ty = _place(config.target_distance, config.target_spread)
    tyaw = byaw + rng.uniform(*config.target_yaw)
    target = (tx, ty, config.carry_height)
    tquat = quat_from_yaw(tyaw)
    hands = grasp_targets(target, tquat, params.box.size)
    u = _unit2(tx - bx, ty - by)
    pregrasp = (tx - 0.45 * u[0], ty - 0.45 * u[1], 0.0)
    goal = TaskGoal(target, tquat, hands, pregrasp)
    return Scenario(int(seed), (rx, ry), wrap_angle(ryaw), (bx, by),
                    byaw, goal)


def _unit2(x: float, y: float) -> tuple[float, float]:
    n = math.hypot(x, y)
    if n < 1e-9:
        return (1.0, 0.0)
    return (x / n, y / n)


# ---------------------------------------------------------------------------
# Goal scheduling: rate-limited waypoints keep every exponential reward
# kernel inside its sensitive range.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SchedulerConfig:
    box_speed: float = 0.4        # m/s waypoint ramp for the box reference
    box_yaw_speed: float = 0.6    # rad/s
    root_speed: float = 0.8       # m/s waypoint ramp for the root reference
    reach_offset: float = 0.43    # m, root standoff from the box center
    lift_margin: float = 0.05     # m above the lift threshold for the waypoint
    press: float = 0.01           # m inside each face for grasp targets


class GoalScheduler:
    """Turns a scenario plus the live world state into per-step reward goals."""

    def __init__(self, scenario: Scenario, params: WorldParams,
                 config: SchedulerConfig = SchedulerConfig()) -> None:
        self.scenario = scenario
        self.params = params
        self.config = config
        start = scenario.box_start_pose(params)
        self.p_des = np.array(start.position)
        self.yaw_des = scenario.box_yaw
        self.root_des = np.array(scenario.robot_xy)

    def _ramp_root(self, target_xy, dt: float) -> None:
        delta = np.asarray(target_xy) - self.root_des
        dist = float(np.hypot(*delta))
        step = self.config.root_speed * dt
        if dist > step:
            delta *= step / dist
        self.root_des += delta

    def _ramp_box(self, target, dt: float) -> None:
        delta = np.asarray(target) - self.p_des
        dist = float(np.linalg.norm(delta))
        step = self.config.box_speed * dt
        if dist > step:
            delta *= step / dist
        self.p_des += delta

    def _ramp_yaw(self, target: float, dt: float) -> None:
        dyaw = wrap_angle(target - self.yaw_des)
        step = self.config.box_yaw_speed * dt
        self.yaw_des = wrap_angle(
            self.yaw_des + min(max(dyaw, -step), step))

    def standoff(self, center_xy, yaw: float, dist: float | None = None
                 ) -> tuple[float, float]:
        """Root point at grasp distance behind the box's grasp-side face."""
        d = self.config.reach_offset if dist is None else dist
        return (center_xy[0] - d * math.cos(yaw),
                center_xy[1] - d * math.sin(yaw))

    def update(self, stage: Stage, world: WorldState, dt: float) -> TaskGoal:
        cfg = self.config
        params = self.params
        box = world.box.pose
        box_yaw = world.box.yaw()
        goal = self.scenario.goal

        if stage in (Stage.NAVIGATION, Stage.GRASP_LIFT):
            self._ramp_root(self.standoff(box.position, box_yaw), dt)
        if stage is Stage.GRASP_LIFT:
            if bimanual_contact(world):
                lift_z = (params.table.height + 0.5 * params.box.size[2]
                          + StageThresholds().lift_height + cfg.lift_margin)
                dz = lift_z - self.p_des[2]
                step = cfg.box_speed * dt
                self.p_des[2] += min(max(dz, -step), step)
            else:
                # Re-anchor to wherever the box actually is (post-drop grasp
                # retries included) so the pose kernel keeps its gradient.
                self._ramp_box(box.position, dt)
                self._ramp_yaw(box_yaw, dt)
        if stage is Stage.CARRY or stage is Stage.DONE:
            self._ramp_box(goal.box_position, dt)
            self._ramp_yaw(yaw_of_quat(goal.box_orientation), dt)
            self._ramp_root(self.standoff(self.p_des[:2], self.yaw_des), dt)

        hands = grasp_targets(
            box.position, box.orientation, params.box.size, cfg.press)
        return TaskGoal(
            box_position=tuple(self.p_des),
            box_orientation=quat_from_yaw(self.yaw_des),
            hand_targets=hands,
            pregrasp_point=(float(self.root_des[0]), float(self.root_des[1]),
                            0.0),
        )


# ---------------------------------------------------------------------------
# Stage-dependent reward profiles
# ---------------------------------------------------------------------------


def navigation_weights(w: RewardWeights) -> RewardWeights:
    """Box terms off while walking: the velocity-match kernel would otherwise
    penalize moving toward a resting box."""
    return replace(w, w_box=0.0, w_contact=0.0)


# ---------------------------------------------------------------------------
# Episode environment
# ---------------------------------------------------------------------------


@dataclass
class EnvConfig:
    params: WorldParams = field(default_factory=WorldParams)
    task: TaskConfig = field(default_factory=TaskConfig)
    thresholds: StageThresholds = field(default_factory=StageThresholds)
    limits: TerminationLimits = field(default_factory=TerminationLimits)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    measurement: MeasurementNoise = field(default_factory=MeasurementNoise)
    obs_noise: NoiseScales = field(default_factory=NoiseScales)
    odometry: OdometryModel = field(default_factory=OdometryModel)
    ranges: ActionRanges = field(default_factory=ActionRanges)
    weights: RewardWeights = field(default_factory=RewardWeights)
    layout: ActorObsLayout = RESIDUAL_LAYOUT
    entries: tuple[RandEntry, ...] = DEFAULT_ENTRIES
    randomize: bool = True
    disturbance_period: float = 1.0


@dataclass
class StepResult:
    world: WorldState
    reward: RewardBreakdown
    stage: Stage
    termination: Termination | None
    events: list[dict]
    goal: TaskGoal

    @property
    def done(self) -> bool:
        return self.termination is not None


class Env:
    """One episode environment: physics, goals, rewards, observations.

    reset(seed) fixes every random stream for the episode; step() consumes a
    raw (pre-squash) action vector. Observation assembly is split out so the
    caller decides which box pose estimate the policy sees.
    """

    def __init__(self, config: EnvConfig | None = None) -> None:
        self.config = config if config is not None else EnvConfig()
        self.world: WorldState | None = None

    # -- episode setup ----------------------------------------------------

    def reset(self, episode_seed: int) -> WorldState:
        cfg = self.config
        seeds = np.random.default_rng(
            (int(episode_seed) & _SEED_MASK, 0xE2)).integers(
                1, 2**31 - 1, size=6)
        if cfg.randomize:
            draw = sample(cfg.entries, int(seeds[0]))
            self.params = apply(draw, cfg.params)
            self.injector = DisturbanceInjector(
                seed=int(seeds[1]), period=cfg.disturbance_period)
        else:
            self.params = replace(
                cfg.params,
                disturbance_force=(0.0, 0.0, 0.0),
                disturbance_torque=(0.0, 0.0, 0.0))
            self.injector = None
        self.scenario = make_goal(int(seeds[2]), cfg.task, self.params)
        self.world = make_initial_state(
            self.params,
            base_xy=self.scenario.robot_xy,
            base_yaw=self.scenario.robot_yaw,
            box_xy=self.scenario.box_xy,
            box_yaw=self.scenario.box_yaw,
        )
        self.noise_rng = np.random.default_rng(int(seeds[3]))
        self.vision_rng = np.random.default_rng(int(seeds[4]))
        self.odo = OdometryTracker(
            cfg.odometry, np.random.default_rng(int(seeds[5])))
        self.tracker = StageTracker()
        self.trace = ActionTrace.reset((0.0,) * self._action_dim())
        self.prev_action = (0.0,) * self._action_dim()
        self.scheduler = GoalScheduler(self.scenario, self.params,
                                       cfg.scheduler)
        self.goal = self.scheduler.update(self.tracker.stage, self.world, 0.0)
        self._dist_slot = -1
        return self.world

    def _action_dim(self) -> int:
        return 4 + self.config.params.robot.n_joints

    # -- stepping ----------------------------------------------------------

    def step(self, raw_action) -> StepResult:
        cfg = self.config
        action = decode_action(tuple(float(a) for a in raw_action), cfg.ranges)
        targets = compose_targets(
            base_controller(action.u_loco, self.params.robot), action,
            cfg.ranges)
        if self.injector is not None:
            slot = int(self.world.time // self.injector.period)
            if slot != self._dist_slot:
                force, torque = self.injector.wrench(self.world.time)
                self.params.disturbance_force = force
                self.params.disturbance_torque = torque
                self._dist_slot = slot
        self.world = world_step(self.params, self.world, targets,
                                command_tuple(action.u_loco))
        dt = self.params.control_dt
        self.odo.advance(dt)
        self.prev_action = tuple(float(a) for a in raw_action)
        self.trace = self.trace.push(self.prev_action)

        events = self.tracker.update(
            self.world, self.params, self.scenario.goal, cfg.thresholds, dt)
        self.goal = self.scheduler.update(self.tracker.stage, self.world, dt)

        w = cfg.weights
        if self.tracker.stage is Stage.NAVIGATION:
            w = navigation_weights(w)
        loco = locomotion_reward(self.world, action.u_loco, self.trace, w)
        reward = manipulation_reward(self.world, self.goal, loco, w)
        termination = terminal_check(self.world, self.world.time, cfg.limits)
        return StepResult(self.world, reward, self.tracker.stage,
                          termination, events, self.goal)

    # -- observation sources ------------------------------------------------

    @property
    def stage(self) -> Stage:
        return self.tracker.stage

    @property
    def time(self) -> float:
        return self.world.time

    def observe(self, pose_in: Pose6, noisy: bool = True) -> np.ndarray:
        return build_actor_obs(
            self.world, pose_in, self.goal, self.prev_action,
            layout=self.config.layout,
            noise=self.config.obs_noise if noisy else None,
            rng=self.noise_rng if noisy else None)

    def privileged(self) -> np.ndarray:
        return build_privileged(self.world)

    def proprio(self) -> tuple[float, ...]:
        return estimator_proprio(self.world)

    def true_box_pose(self) -> Pose6:
        return true_relative_pose(self.world)

    def vision(self) -> VisionMeasurement:
        visible = visibility(self.world, self.config.camera, self.vision_rng)
        return measure(self.world, visible, self.config.measurement,
                       self.vision_rng)

    def odometry_box_pose(self) -> Pose6:
        """Box start pose relative to the drift-corrupted robot pose; the
        Navigation-stage stand-in for map-frame localization."""
        est_base = self.odo.estimate(self.world.base.pose())
        return relative_pose(self.scenario.box_start_pose(self.params),
                             est_base)


# ---------------------------------------------------------------------------
# Scripted expert: waypoint walking plus damped-least-squares arm servoing.
# Drives estimator pretraining episodes and end-to-end fixtures.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptedGains:
    kp_pos: float = 1.2
    kp_yaw: float = 1.5
    vmax: float = 0.8
    yaw_max: float = 1.2
    lift_height_cmd: float = 0.845
    height_rate: float = 0.12     # m/s base height ramp while lifting
    arm_rate: float = 1.2         # rad/s joint target slew
    ik_damping: float = 1e-2
    approach_offset: float = 0.48  # m, standoff while arms are still spread
    grasp_offset: float = 0.42     # m, standoff for the closing reach
    spread: float = 0.45           # rad shoulder-yaw spread during approach
    press: float = 0.03            # m inside each face; sets the grip force
    boost_cap: float = 0.12        # m, max waypoint pull folded into IK targets


class ScriptedController:
    """Privileged-state expert for one Env episode.

    Walks to a face-aligned standoff with the arms spread clear of the box,
    closes on the lateral faces with damped-least-squares servoing, lifts by
    raising the commanded base height, and backs toward the delivery point.
    """

    def __init__(self, env: Env, gains: ScriptedGains = ScriptedGains()) -> None:
        self.env = env
        self.gains = gains
        self.height_cmd = env.params.base.default_height
        self.q_des = list(env.params.robot.q_def)
        self.closing = False

    def _waypoint(self) -> tuple[float, float]:
        env = self.env
        g = self.gains
        sched = env.scheduler
        box = env.world.box.pose
        box_yaw = env.world.box.yaw()
        if env.stage is Stage.NAVIGATION:
            return sched.standoff(box.position, box_yaw, g.approach_offset)
        if env.stage is Stage.GRASP_LIFT and not self.closing:
            return sched.standoff(box.position, box_yaw, g.approach_offset)
        if env.stage is Stage.GRASP_LIFT:
            return sched.standoff(box.position, box_yaw, g.grasp_offset)
        # Carry/Done: trail the scheduled box waypoint, walking past it by
        # the box's tracking error so grip slip cannot stall the approach.
        wx, wy = sched.standoff(sched.p_des[:2], sched.yaw_des, g.grasp_offset)
        cx = sched.p_des[0] - box.position[0]
        cy = sched.p_des[1] - box.position[1]
        n = math.hypot(cx, cy)
        if n > 0.25:
            cx, cy = cx * 0.25 / n, cy * 0.25 / n
        return (wx + cx, wy + cy)

    def act(self) -> tuple[float, ...]:
        env = self.env
        g = self.gains
        world = env.world
        params = env.params
        stage = env.stage
        dt = params.control_dt
        base = world.base
        box_yaw = world.box.yaw()

        tx, ty = self._waypoint()
        ex, ey = tx - base.position[0], ty - base.position[1]
        wp_err = math.hypot(ex, ey)
        yaw_err = wrap_angle(box_yaw - base.yaw)
        if stage is Stage.GRASP_LIFT and not self.closing and \
                wp_err < 0.10 and abs(yaw_err) < 0.25:
            self.closing = True
            tx, ty = self._waypoint()
            ex, ey = tx - base.position[0], ty - base.position[1]

        # Locomotion: P-control toward the waypoint, expressed in the base.
        cy, sy = math.cos(base.yaw), math.sin(base.yaw)
        vx = g.kp_pos * (cy * ex + sy * ey)
        vy = g.kp_pos * (-sy * ex + cy * ey)
        speed = math.hypot(vx, vy)
        if speed > g.vmax:
            vx, vy = vx * g.vmax / speed, vy * g.vmax / speed
        if stage is Stage.NAVIGATION and wp_err > 0.6:
            yaw_des = math.atan2(ey, ex)  # face the travel direction
        elif self.closing:
            # Square to the scheduled yaw: the anchored grip transmits base
            # rotation to the box, steering it to the delivery yaw.
            yaw_des = env.scheduler.yaw_des
        else:
            yaw_des = box_yaw             # stay square to the grasp faces
        wz = g.kp_yaw * wrap_angle(yaw_des - base.yaw)
        wz = min(max(wz, -g.yaw_max), g.yaw_max)

        # Base height carries the lift: ramp up while the grip holds.
        if stage is not Stage.NAVIGATION and bimanual_contact(world):
            target_h = g.lift_height_cmd
        else:
            target_h = params.base.default_height
        dh = target_h - self.height_cmd
        step_h = g.height_rate * dt
        self.height_cmd += min(max(dh, -step_h), step_h)

        # Arms: spread clear of the box until in place, then servo onto the
        # lateral faces with damped least squares on the integrated targets.
        if not self.closing:
            posture = list(params.robot.q_def)
            if stage is not Stage.DONE:
                posture[0] += g.spread
                posture[3] -= g.spread
            for i, qd in enumerate(posture):
                delta = qd - self.q_des[i]
                lim = g.arm_rate * dt
                self.q_des[i] += min(max(delta, -lim), lim)
        else:
            box = world.box.pose
            targets = grasp_targets(
                box.position, box.orientation, params.box.size, g.press)
            # Aim above the live faces by the waypoint's remaining lift so the
            # hands raise the box instead of pinning it to the table. Planar
            # corrections go through the base (grip tolerates body drag far
            # better than hand pull).
            boost = min(max(0.0, env.scheduler.p_des[2] - box.position[2]),
                        g.boost_cap)
            (hl, hr), (jl, jr) = hand_jacobians(
                params.robot, tuple(self.q_des))
            base_pose = base.pose()
            for arm, (hand, cols) in enumerate(((hl, jl), (hr, jr))):
                target_w = targets[arm][:2] + (targets[arm][2] + boost,)
                target_b = quat_rotate_inv(
                    base_pose.orientation,
                    tuple(t - p for t, p in
                          zip(target_w, base_pose.position)))
                err = np.array(target_b) - np.array(hand)
                jac = np.array(cols).T  # 3x3, columns per joint
                jjt = jac @ jac.T + g.ik_damping * np.eye(3)
                dq = jac.T @ np.linalg.solve(jjt, err)
                lim = g.arm_rate * dt
                for j in range(3):
                    self.q_des[arm * 3 + j] += min(max(float(dq[j]), -lim), lim)

        residual = tuple(
            min(max(self.q_des[i] - params.robot.q_def[i], -0.5 + 1e-6),
                0.5 - 1e-6)
            for i in range(len(self.q_des)))
        cmd = Command(vx=vx, vy=vy, yaw_rate=wz, height=self.height_cmd)
        return encode_action(ResidualAction(cmd, residual), env.config.ranges)
