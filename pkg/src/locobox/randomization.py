"""Domain randomization for training: parameter sampling and application.

A randomization table lists entries (name, [lo, hi], op). ``sample`` draws
one uniform value per entry; ``apply`` folds a draw into a ``WorldParams``:

  Add      -> nominal + value
  Scale    -> nominal * value
  Absolute -> value replaces the nominal

Box center-of-mass entries are dimensionless: the drawn value v maps to an
offset of (v - 1) times the half extent of that axis, so the mass center
always stays inside the box.

Base force/torque disturbance entries set a constant wrench under Absolute
semantics; during training the ``DisturbanceInjector`` replaces it with a
piecewise-constant wrench resampled at 1 Hz within the same ranges.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .world import Vec3, WorldParams

OPS = ("Add", "Scale", "Absolute")


class ConfigError(ValueError):
    """A randomization entry does not match the world configuration."""


@dataclass(frozen=True)
class RandEntry:
    name: str
    lo: float
    hi: float
    op: str

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ConfigError(f"{self.name}: lo {self.lo} > hi {self.hi}")
        if self.op not in OPS:
            raise ConfigError(f"{self.name}: unknown op {self.op!r}")


# Default training table. Friction/restitution ranges are absolute material
# properties; masses are additive offsets; gains and box extents are scaled.
DEFAULT_ENTRIES: tuple[RandEntry, ...] = (
    RandEntry("base_mass", -2.5, 2.5, "Add"),
    RandEntry("kp", 0.8, 1.2, "Scale"),
    RandEntry("kd", 0.8, 1.2, "Scale"),
    RandEntry("ground_static_friction", 0.3, 1.5, "Absolute"),
    RandEntry("ground_dynamic_friction", 0.3, 0.9, "Absolute"),
    RandEntry("base_force_disturbance", -4.0, 4.0, "Absolute"),
    RandEntry("base_torque_disturbance", -2.0, 2.0, "Absolute"),
    RandEntry("table_static_friction", 0.3, 1.3, "Absolute"),
    RandEntry("table_dynamic_friction", 0.3, 1.5, "Absolute"),
    RandEntry("table_restitution", 0.0, 0.5, "Absolute"),
    RandEntry("box_static_friction", 0.3, 1.3, "Absolute"),
    RandEntry("box_dynamic_friction", 0.3, 1.5, "Absolute"),
    RandEntry("box_restitution", 0.0, 0.5, "Absolute"),
    RandEntry("box_mass", -0.88, 1.5, "Add"),
    RandEntry("box_scale_x", 0.75, 1.25, "Scale"),
    RandEntry("box_scale_y", 0.75, 1.25, "Scale"),
    RandEntry("box_com_x", 0.75, 1.25, "Add"),
    RandEntry("box_com_y", 0.75, 1.25, "Add"),
    RandEntry("box_com_z", 0.75, 1.25, "Add"),
)


@dataclass(frozen=True)
class RandDraw:
    values: dict[str, float]
    seed: int


def sample(entries: tuple[RandEntry, ...] | list[RandEntry], seed: int) -> RandDraw:
    """One independent uniform value per entry; deterministic in seed."""
    rng = np.random.default_rng(seed)
    values = {e.name: float(rng.uniform(e.lo, e.hi)) for e in entries}
    return RandDraw(values=values, seed=seed)


def _scale_each(values: tuple[float, ...], s: float) -> tuple[float, ...]:
    return tuple(v * s for v in values)


def apply(draw: RandDraw, nominal: WorldParams) -> WorldParams:
    """Fold a draw into world parameters, returning a new configuration."""
    robot = nominal.robot
    table = nominal.table
    box = nominal.box
    base = nominal.base
    dist_force: Vec3 = nominal.disturbance_force
    dist_torque: Vec3 = nominal.disturbance_torque

    com_frac = [0.0, 0.0, 0.0]  # resolved against the final box extents
    for name, v in draw.values.items():
        if name == "base_mass":
            robot = dataclasses.replace(robot, base_mass=robot.base_mass + v)
        elif name == "kp":
            robot = dataclasses.replace(robot, kp=_scale_each(robot.kp, v))
        elif name == "kd":
            robot = dataclasses.replace(robot, kd=_scale_each(robot.kd, v))
        elif name == "ground_static_friction":
            base = dataclasses.replace(base, ground_static_friction=v)
        elif name == "ground_dynamic_friction":
            base = dataclasses.replace(base, ground_dynamic_friction=v)
        elif name == "base_force_disturbance":
            dist_force = (v, 0.0, 0.0)
        elif name == "base_torque_disturbance":
            dist_torque = (0.0, 0.0, v)
        elif name == "table_static_friction":
            table = dataclasses.replace(table, static_friction=v)
        elif name == "table_dynamic_friction":
            table = dataclasses.replace(table, dynamic_friction=v)
        elif name == "table_restitution":
            table = dataclasses.replace(table, restitution=v)
        elif name == "box_static_friction":
            box = dataclasses.replace(box, static_friction=v)
        elif name == "box_dynamic_friction":
            box = dataclasses.replace(box, dynamic_friction=v)
        elif name == "box_restitution":
            box = dataclasses.replace(box, restitution=v)
        elif name == "box_mass":
            box = dataclasses.replace(box, mass=box.mass + v)
        elif name == "box_scale_x":
            box = dataclasses.replace(box, size=(box.size[0] * v, box.size[1], box.size[2]))
        elif name == "box_scale_y":
            box = dataclasses.replace(box, size=(box.size[0], box.size[1] * v, box.size[2]))
        elif name in ("box_com_x", "box_com_y", "box_com_z"):
            axis = {"box_com_x": 0, "box_com_y": 1, "box_com_z": 2}[name]
            com_frac[axis] += v - 1.0
        else:
            raise ConfigError(f"unknown randomization entry {name!r}")
    if any(com_frac):
        com = tuple(
            box.com_offset[a] + com_frac[a] * 0.5 * box.size[a] for a in range(3)
        )
        box = dataclasses.replace(box, com_offset=com)

    return dataclasses.replace(
        nominal, robot=robot, table=table, box=box, base=base,
        disturbance_force=dist_force, disturbance_torque=dist_torque,
    )


def randomized_params(nominal: WorldParams, seed: int,
                      entries: tuple[RandEntry, ...] = DEFAULT_ENTRIES) -> WorldParams:
    return apply(sample(entries, seed), nominal)


# ---------------------------------------------------------------------------
# Disturbance injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DisturbanceInjector:
    """Piecewise-constant base wrench, held for ``period`` then resampled.

    The wrench at time t depends only on (seed, floor(t / period)), so
    playback is deterministic regardless of query pattern. Force magnitude
    is drawn from the force range and pointed along a random planar
    direction; torque acts about the vertical axis.
    """

    seed: int
    force_range: tuple[float, float] = (-4.0, 4.0)
    torque_range: tuple[float, float] = (-2.0, 2.0)
    period: float = 1.0

    def wrench(self, t: float) -> tuple[Vec3, Vec3]:
        k = int(math.floor(t / self.period))
        rng = np.random.default_rng((self.seed & 0x7FFFFFFF, k & 0x7FFFFFFF))
        f = float(rng.uniform(*self.force_range))
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        tau = float(rng.uniform(*self.torque_range))
        return (f * math.cos(ang), f * math.sin(ang), 0.0), (0.0, 0.0, tau)


# ---------------------------------------------------------------------------
# Observation noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseScales:
    """Zero-mean uniform noise magnitude per observation channel group."""

    joint_pos: float = 0.01
    joint_vel: float = 0.1
    ang_vel: float = 0.05
    gravity: float = 0.02

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0.0:
                raise ConfigError(f"noise scale {f.name} must be >= 0")


def add_uniform_noise(values: tuple[float, ...], magnitude: float,
                      rng: np.random.Generator) -> tuple[float, ...]:
    """Each channel gets an independent draw from [-magnitude, magnitude]."""
    if magnitude == 0.0:
        return values
    return tuple(float(v + rng.uniform(-magnitude, magnitude)) for v in values)
