"""Episode scoring, aggregation, and the baseline-variant evaluation matrix.

Metric definitions used throughout (the success columns are stage-entry
flags, the whole-task flag is an end-state check):

- stage1: the episode reached the grasp stage (robot got within approach
  distance of the box).
- stage2: the episode reached the carry stage (box lifted with a held
  bimanual grip).
- whole: at the final recorded step the box sits within the delivery
  tolerance (0.15 m position, 30 degrees yaw by default) of the target,
  quasi-statically (speed bounds), and the episode actually passed through
  the carry stage. The last conjunct keeps whole <= stage2 <= stage1 even
  on adversarial traces.
- drops: lifted box lost all hand contact and then descended below the
  lift threshold. Regrasps: bimanual contact re-established after any
  post-first-grasp contact loss.

Evaluation runs each variant under two dynamics profiles with identical
scenario seeds: "training" (nominal constants) and "perturbed" (contact
stiffness x2, contact damping x0.5, 8 integrator substeps instead of 4,
and the smooth-tanh friction model instead of the velocity clamp).

An imitation-learning baseline row is deliberately omitted from reports:
scoring one would require demonstration data this package does not ship.
Report summaries carry a note saying so.
"""

from __future__ import annotations

import csv
import gzip
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .control import RESIDUAL_FK_LAYOUT, RESIDUAL_LAYOUT
from .estimator import (
    EstimatorParams,
    ZeroOrderHold,
    build_input,
    decode_pose,
    estimate_step_batch,
    init_estimator,
)
from .geometry import quat_geodesic_angle, wrap_angle, yaw_of_quat
from .learn import PolicyParams, policy_mean
from .task import Env, EnvConfig, ScriptedController, Stage
from .world import WorldParams

Array = np.ndarray

TRACE_VERSION = 1
PROFILES = ("training", "perturbed")

IL_BASELINE_NOTE = ("imitation-learning baseline omitted: no demonstration "
                    "dataset ships with this package")


class EvalError(RuntimeError):
    pass


class CompatibilityError(EvalError):
    """Checkpoint does not match the variant's observation contract."""


# ---------------------------------------------------------------------------
# Variants
# ---------------------------------------------------------------------------

# name -> (pose-source key, actor observation layout)
VARIANT_SPECS = {
    "Oracle": ("oracle", RESIDUAL_LAYOUT),
    "AdaptManip": ("adapt", RESIDUAL_LAYOUT),
    "PureRL": ("pure", RESIDUAL_LAYOUT),
    "PureRLFK": ("pure", RESIDUAL_FK_LAYOUT),
}


@dataclass(frozen=True)
class BaselineVariant:
    name: str
    checkpoint: str

    def __post_init__(self) -> None:
        if self.name not in VARIANT_SPECS:
            raise EvalError(f"unknown variant {self.name!r}; expected one "
                            f"of {sorted(VARIANT_SPECS)}")

    @property
    def pose_source(self) -> str:
        return VARIANT_SPECS[self.name][0]

    @property
    def layout(self):
        return VARIANT_SPECS[self.name][1]


def load_policy(path: str) -> tuple[PolicyParams, dict,
                                    EstimatorParams | None]:
    """Rebuild the actor (and estimator, when present) from a checkpoint."""
    arrays, meta = nets.load_checkpoint(path)
    weights, biases = [], []
    i = 0
    while f"actor.w{i}" in arrays:
        weights.append(arrays[f"actor.w{i}"])
        biases.append(arrays[f"actor.b{i}"])
        i += 1
    if not weights or "actor.log_std" not in arrays:
        raise CompatibilityError(f"{path}: no actor parameters found")
    policy = PolicyParams(nets.MlpParams(weights, biases),
                          arrays["actor.log_std"])
    estimator = None
    if "est.lstm.w_x" in arrays:
        estimator = init_estimator(arrays["est.lstm.w_x"].shape[0],
                                   np.random.default_rng(0))
        estimator.lstm.w_x[...] = arrays["est.lstm.w_x"]
        estimator.lstm.w_h[...] = arrays["est.lstm.w_h"]
        estimator.lstm.b[...] = arrays["est.lstm.b"]
        for j, (w, b) in enumerate(zip(estimator.head.weights,
                                       estimator.head.biases)):
            w[...] = arrays[f"est.head.w{j}"]
            b[...] = arrays[f"est.head.b{j}"]
    return policy, meta, estimator


def check_compatibility(variant: BaselineVariant, meta: dict,
                        has_estimator: bool) -> None:
    """Reject checkpoints whose observation contract differs, with a diff."""
    expected = variant.layout.manifest()
    got = meta.get("layout")
    if got != expected:
        lines = [f"checkpoint incompatible with variant {variant.name}:"]
        exp_map = {name: size for name, size in expected}
        got_map = {name: size for name, size in (got or [])}
        for name in sorted(set(exp_map) | set(got_map)):
            a, b = exp_map.get(name), got_map.get(name)
            if a != b:
                lines.append(f"  span {name!r}: expected {a}, checkpoint "
                             f"has {b}")
        raise CompatibilityError("\n".join(lines))
    if variant.pose_source == "adapt" and not has_estimator:
        raise CompatibilityError(
            f"variant {variant.name} needs estimator parameters, but the "
            f"checkpoint carries none")


# ---------------------------------------------------------------------------
# Dynamics profiles
# ---------------------------------------------------------------------------


def perturbed_params(params: WorldParams) -> WorldParams:
    contact = replace(
        params.contact,
        stiffness=params.contact.stiffness * 2.0,
        damping=params.contact.damping * 0.5,
        tangential_stiffness=params.contact.tangential_stiffness * 2.0,
        tangential_damping=params.contact.tangential_damping * 0.5,
        friction_model="tanh")
    return replace(params, substeps=8, contact=contact)


def profile_params(params: WorldParams, profile: str) -> WorldParams:
    if profile == "training":
        return params
    if profile == "perturbed":
        return perturbed_params(params)
    raise EvalError(f"unknown dynamics profile {profile!r}; expected one "
                    f"of {PROFILES}")


# ---------------------------------------------------------------------------
# Trace recording
# ---------------------------------------------------------------------------


def _round3(values) -> list[float]:
    return [float(v) for v in values]


def trace_header(env: Env, seed: int, variant: str, profile: str) -> dict:
    th = env.config.thresholds
    goal = env.scenario.goal
    return {
        "type": "header",
        "version": TRACE_VERSION,
        "seed": seed,
        "variant": variant,
        "profile": profile,
        "control_dt": env.params.control_dt,
        "goal": {"p": _round3(goal.box_position),
                 "yaw": yaw_of_quat(goal.box_orientation)},
        "thresholds": {
            "goal_pos_tol": th.goal_pos_tol,
            "goal_yaw_tol": th.goal_yaw_tol,
            "settle_speed": th.settle_speed,
            "settle_ang_speed": th.settle_ang_speed,
        },
    }


def trace_step(env: Env, stage: Stage, events: list[dict], reward: float,
               est: dict | None) -> dict:
    world = env.world
    box = world.box
    return {
        "type": "step",
        "t": world.time,
        "stage": stage.value,
        "events": events,
        "box": {"p": _round3(box.pose.position),
                "q": _round3(box.pose.orientation),
                "v": _round3(box.twist.linear),
                "w": _round3(box.twist.angular)},
        "root": _round3(world.base.position) + [world.base.yaw],
        "hands": [world.contacts.hands[0].touching,
                  world.contacts.hands[1].touching],
        "table_contacts": world.contacts.box_table_contacts,
        "reward": reward,
        "est": est,
    }


def trace_end(termination) -> dict:
    return {"type": "end",
            "termination": termination.name if termination else None}


def write_traces(path: str, traces: list[list[dict]]) -> None:
    """One JSON-encoded episode per line; gzip when the path says so."""
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace, separators=(",", ":")) + "\n")


def read_traces(path: str) -> list[list[dict]]:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    whole: bool
    stage1: bool
    stage2: bool
    drops: int
    regrasps: int
    termination: str | None
    partial: bool = False
    pos_err: Array = field(default_factory=lambda: np.zeros(0))
    ang_err: Array = field(default_factory=lambda: np.zeros(0))
    zoh_pos_err: Array = field(default_factory=lambda: np.zeros(0))
    zoh_ang_err: Array = field(default_factory=lambda: np.zeros(0))
    visible: Array = field(default_factory=lambda: np.zeros(0, dtype=bool))
    contact: Array = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        if self.drops < 0 or self.regrasps < 0:
            raise ValueError("event counts must be non-negative")
        if (self.whole and not self.stage2) or \
                (self.stage2 and not self.stage1):
            raise ValueError("stage flags must satisfy "
                             "whole <= stage2 <= stage1")


_STAGE1 = {Stage.GRASP_LIFT.value, Stage.CARRY.value, Stage.DONE.value}
_STAGE2 = {Stage.CARRY.value, Stage.DONE.value}


def score_episode(trace: list[dict]) -> EpisodeMetrics:
    """Pure trace -> metrics map; rescoring a logged trace is exact.

    A trace missing its end record is scored from what is present and
    marked partial.
    """
    if not trace or trace[0].get("type") != "header":
        raise EvalError("trace must start with a header record")
    header = trace[0]
    steps = [r for r in trace if r.get("type") == "step"]
    if not steps:
        raise EvalError("trace has no step records")
    ends = [r for r in trace if r.get("type") == "end"]
    partial = not ends
    termination = ends[-1]["termination"] if ends else None

    stages = {s["stage"] for s in steps}
    stage1 = bool(stages & _STAGE1)
    stage2 = bool(stages & _STAGE2)
    drops = sum(1 for s in steps for e in s["events"]
                if e["event"] == "drop")
    regrasps = sum(1 for s in steps for e in s["events"]
                   if e["event"] == "regrasp")

    last = steps[-1]
    goal = header["goal"]
    th = header["thresholds"]
    bp = last["box"]["p"]
    err = math.sqrt(sum((a - b) ** 2 for a, b in zip(bp, goal["p"])))
    yaw = yaw_of_quat(tuple(last["box"]["q"]))
    dyaw = abs(wrap_angle(yaw - goal["yaw"]))
    speed = math.sqrt(sum(v * v for v in last["box"]["v"]))
    ang_speed = math.sqrt(sum(w * w for w in last["box"]["w"]))
    end_ok = (err <= th["goal_pos_tol"] and dyaw <= th["goal_yaw_tol"]
              and speed <= th["settle_speed"]
              and ang_speed <= th["settle_ang_speed"])
    whole = end_ok and stage2

    est_steps = [s for s in steps if s.get("est")]
    def col(key, dtype=float):
        return np.array([s["est"][key] for s in est_steps], dtype=dtype)
    if est_steps:
        metrics_est = {
            "pos_err": col("pos"), "ang_err": col("ang"),
            "zoh_pos_err": col("zoh_pos"), "zoh_ang_err": col("zoh_ang"),
            "visible": col("visible", bool), "contact": col("contact", bool),
        }
    else:
        metrics_est = {}
    return EpisodeMetrics(whole=whole, stage1=stage1, stage2=stage2,
                          drops=drops, regrasps=regrasps,
                          termination=termination, partial=partial,
                          **metrics_est)


METRIC_COLUMNS = ("whole", "stage1", "stage2", "drops", "regrasps")


def aggregate(episodes: list[EpisodeMetrics]) -> dict[str, tuple[float,
                                                                 float]]:
    """Per-column mean and population standard deviation."""
    if not episodes:
        raise EvalError("cannot aggregate zero episodes")
    out = {}
    for col in METRIC_COLUMNS:
        values = np.array([float(getattr(m, col)) for m in episodes])
        out[col] = (float(values.mean()), float(values.std()))
    return out


# ---------------------------------------------------------------------------
# Episode rollout under a variant
# ---------------------------------------------------------------------------


def run_policy_episode(env_cfg: EnvConfig, params: WorldParams,
                       policy: PolicyParams,
                       estimator: EstimatorParams | None,
                       pose_source: str, seed: int,
                       variant_name: str = "", profile: str = "training",
                       max_steps: int = 1500) -> list[dict]:
    """Deterministic (mean-action) episode; returns the JSONL-ready trace."""
    env = Env(replace(env_cfg, params=params, randomize=False))
    env.reset(seed)
    trace = [trace_header(env, seed, variant_name, profile)]
    h = c = None
    if pose_source == "adapt":
        if estimator is None:
            raise EvalError("adapt pose source requires an estimator")
        h = np.zeros((1, estimator.lstm.hidden_size))
        c = np.zeros((1, estimator.lstm.hidden_size))
    zoh = ZeroOrderHold()
    termination = None
    for _ in range(max_steps):
        meas = env.vision()
        truth = env.true_box_pose()
        est_record = None
        if pose_source == "adapt":
            inp = build_input(meas, env.proprio(), env.prev_action)
            out, h, c = estimate_step_batch(estimator, h, c, inp[None, :])
            estimate = decode_pose(out[0])
            pose_in = estimate
            held = zoh.update(meas)
            touching = any(hc.touching for hc in env.world.contacts.hands)
            est_record = {
                "pos": _dist(estimate.position, truth.position),
                "ang": quat_geodesic_angle(estimate.orientation,
                                           truth.orientation),
                "zoh_pos": _dist(held.position, truth.position),
                "zoh_ang": quat_geodesic_angle(held.orientation,
                                               truth.orientation),
                "visible": meas.valid,
                "contact": touching,
            }
        elif pose_source == "oracle":
            pose_in = truth
        else:
            pose_in = meas.pose
        obs = env.observe(pose_in)
        action = policy_mean(policy, obs[None, :])[0]
        res = env.step(tuple(action))
        trace.append(trace_step(env, res.stage, res.events,
                                res.reward.total, est_record))
        if res.done:
            termination = res.termination
            break
    trace.append(trace_end(termination))
    return trace


def _dist(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def run_estimator_episode(env_cfg: EnvConfig, estimator: EstimatorParams,
                          seed: int, max_steps: int = 1500) -> list[dict]:
    """Scripted-expert episode with the estimator and ZOH riding along.

    The vision model already declares measurements invalid while either
    hand touches the box, which is exactly the occluded-contact protocol
    the error report needs.
    """
    env = Env(env_cfg)
    env.reset(seed)
    ctrl = ScriptedController(env)
    trace = [trace_header(env, seed, "scripted", "training")]
    h = np.zeros((1, estimator.lstm.hidden_size))
    c = np.zeros((1, estimator.lstm.hidden_size))
    zoh = ZeroOrderHold()
    termination = None
    for _ in range(max_steps):
        meas = env.vision()
        truth = env.true_box_pose()
        inp = build_input(meas, env.proprio(), env.prev_action)
        out, h, c = estimate_step_batch(estimator, h, c, inp[None, :])
        estimate = decode_pose(out[0])
        held = zoh.update(meas)
        touching = any(hc.touching for hc in env.world.contacts.hands)
        est_record = {
            "pos": _dist(estimate.position, truth.position),
            "ang": quat_geodesic_angle(estimate.orientation,
                                       truth.orientation),
            "zoh_pos": _dist(held.position, truth.position),
            "zoh_ang": quat_geodesic_angle(held.orientation,
                                           truth.orientation),
            "visible": meas.valid,
            "contact": touching,
        }
        res = env.step(ctrl.act())
        trace.append(trace_step(env, res.stage, res.events,
                                res.reward.total, est_record))
        if res.done:
            termination = res.termination
            break
    trace.append(trace_end(termination))
    return trace


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    variant: str
    profile: str
    episodes: int
    columns: dict  # column -> (mean, std)


EPISODE_FIELDS = ("variant", "profile", "index", "seed", "whole", "stage1",
                  "stage2", "drops", "regrasps", "termination", "partial")


def episode_row(variant: str, profile: str, index: int, seed: int,
                m: EpisodeMetrics) -> dict:
    return {"variant": variant, "profile": profile, "index": index,
            "seed": seed, "whole": int(m.whole), "stage1": int(m.stage1),
            "stage2": int(m.stage2), "drops": m.drops,
            "regrasps": m.regrasps, "termination": m.termination or "",
            "partial": int(m.partial)}


def write_episode_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(EPISODE_FIELDS))
        writer.writeheader()
        writer.writerows(rows)


@dataclass
class AblationReport:
    rows: list[ReportRow]
    episode_rows: list[dict] = field(default_factory=list)
    note: str = IL_BASELINE_NOTE

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["variant", "profile", "episodes"]
            for col in METRIC_COLUMNS:
                header += [f"{col}_mean", f"{col}_std"]
            writer.writerow(header)
            for row in self.rows:
                out = [row.variant, row.profile, row.episodes]
                for col in METRIC_COLUMNS:
                    mean, std = row.columns[col]
                    out += [repr(mean), repr(std)]
                writer.writerow(out)

    def summary(self) -> str:
        lines = ["variant        profile     n    " + "  ".join(
            f"{c:>14}" for c in METRIC_COLUMNS)]
        for row in self.rows:
            cells = "  ".join(
                f"{row.columns[c][0]:6.3f} +-{row.columns[c][1]:5.3f}"
                for c in METRIC_COLUMNS)
            lines.append(f"{row.variant:<14} {row.profile:<10} "
                         f"{row.episodes:>4} {cells}")
        lines.append(f"note: {self.note}")
        return "\n".join(lines)


def _episode_worker(args) -> list[dict]:
    (env_cfg, params, policy, estimator, pose_source, seed, name,
     profile) = args
    return run_policy_episode(env_cfg, params, policy, estimator,
                              pose_source, seed, name, profile)


def run_ablation(variants: list[BaselineVariant], env_cfg: EnvConfig,
                 n: int, seed: int, profiles=PROFILES, workers: int = 1,
                 trace_dir: str | None = None,
                 progress=None) -> AblationReport:
    """Evaluate every variant under every profile with identical seeds."""
    seeds = [int(s) for s in np.random.default_rng(
        (seed & 0x7FFFFFFF, 0xAB1)).integers(1, 2**31 - 1, size=n)]
    loaded = []
    for variant in variants:
        policy, meta, estimator = load_policy(variant.checkpoint)
        check_compatibility(variant, meta, estimator is not None)
        loaded.append((variant, policy, estimator))

    rows = []
    episode_rows = []
    for variant, policy, estimator in loaded:
        for profile in profiles:
            params = profile_params(env_cfg.params, profile)
            jobs = [(env_cfg, params, policy, estimator,
                     variant.pose_source, s, variant.name, profile)
                    for s in seeds]
            if workers > 1:
                import multiprocessing as mp
                with mp.get_context("fork").Pool(workers) as pool:
                    traces = pool.map(_episode_worker, jobs)
            else:
                traces = [_episode_worker(job) for job in jobs]
            metrics = [score_episode(t) for t in traces]
            rows.append(ReportRow(variant.name, profile, len(metrics),
                                  aggregate(metrics)))
            episode_rows += [episode_row(variant.name, profile, i, s, m)
                             for i, (s, m) in enumerate(zip(seeds, metrics))]
            if trace_dir is not None:
                os.makedirs(trace_dir, exist_ok=True)
                write_traces(os.path.join(
                    trace_dir, f"{variant.name}_{profile}.jsonl.gz"), traces)
            if progress is not None:
                progress(rows[-1])
    return AblationReport(rows, episode_rows)


# ---------------------------------------------------------------------------
# Estimator error curves
# ---------------------------------------------------------------------------


def estimator_error_report(episodes: list[EpisodeMetrics],
                           control_dt: float = 0.02,
                           path: str | None = None) -> list[dict]:
    """Per-timestep error statistics with visibility/contact annotations.

    Episodes of different lengths contribute up to their own final step;
    statistics at each index cover the episodes still running there.
    """
    lengths = [len(m.pos_err) for m in episodes]
    if not episodes or max(lengths, default=0) == 0:
        raise EvalError("no estimator traces in the supplied episodes")
    T = max(lengths)

    def padded(attr, fill=np.nan):
        out = np.full((len(episodes), T), fill)
        for i, m in enumerate(episodes):
            arr = getattr(m, attr)
            out[i, :len(arr)] = arr
        return out

    pos = padded("pos_err")
    ang = padded("ang_err")
    zoh_pos = padded("zoh_pos_err")
    zoh_ang = padded("zoh_ang_err")
    vis = padded("visible")
    con = padded("contact")
    rows = []
    for t in range(T):
        alive = ~np.isnan(pos[:, t])
        if not alive.any():
            continue
        rows.append({
            "step": t,
            "time": t * control_dt,
            "episodes": int(alive.sum()),
            "pos_mean": float(np.nanmean(pos[:, t])),
            "pos_std": float(np.nanstd(pos[:, t])),
            "ang_mean": float(np.nanmean(ang[:, t])),
            "ang_std": float(np.nanstd(ang[:, t])),
            "zoh_pos_mean": float(np.nanmean(zoh_pos[:, t])),
            "zoh_ang_mean": float(np.nanmean(zoh_ang[:, t])),
            "visible_frac": float(np.nanmean(vis[:, t])),
            "contact_frac": float(np.nanmean(con[:, t])),
        })
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def occluded_contact_errors(episodes: list[EpisodeMetrics]
                            ) -> tuple[float, float, float]:
    """(estimator RMSE, ZOH RMSE, fraction of episodes the estimator wins)
    over the occluded-contact steps (vision invalid AND in contact)."""
    est_sq, zoh_sq = [], []
    wins = 0
    counted = 0
    for m in episodes:
        mask = (~m.visible) & m.contact
        if not mask.any():
            continue
        counted += 1
        e = m.pos_err[mask]
        z = m.zoh_pos_err[mask]
        est_sq.append(np.mean(e ** 2))
        zoh_sq.append(np.mean(z ** 2))
        if math.sqrt(np.mean(e ** 2)) < math.sqrt(np.mean(z ** 2)):
            wins += 1
    if not counted:
        raise EvalError("no occluded-contact steps in the supplied episodes")
    return (math.sqrt(float(np.mean(est_sq))),
            math.sqrt(float(np.mean(zoh_sq))),
            wins / counted)
