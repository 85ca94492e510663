"""PPO with generalized advantage estimation, clipped surrogate, bilateral
symmetry loss, and the concurrent supervised estimator update.

Policy and value nets are plain MLPs from the nets module; every gradient is
assembled by hand on the scalar tapes, so the whole update is deterministic
for a fixed seed in single-worker mode.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .control import (
    ActorObsLayout,
    BASE_LAYOUT,
    HistoryBuffer,
    RESIDUAL_FK_LAYOUT,
    RESIDUAL_LAYOUT,
    action_mirror,
    build_base_obs,
    build_base_privileged,
    critic_mirror,
    decode_base_action,
    command_tuple,
    obs_mirror,
)
from .estimator import (
    CurriculumClock,
    EstimatorParams,
    build_input,
    curriculum_blend,
    decode_pose,
    estimate_step_batch,
    init_estimator,
    sequence_update,
)
from .randomization import ConfigError
from .rewards import ActionTrace, Command, RewardWeights, locomotion_reward
from .task import Env, EnvConfig, ScriptedController, Stage, at_goal
from .world import make_initial_state, step as world_step

Array = np.ndarray

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatch_size: int = 8192
    entropy_coef: float = 0.005
    symmetry_weight: float = 0.1
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    horizon: int = 1000
    num_envs: int = 64
    max_grad_norm: float = 1.0

    def validate(self) -> None:
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.lam <= 1.0):
            raise ConfigError("gamma and lambda must lie in (0, 1]")
        if self.clip <= 0.0:
            raise ConfigError("clip ratio must be positive")
        if self.epochs < 1 or self.horizon < 1 or self.num_envs < 1:
            raise ConfigError("epochs, horizon, and num_envs must be >= 1")


# ---------------------------------------------------------------------------
# Gaussian policy with state-independent log std
# ---------------------------------------------------------------------------


@dataclass
class PolicyParams:
    mean_net: nets.MlpParams
    log_std: Array

    def arrays(self) -> list[Array]:
        return self.mean_net.arrays() + [self.log_std]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.mean_net.copy(), self.log_std.copy())

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim


def init_policy(obs_dim: int, action_dim: int, rng: np.random.Generator,
                hidden=(128, 128), init_std: float = 1.0) -> PolicyParams:
    net = nets.init_mlp([obs_dim, *hidden, action_dim], rng, out_gain=0.01)
    return PolicyParams(net, np.full(action_dim, math.log(init_std)))


def init_value_net(obs_dim: int, rng: np.random.Generator,
                   hidden=(128, 128)) -> nets.MlpParams:
    return nets.init_mlp([obs_dim, *hidden, 1], rng, out_gain=1.0)


def policy_mean(policy: PolicyParams, obs: Array) -> Array:
    out, _ = nets.mlp_forward(policy.mean_net, obs)
    return out


def sample_actions(policy: PolicyParams, obs: Array,
                   rng: np.random.Generator) -> tuple[Array, Array]:
    """Draw actions and their log-probabilities for a batch of observations."""
    mean = policy_mean(policy, obs)
    std = np.exp(policy.log_std)
    noise = rng.standard_normal(mean.shape)
    actions = mean + std * noise
    logp = gaussian_log_prob(mean, policy.log_std, actions)
    return actions, logp


def gaussian_log_prob(mean: Array, log_std: Array, actions: Array) -> Array:
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) \
        - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std: Array) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


# ---------------------------------------------------------------------------
# Generalized advantage estimation
# ---------------------------------------------------------------------------


def gae(rewards, values, dones, gamma: float, lam: float,
        normalize: bool = True) -> tuple[Array, Array]:
    """Advantages and returns; ``values`` carries the bootstrap row (T+1).

    Done flags cut the recursion so no credit flows across episode resets.
    With normalize the advantages are shifted/scaled to zero mean and unit
    variance over the whole batch.
    """
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    squeeze = np.asarray(rewards).ndim == 1
    if squeeze:
        r = r.T
    v = np.asarray(values, dtype=np.float64).reshape(r.shape[0] + 1, -1)
    d = np.asarray(dones, dtype=np.float64).reshape(r.shape)
    if v.shape != (r.shape[0] + 1, r.shape[1]):
        raise ValueError("values must include one bootstrap row past rewards")
    adv = np.zeros_like(r)
    carry = np.zeros(r.shape[1])
    for t in range(r.shape[0] - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        carry = delta + gamma * lam * live * carry
        adv[t] = carry
    returns = adv + v[:-1]
    if normalize:
        # Floor rather than add the epsilon so regular batches come out at
        # exactly unit standard deviation.
        adv = (adv - adv.mean()) / max(float(adv.std()), 1e-8)
    if squeeze:
        return adv[:, 0], returns[:, 0]
    return adv, returns


# ---------------------------------------------------------------------------
# Mirror helpers and symmetry loss
# ---------------------------------------------------------------------------


def mirror(x: Array, perm: Array, sign: Array) -> Array:
    """Apply a (perm, sign) channel rule along the last axis."""
    return x[..., perm] * sign


def symmetry_loss(policy: PolicyParams, obs: Array,
                  obs_rule: tuple[Array, Array],
                  act_rule: tuple[Array, Array]) -> float:
    """Mean squared gap between mirror(pi(obs)) and pi(mirror(obs))."""
    operm, osign = obs_rule
    aperm, asign = act_rule
    p = policy_mean(policy, np.atleast_2d(obs))
    q = policy_mean(policy, mirror(np.atleast_2d(obs), operm, osign))
    return float(np.mean((q - mirror(p, aperm, asign)) ** 2))


# ---------------------------------------------------------------------------
# Rollout batch and the PPO update
# ---------------------------------------------------------------------------


@dataclass
class RolloutBatch:
    obs: Array          # (T, N, obs_dim)
    critic_obs: Array   # (T, N, critic_dim)
    actions: Array      # (T, N, act_dim)
    log_probs: Array    # (T, N)
    rewards: Array      # (T, N)
    values: Array       # (T+1, N)
    dones: Array        # (T, N)

    def __post_init__(self) -> None:
        T, N = self.rewards.shape
        for name in ("obs", "critic_obs", "actions"):
            if getattr(self, name).shape[:2] != (T, N):
                raise ValueError(f"{name} does not match rewards shape")
        if self.values.shape != (T + 1, N) or self.dones.shape != (T, N):
            raise ValueError("values/dones shape mismatch")

    def flat(self) -> tuple[Array, Array, Array, Array]:
        T, N = self.rewards.shape
        return (self.obs.reshape(T * N, -1),
                self.critic_obs.reshape(T * N, -1),
                self.actions.reshape(T * N, -1),
                self.log_probs.reshape(T * N))


@dataclass
class ActorCritic:
    actor: PolicyParams
    critic: nets.MlpParams
    actor_opt: nets.AdamState
    critic_opt: nets.AdamState
    obs_rule: tuple[Array, Array]
    critic_rule: tuple[Array, Array]
    act_rule: tuple[Array, Array]


def make_actor_critic(layout: ActorObsLayout, privileged_dim: int,
                      action_dim: int, rng: np.random.Generator,
                      hidden=(128, 128)) -> ActorCritic:
    from .control import critic_dim as _cd
    actor = init_policy(layout.total, action_dim, rng, hidden)
    critic = init_value_net(_cd(layout, privileged_dim), rng, hidden)
    return ActorCritic(
        actor=actor,
        critic=critic,
        actor_opt=nets.adam_init(actor.arrays()),
        critic_opt=nets.adam_init(critic.arrays()),
        obs_rule=obs_mirror(layout),
        critic_rule=critic_mirror(layout, privileged_dim),
        act_rule=action_mirror(action_dim),
    )


class TrainingFault(RuntimeError):
    pass


def _dump_batch(batch: RolloutBatch, dump_dir: str | None) -> str:
    path = os.path.join(dump_dir or ".", "nan_batch.npz")
    np.savez(path, obs=batch.obs, critic_obs=batch.critic_obs,
             actions=batch.actions, log_probs=batch.log_probs,
             rewards=batch.rewards, values=batch.values, dones=batch.dones)
    return path


def ppo_minibatch(ac: ActorCritic, config: PpoConfig, o: Array, co: Array,
                  a: Array, adv: Array, ret: Array, lp_old: Array
                  ) -> tuple[dict, list[Array], list[Array]]:
    """Losses and exact gradients for one minibatch, no parameter update.

    Total objective: clipped surrogate + value_coef * value MSE
    - entropy_coef * entropy + symmetry_weight * mirror-consistency MSE.
    """
    b = len(adv)
    operm, osign = ac.obs_rule
    aperm, asign = ac.act_rule

    mean, tape = nets.mlp_forward(ac.actor.mean_net, o, need_tape=True)
    std = np.exp(ac.actor.log_std)
    z = (a - mean) / std
    lp = (-0.5 * np.sum(z * z, axis=-1) - np.sum(ac.actor.log_std)
          - 0.5 * mean.shape[-1] * LOG_2PI)
    ratio = np.exp(lp - lp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip) * adv
    policy_loss = -float(np.mean(np.minimum(unclipped, clipped)))
    entropy = gaussian_entropy(ac.actor.log_std)

    # Surrogate gradient flows only where the unclipped branch is active;
    # a ratio pushed past the clip with helping advantage contributes none.
    active = (unclipped <= clipped).astype(np.float64)
    dlp = -(adv * ratio * active) / b
    mean_adj = dlp[:, None] * (z / std)                 # dlp/dmean
    dlog_std = dlp @ (z * z - 1.0)                      # dlp/dlog_std
    dlog_std -= config.entropy_coef                     # -coef * dH

    # Symmetry branch: q = pi(mirror(o)) vs m = mirror(pi(o)).
    mo = mirror(o, operm, osign)
    q, mtape = nets.mlp_forward(ac.actor.mean_net, mo, need_tape=True)
    m = mirror(mean, aperm, asign)
    diff = q - m
    sym = float(np.mean(diff * diff))
    q_adj = config.symmetry_weight * 2.0 * diff / diff.size
    scatter = np.zeros_like(mean)
    scatter[:, aperm] = q_adj * asign
    mean_adj -= scatter

    g_main, _ = nets.backward(tape, mean_adj)
    g_sym, _ = nets.backward(mtape, q_adj)
    actor_grads = [gm + gs for gm, gs in zip(g_main, g_sym)]
    actor_grads.append(dlog_std)

    v, vtape = nets.mlp_forward(ac.critic, co, need_tape=True)
    verr = v[:, 0] - ret
    value_loss = 0.5 * float(np.mean(verr * verr))
    v_adj = (config.value_coef * verr / b)[:, None]
    critic_grads, _ = nets.backward(vtape, v_adj)

    losses = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "symmetry_loss": sym,
        "total": (policy_loss + config.value_coef * value_loss
                  - config.entropy_coef * entropy
                  + config.symmetry_weight * sym),
        "kl": float(np.mean(lp_old - lp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip)),
    }
    return losses, actor_grads, critic_grads


def ppo_update(batch: RolloutBatch, config: PpoConfig, ac: ActorCritic,
               rng: np.random.Generator,
               dump_dir: str | None = None) -> dict:
    """Clipped-surrogate PPO epoch loop over shuffled minibatches.

    Returns mean statistics (losses, KL estimate, clip fraction). Non-finite
    losses abort with the offending batch written to disk.
    """
    config.validate()
    adv, returns = gae(batch.rewards, batch.values, batch.dones,
                       config.gamma, config.lam)
    obs, cobs, actions, logp_old = batch.flat()
    adv = adv.reshape(-1)
    returns = returns.reshape(-1)
    n = len(adv)
    stats = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy",
                              "symmetry_loss", "kl", "clip_fraction",
                              "grad_norm")}
    count = 0

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            idx = order[lo:lo + config.minibatch_size]
            losses, actor_grads, critic_grads = ppo_minibatch(
                ac, config, obs[idx], cobs[idx], actions[idx],
                adv[idx], returns[idx], logp_old[idx])
            if not math.isfinite(losses["total"]):
                path = _dump_batch(batch, dump_dir)
                raise TrainingFault(
                    f"non-finite loss {losses['total']!r}; "
                    f"batch dumped to {path}")

            gn = nets.adam_update(ac.actor.arrays(), actor_grads,
                                  ac.actor_opt, lr=config.learning_rate,
                                  max_grad_norm=config.max_grad_norm)
            nets.adam_update(ac.critic.arrays(), critic_grads,
                             ac.critic_opt, lr=config.learning_rate,
                             max_grad_norm=config.max_grad_norm)

            for key in ("policy_loss", "value_loss", "entropy",
                        "symmetry_loss", "kl", "clip_fraction"):
                stats[key] += losses[key]
            stats["grad_norm"] += gn
            count += 1

    for key in stats:
        stats[key] /= max(count, 1)
    return stats


# ---------------------------------------------------------------------------
# Checkpoint packing
# ---------------------------------------------------------------------------


def _mlp_entries(prefix: str, mlp: nets.MlpParams) -> dict[str, Array]:
    out = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def _opt_entries(prefix: str, opt: nets.AdamState) -> dict[str, Array]:
    out = {}
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}.m{i}"] = m
        out[f"{prefix}.v{i}"] = v
    out[f"{prefix}.step"] = np.array([float(opt.step)])
    return out


def _load_opt(prefix: str, arrays: dict[str, Array],
              opt: nets.AdamState) -> None:
    for i in range(len(opt.m)):
        opt.m[i][...] = arrays[f"{prefix}.m{i}"]
        opt.v[i][...] = arrays[f"{prefix}.v{i}"]
    opt.step = int(arrays[f"{prefix}.step"][0])


def pack_actor_critic(ac: ActorCritic,
                      estimator: EstimatorParams | None = None,
                      est_opt: nets.AdamState | None = None
                      ) -> dict[str, Array]:
    arrays = {}
    arrays.update(_mlp_entries("actor", ac.actor.mean_net))
    arrays["actor.log_std"] = ac.actor.log_std
    arrays.update(_mlp_entries("critic", ac.critic))
    arrays.update(_opt_entries("opt.actor", ac.actor_opt))
    arrays.update(_opt_entries("opt.critic", ac.critic_opt))
    if estimator is not None:
        arrays["est.lstm.w_x"] = estimator.lstm.w_x
        arrays["est.lstm.w_h"] = estimator.lstm.w_h
        arrays["est.lstm.b"] = estimator.lstm.b
        arrays.update(_mlp_entries("est.head", estimator.head))
        if est_opt is not None:
            arrays.update(_opt_entries("opt.est", est_opt))
    return arrays


def restore_actor_critic(arrays: dict[str, Array], ac: ActorCritic,
                         estimator: EstimatorParams | None = None,
                         est_opt: nets.AdamState | None = None) -> None:
    for i, (w, b) in enumerate(zip(ac.actor.mean_net.weights,
                                   ac.actor.mean_net.biases)):
        w[...] = arrays[f"actor.w{i}"]
        b[...] = arrays[f"actor.b{i}"]
    ac.actor.log_std[...] = arrays["actor.log_std"]
    for i, (w, b) in enumerate(zip(ac.critic.weights, ac.critic.biases)):
        w[...] = arrays[f"critic.w{i}"]
        b[...] = arrays[f"critic.b{i}"]
    _load_opt("opt.actor", arrays, ac.actor_opt)
    _load_opt("opt.critic", arrays, ac.critic_opt)
    if estimator is not None:
        estimator.lstm.w_x[...] = arrays["est.lstm.w_x"]
        estimator.lstm.w_h[...] = arrays["est.lstm.w_h"]
        estimator.lstm.b[...] = arrays["est.lstm.b"]
        for i, (w, b) in enumerate(zip(estimator.head.weights,
                                       estimator.head.biases)):
            w[...] = arrays[f"est.head.w{i}"]
            b[...] = arrays[f"est.head.b{i}"]
        if est_opt is not None:
            _load_opt("opt.est", arrays, est_opt)


# ---------------------------------------------------------------------------
# Residual training (policy + estimator, curriculum on the pose input)
# ---------------------------------------------------------------------------


VARIANT_LAYOUTS = {
    "adapt": RESIDUAL_LAYOUT,
    "oracle": RESIDUAL_LAYOUT,
    "pure": RESIDUAL_LAYOUT,
    "pure_fk": RESIDUAL_FK_LAYOUT,
}


@dataclass
class ResidualTrainConfig:
    ppo: PpoConfig = field(default_factory=PpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    iterations: int = 200
    curriculum_iterations: int = 120   # clock T, in iterations
    estimator_lr: float = 3e-4
    estimator_window: int = 50
    checkpoint_every: int = 25
    variant: str = "adapt"
    seed: int = 0
    hidden: tuple[int, int] = (128, 128)

    def validate(self) -> None:
        self.ppo.validate()
        if self.variant not in VARIANT_LAYOUTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.iterations < 1 or self.curriculum_iterations < 1:
            raise ConfigError("iteration counts must be >= 1")


def _episode_seed(seed: int, iteration: int, env_idx: int, k: int) -> int:
    rng = np.random.default_rng(
        (seed & 0x7FFFFFFF, 0xEA, iteration, env_idx, k))
    return int(rng.integers(1, 2**31 - 1))


@dataclass
class _EnvSlot:
    env: Env
    history: HistoryBuffer
    h: Array
    c: Array
    episode: int = 0
    ended: int = 0
    whole: int = 0
    reached_carry: bool = False
    carries: int = 0


def collect_residual_rollout(slots: list[_EnvSlot], ac: ActorCritic,
                             estimator: EstimatorParams,
                             config: ResidualTrainConfig,
                             iteration: int, clock: CurriculumClock,
                             rng: np.random.Generator) -> tuple[RolloutBatch,
                                                                dict, dict]:
    """Run `horizon` synchronized steps across all envs with auto-reset.

    Returns the PPO batch, estimator training tensors, and episode stats.
    The pose the policy sees depends on the variant: curriculum blend of
    truth and estimate (adapt), ground truth (oracle), or the raw vision
    measurement (pure / pure_fk).
    """
    T = config.ppo.horizon
    N = len(slots)
    layout = VARIANT_LAYOUTS[config.variant]
    obs_dim = layout.total
    act_dim = ac.actor.action_dim
    est_in = estimator.in_dim
    hidden = estimator.lstm.hidden_size

    obs_buf = np.zeros((T, N, obs_dim))
    critic_buf = np.zeros((T, N, ac.critic.in_dim))
    act_buf = np.zeros((T, N, act_dim))
    logp_buf = np.zeros((T, N))
    rew_buf = np.zeros((T, N))
    done_buf = np.zeros((T, N))
    val_buf = np.zeros((T + 1, N))
    est_in_buf = np.zeros((T, N, est_in))
    est_pos_buf = np.zeros((T, N, 3))
    est_quat_buf = np.zeros((T, N, 4))
    est_quat_buf[..., 0] = 1.0

    # Fresh episodes each iteration; seeds are (seed, iteration, env, k)
    # scoped, which keeps resumed runs identical to uninterrupted ones.
    for i, slot in enumerate(slots):
        slot.episode = 0
        slot.ended = 0
        slot.whole = 0
        slot.carries = 0
        slot.reached_carry = False
        slot.env.reset(_episode_seed(config.seed, iteration, i, slot.episode))
        slot.history.reset()
        slot.h = np.zeros(hidden)
        slot.c = np.zeros(hidden)

    rewards_sum = 0.0
    for t in range(T):
        truths = []
        for i, slot in enumerate(slots):
            env = slot.env
            meas = env.vision()
            est_in_buf[t, i] = build_input(meas, env.proprio(),
                                           env.prev_action)
            truth = env.true_box_pose()
            truths.append((meas, truth))
            est_pos_buf[t, i] = truth.position
            est_quat_buf[t, i] = truth.orientation
        if config.variant == "adapt":
            # One batched estimator tick across all envs per control step.
            h = np.stack([s.h for s in slots])
            c = np.stack([s.c for s in slots])
            out, h2, c2 = estimate_step_batch(estimator, h, c, est_in_buf[t])
            for i, slot in enumerate(slots):
                slot.h, slot.c = h2[i], c2[i]
        for i, slot in enumerate(slots):
            meas, truth = truths[i]
            if config.variant == "adapt":
                pose_in = curriculum_blend(decode_pose(out[i]), truth, clock)
            elif config.variant == "oracle":
                pose_in = truth
            else:
                pose_in = meas.pose
            o = slot.env.observe(pose_in)
            obs_buf[t, i] = o
            slot.history.push(o)
            critic_buf[t, i] = np.concatenate(
                [slot.history.stacked(), slot.env.privileged()])
        actions, logp = sample_actions(ac.actor, obs_buf[t], rng)
        values, _ = nets.mlp_forward(ac.critic, critic_buf[t])
        val_buf[t] = values[:, 0]
        act_buf[t] = actions
        logp_buf[t] = logp

        for i, slot in enumerate(slots):
            res = slot.env.step(tuple(actions[i]))
            rew_buf[t, i] = res.reward.total
            rewards_sum += res.reward.total
            if res.stage is Stage.CARRY and not slot.reached_carry:
                slot.reached_carry = True
                slot.carries += 1
            if res.done:
                done_buf[t, i] = 1.0
                slot.ended += 1
                slot.whole += at_goal(slot.env.world, slot.env.scenario.goal,
                                      slot.env.config.thresholds)
                slot.episode += 1
                slot.env.reset(_episode_seed(
                    config.seed, iteration, i, slot.episode))
                slot.history.reset()
                slot.h = np.zeros(hidden)
                slot.c = np.zeros(hidden)
                slot.reached_carry = False

    # Bootstrap values for the final observation. The terminal critic input
    # shifts the running history and appends a ground-truth-pose view; exact
    # pose sourcing is not required for a bootstrap.
    for i, slot in enumerate(slots):
        o = slot.env.observe(slot.env.true_box_pose())
        stacked = np.concatenate([slot.history.stacked()[obs_dim:], o])
        v, _ = nets.mlp_forward(
            ac.critic, np.concatenate([stacked, slot.env.privileged()]))
        val_buf[T, i] = float(v[0])

    batch = RolloutBatch(obs_buf, critic_buf, act_buf, logp_buf,
                         rew_buf, val_buf, done_buf)
    est_batch = {"inputs": est_in_buf, "pos": est_pos_buf,
                 "quat": est_quat_buf}
    ended = sum(s.ended for s in slots)
    stats = {
        "mean_reward": rewards_sum / (T * N),
        "episodes": ended,
        "whole_rate": (sum(s.whole for s in slots) / ended) if ended else 0.0,
        "carry_rate": (sum(s.carries for s in slots) / max(ended, 1)),
    }
    return batch, est_batch, stats


def train_residual(config: ResidualTrainConfig, out_dir: str,
                   resume: str | None = None,
                   progress=None) -> dict[str, str]:
    """Full residual-policy training loop; returns paths of the artifacts."""
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    layout = VARIANT_LAYOUTS[config.variant]
    env_cfg = replace(config.env, layout=layout)
    rng = np.random.default_rng((config.seed & 0x7FFFFFFF, 0x9C))
    ac = make_actor_critic(layout, 17, 4 + 6, rng, config.hidden)
    probe = Env(env_cfg)
    probe.reset(0)
    est_dim = len(build_input(probe.vision(), probe.proprio(),
                              probe.prev_action))
    estimator = init_estimator(est_dim, rng)
    est_opt = nets.adam_init(estimator.arrays())
    start_iter = 0
    if resume is not None:
        arrays, meta = nets.load_checkpoint(resume)
        restore_actor_critic(arrays, ac, estimator, est_opt)
        start_iter = int(meta.get("iteration", 0))

    hidden = estimator.lstm.hidden_size
    slots = [_EnvSlot(env=Env(env_cfg), history=HistoryBuffer(layout.total),
                      h=np.zeros(hidden), c=np.zeros(hidden))
             for _ in range(config.ppo.num_envs)]

    csv_path = os.path.join(out_dir, "train_residual.csv")
    ckpt_path = os.path.join(out_dir, "policy.ckpt")
    mode = "a" if (resume is not None and os.path.exists(csv_path)) else "w"
    # No wall-clock column: the CSV must be a pure function of the seed.
    fields = ["iteration", "w", "mean_reward", "episodes", "whole_rate",
              "carry_rate", "policy_loss", "value_loss", "entropy",
              "symmetry_loss", "kl", "clip_fraction", "grad_norm",
              "est_loss"]
    with open(csv_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        if mode == "w":
            writer.writeheader()
        for it in range(start_iter, config.iterations):
            t0 = time.perf_counter()
            clock = CurriculumClock(t=float(it),
                                    T=float(config.curriculum_iterations))
            w = clock.weight
            step_rng = np.random.default_rng(
                (config.seed & 0x7FFFFFFF, 0xAC, it))
            batch, est_batch, roll_stats = collect_residual_rollout(
                slots, ac, estimator, config, it, clock, step_rng)
            up_stats = ppo_update(batch, config.ppo, ac, step_rng,
                                  dump_dir=out_dir)
            est_loss = math.nan
            if config.variant == "adapt":
                B = est_batch["inputs"].shape[1]
                est_loss, _, _ = sequence_update(
                    estimator, est_opt, est_batch["inputs"],
                    est_batch["pos"], est_batch["quat"],
                    np.zeros((B, hidden)), np.zeros((B, hidden)),
                    lr=config.estimator_lr, window=config.estimator_window)
            row = {"iteration": it, "w": w, "est_loss": est_loss,
                   "seconds": round(time.perf_counter() - t0, 3),
                   **roll_stats, **up_stats}
            writer.writerow({k: row[k] for k in fields})
            fh.flush()
            if progress is not None:
                progress(row)
            if (it + 1) % config.checkpoint_every == 0 \
                    or it + 1 == config.iterations:
                nets.save_checkpoint(
                    ckpt_path, pack_actor_critic(ac, estimator, est_opt),
                    meta={"iteration": it + 1, "variant": config.variant,
                          "layout": layout.manifest(),
                          "curriculum_w": w,
                          "obs_dim": layout.total,
                          "action_dim": ac.actor.action_dim})
    return {"checkpoint": ckpt_path, "csv": csv_path}


# ---------------------------------------------------------------------------
# Estimator pretraining on scripted episodes
# ---------------------------------------------------------------------------


def collect_scripted_sequences(env_cfg: EnvConfig, seeds: list[int],
                               steps: int = 1000) -> dict[str, Array]:
    """Roll scripted-expert episodes and return estimator training tensors."""
    envs = [Env(env_cfg) for _ in seeds]
    ctrls = []
    for env, s in zip(envs, seeds):
        env.reset(s)
        ctrls.append(ScriptedController(env))
    probe = build_input(envs[0].vision(), envs[0].proprio(),
                        envs[0].prev_action)
    N = len(envs)
    inputs = np.zeros((steps, N, len(probe)))
    pos = np.zeros((steps, N, 3))
    quat = np.zeros((steps, N, 4))
    quat[..., 0] = 1.0
    alive = [True] * N
    for t in range(steps):
        for i, (env, ctrl) in enumerate(zip(envs, ctrls)):
            if not alive[i]:
                inputs[t, i] = inputs[t - 1, i]
                pos[t, i] = pos[t - 1, i]
                quat[t, i] = quat[t - 1, i]
                continue
            meas = env.vision()
            inputs[t, i] = build_input(meas, env.proprio(), env.prev_action)
            truth = env.true_box_pose()
            pos[t, i] = truth.position
            quat[t, i] = truth.orientation
            res = env.step(ctrl.act())
            if res.done:
                alive[i] = False
    return {"inputs": inputs, "pos": pos, "quat": quat}


def pretrain_estimator(env_cfg: EnvConfig, *, episodes: int, seed: int,
                       out_dir: str, batch_envs: int = 10,
                       passes: int = 2, steps: int = 1000, lr: float = 3e-4,
                       window: int = 50, progress=None) -> dict[str, str]:
    """Supervised estimator training from scripted-expert episodes."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng((seed & 0x7FFFFFFF, 0xE5))
    probe_env = Env(env_cfg)
    probe_env.reset(0)
    est_dim = len(build_input(probe_env.vision(), probe_env.proprio(),
                              probe_env.prev_action))
    estimator = init_estimator(est_dim, rng)
    opt = nets.adam_init(estimator.arrays())
    csv_path = os.path.join(out_dir, "estimator_pretrain.csv")
    ckpt_path = os.path.join(out_dir, "estimator.ckpt")
    n_batches = (episodes + batch_envs - 1) // batch_envs
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["batch", "loss"])
        writer.writeheader()
        batches = []
        for b in range(n_batches):
            seeds = [_episode_seed(seed, 0xE5, b, k)
                     for k in range(batch_envs)]
            batches.append(collect_scripted_sequences(env_cfg, seeds, steps))
        step = 0
        for _ in range(passes):
            for data in batches:
                t0 = time.perf_counter()
                B = data["inputs"].shape[1]
                hs = estimator.lstm.hidden_size
                loss, _, _ = sequence_update(
                    estimator, opt, data["inputs"], data["pos"],
                    data["quat"], np.zeros((B, hs)), np.zeros((B, hs)),
                    lr=lr, window=window)
                row = {"batch": step, "loss": loss,
                       "seconds": round(time.perf_counter() - t0, 3)}
                writer.writerow({"batch": step, "loss": loss})
                fh.flush()
                if progress is not None:
                    progress(row)
                step += 1
    arrays = {"est.lstm.w_x": estimator.lstm.w_x,
              "est.lstm.w_h": estimator.lstm.w_h,
              "est.lstm.b": estimator.lstm.b}
    arrays.update(_mlp_entries("est.head", estimator.head))
    nets.save_checkpoint(ckpt_path, arrays,
                         meta={"input_dim": est_dim, "episodes": episodes})
    return {"checkpoint": ckpt_path, "csv": csv_path}


def load_estimator(path: str) -> EstimatorParams:
    arrays, meta = nets.load_checkpoint(path)
    est = init_estimator(int(meta["input_dim"]),
                         np.random.default_rng(0))
    est.lstm.w_x[...] = arrays["est.lstm.w_x"]
    est.lstm.w_h[...] = arrays["est.lstm.w_h"]
    est.lstm.b[...] = arrays["est.lstm.b"]
    for i, (w, b) in enumerate(zip(est.head.weights, est.head.biases)):
        w[...] = arrays[f"est.head.w{i}"]
        b[...] = arrays[f"est.head.b{i}"]
    return est


# ---------------------------------------------------------------------------
# Base-policy validation training (locomotion only)
# ---------------------------------------------------------------------------


@dataclass
class BaseTrainConfig:
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(
        horizon=300, num_envs=16, minibatch_size=2400))
    iterations: int = 50
    seed: int = 0
    randomize_commands: bool = True
    hidden: tuple[int, int] = (64, 64)


def _sample_command(rng: np.random.Generator) -> Command:
    return Command(vx=float(rng.uniform(-1.0, 1.0)),
                   vy=float(rng.uniform(-0.5, 0.5)),
                   yaw_rate=float(rng.uniform(-1.5, 1.5)),
                   height=float(rng.uniform(0.60, 0.80)))


def train_base(config: BaseTrainConfig, out_dir: str,
               progress=None) -> dict[str, str]:
    """Locomotion-only PPO run on the planar base with random commands.

    Watches the command-tracking reward group; serves as a fast framework
    validation rather than a component of the residual pipeline.
    """
    config.ppo.validate()
    os.makedirs(out_dir, exist_ok=True)
    from .world import TableParams, WorldParams

    params = WorldParams(table=TableParams(center=(100.0, 100.0)))
    weights = RewardWeights()
    rng = np.random.default_rng((config.seed & 0x7FFFFFFF, 0xB5))
    ac = make_actor_critic(BASE_LAYOUT, 3, 4, rng, config.hidden)
    T, N = config.ppo.horizon, config.ppo.num_envs

    csv_path = os.path.join(out_dir, "train_base.csv")
    ckpt_path = os.path.join(out_dir, "base_policy.ckpt")
    fields = ["iteration", "mean_reward", "tracking", "policy_loss",
              "value_loss", "entropy", "symmetry_loss", "kl",
              "clip_fraction", "grad_norm"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for it in range(config.iterations):
            t0 = time.perf_counter()
            it_rng = np.random.default_rng(
                (config.seed & 0x7FFFFFFF, 0xB6, it))
            states = [make_initial_state(params) for _ in range(N)]
            cmds = [_sample_command(it_rng) if config.randomize_commands
                    else Command(vx=0.5) for _ in range(N)]
            histories = [HistoryBuffer(BASE_LAYOUT.total) for _ in range(N)]
            traces = [ActionTrace.reset((0.0,) * 4) for _ in range(N)]
            prev = [(0.0,) * 4 for _ in range(N)]

            obs_buf = np.zeros((T, N, BASE_LAYOUT.total))
            critic_buf = np.zeros((T, N, ac.critic.in_dim))
            act_buf = np.zeros((T, N, 4))
            logp_buf = np.zeros((T, N))
            rew_buf = np.zeros((T, N))
            done_buf = np.zeros((T, N))
            val_buf = np.zeros((T + 1, N))
            tracking = 0.0

            for t in range(T):
                for i in range(N):
                    o = build_base_obs(states[i], cmds[i], prev[i])
                    obs_buf[t, i] = o
                    histories[i].push(o)
                    critic_buf[t, i] = np.concatenate(
                        [histories[i].stacked(),
                         build_base_privileged(states[i])])
                actions, logp = sample_actions(ac.actor, obs_buf[t], it_rng)
                values, _ = nets.mlp_forward(ac.critic, critic_buf[t])
                val_buf[t] = values[:, 0]
                act_buf[t] = actions
                logp_buf[t] = logp
                for i in range(N):
                    raw = tuple(actions[i])
                    cmd = decode_base_action(raw)
                    states[i] = world_step(
                        params, states[i], params.robot.q_def,
                        command_tuple(cmd))
                    prev[i] = raw
                    traces[i] = traces[i].push(raw)
                    b = locomotion_reward(states[i], cmds[i], traces[i],
                                          weights)
                    rew_buf[t, i] = b.total
                    tracking += (b.terms["track_lin_vel"]
                                 + b.terms["track_yaw_rate"]
                                 + b.terms["track_height"])
            for i in range(N):
                o = build_base_obs(states[i], cmds[i], prev[i])
                stacked = np.concatenate(
                    [histories[i].stacked()[BASE_LAYOUT.total:], o])
                v, _ = nets.mlp_forward(
                    ac.critic,
                    np.concatenate([stacked,
                                    build_base_privileged(states[i])]))
                val_buf[T, i] = float(v[0])

            batch = RolloutBatch(obs_buf, critic_buf, act_buf, logp_buf,
                                 rew_buf, val_buf, done_buf)
            stats = ppo_update(batch, config.ppo, ac, it_rng,
                               dump_dir=out_dir)
            row = {"iteration": it,
                   "mean_reward": float(rew_buf.mean()),
                   "tracking": tracking / (T * N),
                   "seconds": round(time.perf_counter() - t0, 3), **stats}
            writer.writerow({k: row[k] for k in fields})
            fh.flush()
            if progress is not None:
                progress(row)
        nets.save_checkpoint(
            ckpt_path, pack_actor_critic(ac),
            meta={"iteration": config.iterations,
                  "layout": BASE_LAYOUT.manifest(),
                  "obs_dim": BASE_LAYOUT.total, "action_dim": 4})
    return {"checkpoint": ckpt_path, "csv": csv_path}
