"""Recurrent box-pose estimator with masked vision and training curriculum.

The estimator consumes, per 50 Hz control tick, a vision measurement
(relative box pose in the robot base frame, zeroed when invalid),
proprioception, and the previous action. An LSTM plus an MLP head emits
position (raw) and orientation (rotation-vector head). Training is
supervised against ground-truth relative poses; the orientation loss is the
squared geodesic angle with an exact analytic gradient.

``curriculum_blend`` mixes the estimate into the policy input, replacing
ground truth as training progresses: X_in = w X_est + (1 - w) X_gt with
w = min(t / T, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nets
from .geometry import (
    IDENTITY_QUAT,
    Pose6,
    Quat,
    Vec3,
    quat_conj,
    quat_from_rotvec,
    quat_geodesic_angle,
    quat_mul,
    quat_slerp,
    relative_pose,
    rotvec_from_quat,
)
from .nets import Array
from .world import WorldState

HIDDEN_SIZE = 128
POSE_CHANNELS = 6  # position (3) + rotation vector (3)


# ---------------------------------------------------------------------------
# Vision model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraConfig:
    """Forward-facing cone camera with contact occlusion and dropout."""

    half_angle: float = math.radians(40.0)
    min_range: float = 0.3
    max_range: float = 3.0
    occlude_on_contact: bool = True
    dropout: float = 0.0


@dataclass(frozen=True)
class MeasurementNoise:
    position_sigma: float = 0.005
    orientation_sigma: float = math.radians(1.0)


@dataclass(frozen=True)
class VisionMeasurement:
    pose: Pose6
    valid: bool

    def channels(self) -> tuple[float, ...]:
        """6-channel encoding, exactly zero when the measurement is invalid."""
        if not self.valid:
            return (0.0,) * POSE_CHANNELS
        return self.pose.position + rotvec_from_quat(self.pose.orientation)


INVALID_MEASUREMENT = VisionMeasurement(
    Pose6((0.0, 0.0, 0.0), IDENTITY_QUAT), False)


def visibility(world: WorldState, camera: CameraConfig,
               rng: np.random.Generator | None = None) -> bool:
    """True iff the box center sits in the forward view cone, no hand is in
    contact (when contact occlusion is on), and the dropout coin passes."""
    base = world.base.pose()
    rel = relative_pose(world.box.pose, base).position
    dist = math.sqrt(rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2)
    if not camera.min_range <= dist <= camera.max_range:
        return False
    if rel[0] < dist * math.cos(camera.half_angle):
        return False
    if camera.occlude_on_contact and any(h.touching for h in world.contacts.hands):
        return False
    if camera.dropout > 0.0 and rng is not None:
        if rng.uniform() < camera.dropout:
            return False
    return True


def true_relative_pose(world: WorldState) -> Pose6:
    return relative_pose(world.box.pose, world.base.pose())


def measure(world: WorldState, visible: bool, noise: MeasurementNoise,
            rng: np.random.Generator | None = None) -> VisionMeasurement:
    """Noisy relative box pose when visible; zeroed channels otherwise."""
    if not visible:
        return INVALID_MEASUREMENT
    rel = true_relative_pose(world)
    if rng is None or (noise.position_sigma == 0.0 and noise.orientation_sigma == 0.0):
        return VisionMeasurement(rel, True)
    dp = rng.normal(0.0, noise.position_sigma, 3)
    dr = rng.normal(0.0, noise.orientation_sigma, 3)
    pos = (rel.position[0] + dp[0], rel.position[1] + dp[1], rel.position[2] + dp[2])
    q = quat_mul(rel.orientation, quat_from_rotvec((dr[0], dr[1], dr[2])))
    return VisionMeasurement(Pose6(pos, q), True)


class ZeroOrderHold:
    """Vision baseline: hold the last valid measurement through occlusion.

    Before the first fix it reports the identity relative pose (the same
    cold start the estimator decodes from a zero head output).
    """

    def __init__(self) -> None:
        self.last = Pose6((0.0, 0.0, 0.0), IDENTITY_QUAT)

    def update(self, meas: VisionMeasurement) -> Pose6:
        if meas.valid:
            self.last = meas.pose
        return self.last


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumClock:
    t: float
    T: float

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError("iteration must be non-negative")
        if self.T <= 0:
            raise ValueError("maximum iteration must be positive")

    @property
    def weight(self) -> float:
        return min(self.t / self.T, 1.0)


def curriculum_blend(estimate: Pose6, ground_truth: Pose6,
                     clock: CurriculumClock) -> Pose6:
    """X_in = w X_est + (1 - w) X_gt, geometric blend, exact endpoints."""
    w = clock.weight
    if w <= 0.0:
        return ground_truth
    if w >= 1.0:
        return estimate
    p_gt, p_es = ground_truth.position, estimate.position
    pos = (
        p_gt[0] + w * (p_es[0] - p_gt[0]),
        p_gt[1] + w * (p_es[1] - p_gt[1]),
        p_gt[2] + w * (p_es[2] - p_gt[2]),
    )
    return Pose6(pos, quat_slerp(ground_truth.orientation, estimate.orientation, w))


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class EstimatorParams:
    lstm: nets.LstmParams
    head: nets.MlpParams

    def arrays(self) -> list[Array]:
        return self.lstm.arrays() + self.head.arrays()

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(self.lstm.copy(), self.head.copy())

    @property
    def in_dim(self) -> int:
        return self.lstm.in_dim


@dataclass
class EstimatorState:
    h: Array  # (hidden,) single env or (B, hidden) batched
    c: Array
    estimate: Pose6


def init_estimator(input_dim: int, rng: np.random.Generator,
                   hidden: int = HIDDEN_SIZE) -> EstimatorParams:
    lstm = nets.init_lstm(input_dim, hidden, rng)
    head = nets.init_mlp([hidden, 64, POSE_CHANNELS], rng, out_gain=0.01)
    return EstimatorParams(lstm, head)


def initial_state(params: EstimatorParams, batch: int | None = None) -> EstimatorState:
    hs = params.lstm.hidden_size
    shape = (hs,) if batch is None else (batch, hs)
    return EstimatorState(np.zeros(shape), np.zeros(shape),
                          Pose6((0.0, 0.0, 0.0), IDENTITY_QUAT))


def decode_pose(out: Array) -> Pose6:
    """Head output -> pose: raw position, rotation-vector orientation."""
    return Pose6((float(out[0]), float(out[1]), float(out[2])),
                 quat_from_rotvec((float(out[3]), float(out[4]), float(out[5]))))


def build_input(vision: VisionMeasurement, proprio: tuple[float, ...],
                prev_action: tuple[float, ...]) -> Array:
    flag = 1.0 if vision.valid else 0.0
    return np.array(vision.channels() + (flag,) + tuple(proprio) + tuple(prev_action))


def estimate_step(params: EstimatorParams, state: EstimatorState,
                  vision: VisionMeasurement, proprio: tuple[float, ...],
                  prev_action: tuple[float, ...]) -> tuple[EstimatorState, Pose6]:
    """Advance the recurrence one control tick and decode the box pose."""
    x = build_input(vision, proprio, prev_action)
    if x.shape[0] != params.in_dim:
        raise ValueError(f"estimator input dim {x.shape[0]} != {params.in_dim}")
    h2, c2, _ = nets.lstm_step(params.lstm, x, state.h, state.c)
    out, _ = nets.mlp_forward(params.head, h2)
    pose = decode_pose(out)
    return EstimatorState(h2, c2, pose), pose


def estimate_step_batch(params: EstimatorParams, h: Array, c: Array,
                        inputs: Array) -> tuple[Array, Array, Array]:
    """Batched tick: inputs (B, in_dim) -> (outputs (B, 6), h', c')."""
    h2, c2, _ = nets.lstm_step(params.lstm, inputs, h, c)
    out, _ = nets.mlp_forward(params.head, h2)
    return out, h2, c2


# ---------------------------------------------------------------------------
# Loss: squared position error + lambda * (geodesic angle)^2
# ---------------------------------------------------------------------------

ORIENTATION_WEIGHT = 0.5


def estimator_loss(estimate: Pose6, truth: Pose6,
                   lam: float = ORIENTATION_WEIGHT) -> float:
    dp = tuple(a - b for a, b in zip(estimate.position, truth.position))
    ang = quat_geodesic_angle(estimate.orientation, truth.orientation)
    return dp[0] ** 2 + dp[1] ** 2 + dp[2] ** 2 + lam * ang * ang


def _so3_right_jacobian(r: Array) -> Array:
    """J_r(r): Exp(r + d) = Exp(r) Exp(J_r(r) d) to first order."""
    theta = float(np.linalg.norm(r))
    rx = np.array([[0.0, -r[2], r[1]],
                   [r[2], 0.0, -r[0]],
                   [-r[1], r[0], 0.0]])
    if theta < 1e-6:
        return np.eye(3) - 0.5 * rx + rx @ rx / 6.0
    a = (1.0 - math.cos(theta)) / theta ** 2
    b = (theta - math.sin(theta)) / theta ** 3
    return np.eye(3) - a * rx + b * (rx @ rx)


def pose_channel_loss(out: Array, truth_pos: Vec3,
                      truth_quat: Quat, lam: float = ORIENTATION_WEIGHT
                      ) -> tuple[float, Array]:
    """Loss and exact gradient with respect to the 6 head channels.

    With v = Log(q_gt^-1 * Exp(r)), the angle satisfies theta = ||v|| and
    d(theta^2)/dr = 2 J_r(r)^T v (the inverse-Jacobian transpose of the Log
    leg drops out because J_r^-T(v) v = v).
    """
    grad = np.zeros(6)
    dp = out[:3] - np.asarray(truth_pos)
    grad[:3] = 2.0 * dp
    r = out[3:6]
    q = quat_from_rotvec((float(r[0]), float(r[1]), float(r[2])))
    v = np.asarray(rotvec_from_quat(quat_mul(quat_conj(truth_quat), q)))
    grad[3:] = 2.0 * lam * (_so3_right_jacobian(r).T @ v)
    loss = float(dp @ dp) + lam * float(v @ v)
    return loss, grad


def _batch_quat_from_rotvec(r: Array) -> Array:
    theta = np.linalg.norm(r, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    k = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * r], axis=-1)


def _batch_rotvec_from_quat(q: Array) -> Array:
    # Canonicalize (w >= 0) so the angle lands in [0, pi].
    q = q * np.sign(np.where(q[..., :1] == 0.0, 1.0, q[..., :1]))
    n = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(n, q[..., :1])
    small = n < 1e-12
    return q[..., 1:] * np.where(small, 2.0, angle / np.where(small, 1.0, n))


def _batch_quat_mul(a: Array, b: Array) -> Array:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _batch_right_jacobian(r: Array) -> Array:
    n = r.shape[0]
    theta = np.linalg.norm(r, axis=-1)
    rx = np.zeros((n, 3, 3))
    rx[:, 0, 1] = -r[:, 2]; rx[:, 0, 2] = r[:, 1]
    rx[:, 1, 0] = r[:, 2]; rx[:, 1, 2] = -r[:, 0]
    rx[:, 2, 0] = -r[:, 1]; rx[:, 2, 1] = r[:, 0]
    rx2 = rx @ rx
    small = theta < 1e-6
    t2 = np.where(small, 1.0, theta ** 2)
    a = np.where(small, 0.5, (1.0 - np.cos(theta)) / t2)
    b = np.where(small, 1.0 / 6.0, (theta - np.sin(theta)) / (t2 * theta))
    return np.eye(3)[None] - a[:, None, None] * rx + b[:, None, None] * rx2


def pose_channel_loss_batch(out: Array, truth_pos: Array, truth_quat: Array,
                            lam: float = ORIENTATION_WEIGHT
                            ) -> tuple[float, Array]:
    """Vectorized ``pose_channel_loss``: out (N, 6) -> (total loss, grads)."""
    grad = np.zeros_like(out)
    dp = out[:, :3] - truth_pos
    grad[:, :3] = 2.0 * dp
    r = out[:, 3:6]
    q = _batch_quat_from_rotvec(r)
    conj = truth_quat * np.array([1.0, -1.0, -1.0, -1.0])
    v = _batch_rotvec_from_quat(_batch_quat_mul(conj, q))
    jr = _batch_right_jacobian(r)
    grad[:, 3:] = 2.0 * lam * np.einsum("nji,nj->ni", jr, v)
    loss = float(np.sum(dp * dp)) + lam * float(np.sum(v * v))
    return loss, grad


def sequence_update(params: EstimatorParams, opt: nets.AdamState,
                    inputs: Array, truth_pos: Array, truth_quat: Array,
                    h0: Array, c0: Array, lr: float = 3e-4,
                    window: int = 50, lam: float = ORIENTATION_WEIGHT,
                    max_grad_norm: float = 1.0) -> tuple[float, Array, Array]:
    """One supervised pass over a sequence batch with truncated backprop.

    inputs: (T, B, in_dim); truth_pos: (T, B, 3); truth_quat: (T, B, 4).
    Gradients flow within each ``window`` chunk; the recurrent state carries
    across chunks without gradient. Returns (mean per-step loss, hT, cT).
    """
    T, B, _ = inputs.shape
    h, c = h0, c0
    total = 0.0
    for start in range(0, T, window):
        xs = inputs[start:start + window]
        n = xs.shape[0]
        hs, (h, c), tape = nets.lstm_unroll(params.lstm, xs, h, c, need_tape=True)
        flat = hs.reshape(n * B, -1)
        out, head_tape = nets.mlp_forward(params.head, flat, need_tape=True)
        loss, dout = pose_channel_loss_batch(
            out, truth_pos[start:start + n].reshape(n * B, 3),
            truth_quat[start:start + n].reshape(n * B, 4), lam)
        total += loss
        head_grads, dflat = nets.backward(head_tape, dout)
        lstm_grads, _ = nets.backward(tape, dflat.reshape(n, B, -1))
        nets.adam_update(params.arrays(), lstm_grads + head_grads, opt,
                         lr=lr, max_grad_norm=max_grad_norm)
    return total / (T * B), h, c
