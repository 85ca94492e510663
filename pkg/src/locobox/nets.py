"""Dense and recurrent network primitives with hand-written reverse mode.

Everything is float64 numpy. Forward passes optionally record a gradient
tape; ``backward(tape, out_adjoint)`` replays it exactly once and returns
parameter gradients in the same order as ``params.arrays()`` plus the input
adjoint. A central-difference checker validates the analytic gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

SQRT2 = float(np.sqrt(2.0))


class TapeError(RuntimeError):
    """A gradient tape was replayed more than once."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match expectations."""


@dataclass
class GradTape:
    _fn: Callable[[Array], tuple[list[Array], Array]]
    consumed: bool = False


def backward(tape: GradTape, out_adjoint: Array) -> tuple[list[Array], Array]:
    """Replay a tape: returns (parameter gradients, input adjoint)."""
    if tape.consumed:
        raise TapeError("gradient tape already consumed")
    tape.consumed = True
    return tape._fn(np.asarray(out_adjoint, dtype=np.float64))


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def orthogonal(shape: tuple[int, int], rng: np.random.Generator,
               gain: float = 1.0) -> Array:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def scaled_uniform(shape: tuple[int, int], rng: np.random.Generator,
                   gain: float = SQRT2) -> Array:
    fan_in, fan_out = shape
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


# ---------------------------------------------------------------------------
# MLP: affine layers with ELU hidden activations, identity output
# ---------------------------------------------------------------------------


def elu(z: Array) -> Array:
    return np.where(z > 0.0, z, np.expm1(z))


def elu_grad(z: Array) -> Array:
    return np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass
class MlpParams:
    weights: list[Array]  # each (fan_in, fan_out)
    biases: list[Array]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError("consecutive layer dimensions incompatible")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape mismatch")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[Array]:
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             gain: float = SQRT2, out_gain: float | None = None) -> MlpParams:
    """sizes = [in, hidden..., out]; zero biases."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        g = gain if (i < len(sizes) - 2 or out_gain is None) else out_gain
        weights.append(scaled_uniform((sizes[i], sizes[i + 1]), rng, g))
        biases.append(np.zeros(sizes[i + 1]))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, x: Array,
                need_tape: bool = False) -> tuple[Array, GradTape | None]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {h.shape[-1]} != {params.in_dim}")
    n = len(params.weights)
    inputs = []   # layer inputs, for weight gradients
    pre = []      # pre-activations of hidden layers, for ELU gradients
    for i in range(n):
        inputs.append(h)
        z = h @ params.weights[i] + params.biases[i]
        if i < n - 1:
            pre.append(z)
            h = elu(z)
        else:
            h = z
    y = h[0] if single else h

    if not need_tape:
        return y, None

    def run(dy: Array) -> tuple[list[Array], Array]:
        d = dy[None, :] if single else dy
        grads: list[Array] = [None] * (2 * n)  # type: ignore[list-item]
        for i in reversed(range(n)):
            grads[2 * i] = inputs[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ params.weights[i].T
            if i > 0:
                d = d * elu_grad(pre[i - 1])
        dx = d[0] if single else d
        return grads, dx

    return y, GradTape(run)


# ---------------------------------------------------------------------------
# LSTM: fused gates in order (input, forget, candidate, output)
# ---------------------------------------------------------------------------


@dataclass
class LstmParams:
    w_x: Array  # (in_dim, 4H)
    w_h: Array  # (H, 4H)
    b: Array    # (4H,)

    def __post_init__(self) -> None:
        h = self.hidden_size
        if h <= 0:
            raise ValueError("hidden size must be positive")
        if self.w_x.shape[1] != 4 * h or self.b.shape != (4 * h,):
            raise ValueError("gate shapes inconsistent")

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[0]

    @property
    def in_dim(self) -> int:
        return self.w_x.shape[0]

    def arrays(self) -> list[Array]:
        return [self.w_x, self.w_h, self.b]

    def copy(self) -> "LstmParams":
        return LstmParams(self.w_x.copy(), self.w_h.copy(), self.b.copy())


def init_lstm(in_dim: int, hidden: int, rng: np.random.Generator) -> LstmParams:
    """Orthogonal recurrent blocks, scaled-uniform input weights, forget
    bias 1 (standard memory-friendly start), other biases zero."""
    w_x = np.concatenate(
        [scaled_uniform((in_dim, hidden), rng, 1.0) for _ in range(4)], axis=1)
    w_h = np.concatenate(
        [orthogonal((hidden, hidden), rng) for _ in range(4)], axis=1)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return LstmParams(w_x, w_h, b)


def _sigmoid(z: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_gates(params: LstmParams, x: Array, h: Array, c: Array):
    hs = params.hidden_size
    z = x @ params.w_x + h @ params.w_h + params.b
    i = _sigmoid(z[..., 0 * hs:1 * hs])
    f = _sigmoid(z[..., 1 * hs:2 * hs])
    g = np.tanh(z[..., 2 * hs:3 * hs])
    o = _sigmoid(z[..., 3 * hs:4 * hs])
    c2 = f * c + i * g
    h2 = o * np.tanh(c2)
    return h2, c2, (i, f, g, o)


def lstm_step(params: LstmParams, x: Array, h: Array, c: Array,
              need_tape: bool = False):
    """One recurrence step: returns (h', c', tape). The tape expects the
    adjoint of h' and propagates zero cell adjoint (use lstm_unroll for
    sequence training)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != {params.in_dim}")
    if h.shape[-1] != params.hidden_size or c.shape[-1] != params.hidden_size:
        raise ValueError("hidden/cell dimension mismatch")
    h2, c2, gates = _lstm_gates(params, x, h, c)
    if not need_tape:
        return h2, c2, None

    def run(dh2: Array) -> tuple[list[Array], Array]:
        grads, dx, _, _ = _lstm_backstep(
            params, x, h, c, c2, gates, dh2, np.zeros_like(c2))
        return grads, dx

    return h2, c2, GradTape(run)


def _lstm_backstep(params, x, h, c, c2, gates, dh2, dc2_in):
    i, f, g, o = gates
    hs = params.hidden_size
    tc = np.tanh(c2)
    do = dh2 * tc
    dc2 = dc2_in + dh2 * o * (1.0 - tc * tc)
    di = dc2 * g
    df = dc2 * c
    dg = dc2 * i
    dc = dc2 * f
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f),
         dg * (1.0 - g * g), do * o * (1.0 - o)], axis=-1)
    dz2 = dz if dz.ndim == 2 else dz[None, :]
    x2 = x if x.ndim == 2 else x[None, :]
    h2d = h if h.ndim == 2 else h[None, :]
    grads = [x2.T @ dz2, h2d.T @ dz2, dz2.sum(axis=0)]
    dx = dz @ params.w_x.T
    dh = dz @ params.w_h.T
    return grads, dx, dh, dc


def lstm_unroll(params: LstmParams, xs: Array, h0: Array, c0: Array,
                need_tape: bool = False):
    """Run T steps. xs has shape (T, in) or (T, B, in); returns the stacked
    hidden outputs hs with matching leading shape, final (h, c), and a tape
    whose adjoint is the full hs adjoint (backpropagation through time)."""
    xs = np.asarray(xs, dtype=np.float64)
    steps = []
    h, c = h0, c0
    hs = []
    for t in range(xs.shape[0]):
        h2, c2, gates = _lstm_gates(params, xs[t], h, c)
        steps.append((xs[t], h, c, c2, gates))
        h, c = h2, c2
        hs.append(h2)
    out = np.stack(hs)

    if not need_tape:
        return out, (h, c), None

    def run(dhs: Array) -> tuple[list[Array], Array]:
        gw = [np.zeros_like(a) for a in params.arrays()]
        dh = np.zeros_like(h0)
        dc = np.zeros_like(c0)
        dxs = np.zeros_like(xs)
        for t in reversed(range(xs.shape[0])):
            x_t, h_t, c_t, c2_t, gates_t = steps[t]
            g_t, dx, dh, dc = _lstm_backstep(
                params, x_t, h_t, c_t, c2_t, gates_t, dhs[t] + dh, dc)
            for acc, gg in zip(gw, g_t):
                acc += gg
            dxs[t] = dx
        return gw, dxs

    return out, (h, c), GradTape(run)


# ---------------------------------------------------------------------------
# Adam optimizer (in-place on parameter arrays)
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[Array]
    v: list[Array]
    step: int = 0


def adam_init(arrays: Sequence[Array]) -> AdamState:
    return AdamState([np.zeros_like(a) for a in arrays],
                     [np.zeros_like(a) for a in arrays])


def global_norm(arrays: Sequence[Array]) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def adam_update(arrays: Sequence[Array], grads: Sequence[Array],
                state: AdamState, lr: float = 3e-4, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8,
                max_grad_norm: float | None = None) -> float:
    """One Adam step applied in place; returns the pre-clip gradient norm."""
    norm = global_norm(grads)
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm > 0.0:
        scale = max_grad_norm / norm
    state.step += 1
    t = state.step
    b1c = 1.0 - beta1 ** t
    b2c = 1.0 - beta2 ** t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        gs = g * scale
        m *= beta1
        m += (1.0 - beta1) * gs
        v *= beta2
        v += (1.0 - beta2) * gs * gs
        a -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
    return norm


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], tuple[float, list[Array]]],
               arrays: Sequence[Array], epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    ``f()`` evaluates the current ``arrays`` and returns (loss, gradients).
    Every element of every array is perturbed. Returns the max elementwise
    relative error |a - b| / max(|a|, |b|, 1e-6).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon out of the supported range")
    _, grads = f()
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            lp, _ = f()
            flat[k] = orig - epsilon
            lm, _ = f()
            flat[k] = orig
            fd = (lp - lm) / (2.0 * epsilon)
            an = gflat[k]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON shape manifest, little-endian float64
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LBCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, Array], meta: dict | None = None) -> None:
    manifest = {
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, expect_shapes: dict[str, tuple[int, ...]] | None = None):
    """Returns (arrays dict, meta dict); rejects bad magic/version/shapes."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version, blob_len = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        try:
            manifest = json.loads(fh.read(blob_len).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt manifest: {e}") from e
        arrays: dict[str, Array] = {}
        for ent in manifest["arrays"]:
            shape = tuple(ent["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated data for {ent['name']}")
            arrays[ent["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    if expect_shapes is not None:
        got = {k: tuple(v.shape) for k, v in arrays.items()}
        want = {k: tuple(s) for k, s in expect_shapes.items()}
        if got != want:
            missing = sorted(set(want) - set(got))
            extra = sorted(set(got) - set(want))
            diff = sorted(k for k in set(got) & set(want) if got[k] != want[k])
            raise CheckpointError(
                f"{path}: manifest mismatch (missing={missing}, "
                f"unexpected={extra}, shape diffs={diff})")
    return arrays, manifest.get("meta", {})
