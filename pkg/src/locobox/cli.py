"""Command-line entry point: training, evaluation, gradient checks, replay.

Config files are YAML with sections world, rewards, randomization, nets,
estimator, ppo, task, and eval, plus a global seed and output directory.
Unknown keys are rejected with their full dotted path. The effective config
(defaults merged with the file) is written as config.yaml inside every run
directory and reloads to an identical run.

Every run gets a timestamped directory under --out holding the config
snapshot, checkpoints, CSV metrics, and (for eval) gzipped JSONL traces.
Metric CSVs never contain wall-clock data, so a command rerun with
--workers 1 --seed S reproduces them byte for byte.

Exit codes: 0 success, 1 usage or config error, 2 failed check.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import os
import sys
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np
import yaml

from . import evalharness as ev
from . import learn, nets
from .randomization import ConfigError
from .rewards import RewardWeights
from .task import EnvConfig, TaskConfig
from .world import WorldParams


class UsageError(Exception):
    """Bad flags or config; maps to exit code 1."""


class CheckFailure(Exception):
    """A verification command found a violation; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RandomizationSection:
    enabled: bool = True
    disturbance_period: float = 1.0


@dataclass
class NetsSection:
    policy_hidden: tuple[int, ...] = (128, 128)


@dataclass
class EstimatorSection:
    learning_rate: float = 3e-4
    window: int = 50
    curriculum_iterations: int = 120
    pretrain_episodes: int = 500
    pretrain_passes: int = 2
    pretrain_batch_envs: int = 10


@dataclass
class PpoSection:
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
    iterations: int = 200
    checkpoint_every: int = 25


@dataclass
class EvalSection:
    n: int = 135
    variants: tuple[str, ...] = ("Oracle", "AdaptManip", "PureRL")
    profiles: tuple[str, ...] = ("training", "perturbed")
    checkpoints: dict = field(default_factory=dict)  # variant -> path


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    world: WorldParams = field(default_factory=WorldParams)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    randomization: RandomizationSection = field(
        default_factory=RandomizationSection)
    nets: NetsSection = field(default_factory=NetsSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    task: TaskConfig = field(default_factory=TaskConfig)
    eval: EvalSection = field(default_factory=EvalSection)


def _coerce(value, template, path: str):
    """Coerce a YAML value to the type the template slot holds."""
    if is_dataclass(template):
        return _merge(template, value, path)
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(template, float):
        if isinstance(value, str):
            # YAML 1.1 reads bare scientific notation like 2e4 as a string.
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"{path}: expected a number") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(template, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        elem = template[0] if template else ""
        return tuple(_coerce(v, elem, f"{path}[{i}]")
                     for i, v in enumerate(value))
    if isinstance(template, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return {str(k): str(v) for k, v in value.items()}
    raise ConfigError(f"{path}: unsupported config field")


def _merge(template, data, path: str = ""):
    """Return a copy of a (possibly frozen) dataclass with data merged in."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name for f in fields(template)}
    updates = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"unknown config key {full!r}")
        updates[key] = _coerce(value, getattr(template, key), full)
    return dataclasses.replace(template, **updates)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def dumps_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(_to_plain(cfg), sort_keys=True,
                          default_flow_style=False)


def load_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {path}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    cfg.task.validate()
    _ppo_config(cfg).validate()
    est = cfg.estimator
    if est.learning_rate <= 0 or est.window < 1 \
            or est.curriculum_iterations < 1 or est.pretrain_episodes < 1:
        raise ConfigError("estimator section values must be positive")
    if cfg.randomization.disturbance_period <= 0:
        raise ConfigError("randomization.disturbance_period must be > 0")
    for profile in cfg.eval.profiles:
        if profile not in ev.PROFILES:
            raise ConfigError(f"eval.profiles: unknown profile {profile!r}")
    for name in cfg.eval.variants:
        if name not in ev.VARIANT_SPECS:
            raise ConfigError(f"eval.variants: unknown variant {name!r}")


def _ppo_config(cfg: RunConfig) -> learn.PpoConfig:
    names = {f.name for f in fields(learn.PpoConfig)}
    values = {f.name: getattr(cfg.ppo, f.name) for f in fields(cfg.ppo)
              if f.name in names}
    return learn.PpoConfig(**values)


# Training-side pose-source names accepted on the command line, normalized
# to both vocabularies.
_VARIANT_ALIASES = {
    "adapt": "AdaptManip", "adaptmanip": "AdaptManip",
    "pure": "PureRL", "purerl": "PureRL",
    "pure_fk": "PureRLFK", "purerlfk": "PureRLFK",
    "oracle": "Oracle",
}
_TRAIN_KEYS = {"AdaptManip": "adapt", "PureRL": "pure",
               "PureRLFK": "pure_fk", "Oracle": "oracle"}


def normalize_variant(name: str) -> str:
    canon = _VARIANT_ALIASES.get(name.lower())
    if canon is None:
        raise UsageError(f"unknown variant {name!r}; expected one of "
                         f"{sorted(_TRAIN_KEYS)}")
    return canon


def make_env_config(cfg: RunConfig, randomize: bool | None = None
                    ) -> EnvConfig:
    return EnvConfig(
        params=cfg.world,
        task=cfg.task,
        weights=cfg.rewards,
        randomize=(cfg.randomization.enabled if randomize is None
                   else randomize),
        disturbance_period=cfg.randomization.disturbance_period,
    )


def _fold_overrides(cfg: RunConfig, args) -> None:
    """Merge command-line overrides into the config so the config.yaml
    snapshot written to the run directory reproduces the run by itself."""
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "no_randomization", False):
        cfg.randomization.enabled = False
    if args.command == "eval":
        if args.n is not None:
            cfg.eval.n = args.n
        if args.variant is not None:
            cfg.eval.variants = (normalize_variant(args.variant),)
        if args.profile is not None:
            cfg.eval.profiles = (args.profile,)
        if args.checkpoint is not None:
            cfg.eval.checkpoints = dict(cfg.eval.checkpoints)
            for name in cfg.eval.variants:
                cfg.eval.checkpoints[name] = args.checkpoint
    elif args.n is not None:
        cfg.ppo = dataclasses.replace(cfg.ppo, iterations=args.n)


def _make_run_dir(out: str, command: str) -> str:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out, f"{command}-{stamp}")
    path = base
    k = 1
    while os.path.exists(path):
        k += 1
        path = f"{base}-{k}"
    os.makedirs(path)
    return path


def _snapshot(cfg: RunConfig, run_dir: str) -> None:
    with open(os.path.join(run_dir, "config.yaml"), "w") as fh:
        fh.write(dumps_config(cfg))


def _progress_printer(stream=sys.stderr):
    def cb(row):
        if is_dataclass(row):
            row = dataclasses.asdict(row)
        if isinstance(row, dict):
            print(", ".join(f"{k}={v:.4g}" if isinstance(v, float)
                            else f"{k}={v}" for k, v in row.items()),
                  file=stream)
        else:
            print(row, file=stream)
        stream.flush()
    return cb


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_base(cfg: RunConfig, args) -> int:
    run_dir = _make_run_dir(cfg.out, "train-base")
    _snapshot(cfg, run_dir)
    train_cfg = learn.BaseTrainConfig(
        ppo=_ppo_config(cfg), iterations=cfg.ppo.iterations,
        seed=cfg.seed, randomize_commands=cfg.randomization.enabled,
        hidden=tuple(cfg.nets.policy_hidden))
    if args.workers > 1:
        print("training runs single-process; --workers ignored",
              file=sys.stderr)
    paths = learn.train_base(train_cfg, run_dir,
                             progress=_progress_printer())
    print(f"run directory: {run_dir}")
    print(f"checkpoint: {paths['checkpoint']}")
    return 0


def cmd_train_residual(cfg: RunConfig, args) -> int:
    if args.resume is not None and not os.path.exists(args.resume):
        raise UsageError(f"resume checkpoint not found: {args.resume}")
    variant = normalize_variant(args.variant or "adapt")
    train_cfg = learn.ResidualTrainConfig(
        ppo=_ppo_config(cfg),
        env=make_env_config(cfg),
        iterations=cfg.ppo.iterations,
        curriculum_iterations=cfg.estimator.curriculum_iterations,
        estimator_lr=cfg.estimator.learning_rate,
        estimator_window=cfg.estimator.window,
        checkpoint_every=cfg.ppo.checkpoint_every,
        variant=_TRAIN_KEYS[variant],
        seed=cfg.seed,
        hidden=tuple(cfg.nets.policy_hidden))
    train_cfg.validate()
    run_dir = _make_run_dir(cfg.out, "train-residual")
    _snapshot(cfg, run_dir)
    if args.workers > 1:
        print("training runs single-process; --workers ignored",
              file=sys.stderr)
    paths = learn.train_residual(train_cfg, run_dir, resume=args.resume,
                                 progress=_progress_printer())
    print(f"run directory: {run_dir}")
    print(f"checkpoint: {paths['checkpoint']}")
    return 0


def _trace_files(path: str) -> list[str]:
    if os.path.isdir(path):
        files = [os.path.join(path, f) for f in sorted(os.listdir(path))
                 if f.endswith(".jsonl") or f.endswith(".jsonl.gz")]
    else:
        files = [path]
    if not files or not all(os.path.exists(f) for f in files):
        raise UsageError(f"no trace files found at {path}")
    return files


def _replay(cfg: RunConfig, files: list[str], run_dir: str) -> int:
    groups: dict[tuple[str, str], list] = {}
    seen: list[tuple[str, str]] = []
    for fname in files:
        for trace in ev.read_traces(fname):
            header = trace[0]
            key = (header["variant"], header["profile"])
            if key not in groups:
                groups[key] = []
                seen.append(key)
            groups[key].append((header["seed"], ev.score_episode(trace)))

    # Reproduce the live row order (config variant-major, then profile)
    # so replayed report files match the originals byte for byte.
    def rank(key):
        v, p = key
        vi = (cfg.eval.variants.index(v) if v in cfg.eval.variants
              else len(cfg.eval.variants))
        pi = (cfg.eval.profiles.index(p) if p in cfg.eval.profiles
              else len(cfg.eval.profiles))
        return (vi, pi, seen.index(key))

    rows = []
    episode_rows = []
    for v, p in sorted(seen, key=rank):
        pairs = groups[(v, p)]
        metrics = [m for _, m in pairs]
        rows.append(ev.ReportRow(v, p, len(metrics), ev.aggregate(metrics)))
        episode_rows += [ev.episode_row(v, p, i, s, m)
                         for i, (s, m) in enumerate(pairs)]
    report = ev.AblationReport(rows, episode_rows)
    report.to_csv(os.path.join(run_dir, "metrics.csv"))
    ev.write_episode_csv(os.path.join(run_dir, "episodes.csv"),
                         episode_rows)
    print(report.summary())
    print(f"run directory: {run_dir}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.replay:
        files = _trace_files(args.replay)
        run_dir = _make_run_dir(cfg.out, "eval")
        _snapshot(cfg, run_dir)
        return _replay(cfg, files, run_dir)

    variants = []
    for name in cfg.eval.variants:
        ckpt = cfg.eval.checkpoints.get(name)
        if not ckpt:
            raise UsageError(
                f"no checkpoint for variant {name}: pass one as a "
                f"positional argument or set eval.checkpoints.{name}")
        if not os.path.exists(ckpt):
            raise UsageError(f"checkpoint not found: {ckpt}")
        variants.append(ev.BaselineVariant(name, ckpt))
    run_dir = _make_run_dir(cfg.out, "eval")
    _snapshot(cfg, run_dir)
    report = ev.run_ablation(
        variants, make_env_config(cfg), n=cfg.eval.n, seed=cfg.seed,
        profiles=tuple(cfg.eval.profiles), workers=args.workers,
        trace_dir=os.path.join(run_dir, "traces"),
        progress=_progress_printer())
    report.to_csv(os.path.join(run_dir, "metrics.csv"))
    ev.write_episode_csv(os.path.join(run_dir, "episodes.csv"),
                         report.episode_rows)
    with open(os.path.join(run_dir, "summary.txt"), "w") as fh:
        fh.write(report.summary() + "\n")
    print(report.summary())
    print(f"run directory: {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _mlp_case(sizes, seed):
    rng = np.random.default_rng(seed)
    params = nets.init_mlp(sizes, rng)
    x = rng.standard_normal((4, sizes[0]))
    target = rng.standard_normal((4, sizes[-1]))

    def f():
        y, tape = nets.mlp_forward(params, x, need_tape=True)
        r = y - target
        grads, _ = nets.backward(tape, r)
        return 0.5 * float(np.sum(r * r)), grads

    names = []
    for i in range(len(params.weights)):
        names += [f"w{i}", f"b{i}"]
    return f, params.arrays(), names


def _lstm_case(in_dim, hidden, steps, seed):
    rng = np.random.default_rng(seed)
    params = nets.init_lstm(in_dim, hidden, rng)
    xs = rng.standard_normal((steps, in_dim))
    target = rng.standard_normal((steps, hidden))
    h0 = np.zeros(hidden)
    c0 = np.zeros(hidden)

    def f():
        hs, _, tape = nets.lstm_unroll(params, xs, h0, c0, need_tape=True)
        r = hs - target
        grads, _ = nets.backward(tape, r)
        return 0.5 * float(np.sum(r * r)), grads

    return f, params.arrays(), ["w_x", "w_h", "b"]


GRADCHECK_TOLERANCE = 1e-4

GRADCHECK_CASES = {
    "mlp_small": lambda: _mlp_case([5, 16, 12, 3], 11),
    "mlp_deep": lambda: _mlp_case([7, 16, 16, 16, 2], 3),
    "mlp_scalar": lambda: _mlp_case([3, 16, 1], 5),
    "lstm_unroll8": lambda: _lstm_case(4, 6, 8, 13),
    "lstm_unroll8_wide": lambda: _lstm_case(5, 8, 8, 7),
}


def run_gradcheck(inject_fault: str | None = None) -> list[dict]:
    """Per-parameter-block finite-difference checks of the backprop.

    inject_fault="case.block" flips the analytic gradient sign for that
    block, exercising the failure-reporting path.
    """
    results = []
    for case_name, make in GRADCHECK_CASES.items():
        f, arrays, names = make()
        for i, (arr, block) in enumerate(zip(arrays, names)):
            flip = inject_fault == f"{case_name}.{block}"

            def fi(i=i, flip=flip):
                loss, grads = f()
                g = -grads[i] if flip else grads[i]
                return loss, [g]

            err = nets.grad_check(fi, [arr])
            results.append({"check": f"{case_name}.{block}",
                            "max_rel_error": err,
                            "passed": err <= GRADCHECK_TOLERANCE})
    return results


def cmd_gradcheck(args=None, inject_fault: str | None = None) -> int:
    results = run_gradcheck(inject_fault)
    failed = [r for r in results if not r["passed"]]
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} {r['check']:<22} max_rel_error="
              f"{r['max_rel_error']:.3e} (tolerance "
              f"{GRADCHECK_TOLERANCE:.0e})")
    if failed:
        blocks = ", ".join(r["check"] for r in failed)
        print(f"gradient check FAILED for parameter blocks: {blocks}")
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="locobox",
                     description="train and evaluate the desk-scale "
                                 "loco-manipulation stack")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_arg=False):
        p.add_argument("--config", default=None,
                       help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel episode workers (1 = deterministic)")
        p.add_argument("--out", default=None,
                       help="parent directory for the run directory")
        p.add_argument("--n", type=int, default=None,
                       help="iterations (training) or episodes (eval)")
        if checkpoint_arg:
            p.add_argument("checkpoint", nargs="?", default=None,
                           help="policy checkpoint path")

    p = sub.add_parser("train-base",
                       help="locomotion-only validation training")
    common(p)
    p.add_argument("--no-randomization", action="store_true",
                   help="fixed command instead of random ones")

    p = sub.add_parser("train-residual",
                       help="full manipulation training loop")
    common(p)
    p.add_argument("--variant", default=None,
                   help="pose-input variant (adapt, pure, pure_fk, oracle)")
    p.add_argument("--no-randomization", action="store_true",
                   help="disable domain randomization")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")

    p = sub.add_parser("eval", help="variant/profile evaluation matrix")
    common(p, checkpoint_arg=True)
    p.add_argument("--variant", default=None, help="evaluate one variant")
    p.add_argument("--profile", default=None,
                   help="dynamics profile (training or perturbed)")
    p.add_argument("--replay", default=None,
                   help="rescore logged traces instead of running episodes")

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient verification")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = load_config(args.config)
        _fold_overrides(cfg, args)
        validate_config(cfg)
        if args.command == "train-base":
            return cmd_train_base(cfg, args)
        if args.command == "train-residual":
            return cmd_train_residual(cfg, args)
        if args.command == "eval":
            return cmd_eval(cfg, args)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (CheckFailure, learn.TrainingFault, ev.EvalError,
            nets.CheckpointError) as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
