"""Command-line entry point: ``metapi train | eval | tune``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
Output directories are never reused; each run writes ``config.cfg``, the
fully resolved configuration, next to its artifacts.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import experiments as ex
from .agent import CheckpointError, load_checkpoint
from .config import ConfigError, build_config, dump_config, load_config, parse_overrides
from .meta_env import AugmentationSpec, TRAJECTORY_COLUMNS, write_trajectory_csv
from .nn import FormatError
from .process_sim import FoptdTask, NumericInputError
from .ppo import TrainingDivergedError, scaled_config, train

OUTPUT_ROOT_ENV = "METAPI_OUTPUT_ROOT"
EXPERIMENTS = ("heatmap", "convergence", "drift", "pca", "tank", "ablation", "trajectory")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("metapi")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def fresh_dir(path: Path) -> Path:
    if path.exists():
        raise UsageError(f"output directory {path} already exists; choose a new one")
    path.mkdir(parents=True)
    return path


def _resolve_train_config(args):
    if args.config:
        config = load_config(args.config, args.override)
    else:
        pairs = {"preset": args.preset}
        pairs.update(parse_overrides(args.override))
        config = build_config(pairs)
    if args.seed is not None:
        config = build_config({**_as_pairs(config), "seed": str(args.seed)})
    return config


def _as_pairs(config) -> dict[str, str]:
    out = {}
    for line in dump_config(config).splitlines():
        if line and not line.startswith("#"):
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    out = Path(args.out) if args.out else output_root() / f"train-{config.hash()}"
    if args.resume:
        if not out.is_dir():
            raise UsageError(f"cannot resume: {out} does not exist")
        snapshot = out / "config.cfg"
        if snapshot.read_text() != dump_config(config):
            raise UsageError(f"cannot resume: {snapshot} differs from the requested configuration")
    else:
        fresh_dir(out)
        (out / "config.cfg").write_text(dump_config(config))
    result = train(config, out, resume=args.resume,
                   progress=lambda r: log.info("epoch %d  cost %.4f  kl %.4f", r["epoch"], r["mean_cost"], r["kl"]))
    print(f"wrote {len(result.checkpoints)} checkpoint(s) to {out / 'checkpoints'}")
    return EXIT_OK


def _load_agent(path):
    if not path:
        raise UsageError("--checkpoint is required for this experiment")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    agent, meta, _ = load_checkpoint(path)
    return agent, meta


def _eval_dist(meta_config: dict | None, scale: str):
    if scale == "scaled":
        return scaled_config().distribution
    if scale == "checkpoint" and meta_config:
        return build_config({k: _fmt(v) for k, v in meta_config.items()}).distribution
    return ex.TRAINING_DISTRIBUTION


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)


def _parse_noise(text: str) -> float:
    text = text.strip().lower()
    if text in ("off", "0", "none"):
        return 0.0
    return float(text[:-2] if text.endswith("cm") else text)


def _task_from_args(args) -> FoptdTask:
    return FoptdTask(args.K if args.K is not None else 0.5, args.tau if args.tau is not None else 1.0,
                     args.theta if args.theta is not None else 0.2)


def cmd_eval(args) -> int:
    name = args.experiment
    if name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; valid experiments: {', '.join(EXPERIMENTS)}")
    out = fresh_dir(Path(args.out) if args.out else output_root() / f"eval-{name}")
    snap = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.cfg").write_text("".join(f"{k} = {v}\n" for k, v in sorted(snap.items())))
    if name == "ablation":
        config = load_config(args.config) if args.config else scaled_config()
        res = ex.ablation(config, args.which, out_dir=out / "runs")
        ex.write_csv(out / "ablation" / args.which / "comparison.csv",
                     ("arm", "final_cost", "worst_mse", "late_gain_motion"),
                     [[1, res.final_cost_a, res.worst_mse_a, res.gain_motion_a],
                      [0, res.final_cost_b, res.worst_mse_b, res.gain_motion_b]])
        return EXIT_OK
    agent, meta = _load_agent(args.checkpoint)
    dist = _eval_dist(meta.get("config"), args.scale)
    if name == "heatmap":
        for sl in args.slice or list(ex.SLICES):
            grid = ex.heatmap(agent, sl, n=args.n, dist=dist)
            print(ex.write_heatmap(out, grid))
    elif name == "convergence":
        if args.K is not None:
            groups = {"task": [_task_from_args(args)]}
        else:
            groups = {}
            for sl in args.slice or list(ex.SLICES):
                cells = ex.slice_tasks(sl, args.n, dist)[4]
                groups[sl] = [t for row in cells for t in row if t is not None]
        for sl, tasks in groups.items():
            if not tasks:
                print(f"slice {sl}: no grid cell lies inside the task distribution, skipped", file=sys.stderr)
                continue
            res = ex.convergence_time(agent, tasks, n_changes=max(args.changes, 30))
            ex.write_csv(out / "convergence" / sl / "convergence_time.csv",
                         ("K", "tau", "theta", "time", "converged"),
                         [[t.K, t.tau, t.theta, res.time[k], res.converged[k]] for k, t in enumerate(tasks)])
    elif name == "drift":
        scenarios = ex.drift_scenarios("full" if dist == ex.TRAINING_DISTRIBUTION else "scaled")
        for sc in ([scenarios[args.scenario]] if args.scenario else scenarios.values()):
            res = ex.drift_experiment(agent, sc)
            base = out / "drift" / sc.name
            ex.write_csv(base / "mse.csv", ("adaptive_mse", "frozen_mse"), [[res.adaptive_mse, res.frozen_mse]])
            ex.write_csv(base / "gains.csv", ("t", "kp_adaptive", "ki_adaptive", "kp_frozen", "ki_frozen"),
                         np.column_stack([res.t, res.adaptive_gains, res.frozen_gains]))
            write_trajectory_csv(base / "trajectory_adaptive.csv", res.trajectory_adaptive)
            write_trajectory_csv(base / "trajectory_frozen.csv", res.trajectory_frozen)
    elif name == "pca":
        full = dist == ex.TRAINING_DISTRIBUTION
        ratio = args.ratio if args.ratio is not None else (0.8 if full else sum(dist.ratio) / 2)
        if args.K is not None:
            probe = _task_from_args(args)
        elif full:
            probe = FoptdTask(0.75, 0.25, 0.20)
        else:
            K, tau = sum(dist.K) / 2, sum(dist.tau) / 2
            probe = FoptdTask(K, tau, ratio * tau)
        res = ex.pca_hidden_states(agent, dist, ratio=ratio, probe=probe)
        sl = f"ratio={ratio:g}"
        ex.write_csv(out / "pca" / sl / "explained_variance.csv", ("component", "ratio"),
                     [[i + 1, r] for i, r in enumerate(res.explained_ratio)])
        ex.write_csv(out / "pca" / sl / "projections.csv", ("K", "tau", "theta", "pc1", "pc2"),
                     np.column_stack([res.labels, res.projections[:, :2]]))
        ex.write_csv(out / "pca" / sl / "probe_trajectory.csv", ("step", "pc1", "pc2"),
                     np.column_stack([np.arange(len(res.trajectory)), res.trajectory[:, :2]]))
    elif name == "tank":
        noise = _parse_noise(args.noise)
        res = ex.two_tank_experiment(agent, noise_cm=noise, seed=args.seed or 0)
        sl = f"noise={noise:g}cm"
        ex.write_csv(out / "tank" / sl / "levels_tuned.csv", ex.TANK_COLUMNS, res.tuned.log)
        ex.write_csv(out / "tank" / sl / "levels_frozen.csv", ex.TANK_COLUMNS, res.frozen.log)
        ex.write_csv(out / "tank" / sl / "gains.csv", ("t_s", "kp", "ki"),
                     np.column_stack([res.tuned.gain_t, res.tuned.gains]))
        ex.write_csv(out / "tank" / sl / "summary.csv",
                     ("gain_settle_s", "tuned_settling_s", "frozen_settling_s"),
                     [[res.gain_settle_s, res.tuned_settling_s, res.frozen_settling_s]])
    elif name == "trajectory":
        task = _task_from_args(args)
        sl = f"K={task.K:g},tau={task.tau:g},theta={task.theta:g}"
        ex.write_csv(out / "trajectory" / sl / "step_comparison.csv", ex.TRAJECTORY_COMPARISON_COLUMNS,
                     ex.step_comparison(agent, task))
        env, _, _ = ex.run_gains(agent, [task], args.changes, record=True)
        write_trajectory_csv(out / "trajectory" / sl / "run.csv", env.trajectory(0), TRAJECTORY_COLUMNS)
    print(f"artifacts in {out}")
    return EXIT_OK


def _augmentation(args) -> AugmentationSpec | None:
    if args.tank:
        return ex.tank_augmentation()
    if args.augment:
        vals = [float(v) for v in args.augment.split(",")]
        if len(vals) not in (4, 5):
            raise UsageError("--augment takes y_offset,y_scale,u_scale,sample_period[,u_bias]")
        return AugmentationSpec(*vals)
    return None


def cmd_tune(args) -> int:
    from .tuner import OnlineTuner, read_stream, tune_stream

    agent, _ = _load_agent(args.checkpoint)
    spec = _augmentation(args)
    limits = (0.0, ex.TwoTankParams().f_max) if args.tank else None
    tuner = OnlineTuner(agent, spec, output_limits=limits)
    src = sys.stdin if args.input in (None, "-") else open(args.input)
    try:
        for rec in tune_stream(tuner, read_stream(src)):
            print(f"{rec.t!r},{rec.kp!r},{rec.ki!r}", flush=True)
    finally:
        if src is not sys.stdin:
            src.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metapi", description="Meta-learned PI auto-tuning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--preset", default="scaled", choices=("full", "scaled", "smoke"),
                   help="base configuration when --config is not given")
    t.add_argument("--seed", type=int)
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", help=f"run directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation experiment")
    e.add_argument("experiment", help="one of: " + ", ".join(EXPERIMENTS))
    e.add_argument("--checkpoint")
    e.add_argument("--out")
    e.add_argument("--scale", default="checkpoint", choices=("full", "scaled", "checkpoint"),
                   help="task box for grids and scenarios (default: the checkpoint's training box)")
    e.add_argument("--slice", action="append", help="K=<v> or ratio=<v>")
    e.add_argument("--n", type=int, default=16, help="grid cells per axis")
    e.add_argument("--K", type=float)
    e.add_argument("--tau", type=float)
    e.add_argument("--theta", type=float)
    e.add_argument("--ratio", type=float, help="dead-time ratio for pca")
    e.add_argument("--changes", type=int, default=30, help="setpoint changes for trajectory runs")
    e.add_argument("--scenario", choices=("tau_ramp", "gain_step", "none"))
    e.add_argument("--noise", default="off", help="tank measurement noise, e.g. 1cm")
    e.add_argument("--seed", type=int)
    e.add_argument("--which", default="privileged_critic", choices=ex.ABLATIONS)
    e.add_argument("--config", help="training config for ablation")
    e.set_defaults(func=cmd_eval)

    u = sub.add_parser("tune", help="stream gain recommendations from t,setpoint,measurement records")
    u.add_argument("--checkpoint", required=True)
    u.add_argument("--input", help="CSV file, or - for stdin (default)")
    u.add_argument("--tank", action="store_true", help="use the two-tank augmentation")
    u.add_argument("--augment", help="y_offset,y_scale,u_scale,sample_period[,u_bias]")
    u.set_defaults(func=cmd_tune)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (TrainingDivergedError, FloatingPointError, NumericInputError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, CheckpointError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

if __name__ == "__main__":
    sys.exit(main())
