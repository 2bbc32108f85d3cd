"""Command-line entry point: training, evaluation, quantisation, traces.

Every subcommand is non-interactive, writes only under --outdir, and is
deterministic given (--config, --set overrides, --seed). Exit codes:
0 success, 2 usage, 3 config, 4 data/checkpoint, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import persistence, sac, spttq
from .autodiff import NumericalError
from .envs import make_env
from .persistence import CheckpointError, ConfigError
from .snn import LEAKY, SLEAKY

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERICAL = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikerl",
        description="Train, quantise, and evaluate spiking-actor SAC policies "
                    "on the kinematic (kenv) and dynamic (denv) arm simulators.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", metavar="PATH", help="config file (INI sections)")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       dest="overrides", help="override one config key (repeatable)")
        p.add_argument("--preset", choices=("full", "desk"), default="full",
                       help="base hyperparameter preset (default: full)")
        p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
        p.add_argument("--outdir", default="runs", help="output directory (default: runs)")
        p.add_argument("--env", choices=("kenv", "denv"), default="kenv",
                       help="environment (default: kenv)")
        if checkpoint:
            p.add_argument("checkpoint", help="actor checkpoint path")

    p = sub.add_parser("train", help="train one SAC variant")
    common(p)
    p.add_argument("--variant", choices=sac.VARIANTS, required=True,
                   help="actor/critic substrate combination")

    p = sub.add_parser("eval", help="evaluate a trained actor checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--cutoff", type=int, default=None,
                   help="SPTTQ time-step cutoff (default: full T)")
    p.add_argument("--neuron", choices=(LEAKY, SLEAKY), default=LEAKY,
                   help="inference neuron mode (default: leaky)")
    p.add_argument("--episodes", type=int, default=50, help="episodes (default: 50)")
    p.add_argument("--baseline", metavar="PATH", default=None,
                   help="report CSV to compute power/latency decrements against")
    p.add_argument("--jobs", type=int, default=os.cpu_count(),
                   help="parallel evaluation workers (default: logical CPUs)")

    p = sub.add_parser("spttq", help="post-training temporal quantisation sweep")
    common(p, checkpoint=True)
    p.add_argument("--delta", type=float, default=0.95,
                   help="performance retention fraction (default: 0.95)")
    p.add_argument("--episodes", type=int, default=50, help="episodes per cutoff")
    p.add_argument("--jobs", type=int, default=os.cpu_count(),
                   help="parallel evaluation workers (default: logical CPUs)")

    p = sub.add_parser("sweep", help="evaluate every cutoff for both neuron modes")
    common(p, checkpoint=True)
    p.add_argument("--episodes", type=int, default=50, help="episodes per cutoff")
    p.add_argument("--jobs", type=int, default=os.cpu_count(),
                   help="parallel evaluation workers (default: logical CPUs)")

    p = sub.add_parser("trace", help="export decoded-output traces and stable-point histogram")
    common(p, checkpoint=True)
    p.add_argument("--episodes", type=int, default=5, help="episodes (default: 5)")

    p = sub.add_parser("floor", help="random-policy baseline report")
    common(p)
    p.add_argument("--episodes", type=int, default=50, help="episodes (default: 50)")
    return parser


def load_run_config(args) -> persistence.RunConfig:
    base = persistence.desk_preset() if args.preset == "desk" else persistence.default_config()
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        base = persistence.load_config(args.config, base)
    overrides = persistence.parse_overrides(args.overrides)
    return persistence.config_from_flat(overrides, base)


def load_spiking_checkpoint(path: str, env_name: str):
    actor, meta = persistence.load_checkpoint(path)
    if meta.get("env") not in (None, env_name):
        raise CheckpointError(
            f"checkpoint was trained on {meta.get('env')!r}, not {env_name!r}")
    return actor, meta


def require_spiking(actor, meta):
    if not getattr(actor, "is_spiking", False):
        raise CheckpointError(
            f"variant {meta.get('variant')!r} has an artificial actor; "
            "this command needs a spiking checkpoint (hsac/ssac)")


def write_report(path: str, report: spttq.EvalReport):
    persistence.write_metrics_csv(path, spttq.SWEEP_HEADER, [spttq.sweep_row(report)])


def read_baseline(path: str) -> tuple[float, float]:
    """(spikes_mean, time_steps_mean) from a previously written report CSV."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise CheckpointError(f"cannot read baseline report: {e}") from e
    if not rows:
        raise CheckpointError(f"baseline report {path} has no data rows")
    row = rows[0]
    try:
        return float(row["total_spikes"]), float(row["time_steps_mean"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"baseline report {path} is malformed: {e}") from e


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    outdir = os.path.join(args.outdir, f"{args.variant}_{args.env}_seed{args.seed}")
    os.makedirs(outdir, exist_ok=True)
    persistence.save_config(os.path.join(outdir, "config.ini"), cfg)
    result = sac.train(args.variant, args.env, cfg, args.seed, outdir)
    print(f"trained {args.variant} on {args.env}: best eval {result.best_eval:.6g}, "
          f"final eval {result.final_eval:.6g}")
    print(f"log: {result.log_path}")
    print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    env = make_env(args.env, cfg.kenv, cfg.denv)
    actor, meta = load_spiking_checkpoint(args.checkpoint, args.env)
    os.makedirs(args.outdir, exist_ok=True)
    out = os.path.join(args.outdir, "eval_report.csv")
    if not getattr(actor, "is_spiking", False):
        report = spttq.evaluate_artificial(actor, env, args.episodes, args.seed)
    else:
        tau = args.cutoff if args.cutoff is not None else actor.time_steps
        report = spttq.evaluate_policy(actor, env, tau, args.neuron,
                                       episodes=args.episodes, seed=args.seed,
                                       jobs=args.jobs)
        if args.baseline:
            spikes_base, steps_base = read_baseline(args.baseline)
            report.power_decrement = spttq.decrement_percent(report.spikes_mean, spikes_base)
            report.latency_decrement = spttq.decrement_percent(report.time_steps_mean,
                                                               steps_base)
    write_report(out, report)
    print(f"reward mean {report.return_mean:.6g} over {args.episodes} episodes; "
          f"report: {out}")
    return EXIT_OK


def cmd_spttq(args) -> int:
    cfg = load_run_config(args)
    env = make_env(args.env, cfg.kenv, cfg.denv)
    actor, meta = load_spiking_checkpoint(args.checkpoint, args.env)
    require_spiking(actor, meta)
    os.makedirs(args.outdir, exist_ok=True)
    result = spttq.spttq_optimize(actor, env, args.delta, episodes=args.episodes,
                                  seed=args.seed)
    rows = [spttq.sweep_row(result.baseline_report)]
    rows += [spttq.sweep_row(result.cutoff_reports[t])
             for t in sorted(result.cutoff_reports, reverse=True)]
    persistence.write_metrics_csv(os.path.join(args.outdir, "spttq_sweep.csv"),
                                  spttq.SWEEP_HEADER, rows)
    out_ckpt = os.path.join(args.outdir, "checkpoint_sleaky.spk")
    persistence.save_checkpoint(out_ckpt, result.converted_actor,
                                {**meta, "spttq_tau": result.tau})
    print(f"selected cutoff tau = {result.tau} "
          f"(threshold {result.threshold:.6g}, floor {result.r_floor:.6g})")
    print(f"converted checkpoint: {out_ckpt}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_run_config(args)
    env = make_env(args.env, cfg.kenv, cfg.denv)
    actor, meta = load_spiking_checkpoint(args.checkpoint, args.env)
    require_spiking(actor, meta)
    os.makedirs(args.outdir, exist_ok=True)
    total = actor.time_steps
    rows = []
    for mode in (LEAKY, SLEAKY):
        baseline = spttq.evaluate_policy(actor, env, total, mode,
                                         episodes=args.episodes, seed=args.seed,
                                         jobs=args.jobs)
        rows.append(spttq.sweep_row(baseline))
        for t in range(total - 1, 0, -1):
            rep = spttq.evaluate_policy(actor, env, t, mode, episodes=args.episodes,
                                        seed=args.seed, baseline=baseline,
                                        jobs=args.jobs)
            rows.append(spttq.sweep_row(rep))
    out = os.path.join(args.outdir, "cutoff_sweep.csv")
    persistence.write_metrics_csv(out, spttq.SWEEP_HEADER, rows)
    print(f"sweep written: {out}")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = load_run_config(args)
    env = make_env(args.env, cfg.kenv, cfg.denv)
    actor, meta = load_spiking_checkpoint(args.checkpoint, args.env)
    require_spiking(actor, meta)
    os.makedirs(args.outdir, exist_ok=True)
    eps = cfg.spttq.stability_eps
    total = actor.time_steps
    counts = {}
    for mode in (LEAKY, SLEAKY):
        net_actor = actor if actor.net.neuron_kind == mode else actor.convert(mode)
        rows = []
        mode_counts = np.zeros(total, dtype=int)
        unstable = 0
        rl_step = 0
        for ep in range(args.episodes):
            ep_seed = int(np.random.default_rng([args.seed, ep]).integers(2 ** 31))
            rec = spttq.run_inference_episode(net_actor, env, total, mode, ep_seed,
                                              record=True)
            for trace in rec.traces:
                rl_step += 1
                sp = spttq.stable_point(trace, eps)
                if sp is None:
                    unstable += 1
                else:
                    mode_counts[sp - 1] += 1
                for t, out in enumerate(trace, start=1):
                    stable = int(sp is not None and t >= sp)
                    rows.append((rl_step, t, float(out[0]), stable))
        persistence.write_metrics_csv(
            os.path.join(args.outdir, f"trace_{mode}.csv"),
            ("rl_step", "time_step", "decoded_output", "stable"), rows)
        counts[mode] = mode_counts
    persistence.write_metrics_csv(
        os.path.join(args.outdir, "stable_point_histogram.csv"),
        ("time_step", "count_leaky", "count_sleaky"),
        [(t + 1, int(counts[LEAKY][t]), int(counts[SLEAKY][t])) for t in range(total)])
    print(f"traces and histogram written under {args.outdir}")
    return EXIT_OK


def cmd_floor(args) -> int:
    cfg = load_run_config(args)
    env = make_env(args.env, cfg.kenv, cfg.denv)
    os.makedirs(args.outdir, exist_ok=True)
    report = spttq.random_policy_floor(env, args.episodes, args.seed)
    out = os.path.join(args.outdir, "floor_report.csv")
    write_report(out, report)
    print(f"random-policy floor on {args.env}: mean reward {report.return_mean:.6g} "
          f"over {args.episodes} episodes; report: {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "spttq": cmd_spttq,
            "sweep": cmd_sweep, "trace": cmd_trace, "floor": cmd_floor}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
