"""Command line entry point: ``embodied-comm <subcommand> --config FILE --seed N``.

Outputs go under ``$EMBODIED_COMM_OUT`` (default ``./runs``) unless the
config sets ``experiment.output_dir``. Tables are printed as comma-separated
text and written next to the figures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .agents import AgentPair
from .config import ExperimentConfig, load_config, preset
from .diffcore import ConfigurationError, UsageError
from .evaluation import EvalReport, Population, crossplay_matrix
from .protocol import pretrain_torque_curriculum

log = logging.getLogger("embodied_comm")


def _config(args) -> ExperimentConfig:
    cfg = preset(getattr(args, "scale", None) or args.preset)
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg = cfg.replace(experiment_seed=args.seed)
    return cfg


def _load_population(cfg, run_dir):
    run_dir = Path(run_dir)
    paths = sorted((run_dir / "checkpoints").glob("agent_*.npz"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise UsageError(f"no checkpoints under {run_dir / 'checkpoints'}")
    pairs = [AgentPair.load(p)[0] for p in paths]
    return Population(pairs, ex.topology(cfg), ex.noise_params(cfg), ex.intent_distribution(cfg),
                      cfg.training_horizon, cfg.training_inertia)


def cmd_train_sp(cfg, args):
    cfg = cfg.replace(observer_iterations=0)
    out = ex.run_experiment(cfg, figures=not args.no_figures)
    print((out / "crossplay.csv").read_text(), end="")
    return out


def cmd_pretrain_energy(cfg, args):
    out = cfg.run_dir()
    rows = []
    for i in range(cfg.population_size):
        seed = ex.task_seed(cfg.experiment_seed, ex.SEED_MEMBER, i)
        pair = AgentPair.fresh(i, seed, ex.topology(cfg), cfg.intents_count, cfg.training_horizon,
                               cfg.training_input_mode, cfg.network_hidden,
                               ex.condition_descriptor(cfg))
        _, hist = pretrain_torque_curriculum(
            pair.policy, ex.train_config(cfg, seed), ex.topology(cfg), ex.noise_params(cfg),
            np.random.default_rng(seed), cfg.training_curriculum_iterations,
            cfg.training_curriculum_threshold)
        pair.save(out / "checkpoints" / f"agent_{i}.npz", {"stage": "pretrained"})
        rows += [[str(i), k, e] for k, e in enumerate(hist)]
    cfg.save(out / "config.ini")
    path = ex.write_csv(out / "curriculum.csv", cfg, ["agent", "iteration", "energy"], rows)
    print(path.read_text(), end="")
    return out


def cmd_eval_crossplay(cfg, args):
    pop = _load_population(cfg, args.run_dir)
    report = EvalReport(crossplay=crossplay_matrix(pop, cfg.training_batch,
                                                   ex.task_rng(cfg.experiment_seed, ex.SEED_EVAL)))
    path = ex.write_text(Path(args.run_dir) / "crossplay_eval.csv", cfg, report.crossplay_csv())
    print(path.read_text(), end="")
    return path


def cmd_eval_observer(cfg, args):
    pop = _load_population(cfg, args.run_dir)
    report = EvalReport(observer=ex.observer_cells(cfg, pop))
    run_dir = Path(args.run_dir)
    ex.write_text(run_dir / "observer_curves.csv", cfg, report.observer_csv())
    path = ex.write_text(run_dir / "observer_table.csv", cfg, report.observer_table_csv())
    if not args.no_figures:
        from . import plotting

        plotting.observer_curves(report.observer, run_dir / "figures" / "observer_curves.png", cfg)
    print(path.read_text(), end="")
    return path


def cmd_run_discrete(cfg, args):
    cfg = cfg.replace(experiment_domain="discrete", intents_count=5)
    out = ex.run_experiment(cfg, figures=not args.no_figures)
    print((out / "discrete_summary.csv").read_text(), end="")
    return out


def cmd_reproduce_grid(cfg, args):
    result = ex.reproduce_grid(args.scale, base=cfg, figures=not args.no_figures)
    print(result["text"], end="")
    for key, err in result["errors"].items():
        print(f"# failed cell {key}: {err}", file=sys.stderr)
    return result


def cmd_export_traj(cfg, args):
    paths = ex.export_trajectories(
        args.checkpoint, args.intents, args.count, args.upsample, args.out, cfg.experiment_seed,
        ex.noise_params(cfg), cfg.training_horizon, cfg.body_euler_order)
    for p in paths:
        print(p)
    return paths


COMMANDS = {
    "train-sp": (cmd_train_sp, "train a population in self-play and report cross-play"),
    "pretrain-energy": (cmd_pretrain_energy, "run only the torque curriculum"),
    "eval-crossplay": (cmd_eval_crossplay, "cross-play matrix of a trained run directory"),
    "eval-observer": (cmd_eval_observer, "external-observer cells for a trained run directory"),
    "run-discrete": (cmd_run_discrete, "discrete-channel task, both conditions"),
    "reproduce-grid": (cmd_reproduce_grid, "continuous tables and discrete summary"),
    "export-traj": (cmd_export_traj, "export rollouts of a checkpoint as JSON"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="embodied-comm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--preset", default="desk", choices=["desk", "full"])
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--no-figures", action="store_true")
        if name in ("eval-crossplay", "eval-observer"):
            p.add_argument("run_dir", help="directory holding checkpoints/agent_*.npz")
        if name == "reproduce-grid":
            p.add_argument("--scale", default="desk", choices=["desk", "full"])
        if name == "export-traj":
            p.add_argument("checkpoint")
            p.add_argument("--intents", type=int, nargs="+", default=[0, 1])
            p.add_argument("--count", type=int, default=1)
            p.add_argument("--upsample", type=int, default=30)
            p.add_argument("--out")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](cfg, args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
