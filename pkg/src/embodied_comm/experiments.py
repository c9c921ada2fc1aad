"""Experiment orchestration: populations, evaluations, the reproduction grid and exports."""

from __future__ import annotations

import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import discrete as dsc
from .agents import LATENT, TRAJECTORY, AgentPair
from .body import default_arm, fk_positions, upsample_rotations
from .config import ExperimentConfig
from .diffcore import UsageError
from .evaluation import (
    FEEDS,
    EvalReport,
    Population,
    conditional_entropy_estimate,
    crossplay_matrix,
    external_observer_eval,
    fit_intent_energy_gaussians,
    intent_energy_trace,
    max_class_baseline,
    off_diagonal_mean,
)
from .intents import make_distribution
from .protocol import NoiseParams, TrainConfig, pretrain_torque_curriculum, rollout, train_selfplay

log = logging.getLogger(__name__)

# task codes keep the seed streams of different stages apart
SEED_MEMBER, SEED_OBSERVER, SEED_EVAL, SEED_DISCRETE, SEED_EXPORT = range(5)

# measured values are printed beside these (train feed, test feed) -> accuracy
REFERENCE_TABLES = {
    (2, False): {("trajectory", "trajectory"): 0.75, ("trajectory", "latent"): 0.97,
                 ("latent", "trajectory"): 0.67, ("latent", "latent"): 0.997},
    (2, True): {("trajectory", "trajectory"): 0.66, ("trajectory", "latent"): 0.995,
                ("latent", "trajectory"): 0.67, ("latent", "latent"): 0.999},
    (5, False): {("trajectory", "trajectory"): 0.37, ("trajectory", "latent"): 0.76,
                 ("latent", "trajectory"): 0.44, ("latent", "latent"): 0.60},
    (5, True): {("trajectory", "trajectory"): 0.44, ("trajectory", "latent"): 0.70,
                ("latent", "trajectory"): 0.44, ("latent", "latent"): 0.70},
    (10, False): {("trajectory", "trajectory"): 0.30, ("trajectory", "latent"): 0.61,
                  ("latent", "trajectory"): 0.34, ("latent", "latent"): 0.55},
    (10, True): {("trajectory", "trajectory"): 0.56, ("trajectory", "latent"): 0.56,
                 ("latent", "trajectory"): 0.35, ("latent", "latent"): 0.56},
}
REFERENCE_DISCRETE = {
    ("task1", dsc.ZIPF): 0.15, ("task1", dsc.ZIPF_ENERGY): 0.58,
    ("task2", dsc.ZIPF): 0.20, ("task2", dsc.ZIPF_ENERGY): 0.35,
}


def task_seed(root, code, index=0):
    """Independent 64-bit seed for one task; identical in serial and parallel runs."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(int(code), int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def task_rng(root, code, index=0):
    return np.random.default_rng(task_seed(root, code, index))


def topology(cfg):
    return default_arm(cfg.body_joints, cfg.body_link_length, cfg.body_euler_order)


def noise_params(cfg):
    return NoiseParams(cfg.noise_position, cfg.noise_rotation, cfg.noise_action)


def intent_distribution(cfg):
    return make_distribution(cfg.intents_count, cfg.intents_exponent, cfg.intents_uniform)


def train_config(cfg, seed):
    return TrainConfig(
        n_intents=cfg.intents_count,
        exponent=cfg.intents_exponent,
        uniform=cfg.intents_uniform,
        energy_weight=cfg.training_energy_weight,
        horizon=cfg.training_horizon,
        batch=cfg.training_batch,
        lr=cfg.training_lr,
        iterations=cfg.training_iterations,
        seed=seed,
        input_mode=cfg.training_input_mode,
        inertia=cfg.training_inertia,
    )


def condition_descriptor(cfg):
    return {
        "n_intents": cfg.intents_count,
        "prior": "uniform" if cfg.intents_uniform else f"zipf(s={cfg.intents_exponent})",
        "energy_weight": cfg.training_energy_weight,
        "input_mode": cfg.training_input_mode,
        "curriculum": cfg.training_curriculum,
    }


@dataclass
class MemberResult:
    pair: AgentPair
    log: object
    curriculum: list = field(default_factory=list)


def train_member(cfg: ExperimentConfig, index: int) -> MemberResult:
    """Train population member ``index``; depends only on (cfg, index)."""
    seed = task_seed(cfg.experiment_seed, SEED_MEMBER, index)
    topo = topology(cfg)
    noise = noise_params(cfg)
    tcfg = train_config(cfg, seed)
    pair = AgentPair.fresh(index, seed, topo, cfg.intents_count, cfg.training_horizon,
                           cfg.training_input_mode, cfg.network_hidden, condition_descriptor(cfg))
    rng = np.random.default_rng(seed)
    history = []
    if cfg.training_curriculum:
        _, history = pretrain_torque_curriculum(
            pair.policy, tcfg, topo, noise, rng,
            iterations=cfg.training_curriculum_iterations,
            threshold=cfg.training_curriculum_threshold,
        )
    pair, tlog = train_selfplay(pair, tcfg, topo, noise, rng)
    return MemberResult(pair, tlog, history)


def train_population(cfg: ExperimentConfig):
    """All members, serially or across ``experiment.workers`` processes."""
    indices = range(cfg.population_size)
    if cfg.experiment_workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.experiment_workers) as ex:
            members = list(ex.map(train_member, [cfg] * len(indices), indices))
    else:
        members = [train_member(cfg, i) for i in indices]
    pop = Population([m.pair for m in members], topology(cfg), noise_params(cfg),
                     intent_distribution(cfg), cfg.training_horizon, cfg.training_inertia)
    return pop, members


def observer_cells(cfg, pop, cells=None, repeat=0):
    """External-observer results for the requested (train feed, test feed) cells."""
    cells = cells or [(a, b) for a in FEEDS for b in FEEDS]
    iterations = cfg.observer_iterations
    out = {}
    for k, (tr, te) in enumerate(cells):
        rng = task_rng(cfg.experiment_seed, SEED_OBSERVER, 100 * repeat + k)
        out[(tr, te)] = external_observer_eval(
            pop, tr, te, iterations, rng, batch=cfg.observer_batch,
            split_seed=cfg.observer_split_seed, lr=cfg.observer_lr, hidden=cfg.network_hidden,
            eval_every=cfg.observer_eval_every,
        )
    return out


def evaluate_population(cfg, pop, cells=None):
    rng = task_rng(cfg.experiment_seed, SEED_EVAL)
    report = EvalReport()
    report.crossplay = crossplay_matrix(pop, cfg.training_batch, rng)
    for i, pair in enumerate(pop.pairs):
        fits = fit_intent_energy_gaussians(pop, pair, cfg.training_batch, rng)
        report.gaussians[i] = fits
        report.entropy[i] = conditional_entropy_estimate(fits, pop.dist, rng)
    if len(pop) >= 5 and cfg.observer_iterations > 0:
        report.observer = observer_cells(cfg, pop, cells)
    return report


# ---------------------------------------------------------------- persistence

def provenance(cfg):
    return f"# config_hash={cfg.config_hash()}, seed={cfg.experiment_seed}\n"


def write_csv(path, cfg, header, rows, fmt="{:.6g}"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [provenance(cfg), ",".join(header) + "\n"]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt.format(v) for v in row) + "\n")
    path.write_text("".join(lines))
    return path


def write_text(path, cfg, body):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(provenance(cfg) + body)
    return path


def write_metadata(path, cfg, extra=None):
    meta = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.experiment_seed,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "euler_order": cfg.body_euler_order,
        "rotation_convention": "intrinsic, R = R1 @ R2 @ R3 in euler_order, angles stored per x/y/z axis",
        "angle_wrap": "[0, 2pi), straight-through gradient",
        "time_step": 1,
        "discriminator_input": "per step: positions, rotations, action (all joints)",
        "cross_feed_adapters": "latent feed to trajectory observer: scalar then zeros; "
                               "trajectory feed to latent observer: mean training latent",
    }
    meta.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return path


def save_population_outputs(cfg, out, members, report, figures=True):
    out = Path(out)
    for m in members:
        i = m.pair.agent_id
        m.pair.save(out / "checkpoints" / f"agent_{i}.npz",
                    {"config_hash": cfg.config_hash(), "root_seed": cfg.experiment_seed})
        write_csv(out / "logs" / f"train_agent_{i}.csv", cfg, m.log.header, m.log.rows)
        if m.curriculum:
            write_csv(out / "logs" / f"curriculum_agent_{i}.csv", cfg, ["iteration", "energy"],
                      [[k, e] for k, e in enumerate(m.curriculum)])
        trace = intent_energy_trace(m.log)
        rows = [[it, *e, *r] for it, e, r in zip(trace["iteration"], trace["energy"], trace["rank"])]
        n = cfg.intents_count
        write_csv(out / "logs" / f"intent_trace_agent_{i}.csv", cfg,
                  ["iteration"] + [f"energy_{g}" for g in range(n)] + [f"rank_{g}" for g in range(n)],
                  rows)
    write_text(out / "crossplay.csv", cfg, report.crossplay_csv())
    write_text(out / "gaussians.csv", cfg, report.gaussians_csv())
    if report.observer:
        write_text(out / "observer_curves.csv", cfg, report.observer_csv())
        write_text(out / "observer_table.csv", cfg, report.observer_table_csv())
    if figures:
        from . import plotting

        plotting.learning_curves([m.log for m in members], out / "figures" / "learning_curves.png",
                                 cfg)
        plotting.energy_gaussians(report.gaussians, out / "figures" / "energy_gaussians.png", cfg)
        plotting.intent_energy_traces([intent_energy_trace(m.log) for m in members],
                                      out / "figures" / "intent_energy.png", cfg)
        if report.observer:
            plotting.observer_curves(report.observer, out / "figures" / "observer_curves.png", cfg)


def run_continuous(cfg, out, figures=True):
    pop, members = train_population(cfg)
    report = evaluate_population(cfg, pop)
    save_population_outputs(cfg, out, members, report, figures)
    summary = {
        "sp_mean": float(np.diag(report.crossplay).mean()),
        "cp_mean": off_diagonal_mean(report.crossplay),
        "max_class": max_class_baseline(pop.dist),
    }
    for (tr, te), res in report.observer.items():
        summary[f"observer_{tr}_{te}"] = res.final
    return pop, members, report, summary


def discrete_spec(cfg):
    make = dsc.task1 if cfg.discrete_task == "task1" else dsc.task2
    return make(n_intents=cfg.intents_count, exponent=cfg.intents_exponent)


def discrete_seeds(cfg):
    return [task_seed(cfg.experiment_seed, SEED_DISCRETE, i) % (2**32) for i in range(cfg.discrete_seeds)]


def run_discrete(cfg, out=None, figures=True):
    """Both conditions of one discrete task; returns {condition: run_condition result}."""
    spec = discrete_spec(cfg)
    results = {}
    for cond in dsc.CONDITIONS:
        results[cond] = dsc.run_condition(
            spec, cond, discrete_seeds(cfg), energy_weight=cfg.discrete_energy_weight,
            lr=cfg.discrete_lr, iterations=cfg.discrete_iterations,
            init_scale=cfg.discrete_init_scale,
        )
    if out is not None:
        out = Path(out)
        rows = [[cond, r["sp_mean"], r["cp_mean"], r["cp_std"],
                 REFERENCE_DISCRETE.get((spec.name, cond), float("nan"))] for cond, r in results.items()]
        write_csv(out / "discrete_summary.csv", cfg,
                  ["condition", "sp_mean", "cp_mean", "cp_std", "reference_cp"], rows)
        for cond, r in results.items():
            tag = cond.replace("+", "_")
            grid = r["grid"]
            write_csv(out / f"discrete_cp_grid_{spec.name}_{tag}.csv", cfg,
                      ["sender"] + [f"receiver_{j}" for j in range(len(grid))],
                      [[str(i), *row] for i, row in enumerate(grid)])
            for pair in r["pairs"]:
                for name, mat in (("sender", pair.sender_policy()),
                                  ("receiver", pair.receiver_policy())):
                    cols = mat.shape[1]
                    label = "action" if name == "sender" else "intent"
                    write_csv(out / "heatmaps" / f"{spec.name}_{tag}_seed{pair.seed}_{name}.csv",
                              cfg, ["row"] + [f"{label}_{j}" for j in range(cols)],
                              [[str(i), *row] for i, row in enumerate(mat)])
        if figures:
            from . import plotting

            for cond, r in results.items():
                tag = cond.replace("+", "_")
                plotting.discrete_protocols(r["pairs"][:3],
                                            out / "figures" / f"{spec.name}_{tag}_protocols.png", cfg)
                plotting.crossplay_heatmap(r["grid"], out / "figures" / f"{spec.name}_{tag}_cp.png",
                                           cfg, title=f"{spec.name} {cond} cross-play")
    return results


def run_experiment(cfg: ExperimentConfig, figures=True):
    """Run one configured experiment and return its output directory."""
    out = cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    if cfg.experiment_domain == "discrete":
        results = run_discrete(cfg, out, figures)
        extra = {f"cp_mean_{c}": r["cp_mean"] for c, r in results.items()}
    else:
        _, _, _, summary = run_continuous(cfg, out, figures)
        extra = summary
    write_metadata(out / "metadata.txt", cfg, extra)
    return out


# ------------------------------------------------------------ reproduction grid

def grid_configs(base: ExperimentConfig):
    """The continuous cells of Tables 1-2: n in (2, 5, 10) with and without curriculum."""
    out = []
    for n in (2, 5, 10):
        for curriculum in (False, True):
            out.append(base.replace(
                experiment_name=f"{base.experiment_name}-n{n}-{'curr' if curriculum else 'nocurr'}",
                intents_count=n, training_curriculum=curriculum,
                observer_iterations=1000 if n == 10 else base.observer_iterations,
            ))
    return out


def format_table(n, curriculum, measured):
    ref = REFERENCE_TABLES[(n, curriculum)]
    lines = [f"N = {n} intents, {'torque curriculum' if curriculum else 'no curriculum'}",
             "train\\test,trajectory,latent,reference_trajectory,reference_latent"]
    for tr in FEEDS:
        m = [measured.get((tr, te), float("nan")) for te in FEEDS]
        p = [ref[(tr, te)] for te in FEEDS]
        lines.append(f"{tr},{m[0]:.3f},{m[1]:.3f},{p[0]:.3f},{p[1]:.3f}")
    return "\n".join(lines) + "\n"


def reproduce_grid(scale="desk", base=None, figures=False):
    """The 24 continuous observer cells plus the 4 discrete numbers, beside reference values.

    Failing cells are recorded as NaN with the error message and the grid continues.
    """
    from .config import preset

    base = base or preset(scale)
    tables, errors = {}, {}
    for cfg in grid_configs(base):
        key = (cfg.intents_count, cfg.training_curriculum)
        try:
            _, _, report, _ = run_continuous(cfg, cfg.run_dir(), figures)
            tables[key] = {cell: res.final for cell, res in report.observer.items()}
        except Exception as exc:  # keep going; the failure is reported per cell
            log.error("grid cell %s failed: %s", key, exc)
            errors[key] = repr(exc)
            tables[key] = {}
    discrete = {}
    for task in ("task1", "task2"):
        cfg = base.replace(experiment_domain="discrete", discrete_task=task, intents_count=5,
                           experiment_name=f"{base.experiment_name}-discrete-{task}")
        try:
            res = run_discrete(cfg, cfg.run_dir(), figures)
            for cond, r in res.items():
                discrete[(task, cond)] = r["cp_mean"]
        except Exception as exc:
            log.error("discrete %s failed: %s", task, exc)
            errors[("discrete", task)] = repr(exc)
    text = "".join(format_table(n, c, tables[(n, c)]) + "\n" for (n, c) in sorted(tables))
    text += "discrete task,condition,cp_mean,reference_cp\n"
    for (task, cond), ref in REFERENCE_DISCRETE.items():
        text += f"{task},{cond},{discrete.get((task, cond), float('nan')):.3f},{ref:.3f}\n"
    root = base.output_root()
    root.mkdir(parents=True, exist_ok=True)
    write_text(root / f"{base.experiment_name}-grid.csv", base, text)
    return {"tables": tables, "discrete": discrete, "errors": errors, "text": text}


# ------------------------------------------------------------------ export

def export_trajectories(checkpoint, intents, count, upsample=30, out_dir=None, seed=0,
                        noise=None, horizon=5, euler_order="XYZ"):
    """Write one JSON document per rollout; returns the written paths.

    Frames are upsampled by linear interpolation of the unwrapped joint angles
    (cumulative executed actions), then wrapped back to [0, 2pi); positions are
    recomputed by forward kinematics on every frame.
    """
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise UsageError(f"checkpoint {checkpoint} does not exist")
    pair, meta = AgentPair.load(checkpoint)
    topo = default_arm(pair.policy.dof // 3, euler_order=euler_order)
    noise = noise or NoiseParams()
    rng = task_rng(seed, SEED_EXPORT)
    out_dir = Path(out_dir or checkpoint.parent / "export")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for g in intents:
        if not 0 <= int(g) < pair.policy.n_intents:
            raise UsageError(f"intent {g} outside [0, {pair.policy.n_intents})")
        traj = rollout(pair.policy, np.full(count, int(g)), topo, noise, horizon, rng)
        actions = traj.action_array()  # (B, T, J, 3)
        start = topo.reference_pose(1).rotations.value[0]
        for b in range(count):
            unwrapped = np.concatenate([start[None], start[None] + np.cumsum(actions[b], axis=0)])
            frames = upsample_rotations(unwrapped, upsample, unwrap=False)
            positions = fk_positions(frames, topo).value
            doc = {
                "format": "embodied-comm trajectory v1",
                "upsampled": upsample is not None and upsample > horizon + 1,
                "upsample_method": "linear interpolation of unwrapped joint angles",
                "frames": int(frames.shape[0]),
                "intent": int(g),
                "rollout": b,
                "agent": meta.get("agent_id"),
                "topology": topo.metadata(),
                "rotations": frames.tolist(),
                "positions": positions.tolist(),
                "actions": actions[b].tolist(),
                "energy": float(traj.energy.value[b]),
            }
            path = out_dir / f"intent{int(g)}_rollout{b}.json"
            path.write_text(json.dumps(doc, indent=1))
            written.append(path)
    return written


def environment_summary():
    return f"python {sys.version.split()[0]}, numpy {np.__version__}"
