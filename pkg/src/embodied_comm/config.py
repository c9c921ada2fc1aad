"""Flat key=value experiment configuration with named presets."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .diffcore import ConfigurationError

OUTPUT_ENV = "EMBODIED_COMM_OUT"

SECTIONS = ("experiment", "intents", "training", "body", "noise", "network",
            "population", "observer", "discrete")


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of a run. Field ``<section>_<key>`` maps to ``[section] key``."""

    experiment_domain: str = "continuous"
    experiment_name: str = "run"
    experiment_seed: int = 0
    experiment_workers: int = 1
    experiment_output_dir: str = ""

    intents_count: int = 2
    intents_exponent: float = 1.0
    intents_uniform: bool = False

    training_energy_weight: float = 0.01
    training_horizon: int = 5
    training_batch: int = 256
    training_lr: float = 1e-3
    training_iterations: int = 1500
    training_input_mode: str = "trajectory"
    training_curriculum: bool = False
    training_curriculum_iterations: int = 800
    training_curriculum_threshold: float = 0.05
    training_inertia: float = 1.0

    body_joints: int = 4
    body_link_length: float = 1.0
    body_euler_order: str = "XYZ"

    noise_position: float = 2.0
    noise_rotation: float = 0.4
    noise_action: float = 0.4

    network_hidden: int = 128

    population_size: int = 6

    observer_iterations: int = 500
    observer_batch: int = 256
    observer_split_seed: int = 0
    observer_eval_every: int = 10
    observer_lr: float = 1e-3

    discrete_task: str = "task1"
    discrete_energy_weight: float = 0.05
    discrete_lr: float = 1.0
    discrete_iterations: int = 3000
    discrete_init_scale: float = 0.1
    discrete_seeds: int = 5

    def __post_init__(self):
        if self.experiment_domain not in ("continuous", "discrete"):
            raise ConfigurationError(f"experiment.domain must be continuous or discrete, "
                                     f"got {self.experiment_domain!r}")
        if self.training_input_mode not in ("trajectory", "latent"):
            raise ConfigurationError(f"training.input_mode must be trajectory or latent, "
                                     f"got {self.training_input_mode!r}")
        if self.discrete_task not in ("task1", "task2"):
            raise ConfigurationError(f"discrete.task must be task1 or task2, "
                                     f"got {self.discrete_task!r}")
        for name in ("intents_count", "training_horizon", "training_batch", "population_size",
                     "body_joints", "network_hidden", "discrete_seeds", "experiment_workers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{_dotted(name)} must be >= 1")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def with_overrides(self, mapping):
        """Apply ``{"section.key": value}`` overrides (values may be strings)."""
        return self.replace(**_coerce_all(mapping))

    def output_root(self):
        root = self.experiment_output_dir or os.environ.get(OUTPUT_ENV, "runs")
        return Path(root)

    def run_dir(self):
        return self.output_root() / f"{self.experiment_name}-{self.config_hash()[:10]}"

    def serialize(self):
        cp = configparser.ConfigParser(interpolation=None)
        for sec in SECTIONS:
            cp[sec] = {}
        for f in fields(self):
            sec, key = f.name.split("_", 1)
            cp[sec][key] = _format(getattr(self, f.name))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def config_hash(self):
        # the output location does not change what is computed
        return hashlib.sha256(self.replace(experiment_output_dir="").serialize().encode()).hexdigest()

    def save(self, path):
        Path(path).write_text(self.serialize())
        return Path(path)


def _dotted(name):
    sec, key = name.split("_", 1)
    return f"{sec}.{key}"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name, raw):
    kind = _TYPES[name]
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if not isinstance(raw, kind):
            raise ConfigurationError(f"{_dotted(name)} expects {kind.__name__}, got {raw!r}")
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"{_dotted(name)} expects {kind.__name__}, got {raw!r}") from None


def _coerce_all(mapping):
    unknown, out = [], {}
    for dotted, raw in mapping.items():
        name = dotted.replace(".", "_", 1)
        if name not in _FIELDS or "." not in dotted:
            unknown.append(dotted)
            continue
        out[name] = _coerce(name, raw)
    if unknown:
        raise ConfigurationError("unknown config keys: " + ", ".join(sorted(unknown)))
    return out


def parse_config(text, base=None):
    """Parse key=value sections; unknown sections or keys are rejected by name."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    mapping = {f"{sec}.{key}": value for sec in cp.sections() for key, value in cp[sec].items()}
    return (base or ExperimentConfig()).with_overrides(mapping)


def load_config(path, base=None):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(), base)


PRESETS = {
    "desk": ExperimentConfig(),
    "full": ExperimentConfig(
        training_batch=1024,
        training_iterations=3000,
        population_size=10,
        observer_batch=1024,
        observer_eval_every=1,
    ),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return cfg.replace(**overrides) if overrides else cfg
