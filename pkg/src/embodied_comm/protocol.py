"""The embodied referential game: noisy rollouts, losses and self-play training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .agents import LATENT, TRAJECTORY
from .body import fk_step
from .diffcore import Tensor, TrainingDiverged, UsageError
from .intents import intent_embedding, make_distribution, sample_intents

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class NoiseParams:
    position: float = 2.0  # feet, observation noise on joint positions
    rotation: float = 0.4  # radians, observation noise on joint rotations
    action: float = 0.4  # radians, actuation noise on every action DOF

    def __post_init__(self):
        for name in ("position", "rotation", "action"):
            if getattr(self, name) < 0:
                raise UsageError(f"noise {name} must be >= 0")


@dataclass
class TrainConfig:
    n_intents: int = 2
    exponent: float = 1.0
    uniform: bool = False
    energy_weight: float = 0.01
    horizon: int = 5
    batch: int = 1024
    lr: float = 1e-3
    iterations: int = 2000
    seed: int = 0
    input_mode: str = TRAJECTORY
    inertia: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.energy_weight < 0:
            raise UsageError("energy_weight must be >= 0")
        if self.horizon < 1:
            raise UsageError("horizon must be >= 1")
        if self.input_mode not in (TRAJECTORY, LATENT):
            raise UsageError(f"unknown input mode {self.input_mode!r}")

    @property
    def distribution(self):
        return make_distribution(self.n_intents, self.exponent, self.uniform)


@dataclass
class Trajectory:
    """A batch of rollouts; leading axis of every array is the batch."""

    intents: np.ndarray
    states: list  # Pose per step 1..T
    actions: list  # Tensor (B, J, 3) per step, after actuation noise
    observed: Tensor  # (B, T * 9J) flat noisy observation
    energy: Tensor  # (B,)

    @property
    def horizon(self):
        return len(self.actions)

    def action_array(self):
        return np.stack([a.value for a in self.actions], axis=1)  # (B, T, J, 3)

    def rotation_array(self):
        return np.stack([s.rotations.value for s in self.states], axis=1)

    def position_array(self):
        return np.stack([s.positions.value for s in self.states], axis=1)


def energy_loss(actions, inertia=1.0):
    """Squared norm of inertia-scaled angular accelerations, with rest at step 0.

    ``actions`` is a Tensor/array of shape (..., T, D) (D degrees of freedom);
    ``inertia`` is a scalar or a length-D vector. Returns shape (...).
    """
    actions = dc.as_tensor(actions)
    if actions.value.ndim < 2:
        raise UsageError(f"actions need shape (..., T, D), got {actions.shape}")
    inertia = np.asarray(inertia, dtype=np.float64)
    D = actions.shape[-1]
    if inertia.ndim > 0 and inertia.shape != (D,):
        raise UsageError(f"inertia has {inertia.shape[0]} entries for {D} degrees of freedom")
    T = actions.shape[-2]
    first = actions[..., :1, :]
    if T > 1:
        acc = dc.concat([first, dc.sub(actions[..., 1:, :], actions[..., :-1, :])], axis=-2)
    else:
        acc = first
    scaled = dc.mul(acc, inertia)
    return dc.sum_(dc.sum_(dc.square(scaled), axis=-1), axis=-1)


def prediction_loss(probs, target):
    """Negative log-probability of the target intent, floored at ``log(1e-12)``."""
    p = float(np.asarray(probs)[target])
    if p < PROB_FLOOR:
        log.warning("target probability %.3g below floor; clamping", p)
        p = PROB_FLOOR
    return -math.log(p)


def rollout(policy, intents, topo, noise, horizon, rng, leaves=None, inertia=1.0):
    """Roll out ``policy`` for a batch of intent ids.

    Noise draws are constants in the graph, so with ``leaves`` the result is
    differentiable in the policy parameters.
    """
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    intents = np.atleast_1d(np.asarray(intents, dtype=np.int64))
    B = intents.shape[0]
    onehot = intent_embedding(intents, policy.n_intents)
    pose = topo.reference_pose(B)
    states, actions = [], []
    for _ in range(horizon):
        mu = policy.act(pose, onehot, leaves)
        a = dc.gaussian_noise(mu, noise.action, rng)
        pose = fk_step(pose, a, topo)
        states.append(pose)
        actions.append(a)
    parts = []
    for pose, a in zip(states, actions):
        pos = dc.gaussian_noise(dc.reshape(pose.positions, (B, -1)), noise.position, rng)
        rot = dc.gaussian_noise(dc.reshape(pose.rotations, (B, -1)), noise.rotation, rng)
        parts += [pos, rot, dc.reshape(a, (B, -1))]
    observed = dc.concat(parts, axis=-1)
    stacked = dc.reshape(dc.stack(actions, axis=1), (B, horizon, -1))
    energy = energy_loss(stacked, inertia)
    return Trajectory(intents, states, actions, observed, energy)


def latent_energy(traj):
    """The scalar latent feature: the energy of each rollout's executed actions."""
    return traj.energy


def message(traj, mode):
    """What a training discriminator reads: the flat trajectory or the (B, 1) energy."""
    if mode == TRAJECTORY:
        return traj.observed
    B = traj.energy.shape[0]
    return dc.reshape(traj.energy, (B, 1))


def per_intent_mean(values, intents, n):
    out = np.full(n, np.nan)
    for g in range(n):
        sel = intents == g
        if sel.any():
            out[g] = values[sel].mean()
    return out


@dataclass
class TrainLog:
    n_intents: int
    rows: list = field(default_factory=list)

    @property
    def header(self):
        return ["iteration", "sp_accuracy", "loss_pred", "loss_energy"] + [
            f"energy_intent_{g}" for g in range(self.n_intents)
        ]

    def as_array(self):
        return np.array(self.rows, dtype=np.float64).reshape(-1, len(self.header))

    def column(self, name):
        return self.as_array()[:, self.header.index(name)]

    def per_intent_energy(self):
        return self.as_array()[:, 4:]


def selfplay_step(pair, cfg, topo, noise, rng, dist=None, train=True):
    """One iteration of the game; returns a log row. Updates both nets when ``train``."""
    dist = dist or cfg.distribution
    intents = sample_intents(dist, cfg.batch, rng)
    pol_leaves = pair.policy.params.leaves() if train else None
    dis_leaves = pair.discriminator.params.leaves() if train else None
    traj = rollout(pair.policy, intents, topo, noise, cfg.horizon, rng, pol_leaves, cfg.inertia)
    logp = pair.discriminator.log_probs(message(traj, pair.discriminator.mode), dis_leaves)
    picked = logp[np.arange(cfg.batch), intents]
    loss_pred = dc.mul(dc.mean(picked), -1.0)
    loss_engy = dc.mean(traj.energy)
    total = dc.add(loss_pred, dc.mul(loss_engy, cfg.energy_weight))
    if not np.isfinite(total.value):
        raise TrainingDiverged(
            f"non-finite loss (pred={loss_pred.value}, energy={loss_engy.value})"
        )
    if train:
        dc.backward(total)
        for net in (pair.policy, pair.discriminator):
            dc.adam_step(net.params, cfg.lr, cfg.betas, cfg.eps)
    acc = float((logp.value.argmax(axis=-1) == intents).mean())
    energies = per_intent_mean(traj.energy.value, intents, cfg.n_intents)
    return [acc, float(loss_pred.value), float(loss_engy.value), *energies]


def train_selfplay(pair, cfg, topo, noise, rng, iterations=None, callback=None):
    """Centralised self-play: gradients flow from the receiver through FK into the sender.

    The logged accuracy of an iteration is measured on that iteration's freshly
    sampled batch before the update is applied.
    """
    iterations = cfg.iterations if iterations is None else iterations
    dist = cfg.distribution
    tlog = TrainLog(cfg.n_intents)
    for it in range(iterations):
        row = selfplay_step(pair, cfg, topo, noise, rng, dist)
        tlog.rows.append([it] + row)
        if callback is not None:
            callback(it, row)
    return pair, tlog


def sp_accuracy(pair, cfg, topo, noise, rng, batch=None):
    """Greedy self-play accuracy on a fresh batch drawn from the prior."""
    dist = cfg.distribution
    intents = sample_intents(dist, batch or cfg.batch, rng)
    traj = rollout(pair.policy, intents, topo, noise, cfg.horizon, rng, inertia=cfg.inertia)
    pred = pair.discriminator.logits(message(traj, pair.discriminator.mode)).value.argmax(-1)
    return float((pred == intents).mean())


def policy_energy(policy, cfg, topo, noise, rng, batch=256, per_intent=False):
    """Mean rollout energy over uniformly drawn intents (optionally per intent)."""
    intents = np.arange(batch) % policy.n_intents
    traj = rollout(policy, intents, topo, noise, cfg.horizon, rng, inertia=cfg.inertia)
    e = traj.energy.value
    if per_intent:
        return per_intent_mean(e, intents, policy.n_intents)
    return float(e.mean())


def pretrain_torque_curriculum(policy, cfg, topo, noise, rng, iterations=500, threshold=0.05):
    """Minimise energy alone, intents drawn uniformly; the discriminator is untouched.

    ``threshold`` bounds the mean energy of the noise-free (mean-action)
    rollouts; it is checked at the end and a warning is logged if missed.
    """
    uniform = make_distribution(policy.n_intents, uniform=True)
    history = []
    for _ in range(iterations):
        intents = sample_intents(uniform, cfg.batch, rng)
        leaves = policy.params.leaves()
        traj = rollout(policy, intents, topo, noise, cfg.horizon, rng, leaves, cfg.inertia)
        loss = dc.mean(traj.energy)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"non-finite energy loss {loss.value}")
        dc.backward(loss)
        dc.adam_step(policy.params, cfg.lr, cfg.betas, cfg.eps)
        history.append(float(loss.value))
    quiet = NoiseParams(0.0, 0.0, 0.0)
    final = policy_energy(policy, cfg, topo, quiet, rng, batch=max(policy.n_intents, 64))
    if final > threshold:
        log.warning(
            "torque curriculum stopped at mean-action energy %.4g above threshold %.4g",
            final, threshold,
        )
    return policy, history
