"""Sender (policy) and receiver (discriminator) networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigurationError, ParamSet, UsageError

TRAJECTORY = "trajectory"
LATENT = "latent"
INPUT_MODES = (TRAJECTORY, LATENT)


class MLP:
    """Three linear layers, ReLU on the two hidden ones, linear output."""

    def __init__(self, in_dim, out_dim, hidden=128, rng=None, params=None):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.hidden = int(hidden)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng()
            sizes = [self.in_dim, self.hidden, self.hidden, self.out_dim]
            arrays = {}
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
                arrays[f"W{i}"] = dc.he_uniform(rng, a, b)
                arrays[f"b{i}"] = np.zeros(b)
            params = ParamSet(arrays)
        self.params = params
        if self.params["W0"].shape[0] != self.in_dim:
            raise ConfigurationError(
                f"first layer expects {self.params['W0'].shape[0]} inputs, declared {self.in_dim}"
            )

    def logits(self, x, leaves=None):
        """Forward pass. Pass ``leaves`` from ``params.leaves()`` to record gradients."""
        x = dc.as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ConfigurationError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        p = leaves if leaves is not None else self.params.params
        h = dc.relu(dc.add(dc.matmul(x, p["W0"]), p["b0"]))
        h = dc.relu(dc.add(dc.matmul(h, p["W1"]), p["b1"]))
        return dc.add(dc.matmul(h, p["W2"]), p["b2"])

    def zero_(self):
        for k in self.params.params:
            self.params.params[k] = np.zeros_like(self.params.params[k])
        return self


class PolicyNet(MLP):
    """Maps (joint state, one-hot intent) to a mean angular-velocity action."""

    def __init__(self, dof, n_intents, hidden=128, rng=None, params=None):
        self.dof = int(dof)
        self.n_intents = int(n_intents)
        super().__init__(2 * self.dof + self.n_intents, self.dof, hidden, rng, params)

    def act(self, pose, intent, leaves=None):
        """Mean action mu(s, theta) with shape (..., J, 3)."""
        intent = dc.as_tensor(intent)
        if intent.shape[-1] != self.n_intents:
            raise ConfigurationError(
                f"intent embedding width {intent.shape[-1]} != {self.n_intents}"
            )
        state = pose.flat()
        x = dc.concat([state, intent], axis=-1)
        out = self.logits(x, leaves)
        return dc.reshape(out, out.shape[:-1] + (self.dof // 3, 3))


class DiscriminatorNet(MLP):
    """Softmax classifier over intents, reading a flat trajectory or a scalar latent."""

    def __init__(self, n_intents, mode, traj_dim, hidden=128, rng=None, params=None):
        if mode not in INPUT_MODES:
            raise UsageError(f"input mode must be one of {INPUT_MODES}, got {mode!r}")
        self.mode = mode
        self.traj_dim = int(traj_dim)
        self.n_intents = int(n_intents)
        in_dim = self.traj_dim if mode == TRAJECTORY else 1
        super().__init__(in_dim, n_intents, hidden, rng, params)

    def check_message(self, message):
        width = dc.as_tensor(message).shape[-1]
        if width != self.in_dim:
            raise UsageError(
                f"{self.mode}-mode discriminator takes width {self.in_dim}, got {width}"
            )

    def log_probs(self, message, leaves=None):
        self.check_message(message)
        return dc.log_softmax(self.logits(message, leaves))

    def discriminate(self, message, leaves=None):
        self.check_message(message)
        return dc.softmax(self.logits(message, leaves))


def traj_dim(joints, horizon):
    """Flat trajectory width: per step positions, rotations and action (9 per joint)."""
    return 9 * joints * horizon


def policy_act(net, pose, intent, leaves=None):
    return net.act(pose, intent, leaves)


def discriminate(net, message, leaves=None):
    return net.discriminate(message, leaves)


@dataclass
class AgentPair:
    agent_id: int
    policy: PolicyNet
    discriminator: DiscriminatorNet
    seed: int
    condition: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, agent_id, seed, topo, n_intents, horizon, mode, hidden=128, condition=None):
        rng = np.random.default_rng(seed)
        policy = PolicyNet(topo.dof, n_intents, hidden, rng)
        disc = DiscriminatorNet(n_intents, mode, traj_dim(topo.joints, horizon), hidden, rng)
        return cls(agent_id, policy, disc, int(seed), dict(condition or {}))

    def checksum(self):
        return self.policy.params.checksum() + self.discriminator.params.checksum()

    def metadata(self):
        return {
            "agent_id": self.agent_id,
            "seed": self.seed,
            "condition": self.condition,
            "n_intents": self.policy.n_intents,
            "dof": self.policy.dof,
            "hidden": self.policy.hidden,
            "disc_mode": self.discriminator.mode,
            "disc_traj_dim": self.discriminator.traj_dim,
            "disc_hidden": self.discriminator.hidden,
            "disc_input": "per step: positions, rotations, action (all joints)",
        }

    def save(self, path, extra=None):
        merged = ParamSet()
        for prefix, net in (("policy", self.policy), ("disc", self.discriminator)):
            p = net.params
            for k in p.params:
                merged.params[f"{prefix}.{k}"] = p.params[k]
                merged.m[f"{prefix}.{k}"] = p.m[k]
                merged.v[f"{prefix}.{k}"] = p.v[k]
        merged.step = self.policy.params.step
        meta = self.metadata()
        meta["disc_step"] = self.discriminator.params.step
        if extra:
            meta.update(extra)
        return dc.save_params(merged, path, meta)

    @classmethod
    def load(cls, path):
        merged, meta = dc.load_params(path)

        def part(prefix, step):
            keys = [k for k in merged.params if k.startswith(prefix + ".")]
            strip = len(prefix) + 1
            return ParamSet(
                {k[strip:]: merged.params[k] for k in keys},
                {k[strip:]: merged.m[k] for k in keys},
                {k[strip:]: merged.v[k] for k in keys},
                step,
            )

        policy = PolicyNet(
            meta["dof"], meta["n_intents"], meta["hidden"], params=part("policy", merged.step)
        )
        disc = DiscriminatorNet(
            meta["n_intents"], meta["disc_mode"], meta["disc_traj_dim"], meta["disc_hidden"],
            params=part("disc", meta["disc_step"]),
        )
        return cls(meta["agent_id"], policy, disc, meta["seed"], meta["condition"]), meta
