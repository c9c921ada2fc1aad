"""Discrete-channel referential game, trained on the exact expected loss.

With at most 17 actions and 5 intents every term of the expectation is
enumerated, so training is deterministic given the initial logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamSet, UsageError
from .intents import IntentDistribution, zipf_probs

ZIPF = "zipf"
ZIPF_ENERGY = "zipf+energy"
CONDITIONS = (ZIPF, ZIPF_ENERGY)


@dataclass(frozen=True)
class DiscreteChannelSpec:
    name: str
    energies: tuple
    dist: IntentDistribution

    @property
    def n_actions(self):
        return len(self.energies)

    @property
    def n_intents(self):
        return self.dist.n

    def energy_array(self):
        return np.asarray(self.energies, dtype=np.float64)


def task1(n_intents=5, n_actions=10, exponent=1.0):
    """Every action has its own energy, equal to its index."""
    return DiscreteChannelSpec("task1", tuple(float(a) for a in range(n_actions)),
                               zipf_probs(n_intents, exponent))


def task2(n_intents=5, exponent=1.0, levels=(0.0, 1.0, 2.0, 3.0, 4.0), degeneracy=4):
    """One unique lowest-energy action; each higher level shared by ``degeneracy`` actions."""
    energies = (levels[0],) + tuple(e for e in levels[1:] for _ in range(degeneracy))
    return DiscreteChannelSpec("task2", energies, zipf_probs(n_intents, exponent))


@dataclass
class DiscretePair:
    sender: np.ndarray  # (intents, actions) logits
    receiver: np.ndarray  # (actions, intents) logits
    seed: int
    condition: str
    spec: DiscreteChannelSpec
    history: list = field(default_factory=list)

    def sender_policy(self):
        return _softmax_rows(self.sender)

    def receiver_policy(self):
        return _softmax_rows(self.receiver)

    def greedy_actions(self):
        return self.sender.argmax(axis=1)

    def greedy_decode(self):
        return self.receiver.argmax(axis=1)


def _softmax_rows(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def expected_loss(sender, receiver, spec, energy_weight):
    """Sum_g p(g) Sum_a pi(a|g) [ -log q(g|a) + lambda * energy(a) ] as a graph node."""
    pi = dc.softmax(sender, axis=1)  # (G, A)
    logq = dc.log_softmax(receiver, axis=1)  # (A, G)
    G = spec.n_intents
    # pick log q(g|a) for every (g, a): transpose via slicing rows of logq
    logq_ga = dc.stack([logq[:, g] for g in range(G)], axis=0)  # (G, A)
    cost = dc.sub(dc.mul(spec.energy_array(), energy_weight), logq_ga)
    per_intent = dc.sum_(dc.mul(pi, cost), axis=1)
    return dc.sum_(dc.mul(per_intent, spec.dist.probs))


def init_pair(spec, condition, seed, init_scale=0.1):
    if condition not in CONDITIONS:
        raise UsageError(f"condition must be one of {CONDITIONS}, got {condition!r}")
    rng = np.random.default_rng(seed)
    sender = rng.normal(0.0, init_scale, (spec.n_intents, spec.n_actions))
    receiver = rng.normal(0.0, init_scale, (spec.n_actions, spec.n_intents))
    return DiscretePair(sender, receiver, int(seed), condition, spec)


def train_discrete_pair(spec, condition, energy_weight=0.05, lr=1.0, iterations=3000,
                        seed=0, init_scale=0.1, pair=None):
    """Joint gradient descent on both logit matrices against the enumerated expected loss.

    Plain descent keeps the prior weighting of each intent's gradient, so
    frequent intents move first; a per-parameter normalising optimiser would
    erase that. ``energy_weight`` is ignored (taken as 0) for zipf-only.
    """
    pair = pair or init_pair(spec, condition, seed, init_scale)
    lam = energy_weight if condition == ZIPF_ENERGY else 0.0
    params = ParamSet({"sender": pair.sender, "receiver": pair.receiver})
    for _ in range(iterations):
        leaves = params.leaves()
        loss = expected_loss(leaves["sender"], leaves["receiver"], spec, lam)
        if not np.isfinite(loss.value):
            raise dc.TrainingDiverged(f"non-finite discrete loss at seed {seed}")
        dc.backward(loss)
        dc.sgd_step(params, lr)
        pair.history.append(float(loss.value))
    pair.sender = params["sender"].copy()
    pair.receiver = params["receiver"].copy()
    return pair


def greedy_accuracy(sender_from, receiver_from):
    """Prior-weighted accuracy of greedy encode (sender) then greedy decode (receiver)."""
    if sender_from.spec != receiver_from.spec:
        raise UsageError("pairs were trained on different channel specs")
    probs = sender_from.spec.dist.probs
    actions = sender_from.greedy_actions()
    decoded = receiver_from.greedy_decode()[actions]
    return float(probs[decoded == np.arange(len(probs))].sum())


def discrete_sp_accuracy(pair):
    return greedy_accuracy(pair, pair)


def discrete_cp_accuracy(sender_from, receiver_from):
    return greedy_accuracy(sender_from, receiver_from)


def crossplay_grid(pairs):
    """Entry (i, j): sender of pair i decoded by receiver of pair j."""
    k = len(pairs)
    grid = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            grid[i, j] = discrete_cp_accuracy(pairs[i], pairs[j])
    return grid


def off_diagonal_mean(grid):
    k = grid.shape[0]
    if k < 2:
        return float("nan")
    return float(grid[~np.eye(k, dtype=bool)].mean())


def confusion(sender_from, receiver_from, greedy=True):
    """p(predicted | true) as an (intents, intents) matrix; rows sum to one."""
    if greedy:
        G = sender_from.spec.n_intents
        pred = receiver_from.greedy_decode()[sender_from.greedy_actions()]
        out = np.zeros((G, G))
        out[np.arange(G), pred] = 1.0
        return out
    return sender_from.sender_policy() @ receiver_from.receiver_policy()


def protocol_heatmaps(pairs, mode="SP"):
    """Sender/receiver policies and confusion matrices for plotting.

    In CP mode every ordered (sender, receiver) combination is included and
    the accuracy grid is returned as well.
    """
    if not pairs:
        raise UsageError("need at least one trained pair")
    mode = mode.upper()
    report = {
        "senders": [p.sender_policy() for p in pairs],
        "receivers": [p.receiver_policy() for p in pairs],
    }
    if mode == "SP":
        report["confusion"] = {(i, i): confusion(p, p) for i, p in enumerate(pairs)}
        report["accuracy"] = np.array([discrete_sp_accuracy(p) for p in pairs])
    elif mode == "CP":
        report["confusion"] = {
            (i, j): confusion(a, b) for i, a in enumerate(pairs) for j, b in enumerate(pairs)
        }
        report["accuracy"] = crossplay_grid(pairs)
    else:
        raise UsageError(f"mode must be SP or CP, got {mode!r}")
    return report


def run_condition(spec, condition, seeds, **train_kwargs):
    pairs = [train_discrete_pair(spec, condition, seed=s, **train_kwargs) for s in seeds]
    grid = crossplay_grid(pairs)
    return {
        "pairs": pairs,
        "grid": grid,
        "sp": np.diag(grid).copy(),
        "sp_mean": float(np.diag(grid).mean()),
        "cp_mean": off_diagonal_mean(grid),
        "cp_std": float(grid[~np.eye(len(pairs), dtype=bool)].std()) if len(pairs) > 1 else 0.0,
    }
