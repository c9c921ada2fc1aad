"""Zero-shot measurement: cross-play, the external observer and energy analytics."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from . import diffcore as dc
from .agents import LATENT, TRAJECTORY, DiscriminatorNet, traj_dim
from .body import BodyTopology
from .diffcore import UsageError
from .intents import IntentDistribution, sample_intents
from .protocol import NoiseParams, TrainLog, message, rollout

log = logging.getLogger(__name__)

FEEDS = (TRAJECTORY, LATENT)
STD_FLOOR = 1e-9


@dataclass
class Population:
    """Independently trained pairs that share one task configuration."""

    pairs: list
    topo: BodyTopology
    noise: NoiseParams
    dist: IntentDistribution
    horizon: int = 5
    inertia: float = 1.0

    def __len__(self):
        return len(self.pairs)

    @property
    def n_intents(self):
        return self.dist.n

    def rollout(self, pair, batch, rng, intents=None):
        if intents is None:
            intents = sample_intents(self.dist, batch, rng)
        return rollout(pair.policy, intents, self.topo, self.noise, self.horizon, rng,
                       inertia=self.inertia)

    def checksums(self):
        return [p.checksum() for p in self.pairs]


def max_class_baseline(dist):
    """Accuracy of always answering the most probable intent."""
    return float(np.max(dist.probs))


def crossplay_matrix(pop, batch, rng):
    """Entry (i, j): argmax accuracy of pair j's receiver on fresh rollouts of actor i."""
    k = len(pop)
    out = np.zeros((k, k))
    for i, actor in enumerate(pop.pairs):
        traj = pop.rollout(actor, batch, rng)
        for j, obs in enumerate(pop.pairs):
            pred = obs.discriminator.logits(message(traj, obs.discriminator.mode)).value
            out[i, j] = float((pred.argmax(-1) == traj.intents).mean())
    return out


def off_diagonal_mean(matrix):
    k = matrix.shape[0]
    if k < 2:
        return float("nan")
    return float(matrix[~np.eye(k, dtype=bool)].mean())


def feed_input(traj, feed, observer, fill=0.0):
    """What ``observer`` reads when shown ``traj`` through ``feed``.

    A trajectory-width observer shown the latent feed gets the scalar in the
    first slot and zeros elsewhere. A latent observer shown a raw trajectory
    has no energy slot to read, so it receives ``fill`` (mean imputation with
    the mean latent seen in training).
    """
    if feed not in FEEDS:
        raise UsageError(f"feed must be one of {FEEDS}, got {feed!r}")
    B = len(traj.intents)
    if observer.mode == feed:
        return message(traj, feed).value
    if observer.mode == TRAJECTORY:  # latent feed into a trajectory-width net
        x = np.zeros((B, observer.in_dim))
        x[:, 0] = traj.energy.value
        return x
    return np.full((B, 1), float(fill))


@dataclass
class ObserverResult:
    train_feed: str
    test_feed: str
    train_ids: list
    test_ids: list
    curve: list = field(default_factory=list)  # rows: iteration, train_acc, test_acc
    final: float = float("nan")

    def as_array(self):
        return np.array(self.curve, dtype=np.float64).reshape(-1, 3)


def split_population(k, seed, test_fraction=0.2):
    """Deterministic split of actor ids into (train, test)."""
    if k < 5:
        raise UsageError(f"external observer needs a population of at least 5, got {k}")
    perm = np.random.default_rng(seed).permutation(k)
    n_test = max(1, int(round(test_fraction * k)))
    return sorted(int(i) for i in perm[n_test:]), sorted(int(i) for i in perm[:n_test])


def external_observer_eval(pop, train_feed, test_feed, iterations, rng, batch=1024,
                           split_seed=0, lr=1e-3, hidden=128, eval_every=1, final_batch=None):
    """Train a fresh receiver on frozen train actors and test it on held-out ones.

    Each iteration every train actor contributes ``batch`` rollouts; the test
    actors are sampled every ``eval_every`` iterations. ``final`` is measured
    on a fresh batch per test actor after the last update.
    """
    for f in (train_feed, test_feed):
        if f not in FEEDS:
            raise UsageError(f"feed must be one of {FEEDS}, got {f!r}")
    train_ids, test_ids = split_population(len(pop), split_seed)
    if set(train_ids) & set(test_ids):
        raise AssertionError("train and test actors overlap")
    before = pop.checksums()
    observer = DiscriminatorNet(pop.n_intents, train_feed, traj_dim(pop.topo.joints, pop.horizon),
                                hidden, rng)
    result = ObserverResult(train_feed, test_feed, train_ids, test_ids)
    seen = [0.0, 0]  # running sum and count of training latents

    def test_accuracy(n):
        hits = total = 0
        for i in test_ids:
            traj = pop.rollout(pop.pairs[i], n, rng)
            fill = seen[0] / max(seen[1], 1)
            pred = observer.logits(feed_input(traj, test_feed, observer, fill)).value.argmax(-1)
            hits += int((pred == traj.intents).sum())
            total += len(traj.intents)
        return hits / total

    for it in range(iterations):
        xs, ys = [], []
        for i in train_ids:
            traj = pop.rollout(pop.pairs[i], batch, rng)
            xs.append(feed_input(traj, train_feed, observer))
            ys.append(traj.intents)
            seen[0] += float(traj.energy.value.sum())
            seen[1] += len(traj.intents)
        x, y = np.concatenate(xs), np.concatenate(ys)
        leaves = observer.params.leaves()
        logp = dc.log_softmax(observer.logits(x, leaves))
        loss = dc.mul(dc.mean(logp[np.arange(len(y)), y]), -1.0)
        if not np.isfinite(loss.value):
            raise dc.TrainingDiverged(f"observer loss became {loss.value}")
        dc.backward(loss)
        dc.adam_step(observer.params, lr)
        if it % eval_every == 0 or it == iterations - 1:
            train_acc = float((logp.value.argmax(-1) == y).mean())
            result.curve.append([it, train_acc, test_accuracy(batch)])
    result.final = test_accuracy(final_batch or batch)
    if pop.checksums() != before:
        raise AssertionError("actor parameters changed during observer evaluation")
    return result


@dataclass(frozen=True)
class GaussianFit:
    mean: float
    std: float
    count: int


def fit_intent_energy_gaussians(pop, pair, batch, rng):
    """Sample mean and std of the energy feature, ``batch`` rollouts per intent."""
    fits = []
    for g in range(pop.n_intents):
        traj = pop.rollout(pair, batch, rng, intents=np.full(batch, g))
        e = traj.energy.value
        fits.append(GaussianFit(float(e.mean()), float(e.std()), int(batch)))
    return fits


def overlap_coefficient(a, b, points=4001):
    """Integral of min(pdf_a, pdf_b), on grids spanning 6 std around each mean."""
    sa, sb = max(a.std, STD_FLOOR), max(b.std, STD_FLOOR)
    grid = np.union1d(np.linspace(a.mean - 6 * sa, a.mean + 6 * sa, points),
                      np.linspace(b.mean - 6 * sb, b.mean + 6 * sb, points))
    dens = np.minimum(norm.pdf(grid, a.mean, sa), norm.pdf(grid, b.mean, sb))
    return float(np.trapezoid(dens, grid))


def max_pairwise_overlap(fits):
    worst = 0.0
    for i in range(len(fits)):
        for j in range(i + 1, len(fits)):
            worst = max(worst, overlap_coefficient(fits[i], fits[j]))
    return worst


def conditional_entropy_estimate(fits, prior, rng, samples=20000):
    """Monte-Carlo H(G | energy) in nats under the fitted Gaussian mixture.

    Returns ``(h_cond, h_prior)``; their difference is the mutual information.
    """
    probs = np.asarray(prior.probs)
    means = np.array([f.mean for f in fits])
    stds = np.maximum([f.std for f in fits], STD_FLOOR)
    g = rng.choice(len(probs), size=samples, p=probs)
    phi = rng.normal(means[g], stds[g])
    logjoint = np.log(probs)[None, :] + norm.logpdf(phi[:, None], means[None, :], stds[None, :])
    post = logjoint[np.arange(samples), g] - logsumexp(logjoint, axis=1)
    return float(-post.mean()), prior.entropy()


def intent_energy_trace(tlog: TrainLog, points=50):
    """Window-averaged per-intent energies, their rank order and reorder counts.

    Ranks are 0 for the cheapest intent. A reordering is any change of an
    intent's rank between consecutive windows.
    """
    energies = tlog.per_intent_energy()
    iters = tlog.column("iteration")
    n = len(iters)
    points = max(1, min(points, n))
    edges = np.linspace(0, n, points + 1).astype(int)
    series, at = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        series.append(np.nanmean(energies[lo:hi], axis=0))
        at.append(iters[hi - 1])
    series = np.array(series)
    ranks = np.argsort(np.argsort(series, axis=1, kind="stable"), axis=1, kind="stable")
    reorders = (np.diff(ranks, axis=0) != 0).sum(axis=0) if len(ranks) > 1 else np.zeros(
        series.shape[1], dtype=int)
    return {"iteration": np.array(at), "energy": series, "rank": ranks,
            "reorderings": reorders.astype(int)}


@dataclass
class EvalReport:
    crossplay: np.ndarray | None = None
    observer: dict = field(default_factory=dict)  # (train_feed, test_feed) -> ObserverResult
    gaussians: dict = field(default_factory=dict)  # actor id -> list of GaussianFit
    entropy: dict = field(default_factory=dict)  # actor id -> (h_cond, h_prior)

    def crossplay_csv(self):
        buf = io.StringIO()
        k = self.crossplay.shape[0]
        buf.write("actor," + ",".join(f"observer_{j}" for j in range(k)) + "\n")
        for i in range(k):
            buf.write(f"{i}," + ",".join(f"{v:.6f}" for v in self.crossplay[i]) + "\n")
        return buf.getvalue()

    def observer_csv(self):
        buf = io.StringIO()
        buf.write("train_feed,test_feed,iteration,train_acc,test_acc\n")
        for (tr, te), res in sorted(self.observer.items()):
            for it, a, b in res.curve:
                buf.write(f"{tr},{te},{int(it)},{a:.6f},{b:.6f}\n")
        return buf.getvalue()

    def observer_table_csv(self):
        buf = io.StringIO()
        buf.write("train_feed,test_feed,final_accuracy\n")
        for (tr, te), res in sorted(self.observer.items()):
            buf.write(f"{tr},{te},{res.final:.6f}\n")
        return buf.getvalue()

    def gaussians_csv(self):
        buf = io.StringIO()
        buf.write("actor,intent,mean,std,h_cond,h_prior\n")
        for actor, fits in sorted(self.gaussians.items()):
            h, h0 = self.entropy.get(actor, (float("nan"), float("nan")))
            for g, f in enumerate(fits):
                buf.write(f"{actor},{g},{f.mean:.6f},{f.std:.6f},{h:.6f},{h0:.6f}\n")
        return buf.getvalue()
