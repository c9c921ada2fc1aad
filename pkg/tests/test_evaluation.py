import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from embodied_comm.agents import LATENT, TRAJECTORY, AgentPair
from embodied_comm.body import default_arm
from embodied_comm.diffcore import UsageError
from embodied_comm.evaluation import (
    EvalReport,
    GaussianFit,
    Population,
    conditional_entropy_estimate,
    crossplay_matrix,
    external_observer_eval,
    feed_input,
    fit_intent_energy_gaussians,
    intent_energy_trace,
    max_class_baseline,
    max_pairwise_overlap,
    off_diagonal_mean,
    overlap_coefficient,
    split_population,
)
from embodied_comm.intents import make_distribution, sample_intents, zipf_probs
from embodied_comm.protocol import NoiseParams, TrainConfig, TrainLog, rollout, sp_accuracy


def make_pop(k, n=2, mode=TRAJECTORY, hidden=16, noise=None):
    topo = default_arm()
    pairs = [AgentPair.fresh(i, 100 + i, topo, n, 5, mode, hidden) for i in range(k)]
    return Population(pairs, topo, noise or NoiseParams(), zipf_probs(n))


def test_max_class_baseline():
    for n, top in ((2, 0.67), (5, 0.44), (10, 0.34)):
        assert max_class_baseline(zipf_probs(n)) == pytest.approx(top, abs=0.005)


def test_single_member_crossplay_is_selfplay():
    pop = make_pop(1)
    m = crossplay_matrix(pop, 512, np.random.default_rng(0))
    cfg = TrainConfig(n_intents=2)
    sp = sp_accuracy(pop.pairs[0], cfg, pop.topo, pop.noise, np.random.default_rng(0), 512)
    assert m.shape == (1, 1) and m[0, 0] == pytest.approx(sp)
    assert np.isnan(off_diagonal_mean(m))


def test_random_observers_near_baseline():
    pop = make_pop(4, n=5)
    m = crossplay_matrix(pop, 1024, np.random.default_rng(1))
    assert off_diagonal_mean(m) <= max_class_baseline(pop.dist) + 0.05
    assert m.shape == (4, 4)


def test_feed_adapters():
    pop = make_pop(1, n=3)
    traj = pop.rollout(pop.pairs[0], 6, np.random.default_rng(0))
    trj_obs = AgentPair.fresh(0, 0, pop.topo, 3, 5, TRAJECTORY, 8).discriminator
    lat_obs = AgentPair.fresh(0, 0, pop.topo, 3, 5, LATENT, 8).discriminator
    assert np.array_equal(feed_input(traj, TRAJECTORY, trj_obs), traj.observed.value)
    assert np.array_equal(feed_input(traj, LATENT, lat_obs)[:, 0], traj.energy.value)
    padded = feed_input(traj, LATENT, trj_obs)
    assert padded.shape == (6, 180)
    assert np.array_equal(padded[:, 0], traj.energy.value) and not padded[:, 1:].any()
    assert np.all(feed_input(traj, TRAJECTORY, lat_obs, fill=12.5) == 12.5)
    with pytest.raises(UsageError):
        feed_input(traj, "pixels", trj_obs)


def test_split_population():
    train, test = split_population(10, seed=3)
    assert len(test) == 2 and len(train) == 8
    assert not set(train) & set(test) and sorted(train + test) == list(range(10))
    assert split_population(10, seed=3) == (train, test)
    assert len(split_population(6, 0)[1]) == 1
    with pytest.raises(UsageError):
        split_population(4, 0)


def test_observer_needs_five_actors():
    with pytest.raises(UsageError):
        external_observer_eval(make_pop(4), LATENT, LATENT, 1, np.random.default_rng(0))


def test_observer_run_bookkeeping():
    pop = make_pop(5)
    before = pop.checksums()
    res = external_observer_eval(pop, LATENT, TRAJECTORY, 3, np.random.default_rng(0), batch=32,
                                 hidden=8)
    assert pop.checksums() == before
    assert not set(res.train_ids) & set(res.test_ids)
    assert res.as_array().shape == (3, 3)
    assert 0.0 <= res.final <= 1.0


def test_observer_learns_separable_latent():
    # pairs whose intents differ only by a bias have cleanly separated energies
    pop = make_pop(5, noise=NoiseParams(2.0, 0.4, 0.1))
    for p in pop.pairs:
        p.policy.zero_()
        p.policy.params.params["W2"] = np.zeros_like(p.policy.params["W2"])
        w0 = p.policy.params.params["W0"]
        w0[-2:, :] = 0.0
        w0[-1, 0] = 1.0  # intent 1 drives the first hidden unit
        p.policy.params.params["W1"][0, 0] = 1.0
        p.policy.params.params["W2"][0, :] = 0.3
    res = external_observer_eval(pop, LATENT, LATENT, 300, np.random.default_rng(0), batch=64,
                                 hidden=16, lr=1e-2, eval_every=50)
    assert res.final >= 0.95


def test_zero_policy_gaussians():
    pop = make_pop(1, noise=NoiseParams(0.0, 0.0, 0.0))
    pop.pairs[0].policy.zero_()
    fits = fit_intent_energy_gaussians(pop, pop.pairs[0], 64, np.random.default_rng(0))
    assert all(f.mean == 0 and f.std == 0 for f in fits)


def test_gaussian_means_resample():
    pop = make_pop(1)
    pair = pop.pairs[0]
    a = fit_intent_energy_gaussians(pop, pair, 2000, np.random.default_rng(1))
    b = fit_intent_energy_gaussians(pop, pair, 2000, np.random.default_rng(2))
    for fa, fb in zip(a, b):
        se = np.hypot(fa.std, fb.std) / np.sqrt(2000)
        assert abs(fa.mean - fb.mean) < 3 * se


def test_overlap_oracles():
    a, b = GaussianFit(0.0, 1.0, 1), GaussianFit(10.0, 1.0, 1)
    assert overlap_coefficient(a, a) == pytest.approx(1.0, abs=1e-6)
    assert overlap_coefficient(a, b) < 1e-5
    # two unit Gaussians one apart overlap 2 * Phi(-1/2)
    c = GaussianFit(1.0, 1.0, 1)
    assert overlap_coefficient(a, c) == pytest.approx(2 * norm.cdf(-0.5), abs=1e-6)
    assert max_pairwise_overlap([a, b, c]) == pytest.approx(overlap_coefficient(a, c))


@given(st.floats(-5, 5), st.floats(0.2, 3), st.floats(-5, 5), st.floats(0.2, 3))
def test_overlap_matches_quadrature(m1, s1, m2, s2):
    a, b = GaussianFit(m1, s1, 1), GaussianFit(m2, s2, 1)
    ref, _ = integrate.quad(lambda x: min(norm.pdf(x, m1, s1), norm.pdf(x, m2, s2)),
                            -np.inf, np.inf, limit=200)
    assert overlap_coefficient(a, b) == pytest.approx(ref, abs=1e-4)
    assert overlap_coefficient(a, b) == pytest.approx(overlap_coefficient(b, a), abs=1e-9)


def test_entropy_limits(rng):
    prior = make_distribution(2, uniform=True)
    same = [GaussianFit(0.0, 1.0, 1)] * 2
    h, h0 = conditional_entropy_estimate(same, prior, rng)
    assert h == pytest.approx(h0) and h0 == pytest.approx(np.log(2))
    apart = [GaussianFit(0.0, 1.0, 1), GaussianFit(10.0, 1.0, 1)]
    assert conditional_entropy_estimate(apart, prior, rng)[0] < 0.01


def test_entropy_matches_quadrature(rng):
    prior = zipf_probs(2)
    fits = [GaussianFit(0.0, 1.0, 1), GaussianFit(1.5, 2.0, 1)]
    p = prior.probs

    def integrand(x):
        joint = np.array([p[g] * norm.pdf(x, f.mean, f.std) for g, f in enumerate(fits)])
        tot = joint.sum()
        return -sum(j * np.log(j / tot) for j in joint if j > 0)

    ref, _ = integrate.quad(integrand, -20, 30, limit=200)
    h, _ = conditional_entropy_estimate(fits, prior, rng, samples=200_000)
    assert h == pytest.approx(ref, abs=0.01)


def test_trace_constant_and_swap():
    rows = [[i, 1.0, 0.5, 2.0, 1.0, 2.0, 3.0] for i in range(100)]
    tr = intent_energy_trace(TrainLog(3, rows), points=10)
    assert np.all(tr["reorderings"] == 0)
    assert np.array_equal(tr["rank"][-1], [0, 1, 2])
    rows = [[i, 1.0, 0.5, 2.0, 1.0, 2.0, 3.0] if i < 50 else [i, 1, 0.5, 2.0, 2.5, 2.0, 3.0]
            for i in range(100)]
    tr = intent_energy_trace(TrainLog(3, rows), points=10)
    assert list(tr["reorderings"]) == [1, 1, 0]
    assert tr["energy"].shape == (10, 3) and tr["iteration"][-1] == 99


def test_report_csv():
    res = external_observer_eval(make_pop(5), TRAJECTORY, LATENT, 2, np.random.default_rng(0),
                                 batch=8, hidden=8)
    rep = EvalReport(crossplay=np.eye(2), observer={(TRAJECTORY, LATENT): res},
                     gaussians={0: [GaussianFit(1.0, 0.5, 4)]}, entropy={0: (0.1, 0.6)})
    assert rep.crossplay_csv().splitlines()[0] == "actor,observer_0,observer_1"
    assert rep.observer_csv().count("\n") == 3
    assert rep.observer_table_csv().splitlines()[1].startswith("trajectory,latent,")
    assert rep.gaussians_csv().splitlines()[1] == "0,0,1.000000,0.500000,0.100000,0.600000"


def test_rollout_through_population_matches_direct():
    pop = make_pop(1)
    a = pop.rollout(pop.pairs[0], 8, np.random.default_rng(9))
    r = np.random.default_rng(9)
    ids = sample_intents(pop.dist, 8, r)
    b = rollout(pop.pairs[0].policy, ids, pop.topo, pop.noise, 5, r)
    assert np.array_equal(a.observed.value, b.observed.value)
