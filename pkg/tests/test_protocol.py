import math

import numpy as np
import pytest

from embodied_comm import diffcore as dc
from embodied_comm.agents import LATENT, TRAJECTORY, AgentPair
from embodied_comm.body import default_arm, fk_step
from embodied_comm.diffcore import TrainingDiverged, UsageError
from embodied_comm.protocol import (
    NoiseParams,
    TrainConfig,
    TrainLog,
    energy_loss,
    latent_energy,
    message,
    policy_energy,
    prediction_loss,
    pretrain_torque_curriculum,
    rollout,
    selfplay_step,
    sp_accuracy,
    train_selfplay,
)

QUIET = NoiseParams(0.0, 0.0, 0.0)


@pytest.fixture
def topo():
    return default_arm()


def small_pair(topo, n=2, mode=TRAJECTORY, seed=0, hidden=32):
    return AgentPair.fresh(0, seed, topo, n, 5, mode, hidden)


def test_energy_constant_velocity():
    acts = np.ones((5, 3))
    assert energy_loss(acts).value == pytest.approx(3.0)
    assert energy_loss(np.ones((5, 1))).value == pytest.approx(1.0)


def test_energy_zero_and_inertia_scaling(rng):
    assert energy_loss(np.zeros((5, 12))).value == 0.0
    a = rng.normal(size=(3, 5, 12))
    assert np.allclose(energy_loss(a, 2.0).value, 4 * energy_loss(a).value)
    with pytest.raises(UsageError):
        energy_loss(a, np.ones(5))
    with pytest.raises(UsageError):
        energy_loss(np.ones(4))


def test_energy_matches_loop(rng):
    a = rng.normal(size=(5, 12))
    inertia = rng.uniform(0.5, 2.0, 12)
    prev, ref = np.zeros(12), 0.0
    for w in a:
        ref += float(((w - prev) * inertia) ** 2 @ np.ones(12))
        prev = w
    assert energy_loss(a, inertia).value == pytest.approx(ref)


def test_prediction_loss_values(caplog):
    assert prediction_loss([0.0, 1.0], 1) == 0.0
    assert prediction_loss(np.full(10, 0.1), 3) == pytest.approx(math.log(10))
    assert prediction_loss([0.5, 0.5], 0) == pytest.approx(math.log(2))
    assert prediction_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    assert "clamping" in caplog.text


def test_noise_validation():
    with pytest.raises(UsageError):
        NoiseParams(position=-1.0)
    with pytest.raises(UsageError):
        TrainConfig(energy_weight=-0.1)


def test_quiet_zero_policy_stays_at_reference(topo):
    pair = small_pair(topo)
    pair.policy.zero_()
    traj = rollout(pair.policy, [0, 1], topo, QUIET, 5, np.random.default_rng(0))
    ref = topo.reference_pose(2)
    for s in traj.states:
        assert np.allclose(s.positions.value, ref.positions.value)
    assert np.all(traj.energy.value == 0)
    assert np.all(latent_energy(traj).value == 0)


def test_rollout_shapes_and_consistency(topo):
    pair = small_pair(topo, n=3)
    traj = rollout(pair.policy, [0, 1, 2, 0], topo, NoiseParams(), 5, np.random.default_rng(1))
    assert traj.observed.shape == (4, 180)
    assert message(traj, LATENT).shape == (4, 1)
    assert traj.action_array().shape == (4, 5, 4, 3)
    pose = topo.reference_pose(4)
    for s, a in zip(traj.states, traj.actions):
        pose = fk_step(pose, a.value, topo)
        assert np.allclose(pose.rotations.value, s.rotations.value)
    flat = traj.action_array().reshape(4, 5, 12)
    assert np.allclose(energy_loss(flat).value, traj.energy.value)
    # the action slots of the observation carry the executed actions unperturbed
    obs = traj.observed.value.reshape(4, 5, 36)
    assert np.allclose(obs[:, :, 24:], flat)


def test_rollout_deterministic(topo):
    pair = small_pair(topo)
    a = rollout(pair.policy, [0, 1, 1], topo, NoiseParams(), 5, np.random.default_rng(7))
    b = rollout(pair.policy, [0, 1, 1], topo, NoiseParams(), 5, np.random.default_rng(7))
    assert a.observed.value.tobytes() == b.observed.value.tobytes()


def test_rollout_energy_gradient(topo):
    pair = small_pair(topo, hidden=16)
    intents = np.array([0, 1, 1])

    def energy(leaves=None):
        r = np.random.default_rng(3)
        return dc.mean(rollout(pair.policy, intents, topo, NoiseParams(), 5, r, leaves).energy)

    leaves = pair.policy.params.leaves()
    dc.backward(energy(leaves))
    W0 = pair.policy.params.params["W0"]
    num = dc.numerical_grad(lambda: float(energy().value), W0)
    rel = np.abs(leaves["W0"].grad - num) / np.maximum(np.abs(num), 1e-6)
    assert np.median(rel) < 1e-4
    assert np.allclose(leaves["W0"].grad, num, rtol=1e-4, atol=1e-6)


def test_horizon_validation(topo):
    with pytest.raises(UsageError):
        rollout(small_pair(topo).policy, [0], topo, QUIET, 0, np.random.default_rng(0))


def test_loss_decomposition_and_gradient_flow(topo):
    pair = small_pair(topo)
    cfg = TrainConfig(batch=16, energy_weight=0.0)
    before = pair.policy.params.copy()
    row = selfplay_step(pair, cfg, topo, NoiseParams(), np.random.default_rng(0))
    assert row[0] >= 0 and len(row) == 3 + 2
    moved = [not np.array_equal(before[k], pair.policy.params[k]) for k in before.params]
    assert all(moved)

    pred, engy = [], []
    for lam in (0.0, 0.3):
        c = TrainConfig(batch=16, energy_weight=lam)
        r = selfplay_step(pair, c, topo, NoiseParams(), np.random.default_rng(5), train=False)
        pred.append(r[1])
        engy.append(r[2])
    assert pred[0] == pred[1] and engy[0] == engy[1]


def test_zero_iterations_leave_parameters(topo):
    pair = small_pair(topo)
    cs = pair.checksum()
    _, tlog = train_selfplay(pair, TrainConfig(batch=8), topo, NoiseParams(),
                             np.random.default_rng(0), iterations=0)
    assert pair.checksum() == cs and tlog.as_array().shape == (0, 6)


def test_training_log_deterministic(topo):
    logs = []
    for _ in range(2):
        pair = small_pair(topo, n=3)
        _, tlog = train_selfplay(pair, TrainConfig(n_intents=3, batch=16), topo, NoiseParams(),
                                 np.random.default_rng(4), iterations=5)
        logs.append(tlog.as_array().tobytes())
    assert logs[0] == logs[1]
    assert tlog.header[:4] == ["iteration", "sp_accuracy", "loss_pred", "loss_energy"]
    assert tlog.per_intent_energy().shape == (5, 3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(topo):
    pair = small_pair(topo)
    pair.policy.params.params["b2"] = np.full(12, np.inf)
    with pytest.raises(TrainingDiverged):
        selfplay_step(pair, TrainConfig(batch=4), topo, NoiseParams(), np.random.default_rng(0))


@pytest.mark.slow
def test_selfplay_learns_uniform_two_intents(topo):
    pair = AgentPair.fresh(0, 0, topo, 2, 5, TRAJECTORY)
    cfg = TrainConfig(n_intents=2, uniform=True, energy_weight=0.0, batch=256, iterations=2000)
    train_selfplay(pair, cfg, topo, NoiseParams(), np.random.default_rng(0))
    assert sp_accuracy(pair, cfg, topo, NoiseParams(), np.random.default_rng(1), 2048) >= 0.95


@pytest.mark.slow
def test_torque_curriculum(topo):
    pair = AgentPair.fresh(0, 1, topo, 5, 5, TRAJECTORY)
    cfg = TrainConfig(n_intents=5, batch=64)
    disc = pair.discriminator.params.checksum()
    rng = np.random.default_rng(1)
    fresh = policy_energy(pair.policy, cfg, topo, QUIET, rng)
    pretrain_torque_curriculum(pair.policy, cfg, topo, NoiseParams(), rng, iterations=800,
                               threshold=0.01 * fresh)
    assert policy_energy(pair.policy, cfg, topo, QUIET, rng) <= 0.01 * fresh
    noisy = policy_energy(pair.policy, cfg, topo, NoiseParams(), rng, batch=2000, per_intent=True)
    assert noisy.max() <= 2 * noisy.min()
    assert pair.discriminator.params.checksum() == disc


def test_trainlog_columns():
    tlog = TrainLog(2, [[0, 0.5, 0.7, 20.0, 19.0, 21.0]])
    assert tlog.column("loss_energy")[0] == 20.0
    assert np.array_equal(tlog.per_intent_energy(), [[19.0, 21.0]])
