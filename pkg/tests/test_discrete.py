import itertools

import numpy as np
import pytest

from embodied_comm import diffcore as dc
from embodied_comm.diffcore import UsageError
from embodied_comm.discrete import (
    ZIPF,
    ZIPF_ENERGY,
    DiscretePair,
    confusion,
    crossplay_grid,
    discrete_cp_accuracy,
    discrete_sp_accuracy,
    expected_loss,
    init_pair,
    protocol_heatmaps,
    task1,
    task2,
    train_discrete_pair,
)
from embodied_comm.intents import zipf_probs


def logits_from_map(mapping, n_cols, scale=10.0):
    out = np.zeros((len(mapping), n_cols))
    out[np.arange(len(mapping)), mapping] = scale
    return out


def identity_pair(spec):
    sender = logits_from_map(np.arange(5), spec.n_actions)
    receiver = np.zeros((spec.n_actions, 5))
    receiver[np.arange(5), np.arange(5)] = 10.0
    return DiscretePair(sender, receiver, 0, ZIPF, spec)


def test_task_layouts():
    t1, t2 = task1(), task2()
    assert t1.n_actions == 10 and np.array_equal(t1.energy_array(), np.arange(10))
    assert t2.n_actions == 17
    values, counts = np.unique(t2.energy_array(), return_counts=True)
    assert np.array_equal(values, [0, 1, 2, 3, 4])
    assert np.array_equal(counts, [1, 4, 4, 4, 4])


def test_expected_loss_by_enumeration(rng):
    spec = task2()
    s, r = rng.normal(size=(5, 17)), rng.normal(size=(17, 5))
    pi = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    q = np.exp(r) / np.exp(r).sum(1, keepdims=True)
    ref = 0.0
    for g, a in itertools.product(range(5), range(17)):
        ref += spec.dist.probs[g] * pi[g, a] * (-np.log(q[a, g]) + 0.3 * spec.energies[a])
    assert expected_loss(s, r, spec, 0.3).value == pytest.approx(ref, rel=1e-12)


def test_expected_loss_gradient(rng):
    spec = task1()
    s, r = rng.normal(size=(5, 10)), rng.normal(size=(10, 5))
    ls = dc.Tensor(s.copy(), op="param", requires_grad=True)
    lr = dc.Tensor(r.copy(), op="param", requires_grad=True)
    dc.backward(expected_loss(ls, lr, spec, 0.05))
    for leaf, arr in ((ls, s), (lr, r)):
        num = dc.numerical_grad(lambda: float(expected_loss(s, r, spec, 0.05).value), arr)
        assert np.allclose(leaf.grad, num, rtol=1e-6, atol=1e-10)


def test_identity_pair_is_perfect():
    p = identity_pair(task1())
    assert discrete_sp_accuracy(p) == pytest.approx(1.0)
    assert np.array_equal(confusion(p, p), np.eye(5))


def test_collapsed_sender_scores_max_class():
    spec = task1()
    p = identity_pair(spec)
    p.sender = logits_from_map(np.zeros(5, dtype=int), 10)
    assert discrete_sp_accuracy(p) == pytest.approx(zipf_probs(5).probs[0])
    assert discrete_sp_accuracy(p) == pytest.approx(0.438, abs=1e-3)


def brute_force_accuracy(sender, receiver, probs):
    acc = 0.0
    for g in range(sender.shape[0]):
        a = min(i for i in range(sender.shape[1]) if sender[g, i] == sender[g].max())
        h = min(i for i in range(receiver.shape[1]) if receiver[a, i] == receiver[a].max())
        acc += probs[g] * (h == g)
    return acc


def test_greedy_tie_breaking_matches_brute_force(rng):
    spec = task1()
    for _ in range(20):
        s = rng.integers(0, 3, size=(5, 10)).astype(float)
        r = rng.integers(0, 3, size=(10, 5)).astype(float)
        pair = DiscretePair(s, r, 0, ZIPF, spec)
        assert discrete_sp_accuracy(pair) == pytest.approx(
            brute_force_accuracy(s, r, spec.dist.probs))


def test_cross_spec_rejected():
    with pytest.raises(UsageError):
        discrete_cp_accuracy(identity_pair(task1()), init_pair(task2(), ZIPF, 0))
    with pytest.raises(UsageError):
        init_pair(task1(), "uniform", 0)


def test_symmetric_start_is_a_saddle():
    spec = task1()
    pair = init_pair(spec, ZIPF, 0, init_scale=0.0)
    train_discrete_pair(spec, ZIPF, iterations=1000, pair=pair)
    assert np.allclose(pair.sender_policy(), 0.1, atol=1e-12)
    # the receiver drifts towards the prior, identically for every action
    q = pair.receiver_policy()
    assert np.allclose(q, q[0], atol=1e-12)
    assert np.allclose(q[0], spec.dist.probs, atol=1e-3)
    assert discrete_sp_accuracy(pair) == pytest.approx(spec.dist.probs[0])


def test_zero_iterations_unchanged():
    pair = init_pair(task1(), ZIPF_ENERGY, 3)
    s, r = pair.sender.copy(), pair.receiver.copy()
    train_discrete_pair(task1(), ZIPF_ENERGY, iterations=0, pair=pair)
    assert np.array_equal(s, pair.sender) and np.array_equal(r, pair.receiver)


def test_training_converges_and_is_deterministic():
    spec = task1()
    a = train_discrete_pair(spec, ZIPF_ENERGY, seed=2, iterations=3000)
    b = train_discrete_pair(spec, ZIPF_ENERGY, seed=2, iterations=3000)
    assert np.array_equal(a.sender, b.sender)
    assert discrete_sp_accuracy(a) >= 0.95
    assert a.history[-1] < a.history[0]


def test_heatmaps():
    spec = task1()
    pairs = [train_discrete_pair(spec, ZIPF, seed=s, iterations=300) for s in range(3)]
    sp = protocol_heatmaps(pairs, "SP")
    cp = protocol_heatmaps(pairs, "CP")
    grid = crossplay_grid(pairs)
    assert np.allclose(np.diag(cp["accuracy"]), sp["accuracy"])
    assert np.array_equal(cp["accuracy"], grid)
    for m in cp["confusion"].values():
        assert np.allclose(m.sum(1), 1)
    soft = confusion(pairs[0], pairs[1], greedy=False)
    assert np.allclose(soft.sum(1), 1)
    assert all(np.allclose(s.sum(1), 1) for s in sp["senders"])
    with pytest.raises(UsageError):
        protocol_heatmaps(pairs, "XP")
    with pytest.raises(UsageError):
        protocol_heatmaps([], "SP")
