import copy

import numpy as np
import pytest

from exo_rl.classifier import CheatingFactory, cheating_classifier
from exo_rl.core import PpeConfig
from exo_rl.env import build_combolock
from exo_rl.metrics import RunMetrics, classifier_tv_error, decoder_accuracy, median, model_isomorphic
from exo_rl.ppe import recover_decoder, run_ppe


def test_constant_decoder_accuracy_is_same_state_probability(two_path_env):
    """Uniform roll-in over (0,) and (1,) gives P(s0) = 0.55, so pairs agree w.p. 0.55^2 + 0.45^2."""
    m = 20000
    acc = decoder_accuracy(lambda X: np.zeros(len(X), dtype=int), two_path_env, [(0,), (1,)], 2, m=m, seed=0)
    p = 0.55**2 + 0.45**2
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / m)


def test_true_decoder_is_perfect(two_path_env):
    acc = decoder_accuracy(lambda X: two_path_env.decode_endo(2, X), two_path_env, [(0,), (1,)], 2, m=500)
    assert acc == 1.0


def test_decoder_accuracy_invariant_to_relabeling(two_path_env):
    d1 = decoder_accuracy(lambda X: two_path_env.decode_endo(2, X) % 2, two_path_env, [(0,), (1,)], 2, m=500)
    d2 = decoder_accuracy(lambda X: 7 - two_path_env.decode_endo(2, X), two_path_env, [(0,), (1,)], 2, m=500)
    assert d1 == d2


def test_decoder_accuracy_rejects_zero_pairs(two_path_env):
    with pytest.raises(ValueError):
        decoder_accuracy(lambda X: X, two_path_env, [(0,)], 2, m=0)


def test_recovered_decoder_accuracy_on_combolock():
    env = build_combolock(3, seed=1, emission="identity")
    res = run_ppe(env, PpeConfig(horizon=3, n_override=500), CheatingFactory())
    acc = decoder_accuracy(recover_decoder(res.levels[2]), env, res.covers()[2], 3, m=1000)
    assert acc == 1.0


@pytest.fixture
def combolock_model():
    env = build_combolock(4, seed=2, emission="identity")
    return env, run_ppe(env, PpeConfig(horizon=4, n_override=3000), CheatingFactory()).model


def test_isomorphic_on_clean_run(combolock_model):
    env, model = combolock_model
    res = model_isomorphic(model, env, reward_atol=1e-12)
    assert res.ok and res.witness is None
    assert res.mapping[0] == {0: 0}


def test_injected_transition_fault_is_witnessed(combolock_model):
    env, model = combolock_model
    bad = copy.deepcopy(model)
    good_a = env.metadata["good_actions"][1]
    # send the a-chain's good edge at level 2 to the wrong state
    bad.transitions[1][0, good_a] = (bad.transitions[1][0, good_a] + 1) % 3
    res = model_isomorphic(bad, env)
    assert not res.ok
    assert res.witness[0] == 2


def test_injected_reward_fault_is_witnessed(combolock_model):
    env, model = combolock_model
    bad = copy.deepcopy(model)
    bad.rewards[3] = bad.rewards[3].copy()
    bad.rewards[3][0, 0] += 0.5
    res = model_isomorphic(bad, env, reward_atol=1e-9)
    assert not res.ok and res.reason == "reward mismatch" and res.witness[:2] == (4, 0)
    assert model_isomorphic(bad, env).ok


def test_isomorphism_invariant_to_relabeling(combolock_model):
    env, model = combolock_model
    perm = np.array([2, 0, 1])  # new label of old state k at level 3
    relabeled = copy.deepcopy(model)
    relabeled.transitions[1] = perm[model.transitions[1]]
    inverse = np.argsort(perm)
    relabeled.transitions[2] = model.transitions[2][inverse]
    relabeled.rewards[2] = model.rewards[2][inverse]
    relabeled.covers[2] = [model.covers[2][k] for k in inverse]
    assert model_isomorphic(relabeled, env, reward_atol=1e-12).ok


def test_horizon_mismatch(combolock_model):
    _, model = combolock_model
    res = model_isomorphic(model, build_combolock(3, seed=0))
    assert not res.ok and "horizon" in res.reason


def test_run_metrics_row():
    m = RunMetrics(seed=1, H=2, episodes_ppe=10, episodes_reward=5, cover_sizes=[1, 3], value=0.25, optimal_value=1.0)
    row = m.row()
    assert row["episodes_used"] == 15 and row["regret"] == 0.75
    assert row["cover_1"] == 1 and row["cover_2"] == 3 and "cover_sizes" not in row


def test_median():
    assert median([3, 1, 2]) == 2.0


def test_cheating_classifier_has_zero_tv(two_path_env):
    clf = cheating_classifier(two_path_env, [(0,), (1,)], 2)
    assert classifier_tv_error(clf, two_path_env, [(0,), (1,)], 2) == pytest.approx(0.0, abs=1e-15)
