import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain_document
from exo_rl.classifier import CheatingFactory, PathClassifier, SoftmaxFactory, SoftmaxHyper, cheating_classifier
from exo_rl.core import PpeConfig
from exo_rl.env import build_chain, build_combolock, build_id_counterexample, build_tabular, collect, random_tabular_env
from exo_rl.metrics import model_isomorphic
from exo_rl.oracle import exact_gap, minimal_covers, reachable_states, twin_target
from exo_rl.ppe import (
    PpeError,
    RecoveredModel,
    UnionFind,
    eliminate,
    elimination_error_counts,
    estimate_gaps,
    level_sample_count,
    ppe_level,
    recover_decoder,
    root_level,
    run_ppe,
    theory_sample_count,
)


class UniformClassifier(PathClassifier):
    kind = "uniform"

    def __init__(self, K):
        self.K = K

    def predict_proba(self, X):
        return np.full((np.shape(X)[0], self.K), 1.0 / self.K)


def uniform_factory(data, env, paths, h, seed):
    return UniformClassifier(len(paths))


def failing_factory(data, env, paths, h, seed):
    raise RuntimeError("boom")


def cheat_cfg(env, **kw):
    return PpeConfig(horizon=env.H, n_override=kw.pop("n", 200), **kw)


@given(st.integers(1, 30), st.lists(st.tuples(st.integers(0, 29), st.integers(0, 29)), max_size=40))
def test_union_find_partition_with_min_roots(n, pairs):
    uf = UnionFind(n)
    for a, b in pairs:
        if a < n and b < n:
            uf.union(a, b)
    classes = uf.classes()
    members = sorted(x for c in classes.values() for x in c)
    assert members == list(range(n))
    for root, c in classes.items():
        assert root == min(c)


@given(st.integers(0, 10**6), st.integers(1, 12), st.floats(0.0, 1.0))
def test_eliminate_invariants(seed, K, threshold):
    rng = np.random.default_rng(seed)
    G = rng.random((K, K))
    G = (G + G.T) / 2
    np.fill_diagonal(G, 0.0)
    survivors, reps = eliminate(G, threshold)
    assert survivors == sorted(set(reps))
    for a, i in enumerate(survivors):
        for j in survivors[a + 1 :]:
            assert G[i, j] > threshold
    for j, r in enumerate(reps):
        assert r <= j and r in survivors
        if r != j:
            assert G[r, j] <= threshold


def test_eliminate_tie_at_threshold_merges():
    G = np.array([[0.0, 0.25], [0.25, 0.0]])
    assert eliminate(G, 0.25) == ([0], [0, 0])


def test_estimate_gaps_example():
    P = np.array([[1.0, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(estimate_gaps(P), [[0.0, 0.5], [0.5, 0.0]])


def test_single_action_single_path():
    env = build_chain(4, A=1)
    res = run_ppe(env, cheat_cfg(env), CheatingFactory())
    assert [len(c) for c in res.covers()] == [1, 1, 1, 1]
    assert all(lvl.gap.shape == (1, 1) for lvl in res.levels[1:])


def test_one_state_env_maps_everything_to_zero():
    env = build_chain(3, A=3)
    res = run_ppe(env, cheat_cfg(env), CheatingFactory())
    assert res.model.n_states == [1, 1, 1]
    for T in res.model.transitions:
        np.testing.assert_array_equal(T, 0)


def test_cheating_deterministic_gaps_are_zero_or_two_over_k(chain_env):
    lvl = ppe_level(chain_env, ppe_level(chain_env, root_level(), 2, cheat_cfg(chain_env), CheatingFactory()), 3,
                    cheat_cfg(chain_env), CheatingFactory())
    K = len(lvl.extended)
    targets = [twin_target(chain_env, p, 3) for p in lvl.extended]
    for i in range(K):
        for j in range(i + 1, K):
            expected = 0.0 if targets[i] == targets[j] else 2.0 / K
            assert lvl.gap[i, j] == pytest.approx(expected, abs=1e-12)


def test_uniform_classifier_merges_everything(chain_env):
    res = run_ppe(chain_env, cheat_cfg(chain_env), uniform_factory)
    assert [len(c) for c in res.covers()] == [1, 1, 1]
    cross = 0
    for lvl in res.levels[1:]:
        t = [twin_target(chain_env, p, lvl.h) for p in lvl.extended]
        cross += sum(t[i] != t[j] for i in range(len(t)) for j in range(i + 1, len(t)))
    assert elimination_error_counts(res.levels, chain_env) == (cross, 0)


def test_uniform_decoder_returns_index_zero(chain_env):
    lvl = ppe_level(chain_env, root_level(), 2, cheat_cfg(chain_env), uniform_factory)
    dec = recover_decoder(lvl)
    np.testing.assert_array_equal(dec.raw_index(np.arange(2)), 0)
    np.testing.assert_array_equal(dec(np.arange(2)), 0)


def test_decoder_without_classifier():
    with pytest.raises(PpeError):
        recover_decoder(root_level())


def test_cheating_decoder_matches_truth_exhaustively():
    env = build_tabular(chain_document())
    res = run_ppe(env, cheat_cfg(env), CheatingFactory())
    for lvl in res.levels[1:]:
        dec = recover_decoder(lvl)
        xs = np.arange(env.emission.n_obs(lvl.h - 1))
        truth = env.decode_endo(lvl.h, xs)
        guess = dec(xs)
        # survivor position k reaches twin state twin_target(survivor k)
        states = [twin_target(env, p, lvl.h) for p in lvl.survivor_paths]
        np.testing.assert_array_equal([states[g] for g in guess], truth)


@given(st.integers(0, 10**6))
def test_decoder_lies_in_margin_set(seed):
    rng = np.random.default_rng(seed)
    env = build_combolock(2, seed=seed % 7)
    cfg = PpeConfig(horizon=2, n_override=300, seed=seed)
    lvl = ppe_level(env, root_level(), 2, cfg, SoftmaxFactory(SoftmaxHyper(epochs=2)))
    X = rng.normal(size=(30, env.emission.dim))
    P = lvl.classifier.predict_proba(X)
    raw = recover_decoder(lvl).raw_index(X)
    top = P.max(axis=1)
    assert np.all(P[np.arange(30), raw] >= top - lvl.margin)
    # and nothing smaller is within the margin
    for n in range(30):
        assert np.all(P[n, : raw[n]] < top[n] - lvl.margin)


def test_gap_estimator_unbiased_on_fresh_data(two_path_env):
    paths = [(0,), (1,)]
    clf = cheating_classifier(two_path_env, paths, 2)
    exact = exact_gap(two_path_env, paths, 2, 0, 1)
    estimates = []
    for r in range(100):
        _, batch = collect(two_path_env, paths, 200, master_seed=r, stream=1000 + 2, length=2)
        estimates.append(estimate_gaps(clf.predict_proba(batch.obs(2)))[0, 1])
    estimates = np.array(estimates)
    assert abs(estimates.mean() - exact) <= 3 * estimates.std(ddof=1) / np.sqrt(100)


def test_fresh_gap_flag_doubles_samples(two_path_env):
    cfg = PpeConfig(horizon=2, n_override=500, fresh_gap_samples=True)
    lvl = ppe_level(two_path_env, root_level(), 2, cfg, CheatingFactory())
    assert lvl.n_samples == 1000
    assert lvl.gap[0, 1] == pytest.approx(0.7, abs=0.05)


@settings(max_examples=25)
@given(st.integers(0, 10**6))
def test_cheating_ppe_recovers_minimal_cover(seed):
    env = random_tabular_env(np.random.default_rng(seed))
    res = run_ppe(env, cheat_cfg(env, n=100, seed=seed), CheatingFactory())
    assert [len(c) for c in res.covers()] == [len(reachable_states(env, h)) for h in range(1, env.H + 1)]
    assert elimination_error_counts(res.levels, env) == (0, 0)
    if env.eta == 0.0:
        # order-independence: survivors are the minimum-index path per twin state
        assert res.covers() == minimal_covers(env)
        assert model_isomorphic(res.model, env, reward_atol=1e-12).ok


def test_counterexample_covers_both_terminal_states():
    env = build_id_counterexample()
    res = run_ppe(env, cheat_cfg(env), CheatingFactory())
    ends = {twin_target(env, p, 3) for p in res.covers()[2]}
    assert ends == set(reachable_states(env, 3)) and len(ends) == 2


def test_combolock_twin_isomorphic():
    env = build_combolock(5, seed=0, emission="identity")
    res = run_ppe(env, cheat_cfg(env, n=2000), CheatingFactory())
    iso = model_isomorphic(res.model, env)
    assert iso.ok, iso.reason
    assert res.model.n_states == [1, 3, 3, 3, 3]


def test_recovered_rewards_on_deterministic_chain(chain_env):
    res = run_ppe(chain_env, cheat_cfg(chain_env, n=4000), CheatingFactory())
    assert model_isomorphic(res.model, chain_env, reward_atol=1e-12).ok


def test_serialization(chain_env):
    res = run_ppe(chain_env, cheat_cfg(chain_env), CheatingFactory())
    doc = json.loads(json.dumps(res.model.to_dict()))
    again = RecoveredModel.from_dict(doc)
    assert again.covers == res.model.covers
    for a, b in zip(again.transitions, res.model.transitions):
        np.testing.assert_array_equal(a, b)
    level_doc = json.loads(json.dumps(res.levels[2].to_dict()))
    assert level_doc["merge_map"] == [sorted(c) for _, c in sorted(res.levels[2].classes().items())]
    assert level_doc["classifier"]["kind"] == "cheating-ref"


def test_run_ppe_errors(chain_env):
    with pytest.raises(PpeError, match="horizon"):
        run_ppe(chain_env, PpeConfig(horizon=2, n_override=10), CheatingFactory())
    with pytest.raises(PpeError, match="level 2"):
        run_ppe(chain_env, cheat_cfg(chain_env), failing_factory)
    with pytest.raises(PpeError):
        run_ppe(build_chain(1), PpeConfig(horizon=1, n_override=10), CheatingFactory())
    with pytest.raises(PpeError):
        ppe_level(chain_env, root_level(), 3, cheat_cfg(chain_env), CheatingFactory())


def test_sample_count_rules():
    cfg = PpeConfig(horizon=5, log_f_class_size=0.0, delta=0.1)
    n_cover, rule = level_sample_count(cfg, CheatingFactory(), 3, 10, 1)
    assert rule == "cover"
    n_pairwise, rule = level_sample_count(PpeConfig(horizon=5, log_f_class_size=0.0, delta=0.1, sample_count_rule="pairwise"),
                                       CheatingFactory(), 3, 10, 1)
    assert rule == "pairwise" and n_pairwise > n_cover
    assert level_sample_count(PpeConfig(horizon=5, n_override=7), CheatingFactory(), 3, 10, 1) == (7, "override")
    assert theory_sample_count(3, 10, 5, 0.1, 0.0) > 0


def test_softmax_combolock_h2_cover_size():
    env = build_combolock(2, seed=0)
    hits = 0
    for seed in range(5):
        lvl = ppe_level(env, root_level(), 2, PpeConfig(horizon=2, n_override=5000, seed=seed), SoftmaxFactory())
        hits += len(lvl.survivors) == 3
    assert hits >= 4


def test_softmax_dense_tabular_has_no_type1_errors():
    doc = chain_document()
    doc["emission"] = {"kind": "dense", "sigma": 0.1}
    env = build_tabular(doc)
    res = run_ppe(env, PpeConfig(horizon=3, n_override=20000), SoftmaxFactory())
    assert elimination_error_counts(res.levels, env)[0] == 0
