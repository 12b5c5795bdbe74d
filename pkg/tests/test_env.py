import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import chain_document, two_path_document
from exo_rl.env import (
    BitFlipExoChain,
    DenseEmission,
    EndoMdpSpec,
    EnvError,
    TableEmission,
    TabularExoChain,
    UnsupportedOperation,
    build_chain,
    build_combolock,
    build_id_counterexample,
    build_tabular,
    collect,
    random_tabular_env,
    sample_batch,
    sample_episode,
    to_document,
)
from exo_rl.oracle import endo_occupancy, exo_occupancy, joint_occupancy, open_loop_value, path_policy, reachable_states


def test_single_state_chain_emits_constant_id():
    env = build_chain(4, A=3)
    traj = sample_episode(env, (2, 0, 1, 1), seed=3)
    assert traj.observations == [0, 0, 0, 0]
    assert len(traj.actions) == len(traj.rewards) == 4


def test_episode_stops_at_observation_for_short_paths(chain_env):
    traj = sample_episode(chain_env, (1,), seed=0)
    assert len(traj.observations) == 2 and len(traj.actions) == 1


def test_latent_channel_matches_decoder(two_path_env):
    for seed in range(20):
        traj = sample_episode(two_path_env, (seed % 2, 1), seed=seed)
        for h, x in enumerate(traj.observations, start=1):
            assert two_path_env.decode_endo(h, np.array([x]))[0] == traj.latent_endo[h - 1]
            assert two_path_env.decode_exo(h, np.array([x]))[0] == traj.latent_exo[h - 1]


def test_sample_episode_without_latent(two_path_env):
    traj = sample_episode(two_path_env, (0,), seed=1, record_latent=False)
    assert traj.latent_endo is None


def test_combolock_good_path_earns_one():
    env = build_combolock(5, seed=4)
    good = tuple(env.metadata["good_actions"])
    for seed in range(10):
        assert sample_episode(env, good, seed).rewards[-1] == 1.0
    alt = tuple(env.metadata["alt_actions"])
    assert sample_episode(env, alt, 0).rewards[-1] == pytest.approx(0.1)


def test_combolock_random_open_loop_success_rate():
    # exactly one of A^H sequences reaches the rewarding state
    env = build_combolock(3, seed=0, A=4, emission="identity")
    hits = sum(open_loop_value(env, p) == 1.0 for p in itertools.product(range(4), repeat=3))
    assert hits == 1


def test_combolock_reachability():
    env = build_combolock(6, seed=1)
    assert [len(reachable_states(env, h)) for h in range(1, 7)] == [1, 3, 3, 3, 3, 3]


def test_combolock_hadamard_inverts_without_noise():
    env = build_combolock(4, seed=0, noise_sigma=0.0)
    em = env.emission
    assert em.dim == 16  # 3*4 - 2 + 4 = 14 -> 16
    np.testing.assert_allclose(em.hadamard @ em.hadamard.T, em.dim * np.eye(em.dim))
    rng = np.random.default_rng(0)
    endo = np.array([0, 1, 2])
    exo = env.exo.sample_start(rng, 3)
    X = em.emit(rng, 2, endo, exo)
    raw = em.invert(X)
    onehot = raw[:, : em.n_endo]
    np.testing.assert_allclose(onehot, np.eye(em.n_endo)[em.offsets[2] + endo], atol=1e-12)
    np.testing.assert_allclose(raw[:, em.n_endo : em.raw_dim], exo, atol=1e-12)
    np.testing.assert_array_equal(em.decode_endo(3, X), endo)


def test_combolock_exo_bits_parameter():
    env = build_combolock(2, seed=0, exo_bits=100)
    assert env.emission.raw_dim == 4 + 100 and env.emission.dim == 128


def test_combolock_rejects_tiny():
    with pytest.raises(EnvError):
        build_combolock(1, seed=0)


def test_dense_without_debug_refuses_decoding():
    exo = BitFlipExoChain(2, 0.1)
    em = DenseEmission((1, 3), exo, debug=False)
    with pytest.raises(UnsupportedOperation):
        em.decode_endo(1, np.zeros((1, em.dim)))


def test_id_counterexample_parents_disjoint():
    env = build_id_counterexample()
    T2 = env.endo.T[1]
    parents = [set(np.flatnonzero(T2[:, :, s].sum(axis=1) > 0)) for s in range(2)]
    assert parents[0].isdisjoint(parents[1])


def test_tabular_chain_document_is_deterministic():
    env = build_tabular(chain_document())
    assert env.eta == 0.0 and env.metadata["in_theory_regime"]


def test_tabular_bad_row_names_position():
    doc = chain_document()
    doc["T"][1][1][0] = [0.5, 0.4]
    with pytest.raises(EnvError, match=r"h=2, s=1, a=0"):
        build_tabular(doc)


def test_tabular_eta_certificate():
    env = build_tabular(chain_document(stochastic=0.05))
    assert env.eta == pytest.approx(0.05)


def test_tabular_schema_error_names_field():
    doc = chain_document()
    doc["emission"] = {"kind": "hologram"}
    with pytest.raises(EnvError, match="emission/kind"):
        build_tabular(doc)


def test_document_round_trip():
    env = build_tabular(two_path_document())
    doc = json.loads(json.dumps(to_document(env)))
    again = build_tabular(doc)
    for Ta, Tb in zip(env.endo.T, again.endo.T):
        np.testing.assert_array_equal(Ta, Tb)
    for t in range(env.H):
        np.testing.assert_allclose(env.emission.q(t), again.emission.q(t))


def test_table_emission_rejects_overlap():
    q = np.zeros((2, 1, 2))
    q[0, 0] = [0.5, 0.5]
    q[1, 0] = [0.0, 1.0]
    with pytest.raises(EnvError, match="overlap"):
        TableEmission([q])


def test_block_property_table(two_path_env):
    for t in range(two_path_env.H):
        q = two_path_env.emission.q(t)
        owners = (q > 0).reshape(-1, q.shape[2]).sum(axis=0)
        assert np.all(owners == 1)


def test_exo_chain_validation():
    with pytest.raises(EnvError):
        TabularExoChain([0.5, 0.6], [[1, 0], [0, 1]])


def test_bitflip_exact_kernel_rows_sum_to_one():
    mu, T = BitFlipExoChain(3, 0.1).exact()
    np.testing.assert_allclose(T.sum(axis=1), 1.0)
    assert T[0, 0] == pytest.approx(0.9**3)


def test_endo_spec_shape_error():
    with pytest.raises(EnvError, match="shape"):
        EndoMdpSpec(A=2, counts=(1, 2), mu=np.array([1.0]), T=(np.ones((1, 2, 3)) / 3,), R=(np.zeros((1, 2)), np.zeros((2, 2))))


def test_perturbed_visitation_matches_dp():
    env = build_tabular(chain_document(stochastic=0.1))
    path = (0, 1)
    exact = endo_occupancy(env, path, 3).values
    _, batch = collect(env, [path], 10_000, master_seed=5, stream=1, length=3)
    freq = np.bincount(batch.endo[:, 2], minlength=2) / 10_000
    sigma = np.sqrt(exact * (1 - exact) / 10_000)
    assert np.all(np.abs(freq - exact) <= 3 * sigma + 1e-12)


@given(st.integers(1, 4), st.integers(0, 10**6))
def test_collect_is_worker_invariant(workers, seed):
    env = build_combolock(3, seed=0)
    i1, b1 = collect(env, [(0, 1), (2, 3)], 2100, seed, 2, length=3)
    i2, b2 = collect(env, [(0, 1), (2, 3)], 2100, seed, 2, length=3, workers=workers)
    np.testing.assert_array_equal(i1, i2)
    for o1, o2 in zip(b1.observations, b2.observations):
        np.testing.assert_array_equal(o1, o2)


def test_uniform_action_extends_paths(chain_env):
    idx, batch = collect(chain_env, [(0,), (1,)], 500, 0, 0, length=2, uniform_action=True)
    assert batch.actions.shape == (500, 2)
    np.testing.assert_array_equal(batch.actions[:, 0], idx)
    assert set(np.unique(batch.actions[:, 1])) == {0, 1}


def test_sample_batch_rejects_bad_actions(chain_env):
    with pytest.raises(EnvError):
        sample_batch(chain_env, np.array([[2]]), np.random.default_rng(0), length=2)
    with pytest.raises(EnvError):
        sample_batch(chain_env, np.zeros((1, 4), dtype=int), np.random.default_rng(0))


def test_bernoulli_rewards_are_binary():
    doc = chain_document()
    doc["reward_kind"] = "bernoulli"
    env = build_tabular(doc)
    _, batch = collect(env, [(1, 0, 1)], 4000, 0, 0)
    r = batch.rewards[:, 2]
    assert set(np.unique(r)) <= {0.0, 1.0}
    assert abs(r.mean() - 0.3) < 3 * np.sqrt(0.21 / 4000)


def test_exo_marginals_are_action_independent(two_path_env):
    a = joint_occupancy(two_path_env, path_policy(two_path_env, (0,)), 2).sum(axis=0)
    b = joint_occupancy(two_path_env, path_policy(two_path_env, (1,)), 2).sum(axis=0)
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a, exo_occupancy(two_path_env, 2).values, atol=1e-12)


@given(st.integers(0, 10**6))
def test_random_family_in_regime(seed):
    env = random_tabular_env(np.random.default_rng(seed), emission="table")
    assert env.in_theory_regime()
    for T in env.endo.T:
        np.testing.assert_allclose(T.sum(axis=-1), 1.0, atol=1e-12)
    assert env.eta == pytest.approx(max([1 - env.endo.mu.max()] + [float((1 - T.max(-1)).max()) for T in env.endo.T]))
