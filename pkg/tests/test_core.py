import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exo_rl.core import (
    ROOT,
    EpisodeBudget,
    PpeConfig,
    Trajectory,
    default_sample_count,
    derive_episode_seed,
    extend,
    log_class_size_proxy,
    make_path,
    regime_cap,
)


def test_seed_is_pure_function():
    assert derive_episode_seed(7, 3, 11) == derive_episode_seed(7, 3, 11)


def test_seed_distinct_indices():
    assert derive_episode_seed(7, 2, 0) != derive_episode_seed(7, 2, 1)


@given(st.integers(0, 2**63), st.integers(0, 1000), st.integers(0, 10**6))
def test_seed_fits_in_64_bits(master, level, index):
    s = derive_episode_seed(master, level, index)
    assert 0 <= s < 2**64


def test_seed_no_collisions_over_grid():
    seeds = {derive_episode_seed(0, h, i) for h in range(20) for i in range(500)}
    assert len(seeds) == 20 * 500


def test_sample_count_small_case():
    # 16 * 2^2 * log(1 * 2 * 2 / 0.5) = 64 log 8
    assert default_sample_count(2, 0.0, 1, 2, 2, 0.5) == math.ceil(64 * math.log(8)) == 134


def test_sample_count_override():
    assert default_sample_count(40, 100.0, 4, 10, 5, 0.1, n_override=5000) == 5000


def test_sample_count_clamps_to_one():
    # log(1 * 1 * 1 / delta) -> 0 as delta -> 1
    assert default_sample_count(1, 0.0, 1, 1, 1, 1 - 1e-12) == 1


def test_sample_count_overflow_reports_magnitude():
    with pytest.raises(OverflowError, match="e\\+"):
        default_sample_count(10**9, 1e6, 10**8, 10, 10, 0.1)


def test_sample_count_rejects_nonpositive():
    with pytest.raises(ValueError):
        default_sample_count(0, 0.0, 1, 1, 1, 0.5)


def test_class_size_proxy():
    assert log_class_size_proxy(10) == pytest.approx(10 * math.log(2))


def test_paths():
    assert ROOT == ()
    p = make_path(np.array([1, 2]))
    assert p == (1, 2) and all(type(a) is int for a in p)
    assert extend(p, 3) == (1, 2, 3)
    assert make_path([0, 1]) == make_path((0, 1))
    assert make_path([0, 1]) != make_path([1, 0])


def test_trajectory_lengths():
    Trajectory([0, 1], [0, 1], [0.0, 1.0])
    Trajectory([0, 1, 2], [0, 1], [0.0, 1.0], latent_endo=[0, 0, 1])
    with pytest.raises(ValueError):
        Trajectory([0], [0, 1], [0.0, 0.0])
    with pytest.raises(ValueError):
        Trajectory([0, 1], [0, 1], [0.0])
    with pytest.raises(ValueError):
        Trajectory([0, 1], [0, 1], [0.0, 0.0], latent_exo=[0])


def test_config_threshold_and_margin():
    cfg = PpeConfig(horizon=3)
    assert cfg.threshold(8) == pytest.approx(5 / 64)
    assert cfg.decoder_margin(8) == pytest.approx(1 / 16)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"horizon": 0},
        {"horizon": 2, "delta": 1.0},
        {"horizon": 2, "eta": -0.1},
        {"horizon": 2, "n_override": 0},
        {"horizon": 2, "sample_count_rule": "other"},
        {"horizon": 2, "workers": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PpeConfig(**kwargs)


def test_regime_cap():
    assert regime_cap(3, 5) == pytest.approx(1 / 60)


def test_budget_total():
    b = EpisodeBudget(ppe=10, reward=2, planning=3, evaluation=4)
    assert b.total == 19
