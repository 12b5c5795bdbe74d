"""Shared domain types: paths, trajectories, PPE configuration and seeding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

# A discrete observation is an int id; a dense one is a 1-D float array.
Observation = Union[int, np.ndarray]

# Open-loop policy: a fixed tuple of action indices. The empty tuple is the
# root path at level 1.
Path = Tuple[int, ...]

ROOT: Path = ()

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def make_path(actions: Sequence[int]) -> Path:
    return tuple(int(a) for a in actions)


def extend(path: Path, action: int) -> Path:
    return path + (int(action),)


@dataclass(frozen=True)
class Trajectory:
    """One episode: x_1..x_T, a_1..a_T, r_1..r_T.

    A trajectory that stops at an observation (no action chosen at the last
    step) has one more observation than actions.
    """

    observations: list
    actions: list
    rewards: list
    latent_endo: Optional[list] = None
    latent_exo: Optional[list] = None

    def __post_init__(self):
        n_obs, n_act = len(self.observations), len(self.actions)
        if n_act not in (n_obs, n_obs - 1) or len(self.rewards) != n_act:
            raise ValueError(
                f"inconsistent trajectory lengths: {n_obs} observations, "
                f"{n_act} actions, {len(self.rewards)} rewards"
            )
        for name in ("latent_endo", "latent_exo"):
            latent = getattr(self, name)
            if latent is not None and len(latent) != n_obs:
                raise ValueError(f"{name} has length {len(latent)}, expected {n_obs}")


@dataclass(frozen=True)
class PpeConfig:
    horizon: int
    delta: float = 0.1
    eta: float = 0.0
    n_override: Optional[int] = None
    elimination_threshold_numerator: float = 5.0 / 8.0
    decoder_margin_fraction: float = 0.5
    seed: int = 0
    # log|F| used by the sample-count formula; None means parameter-count proxy.
    log_f_class_size: Optional[float] = None
    # "cover": 16|U|^2 log(|F||Psi|AH/delta); "pairwise": 16|U|^2 log(|F||U|^2 H/delta)
    sample_count_rule: str = "cover"
    fresh_gap_samples: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.n_override is not None and self.n_override < 1:
            raise ValueError(f"n_override must be positive, got {self.n_override}")
        if self.sample_count_rule not in ("cover", "pairwise"):
            raise ValueError(f"unknown sample_count_rule {self.sample_count_rule!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def threshold(self, n_paths: int) -> float:
        return self.elimination_threshold_numerator / n_paths

    def decoder_margin(self, n_paths: int) -> float:
        return self.decoder_margin_fraction / n_paths


def regime_cap(max_states_per_level: int, horizon: int) -> float:
    """Largest stochasticity level covered by the guarantees: 1/(4 S H)."""
    return 1.0 / (4.0 * max_states_per_level * horizon)


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_episode_seed(master_seed: int, level: int, episode_index: int) -> int:
    """Counter-based 64-bit seed for one (level, index) slot of a run."""
    x = _splitmix64(int(master_seed) & _MASK64)
    x = _splitmix64(x ^ (int(level) & _MASK64))
    return _splitmix64(x ^ (int(episode_index) & _MASK64))


def default_sample_count(
    cover_size_times_A: int,
    f_class_size_log: float,
    cover_size: int,
    A: int,
    H: int,
    delta: float,
    n_override: Optional[int] = None,
) -> int:
    """Per-level sample count N = ceil(16 |Psi∘A|^2 (log|F| + log(|Psi| A H / delta)))."""
    if n_override is not None:
        return int(n_override)
    if min(cover_size_times_A, cover_size, A, H) <= 0 or f_class_size_log < 0 or delta <= 0:
        raise ValueError("sample-count inputs must be positive")
    n = 16.0 * float(cover_size_times_A) ** 2 * (
        f_class_size_log + math.log(cover_size * A * H / delta)
    )
    if not math.isfinite(n) or n > 2**63 - 1:
        raise OverflowError(f"sample count {n:.3e} does not fit in a 64-bit integer")
    return max(1, math.ceil(n))


def log_class_size_proxy(n_params: int) -> float:
    return n_params * math.log(2.0)


@dataclass
class EpisodeBudget:
    """Running tally of environment episodes by purpose."""

    ppe: int = 0
    reward: int = 0
    planning: int = 0
    evaluation: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.ppe + self.reward + self.planning + self.evaluation
