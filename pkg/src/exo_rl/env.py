"""Exogenous block MDP environments.

Levels are 1-indexed in the public API (``h = 1..H``) and 0-indexed in the
internal arrays (``t = h - 1``). An environment is the product of a
near-deterministic endogenous MDP with per-level state sets, an
action-independent exogenous Markov chain, and a block emission.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import jsonschema
import numpy as np
from scipy.linalg import hadamard

from .core import Path, Trajectory, derive_episode_seed, regime_cap

log = logging.getLogger(__name__)

STOCHASTIC_ATOL = 1e-12
BLOCK_SIZE = 1024
MAX_EXACT_EXO_BITS = 10

Policy = Callable[[int, np.ndarray], np.ndarray]


class EnvError(ValueError):
    pass


class UnsupportedOperation(TypeError):
    pass


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of a (n, K) row-stochastic array."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], 1))
    idx = (cdf < u * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def _check_stochastic(rows: np.ndarray, where: Callable[[tuple], str]) -> None:
    if np.any(rows < 0):
        bad = tuple(int(i) for i in np.argwhere(rows < 0)[0][:-1])
        raise EnvError(f"negative probability at {where(bad)}")
    sums = rows.sum(axis=-1)
    off = np.abs(sums - 1.0) > STOCHASTIC_ATOL
    if np.any(off):
        bad = tuple(int(i) for i in np.argwhere(off)[0])
        raise EnvError(f"row at {where(bad)} sums to {sums[bad]:.12g}, not 1")


@dataclass(frozen=True)
class EndoMdpSpec:
    """Endogenous MDP: per-level state counts, start distribution, kernels, rewards.

    ``T[t]`` has shape ``(counts[t], A, counts[t+1])`` and ``R[t]`` has shape
    ``(counts[t], A)``.
    """

    A: int
    counts: tuple
    mu: np.ndarray
    T: tuple
    R: tuple

    def __post_init__(self):
        H = len(self.counts)
        if H < 1 or self.A < 1:
            raise EnvError("need at least one level and one action")
        if self.mu.shape != (self.counts[0],):
            raise EnvError(f"mu has shape {self.mu.shape}, expected ({self.counts[0]},)")
        _check_stochastic(self.mu[None, :], lambda idx: "mu")
        if len(self.T) != H - 1:
            raise EnvError(f"expected {H - 1} transition tables, got {len(self.T)}")
        for t, T in enumerate(self.T):
            shape = (self.counts[t], self.A, self.counts[t + 1])
            if T.shape != shape:
                raise EnvError(f"T[{t + 1}] has shape {T.shape}, expected {shape}")
            _check_stochastic(T, lambda idx, h=t + 1: f"(h={h}, s={idx[0]}, a={idx[1]})")
        if len(self.R) != H:
            raise EnvError(f"expected {H} reward tables, got {len(self.R)}")
        for t, R in enumerate(self.R):
            if R.shape != (self.counts[t], self.A):
                raise EnvError(f"R[{t + 1}] has shape {R.shape}")
            if np.any(R < 0) or np.any(R > 1):
                raise EnvError(f"R[{t + 1}] has entries outside [0, 1]")

    @property
    def H(self) -> int:
        return len(self.counts)

    def eta_certificate(self) -> float:
        """max over rows of 1 - max probability (start distribution included)."""
        eta = 1.0 - float(self.mu.max())
        for T in self.T:
            eta = max(eta, float((1.0 - T.max(axis=-1)).max()))
        return max(eta, 0.0)

    def is_deterministic(self) -> bool:
        return self.eta_certificate() == 0.0


class ExoChain:
    """Action-independent exogenous Markov chain. States travel as arrays."""

    n_states: int

    def sample_start(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, rng: np.random.Generator, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def ids(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def features(self, states: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def exact(self) -> tuple:
        """(mu_xi, T_xi) as dense arrays."""
        raise NotImplementedError

    def is_deterministic(self) -> bool:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class TabularExoChain(ExoChain):
    def __init__(self, mu_xi, T_xi):
        self.mu = np.asarray(mu_xi, dtype=float)
        self.T = np.asarray(T_xi, dtype=float)
        n = self.mu.shape[0]
        if self.mu.ndim != 1 or self.T.shape != (n, n):
            raise EnvError(f"exogenous chain shapes mismatch: mu {self.mu.shape}, T {self.T.shape}")
        _check_stochastic(self.mu[None, :], lambda idx: "mu_xi")
        _check_stochastic(self.T, lambda idx: f"T_xi row {idx[0]}")
        self.n_states = n

    def sample_start(self, rng, n):
        return sample_categorical(rng, np.broadcast_to(self.mu, (n, self.n_states)))

    def step(self, rng, states):
        if self.n_states == 1:
            return states.copy()
        return sample_categorical(rng, self.T[states])

    def ids(self, states):
        return states

    def features(self, states):
        return np.eye(self.n_states)[states]

    def exact(self):
        return self.mu, self.T

    def is_deterministic(self):
        return bool(self.mu.max() == 1.0 and np.all(self.T.max(axis=1) == 1.0))

    def to_dict(self):
        return {"states": self.n_states, "mu_xi": self.mu.tolist(), "T_xi": self.T.tolist()}


class BitFlipExoChain(ExoChain):
    """Independent bits, uniform at the start, each flipped with probability flip_p per step."""

    def __init__(self, bits: int, flip_p: float):
        if bits < 1 or not 0.0 <= flip_p <= 1.0:
            raise EnvError(f"invalid bit chain: bits={bits}, flip_p={flip_p}")
        self.bits = int(bits)
        self.flip_p = float(flip_p)
        self.n_states = 2**self.bits

    def sample_start(self, rng, n):
        return (rng.random((n, self.bits)) < 0.5).astype(np.uint8)

    def step(self, rng, states):
        flips = (rng.random(states.shape) < self.flip_p).astype(np.uint8)
        return states ^ flips

    def ids(self, states):
        if self.bits > 62:
            raise UnsupportedOperation("bit-vector exogenous state too wide for integer ids")
        weights = (1 << np.arange(self.bits, dtype=np.int64))
        return states.astype(np.int64) @ weights

    def features(self, states):
        return states.astype(float)

    def exact(self):
        if self.bits > MAX_EXACT_EXO_BITS:
            raise UnsupportedOperation(
                f"exact exogenous kernel needs bits <= {MAX_EXACT_EXO_BITS}, got {self.bits}"
            )
        ids = np.arange(self.n_states)
        flips = np.bitwise_xor(ids[:, None], ids[None, :])
        dist = np.vectorize(lambda v: bin(v).count("1"))(flips)
        T = self.flip_p**dist * (1.0 - self.flip_p) ** (self.bits - dist)
        return np.full(self.n_states, 1.0 / self.n_states), T

    def is_deterministic(self):
        return False

    def to_dict(self):
        return {"bits": self.bits, "flip_p": self.flip_p}


class Emission:
    """Block emission q(x | s, xi). ``t`` is the 0-based level."""

    kind: str
    discrete: bool
    has_decoder = True

    def emit(self, rng, t: int, endo: np.ndarray, exo: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode_endo(self, h: int, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode_exo(self, h: int, X: np.ndarray) -> np.ndarray:
        raise UnsupportedOperation(f"{self.kind} emission has no exogenous decoder")

    def n_obs(self, t: int) -> int:
        raise UnsupportedOperation(f"{self.kind} emission has no finite observation space")

    def q(self, t: int) -> np.ndarray:
        """Dense (S_t, Xi, n_obs) emission table."""
        raise UnsupportedOperation(f"{self.kind} emission has no exact table")

    def to_dict(self) -> dict:
        raise NotImplementedError


class IdentityEmission(Emission):
    kind = "identity"
    discrete = True

    def __init__(self, counts: Sequence[int], exo: ExoChain):
        self.counts = tuple(counts)
        self.n_exo = exo.n_states
        self.exo = exo

    def emit(self, rng, t, endo, exo):
        return endo.astype(np.int64) * self.n_exo + self.exo.ids(exo)

    def decode_endo(self, h, X):
        return np.asarray(X, dtype=np.int64) // self.n_exo

    def decode_exo(self, h, X):
        return np.asarray(X, dtype=np.int64) % self.n_exo

    def n_obs(self, t):
        return self.counts[t] * self.n_exo

    def q(self, t):
        n = self.n_obs(t)
        return np.eye(n).reshape(self.counts[t], self.n_exo, n)

    def to_dict(self):
        return {"kind": "identity"}


class TableEmission(Emission):
    """Finite emission with block-disjoint supports, one table per level."""

    kind = "table"
    discrete = True

    def __init__(self, tables: Sequence[np.ndarray]):
        self.tables = tuple(np.asarray(q, dtype=float) for q in tables)
        self._endo_of = []
        self._exo_of = []
        for t, q in enumerate(self.tables):
            if q.ndim != 3:
                raise EnvError(f"emission table at h={t + 1} must be [s][xi][x]")
            _check_stochastic(q, lambda idx, h=t + 1: f"emission (h={h}, s={idx[0]}, xi={idx[1]})")
            support = q > 0
            owners = support.reshape(-1, q.shape[2]).sum(axis=0)
            if np.any(owners > 1):
                x = int(np.argmax(owners > 1))
                raise EnvError(f"emission supports overlap at h={t + 1} on observation {x}")
            flat = np.argmax(support.reshape(-1, q.shape[2]), axis=0)
            endo = np.where(owners == 1, flat // q.shape[1], -1)
            exo = np.where(owners == 1, flat % q.shape[1], -1)
            self._endo_of.append(endo)
            self._exo_of.append(exo)

    def emit(self, rng, t, endo, exo):
        xi = exo if exo.ndim == 1 else None
        if xi is None:
            raise UnsupportedOperation("table emission requires a tabular exogenous chain")
        return sample_categorical(rng, self.tables[t][endo, xi]).astype(np.int64)

    def decode_endo(self, h, X):
        return self._endo_of[h - 1][np.asarray(X, dtype=np.int64)]

    def decode_exo(self, h, X):
        return self._exo_of[h - 1][np.asarray(X, dtype=np.int64)]

    def n_obs(self, t):
        return self.tables[t].shape[2]

    def q(self, t):
        return self.tables[t]

    def to_dict(self):
        return {
            "kind": "table",
            "q": [
                [[[[int(x), float(p)] for x, p in enumerate(row) if p > 0] for row in q_s] for q_s in q]
                for q in self.tables
            ],
        }


class DenseEmission(Emission):
    """one-hot(global endo id) ++ exogenous features, Gaussian noise, zero-pad, Hadamard."""

    kind = "dense"
    discrete = False

    def __init__(self, counts: Sequence[int], exo: ExoChain, sigma: float = 0.1, debug: bool = True):
        self.has_decoder = debug
        self.counts = tuple(counts)
        self.offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(int)
        self.n_endo = int(self.offsets[-1])
        self.exo = exo
        self.exo_dim = exo.bits if isinstance(exo, BitFlipExoChain) else exo.n_states
        self.raw_dim = self.n_endo + self.exo_dim
        self.dim = 1 << int(np.ceil(np.log2(self.raw_dim)))
        self.hadamard = hadamard(self.dim).astype(float)
        self.sigma = float(sigma)

    def encode(self, t, endo, exo_features, noise):
        n = endo.shape[0]
        raw = np.zeros((n, self.dim))
        raw[np.arange(n), self.offsets[t] + endo] = 1.0
        raw[:, self.n_endo : self.raw_dim] = exo_features
        raw[:, : self.raw_dim] += noise
        return raw @ self.hadamard

    def emit(self, rng, t, endo, exo):
        noise = self.sigma * rng.standard_normal((endo.shape[0], self.raw_dim))
        return self.encode(t, endo, self.exo.features(exo), noise)

    def invert(self, X):
        return np.asarray(X) @ self.hadamard / self.dim

    def _require_debug(self):
        if not self.has_decoder:
            raise UnsupportedOperation("dense emission decoders are available in debug mode only")

    def decode_endo(self, h, X):
        self._require_debug()
        raw = self.invert(np.atleast_2d(X))
        lo, hi = self.offsets[h - 1], self.offsets[h]
        return np.argmax(raw[:, lo:hi], axis=1)

    def decode_exo(self, h, X):
        self._require_debug()
        raw = self.invert(np.atleast_2d(X))[:, self.n_endo : self.raw_dim]
        if isinstance(self.exo, BitFlipExoChain):
            return self.exo.ids((raw > 0.5).astype(np.uint8))
        return np.argmax(raw, axis=1)

    def to_dict(self):
        return {"kind": "dense", "sigma": self.sigma, "debug": self.has_decoder}


@dataclass(frozen=True)
class ExBmdpEnv:
    endo: EndoMdpSpec
    exo: ExoChain
    emission: Emission
    # Optional rewards that also depend on xi: per level (S_t, Xi, A).
    reward_full: Optional[tuple] = None
    bernoulli_rewards: bool = False
    name: str = "tabular"
    metadata: dict = field(default_factory=dict)

    @property
    def H(self) -> int:
        return self.endo.H

    @property
    def A(self) -> int:
        return self.endo.A

    @property
    def counts(self) -> tuple:
        return self.endo.counts

    @property
    def eta(self) -> float:
        return self.endo.eta_certificate()

    @property
    def max_states(self) -> int:
        return max(self.endo.counts)

    def in_theory_regime(self) -> bool:
        return self.eta <= regime_cap(self.max_states, self.H) + 1e-15

    @property
    def endogenous_reward(self) -> bool:
        return self.reward_full is None

    def decode_endo(self, h: int, X) -> np.ndarray:
        return self.emission.decode_endo(h, X)

    def decode_exo(self, h: int, X) -> np.ndarray:
        return self.emission.decode_exo(h, X)

    def is_deterministic(self) -> bool:
        return self.endo.is_deterministic() and self.exo.is_deterministic()

    def require_tabular(self) -> None:
        if not self.emission.discrete:
            raise UnsupportedOperation("operation requires a tabular (discrete-emission) environment")

    def reward_table(self, t: int) -> np.ndarray:
        """(S_t, Xi, A) mean rewards."""
        if self.reward_full is not None:
            return self.reward_full[t]
        R = self.endo.R[t]
        return np.broadcast_to(R[:, None, :], (R.shape[0], self.exo.n_states, R.shape[1]))


@dataclass
class Batch:
    """Vectorized episodes. ``observations[t]`` is the batch of x_{t+1}."""

    observations: list
    actions: np.ndarray
    rewards: np.ndarray
    endo: np.ndarray
    exo: Optional[np.ndarray]

    def __len__(self):
        return self.actions.shape[0]

    def obs(self, h: int) -> np.ndarray:
        return self.observations[h - 1]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            observations=[o[i] if o.ndim == 1 else o[i].copy() for o in self.observations],
            actions=[int(a) for a in self.actions[i]],
            rewards=[float(r) for r in self.rewards[i]],
            latent_endo=[int(s) for s in self.endo[i]],
            latent_exo=None if self.exo is None else [int(x) for x in self.exo[i]],
        )

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        return Batch(
            observations=[np.concatenate(obs) for obs in zip(*(b.observations for b in batches))],
            actions=np.concatenate([b.actions for b in batches]),
            rewards=np.concatenate([b.rewards for b in batches]),
            endo=np.concatenate([b.endo for b in batches]),
            exo=None if batches[0].exo is None else np.concatenate([b.exo for b in batches]),
        )


def sample_batch(
    env: ExBmdpEnv,
    actions: np.ndarray,
    rng: np.random.Generator,
    length: Optional[int] = None,
    policy: Optional[Policy] = None,
) -> Batch:
    """Roll out ``n`` episodes for ``length`` steps (default H).

    Row ``i`` of ``actions`` is an open-loop prefix. Past the prefix, actions
    come from ``policy(h, x_h)``; with no policy the episode ends at the last
    observation without acting.
    """
    actions = np.asarray(actions, dtype=np.int64)
    if actions.ndim != 2:
        raise ValueError("actions must be a 2-D (episodes, steps) array")
    n, L = actions.shape
    T = env.H if length is None else int(length)
    if L > env.H or T > env.H:
        raise EnvError(f"rollout of {max(L, T)} steps exceeds horizon {env.H}")
    if L and (actions.min() < 0 or actions.max() >= env.A):
        raise EnvError(f"action index outside [0, {env.A})")
    n_act = T if policy is not None else min(L, T)
    if policy is None and L < T - 1:
        raise EnvError(f"prefix of {L} actions cannot reach step {T} without a policy")

    endo = sample_categorical(rng, np.broadcast_to(env.endo.mu, (n, env.endo.counts[0])))
    exo = env.exo.sample_start(rng, n)
    obs_out, endo_out, exo_out = [], [], []
    act_out = np.zeros((n, n_act), dtype=np.int64)
    rew_out = np.zeros((n, n_act))
    try_exo_ids = True
    for t in range(T):
        x = env.emission.emit(rng, t, endo, exo)
        obs_out.append(x)
        endo_out.append(endo)
        if try_exo_ids:
            try:
                exo_out.append(env.exo.ids(exo))
            except UnsupportedOperation:
                try_exo_ids = False
        if t >= n_act:
            break
        a = actions[:, t] if t < L else np.asarray(policy(t + 1, x), dtype=np.int64)
        act_out[:, t] = a
        exo_idx = exo if exo.ndim == 1 else (env.exo.ids(exo) if env.reward_full is not None else None)
        if env.reward_full is not None:
            r = env.reward_full[t][endo, exo_idx, a]
        else:
            r = env.endo.R[t][endo, a]
        if env.bernoulli_rewards:
            r = (rng.random(n) < r).astype(float)
        rew_out[:, t] = r
        if t + 1 < T:
            endo = sample_categorical(rng, env.endo.T[t][endo, a])
            exo = env.exo.step(rng, exo)
    return Batch(
        observations=obs_out,
        actions=act_out,
        rewards=rew_out,
        endo=np.stack(endo_out, axis=1),
        exo=np.stack(exo_out, axis=1) if try_exo_ids else None,
    )


def sample_episode(
    env: ExBmdpEnv,
    path: Path,
    seed: int,
    record_latent: bool = True,
    policy: Optional[Policy] = None,
) -> Trajectory:
    """One episode following ``path`` (then ``policy``, if given)."""
    if len(path) > env.H:
        raise EnvError(f"path of length {len(path)} exceeds horizon {env.H}")
    rng = np.random.default_rng(seed)
    length = env.H if policy is not None or len(path) == env.H else len(path) + 1
    batch = sample_batch(env, np.asarray([path], dtype=np.int64).reshape(1, len(path)), rng, length, policy)
    traj = batch.trajectory(0)
    if not record_latent:
        traj = Trajectory(traj.observations, traj.actions, traj.rewards)
    return traj


def paths_array(paths: Sequence[Path]) -> np.ndarray:
    lengths = {len(p) for p in paths}
    if len(lengths) != 1:
        raise ValueError(f"paths must share one length, got lengths {sorted(lengths)}")
    return np.asarray(paths, dtype=np.int64).reshape(len(paths), lengths.pop())


def collect(
    env: ExBmdpEnv,
    paths: Sequence[Path],
    n: int,
    master_seed: int,
    stream: int,
    length: Optional[int] = None,
    policy: Optional[Policy] = None,
    workers: int = 1,
    uniform_action: bool = False,
) -> tuple:
    """Sample ``n`` episodes with the path drawn uniformly from ``paths``.

    Episodes are generated in fixed blocks of ``BLOCK_SIZE``; block ``b`` uses
    the seed ``derive_episode_seed(master_seed, stream, b)``, so the result does
    not depend on ``workers``. With ``uniform_action`` a uniformly random action
    is appended to each drawn path. Returns ``(path_indices, batch)``.
    """
    if n < 1:
        raise ValueError(f"need at least one episode, got {n}")
    table = paths_array(paths)
    n_blocks = -(-n // BLOCK_SIZE)

    def run_block(b):
        rng = np.random.default_rng(derive_episode_seed(master_seed, stream, b))
        size = min(BLOCK_SIZE, n - b * BLOCK_SIZE)
        idx = rng.integers(len(paths), size=size)
        acts = table[idx]
        if uniform_action:
            acts = np.concatenate([acts, rng.integers(env.A, size=(size, 1))], axis=1)
        return idx, sample_batch(env, acts, rng, length, policy)

    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, range(n_blocks)))
    else:
        results = [run_block(b) for b in range(n_blocks)]
    idx = np.concatenate([r[0] for r in results])
    return idx, Batch.concat([r[1] for r in results])


# --------------------------------------------------------------------------
# builders


def build_combolock(
    H: int,
    seed: int,
    noise_sigma: float = 0.1,
    A: int = 10,
    exo_bits: Optional[int] = None,
    flip_p: float = 0.1,
    emission: str = "dense",
) -> ExBmdpEnv:
    """Combination lock with a bit-flip exogenous distractor.

    States per level: ``0 = a``, ``1 = b``, ``2 = c`` (a single ``a`` state at
    h = 1). Good action ``a_h`` advances the a-chain, ``a'_h`` the b-chain;
    everything else falls into the absorbing c-chain. Reward 1 for ``a_H`` in
    ``s_{H,a}`` and 0.1 for ``a'_H`` in ``s_{H,b}``.
    """
    if H < 2 or A < 2:
        raise EnvError(f"combination lock needs H >= 2 and A >= 2, got H={H}, A={A}")
    rng = np.random.default_rng(seed)
    good = rng.integers(A, size=H)
    alt = (good + rng.integers(1, A, size=H)) % A
    counts = (1,) + (3,) * (H - 1)
    T = []
    for t in range(H - 1):
        S = counts[t]
        table = np.zeros((S, A, 3))
        table[:, :, 2] = 1.0
        table[0, good[t]] = [1.0, 0.0, 0.0]
        b_state = 0 if t == 0 else 1
        table[b_state, alt[t]] = [0.0, 1.0, 0.0]
        T.append(table)
    R = [np.zeros((S, A)) for S in counts]
    R[-1][0, good[-1]] = 1.0
    R[-1][1, alt[-1]] = 0.1
    endo = EndoMdpSpec(A=A, counts=counts, mu=np.array([1.0]), T=tuple(T), R=tuple(R))
    exo = BitFlipExoChain(H if exo_bits is None else exo_bits, flip_p)
    if emission == "dense":
        em = DenseEmission(counts, exo, noise_sigma)
    elif emission == "identity":
        em = IdentityEmission(counts, exo)
    else:
        raise EnvError(f"unknown combination-lock emission {emission!r}")
    return ExBmdpEnv(
        endo,
        exo,
        em,
        name="combolock",
        metadata={
            "good_actions": [int(a) for a in good],
            "alt_actions": [int(a) for a in alt],
            "optimal_value": 1.0,
        },
    )


def build_id_counterexample() -> ExBmdpEnv:
    """Three-level deterministic MDP whose level-3 states share no parent.

    Action 0 from s_1 reaches s_2a, action 1 reaches s_2b; both actions keep
    s_2a -> s_3a and s_2b -> s_3b.
    """
    A = 2
    T1 = np.zeros((1, A, 2))
    T1[0, 0, 0] = T1[0, 1, 1] = 1.0
    T2 = np.zeros((2, A, 2))
    T2[0, :, 0] = T2[1, :, 1] = 1.0
    counts = (1, 2, 2)
    endo = EndoMdpSpec(
        A=A,
        counts=counts,
        mu=np.array([1.0]),
        T=(T1, T2),
        R=tuple(np.zeros((S, A)) for S in counts),
    )
    exo = TabularExoChain([1.0], [[1.0]])
    return ExBmdpEnv(endo, exo, IdentityEmission(counts, exo), name="id-counterexample")


def build_decoupling_counterexample() -> ExBmdpEnv:
    """Two steps, endogenous bit starting at 1, frozen uniform exogenous bit.

    Action 0 keeps the endogenous bit, action 1 clears it. The policy that
    plays the exogenous bit correlates the two latent factors at h = 2.
    """
    A = 2
    T1 = np.zeros((2, A, 2))
    T1[0, 0, 0] = T1[1, 0, 1] = 1.0
    T1[:, 1, 0] = 1.0
    counts = (2, 2)
    endo = EndoMdpSpec(
        A=A,
        counts=counts,
        mu=np.array([0.0, 1.0]),
        T=(T1,),
        R=tuple(np.zeros((S, A)) for S in counts),
    )
    exo = TabularExoChain([0.5, 0.5], np.eye(2))
    return ExBmdpEnv(endo, exo, IdentityEmission(counts, exo), name="decoupling-counterexample")


def build_chain(H: int, A: int = 2) -> ExBmdpEnv:
    """One state per level; every action moves along the chain."""
    counts = (1,) * H
    endo = EndoMdpSpec(
        A=A,
        counts=counts,
        mu=np.array([1.0]),
        T=tuple(np.ones((1, A, 1)) for _ in range(H - 1)),
        R=tuple(np.zeros((1, A)) for _ in range(H)),
    )
    exo = TabularExoChain([1.0], [[1.0]])
    return ExBmdpEnv(endo, exo, IdentityEmission(counts, exo), name="chain")


_PROB_ROW = {"type": "array", "items": {"type": "number", "minimum": 0}}

TABULAR_SCHEMA = {
    "type": "object",
    "required": ["H", "A", "endo_states", "mu", "T", "exo", "emission"],
    "properties": {
        "H": {"type": "integer", "minimum": 1},
        "A": {"type": "integer", "minimum": 1},
        "endo_states": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "mu": _PROB_ROW,
        "T": {"type": "array"},
        "R": {"type": "array"},
        "R_full": {"type": "array"},
        "reward_kind": {"enum": ["mean", "bernoulli"]},
        "exo": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["states", "mu_xi", "T_xi"],
                    "properties": {
                        "states": {"type": "integer", "minimum": 1},
                        "mu_xi": _PROB_ROW,
                        "T_xi": {"type": "array", "items": _PROB_ROW},
                    },
                },
                {
                    "type": "object",
                    "required": ["bits", "flip_p"],
                    "properties": {
                        "bits": {"type": "integer", "minimum": 1},
                        "flip_p": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            ]
        },
        "emission": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["identity", "table", "dense"]},
                "q": {"type": "array"},
                "sigma": {"type": "number", "minimum": 0},
                "debug": {"type": "boolean"},
            },
        },
    },
}


def build_tabular(doc: dict) -> ExBmdpEnv:
    """Build and certify an environment from its JSON document."""
    try:
        jsonschema.validate(doc, TABULAR_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise EnvError(f"schema violation at {where}: {err.message}") from None
    H, A = doc["H"], doc["A"]
    counts = tuple(doc["endo_states"])
    if len(counts) != H:
        raise EnvError(f"endo_states has {len(counts)} levels, expected H={H}")
    try:
        T = tuple(np.asarray(doc["T"][t], dtype=float) for t in range(len(doc["T"])))
        R = tuple(
            np.asarray(doc["R"][t], dtype=float) for t in range(H)
        ) if "R" in doc else tuple(np.zeros((S, A)) for S in counts)
    except (ValueError, IndexError) as err:
        raise EnvError(f"malformed T or R arrays: {err}") from None
    endo = EndoMdpSpec(A=A, counts=counts, mu=np.asarray(doc["mu"], dtype=float), T=T, R=R)

    ex = doc["exo"]
    if "bits" in ex:
        exo: ExoChain = BitFlipExoChain(ex["bits"], ex["flip_p"])
    else:
        exo = TabularExoChain(ex["mu_xi"], ex["T_xi"])
        if exo.n_states != ex["states"]:
            raise EnvError(f"exo.states={ex['states']} disagrees with mu_xi length {exo.n_states}")

    em = doc["emission"]
    if em["kind"] == "identity":
        emission: Emission = IdentityEmission(counts, exo)
    elif em["kind"] == "dense":
        emission = DenseEmission(counts, exo, em.get("sigma", 0.1), em.get("debug", True))
    else:
        if "q" not in em or isinstance(exo, BitFlipExoChain):
            raise EnvError("table emission needs 'q' and a tabular exogenous chain")
        emission = TableEmission(_parse_table(em["q"], counts, exo.n_states))

    reward_full = None
    if "R_full" in doc:
        reward_full = tuple(np.asarray(doc["R_full"][t], dtype=float) for t in range(H))
        for t, Rf in enumerate(reward_full):
            if Rf.shape != (counts[t], exo.n_states, A):
                raise EnvError(f"R_full[{t + 1}] has shape {Rf.shape}")
            if np.any(Rf < 0) or np.any(Rf > 1):
                raise EnvError(f"R_full[{t + 1}] has entries outside [0, 1]")
    env = ExBmdpEnv(
        endo,
        exo,
        emission,
        reward_full=reward_full,
        bernoulli_rewards=doc.get("reward_kind", "mean") == "bernoulli",
        name=doc.get("name", "tabular"),
    )
    env.metadata["eta_certificate"] = env.eta
    env.metadata["in_theory_regime"] = env.in_theory_regime()
    return env


def _parse_table(q_doc, counts, n_exo) -> list:
    tables = []
    for t, level in enumerate(q_doc):
        if len(level) != counts[t] or any(len(row) != n_exo for row in level):
            raise EnvError(f"emission q at h={t + 1} must be indexed [s][xi]")
        n_obs = 1 + max(int(x) for row in level for cell in row for x, _ in cell)
        q = np.zeros((counts[t], n_exo, n_obs))
        for s, row in enumerate(level):
            for xi, cell in enumerate(row):
                for x, p in cell:
                    q[s, xi, int(x)] += float(p)
        tables.append(q)
    if len(tables) != len(counts):
        raise EnvError(f"emission q has {len(tables)} levels, expected {len(counts)}")
    return tables


def to_document(env: ExBmdpEnv) -> dict:
    """Inverse of ``build_tabular``."""
    doc = {
        "name": env.name,
        "H": env.H,
        "A": env.A,
        "endo_states": list(env.counts),
        "mu": env.endo.mu.tolist(),
        "T": [T.tolist() for T in env.endo.T],
        "R": [R.tolist() for R in env.endo.R],
        "exo": env.exo.to_dict(),
        "emission": env.emission.to_dict(),
    }
    if env.reward_full is not None:
        doc["R_full"] = [R.tolist() for R in env.reward_full]
    if env.bernoulli_rewards:
        doc["reward_kind"] = "bernoulli"
    return doc


def random_tabular_env(
    rng: np.random.Generator,
    max_states: int = 6,
    max_actions: int = 4,
    max_horizon: int = 6,
    eta: Optional[float] = None,
    n_exo: int = 2,
    emission: str = "identity",
    exo_reward: bool = False,
) -> ExBmdpEnv:
    """Random near-deterministic instance.

    Each endogenous row (and the start distribution) puts ``1 - eps`` on a
    deterministic target and spreads ``eps`` over the other states, so both
    the max-probability certificate and half the L1 distance to the twin
    equal ``eps``. ``eta=None`` draws ``eps`` uniformly below half the regime
    cap 1/(4 S H), which keeps even the L1 reading of closeness in regime.
    """
    H = int(rng.integers(2, max_horizon + 1))
    A = int(rng.integers(1, max_actions + 1))
    counts = tuple([int(rng.integers(1, max_states + 1)) for _ in range(H)])
    S = max(counts)
    if eta is None:
        eta = float(rng.uniform(0.0, 0.5 * regime_cap(S, H))) if rng.random() < 0.7 else 0.0

    def perturbed(n_rows, n_cols):
        target = rng.integers(n_cols, size=n_rows)
        out = np.zeros((n_rows, n_cols))
        if n_cols == 1:
            out[:, 0] = 1.0
            return out
        spread = rng.dirichlet(np.ones(n_cols - 1), size=n_rows)
        for r in range(n_rows):
            others = [c for c in range(n_cols) if c != target[r]]
            out[r, others] = eta * spread[r]
            out[r, target[r]] = 1.0 - eta
        return out

    mu = perturbed(1, counts[0])[0]
    T = tuple(
        perturbed(counts[t] * A, counts[t + 1]).reshape(counts[t], A, counts[t + 1])
        for t in range(H - 1)
    )
    R = tuple(rng.random((S_t, A)) * (rng.random((S_t, A)) < 0.5) for S_t in counts)
    endo = EndoMdpSpec(A=A, counts=counts, mu=mu, T=T, R=R)
    mu_xi = rng.dirichlet(np.ones(n_exo))
    T_xi = rng.dirichlet(np.ones(n_exo), size=n_exo)
    exo = TabularExoChain(mu_xi, T_xi)
    if emission == "identity":
        em: Emission = IdentityEmission(counts, exo)
    elif emission == "table":
        tables = []
        for S_t in counts:
            widths = rng.integers(1, 3, size=(S_t, n_exo))
            q = np.zeros((S_t, n_exo, int(widths.sum())))
            start = 0
            for s in range(S_t):
                for xi in range(n_exo):
                    w = int(widths[s, xi])
                    q[s, xi, start : start + w] = rng.dirichlet(np.ones(w))
                    start += w
            tables.append(q)
        em = TableEmission(tables)
    else:
        raise EnvError(f"unknown emission kind {emission!r}")
    reward_full = None
    if exo_reward:
        reward_full = tuple(rng.random((S_t, n_exo, A)) for S_t in counts)
    env = ExBmdpEnv(endo, exo, em, reward_full=reward_full, name="random")
    env.metadata["eta_certificate"] = env.eta
    env.metadata["in_theory_regime"] = env.in_theory_regime()
    return env
