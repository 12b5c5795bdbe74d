"""Exact dynamic programming over tabular environments.

Ground truth for the learned components: occupancies, the Bayes-optimal
path classifier, exact prediction gaps, optimal values, and the
deterministic twin of a near-deterministic endogenous MDP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import Path
from .env import EndoMdpSpec, ExBmdpEnv, UnsupportedOperation

log = logging.getLogger(__name__)

ATOL = 1e-9
RENORM_TOL = 1e-12
DEFAULT_STATE_CAP = 1_000_000


@dataclass(frozen=True)
class OccupancyTable:
    h: int
    values: np.ndarray
    renormalized: bool = False

    def __post_init__(self):
        total = float(self.values.sum())
        if abs(total - 1.0) > ATOL or np.any(self.values < -ATOL):
            raise ValueError(f"occupancy at h={self.h} is not a distribution (sum {total:.12g})")

    def __getitem__(self, s):
        return self.values[s]


def _renormalize(p: np.ndarray, h: int) -> OccupancyTable:
    total = p.sum()
    if abs(total - 1.0) > RENORM_TOL:
        log.warning("occupancy drift %.3e at h=%d; renormalizing", total - 1.0, h)
        return OccupancyTable(h, p / total, renormalized=True)
    return OccupancyTable(h, p)


def _endo_forward(endo: EndoMdpSpec, path: Path, h: int) -> np.ndarray:
    if len(path) < h - 1:
        raise ValueError(f"path of length {len(path)} cannot reach level {h}")
    p = endo.mu.copy()
    for t in range(h - 1):
        p = p @ endo.T[t][:, path[t], :]
    return p


def endo_occupancy(env: ExBmdpEnv, path: Path, h: int) -> OccupancyTable:
    """P_h(s | path) by pushing mu through the chosen kernels."""
    return _renormalize(_endo_forward(env.endo, path, h), h)


def exo_occupancy(env: ExBmdpEnv, h: int) -> OccupancyTable:
    mu, T = env.exo.exact()
    p = mu.copy()
    for _ in range(h - 1):
        p = p @ T
    return _renormalize(p, h)


def path_policy(env: ExBmdpEnv, path: Path) -> list:
    """Latent-tabular policy tables (S_t, Xi, A) that play ``path``."""
    tables = []
    for t, a in enumerate(path):
        pi = np.zeros((env.counts[t], env.exo.n_states, env.A))
        pi[:, :, a] = 1.0
        tables.append(pi)
    return tables


def _as_probs(env: ExBmdpEnv, t: int, table: np.ndarray) -> np.ndarray:
    table = np.asarray(table)
    if table.ndim == 2:  # deterministic actions indexed [s, xi]
        return np.eye(env.A)[table]
    return table


def joint_occupancy(env: ExBmdpEnv, policy: Sequence[np.ndarray], h: int) -> np.ndarray:
    """P_h(s, xi | pi) for a policy over latent states, tables indexed [t][s, xi(, a)]."""
    if len(policy) < h - 1:
        raise ValueError(f"policy covers {len(policy)} steps, level {h} needs {h - 1}")
    mu_xi, T_xi = env.exo.exact()
    p = np.outer(env.endo.mu, mu_xi)
    for t in range(h - 1):
        pi = _as_probs(env, t, policy[t])
        p = np.einsum("sx,sxa,sap,xy->py", p, pi, env.endo.T[t], T_xi)
    return p


def observation_distribution(env: ExBmdpEnv, path: Path, h: int) -> np.ndarray:
    """P_h(x | path) by full-latent dynamic programming."""
    env.require_tabular()
    joint = joint_occupancy(env, path_policy(env, path[: h - 1]), h)
    return np.einsum("sx,sxo->o", joint, env.emission.q(h - 1))


def observation_kernel(env: ExBmdpEnv, h: int) -> np.ndarray:
    """P(x_{h+1} | x_h, a) as an (n_obs_h, A, n_obs_{h+1}) array.

    Observations outside every emission support get all-zero rows.
    """
    env.require_tabular()
    t = h - 1
    _, T_xi = env.exo.exact()
    q_next = env.emission.q(t + 1)
    # P(x' | s, xi, a) = sum_{s', xi'} T(s'|s,a) T_xi(xi'|xi) q(x'|s',xi')
    latent = np.einsum("sap,xy,pyo->sxao", env.endo.T[t], T_xi, q_next)
    n_obs = env.emission.n_obs(t)
    xs = np.arange(n_obs)
    s = env.decode_endo(h, xs)
    xi = env.decode_exo(h, xs)
    out = np.zeros((n_obs, env.A, q_next.shape[2]))
    owned = s >= 0
    out[owned] = latent[s[owned], xi[owned]]
    return out


@dataclass(frozen=True)
class BayesClassifier:
    """f*(i | s) for one level; rows of unreachable states are uniform and flagged."""

    h: int
    probs: np.ndarray  # (S_h, K)
    reachable: np.ndarray  # (S_h,) bool
    occupancy: np.ndarray  # (K, S_h): P_h(s | path_i)

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def roll_in(self) -> np.ndarray:
        """P_h(s | Unf(paths))."""
        return self.occupancy.mean(axis=0)


def bayes_classifier(env: ExBmdpEnv, paths: Sequence[Path], h: int) -> BayesClassifier:
    if not paths:
        raise ValueError("bayes_classifier needs at least one path")
    occ = np.stack([_endo_forward(env.endo, p, h) for p in paths])
    den = occ.sum(axis=0)
    reachable = den > 0
    probs = np.full((env.counts[h - 1], len(paths)), 1.0 / len(paths))
    probs[reachable] = (occ[:, reachable] / den[reachable]).T
    return BayesClassifier(h, probs, reachable, occ)


def exact_gap_matrix(env: ExBmdpEnv, paths: Sequence[Path], h: int) -> np.ndarray:
    """All Delta*(i, j) = sum_s P_h(s | Unf) |f*(i|s) - f*(j|s)|."""
    f = bayes_classifier(env, paths, h)
    w = f.roll_in()
    P = f.probs
    return np.einsum("s,sij->ij", w, np.abs(P[:, :, None] - P[:, None, :]))


def exact_gap(env: ExBmdpEnv, paths: Sequence[Path], h: int, i: int, j: int) -> float:
    f = bayes_classifier(env, paths, h)
    return float(f.roll_in() @ np.abs(f.probs[:, i] - f.probs[:, j]))


# --------------------------------------------------------------------------
# deterministic twin


def deterministic_twin(env: ExBmdpEnv) -> ExBmdpEnv:
    """Replace every endogenous row by its argmax (ties to the lowest index)."""
    endo = env.endo

    def snap(rows):
        out = np.zeros_like(rows)
        np.put_along_axis(out, rows.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return out

    twin = replace(endo, mu=snap(endo.mu[None, :])[0], T=tuple(snap(T) for T in endo.T))
    return replace(env, endo=twin, metadata={**env.metadata, "twin_of": env.name})


def twin_transition(env: ExBmdpEnv, t: int) -> np.ndarray:
    """(S_t, A) argmax successor table."""
    return env.endo.T[t].argmax(axis=-1)


def twin_target(env: ExBmdpEnv, path: Path, h: int) -> int:
    s = int(env.endo.mu.argmax())
    for t in range(h - 1):
        s = int(env.endo.T[t][s, path[t]].argmax())
    return s


def reachable_states(env: ExBmdpEnv, h: int) -> list:
    """Endogenous states reachable at level h in the deterministic twin."""
    states = {int(env.endo.mu.argmax())}
    for t in range(h - 1):
        succ = twin_transition(env, t)
        states = {int(succ[s, a]) for s in states for a in range(env.A)}
    return sorted(states)


def extend_cover(cover: Sequence[Path], A: int) -> list:
    """Psi ∘ A in index order: path (position p, action a) has index p*A + a."""
    return [p + (a,) for p in cover for a in range(A)]


def minimal_covers(env: ExBmdpEnv) -> list:
    """Per-level minimal covers of the twin, keeping the minimum-index path per state.

    Element ``h - 1`` is the cover for level h.
    """
    covers = [[()]]
    for h in range(2, env.H + 1):
        survivors, seen = [], set()
        for p in extend_cover(covers[-1], env.A):
            s = twin_target(env, p, h)
            if s not in seen:
                seen.add(s)
                survivors.append(p)
        covers.append(survivors)
    return covers


# --------------------------------------------------------------------------
# values


def exact_optimal_value(
    env: ExBmdpEnv, reward_scope: str = "full", state_cap: int = DEFAULT_STATE_CAP
) -> tuple:
    """Optimal value and a greedy tabular policy by backward induction.

    ``full`` plans over (s, xi) with tables indexed [t][s, xi]; ``endogenous``
    plans over s alone with tables indexed [t][s].
    """
    H = env.H
    if reward_scope == "endogenous":
        if env.reward_full is not None:
            raise ValueError("endogenous scope needs rewards that depend on s only")
        V = np.zeros(env.counts[-1])
        policy = [None] * H
        for t in reversed(range(H)):
            Q = env.endo.R[t].copy()
            if t + 1 < H:
                Q += env.endo.T[t] @ V
            policy[t] = Q.argmax(axis=1)
            V = Q.max(axis=1)
        return float(env.endo.mu @ V), policy
    if reward_scope != "full":
        raise ValueError(f"unknown reward scope {reward_scope!r}")
    size = max(env.counts) * env.exo.n_states
    if size > state_cap:
        raise UnsupportedOperation(f"latent state space of {size} exceeds the cap of {state_cap}")
    mu_xi, T_xi = env.exo.exact()
    V = np.zeros((env.counts[-1], env.exo.n_states))
    policy = [None] * H
    for t in reversed(range(H)):
        Q = np.array(env.reward_table(t), dtype=float)
        if t + 1 < H:
            Q = Q + np.einsum("sap,xp->sxa", env.endo.T[t], T_xi @ V.T)
        policy[t] = Q.argmax(axis=2)
        V = Q.max(axis=2)
    return float(env.endo.mu @ V @ mu_xi), policy


def policy_value(env: ExBmdpEnv, policy: Sequence[np.ndarray]) -> float:
    """Exact value of a latent-tabular policy with tables indexed [t][s, xi(, a)]."""
    mu_xi, T_xi = env.exo.exact()
    p = np.outer(env.endo.mu, mu_xi)
    total = 0.0
    for t in range(env.H):
        pi = _as_probs(env, t, policy[t])
        total += float(np.einsum("sx,sxa,sxa->", p, pi, env.reward_table(t)))
        if t + 1 < env.H:
            p = np.einsum("sx,sxa,sap,xy->py", p, pi, env.endo.T[t], T_xi)
    return total


def open_loop_value(env: ExBmdpEnv, actions: Path) -> float:
    """Expected return of an open-loop action sequence of length H."""
    if len(actions) != env.H:
        raise ValueError(f"plan has {len(actions)} actions, horizon is {env.H}")
    if env.reward_full is not None:
        return policy_value(env, path_policy(env, actions))
    p = env.endo.mu.copy()
    total = 0.0
    for t, a in enumerate(actions):
        total += float(p @ env.endo.R[t][:, a])
        if t + 1 < env.H:
            p = p @ env.endo.T[t][:, a, :]
    return total


def kernel_l1_distance(env_a: ExBmdpEnv, env_b: ExBmdpEnv) -> float:
    """max over (t, s, a) of ||T_a(.|s,a) - T_b(.|s,a)||_1, start distribution included."""
    _check_same_shape(env_a, env_b)
    d = float(np.abs(env_a.endo.mu - env_b.endo.mu).sum())
    for Ta, Tb in zip(env_a.endo.T, env_b.endo.T):
        d = max(d, float(np.abs(Ta - Tb).sum(axis=-1).max()))
    return d


def _check_same_shape(env_a: ExBmdpEnv, env_b: ExBmdpEnv) -> None:
    if env_a.counts != env_b.counts or env_a.A != env_b.A:
        raise ValueError(
            f"environments differ in shape: {env_a.counts}x{env_a.A} vs {env_b.counts}x{env_b.A}"
        )


def l1_occupancy_gap(env_a: ExBmdpEnv, env_b: ExBmdpEnv, path: Path, h: int) -> float:
    _check_same_shape(env_a, env_b)
    return float(
        np.abs(_endo_forward(env_a.endo, path, h) - _endo_forward(env_b.endo, path, h)).sum()
    )


def endogenous_policy_tables(env: ExBmdpEnv, rng: np.random.Generator, H: Optional[int] = None) -> list:
    """Random stochastic policy that reads only the endogenous state."""
    H = env.H if H is None else H
    tables = []
    for t in range(H):
        probs = rng.dirichlet(np.ones(env.A), size=env.counts[t])
        tables.append(np.repeat(probs[:, None, :], env.exo.n_states, axis=1))
    return tables
