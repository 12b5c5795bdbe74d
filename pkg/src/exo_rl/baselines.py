"""Exact one-step inverse dynamics as a representation-learning baseline.

Observations at level h+1 are grouped whenever their exact action posteriors
agree for every predecessor (or one of the pair never occurs). The grouping
is then explored with reach-maximizing policies. On environments whose
distinct states never share a parent, this merges states that an open-loop
cover would keep apart, so some states are never reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import ExBmdpEnv
from .oracle import endo_occupancy, observation_distribution, observation_kernel, reachable_states

POSTERIOR_ATOL = 1e-12


class BaselineRefused(ValueError):
    pass


def _pair_tables(kernel: np.ndarray, mu: np.ndarray) -> tuple:
    """Joint P(x, a, x') under roll-in ``mu`` and a uniform action, with its support P(x, x')."""
    A = kernel.shape[1]
    joint = mu[:, None, None] * kernel / A
    return joint, joint.sum(axis=1)


def _consistent(joint: np.ndarray, support: np.ndarray, x1: int, x2: int) -> bool:
    s1, s2 = support[:, x1], support[:, x2]
    both = (s1 > 0) & (s2 > 0)
    if not both.any():
        return True
    post1 = joint[both, :, x1] / s1[both, None]
    post2 = joint[both, :, x2] / s2[both, None]
    return bool(np.allclose(post1, post2, rtol=0.0, atol=POSTERIOR_ATOL))


def id_consistency_check(env: ExBmdpEnv, mu: np.ndarray, h: int, x1p: int, x2p: int) -> bool:
    """Whether two level-(h+1) observations are consistent under the inverse dynamics.

    ``mu`` is the roll-in distribution over level-h observations. For every
    predecessor x the action posteriors P(a | x, x') must match, unless one
    of the two pairs (x, x') has zero probability.
    """
    env.require_tabular()
    joint, support = _pair_tables(observation_kernel(env, h), np.asarray(mu, dtype=float))
    return _consistent(joint, support, x1p, x2p)


@dataclass
class IdAbstraction:
    h: int
    classes: list  # lists of observation ids, each sorted, ordered by minimum id

    def label_of(self) -> dict:
        return {x: k for k, c in enumerate(self.classes) for x in c}


@dataclass
class ReachPolicy:
    """Deterministic observation-to-action tables for steps 1..h-1."""

    tables: list = field(default_factory=list)

    def act(self, t: int, x: int) -> int:
        return int(self.tables[t][x])


def _roll(env: ExBmdpEnv, policy: ReachPolicy, h: int, start: np.ndarray, kernels: list) -> np.ndarray:
    p = start
    for t in range(h - 1):
        nxt = np.zeros(kernels[t].shape[2])
        for x in np.flatnonzero(p > 0):
            nxt += p[x] * kernels[t][x, policy.act(t, x)]
        p = nxt
    return p


def _reach_policy(kernels: list, h: int, target: np.ndarray) -> ReachPolicy:
    """Maximize P(x_h in target) by backward induction; ties go to the smaller action."""
    V = target.astype(float)
    tables = [None] * (h - 1)
    for t in reversed(range(h - 1)):
        Q = kernels[t] @ V  # (n_obs_t, A)
        tables[t] = Q.argmax(axis=1)
        V = Q.max(axis=1)
    return ReachPolicy(tables)


@dataclass
class IdRun:
    abstractions: list  # IdAbstraction per level
    policies: list  # per level, one ReachPolicy per class
    coverage: list  # per level: {"h", "reached", "reachable"}

    def report(self) -> dict:
        return {
            "levels": [
                {
                    **cov,
                    "classes": [list(map(int, c)) for c in abst.classes],
                }
                for cov, abst in zip(self.coverage, self.abstractions)
            ]
        }


def _merge_consistent(candidates: list, joint: np.ndarray, support: np.ndarray) -> list:
    """Greedy ascending merge; a class absorbs an observation only if every member is consistent with it."""
    classes: list = []
    for x in candidates:
        for c in classes:
            if all(_consistent(joint, support, y, x) for y in c):
                c.append(x)
                break
        else:
            classes.append([x])
    return classes


def run_exact_id(env: ExBmdpEnv) -> IdRun:
    env.require_tabular()
    if np.count_nonzero(env.endo.mu) != 1:
        raise BaselineRefused("exact inverse dynamics needs a deterministic start state")
    if not env.endo.is_deterministic():
        raise BaselineRefused("exact inverse dynamics is only defined for deterministic endogenous dynamics")
    kernels = [observation_kernel(env, h) for h in range(1, env.H)]
    start = observation_distribution(env, (), 1)
    level1 = [int(x) for x in np.flatnonzero(start > 0)]
    abstractions = [IdAbstraction(1, [level1])]
    policies = [[ReachPolicy([])]]
    coverage = [_coverage(env, 1, [start])]
    for h in range(1, env.H):
        mu = np.mean([_roll(env, pi, h, start, kernels) for pi in policies[-1]], axis=0)
        joint, support = _pair_tables(kernels[h - 1], mu)
        candidates = [int(x) for x in np.flatnonzero(support.sum(axis=0) > 0)]
        classes = _merge_consistent(candidates, joint, support)
        abstractions.append(IdAbstraction(h + 1, classes))
        level_policies = []
        for c in classes:
            target = np.zeros(kernels[h - 1].shape[2], dtype=bool)
            target[c] = True
            level_policies.append(_reach_policy(kernels, h + 1, target))
        policies.append(level_policies)
        coverage.append(_coverage(env, h + 1, [_roll(env, pi, h + 1, start, kernels) for pi in level_policies]))
    return IdRun(abstractions, policies, coverage)


def _coverage(env: ExBmdpEnv, h: int, distributions: list) -> dict:
    reached = set()
    for p in distributions:
        xs = np.flatnonzero(p > 0)
        reached.update(int(s) for s in env.decode_endo(h, xs))
    return {"h": h, "reached": sorted(reached), "reachable": reachable_states(env, h)}


def ppe_coverage(env: ExBmdpEnv, covers: list) -> list:
    """Endogenous states reached with positive probability by some cover path, per level."""
    out = []
    for h, cover in enumerate(covers, start=1):
        reached = set()
        for path in cover:
            reached.update(int(s) for s in np.flatnonzero(endo_occupancy(env, path, h).values > 0))
        out.append({"h": h, "reached": sorted(reached), "reachable": reachable_states(env, h)})
    return out

