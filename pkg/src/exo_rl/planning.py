"""Planners that consume PPE output.

``vi_plan`` runs backward induction on the recovered deterministic model and
returns an open-loop action sequence. ``psdp`` builds an observation-dependent
non-stationary policy backwards in time, using the learned covers for
roll-ins and an importance-weighted contextual-bandit step at every level.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Path
from .env import ExBmdpEnv, collect
from .oracle import extend_cover
from .ppe import RecoveredModel

log = logging.getLogger(__name__)

PSDP_STREAM = 5000
EVAL_STREAM = 6000
REWARD_STREAM = 7000


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class OpenLoopPlan:
    actions: Path
    expected_value: float

    def to_dict(self) -> dict:
        return {"actions": list(self.actions), "expected_value": self.expected_value}


def _check_model(model: RecoveredModel) -> None:
    H = model.H
    if len(model.rewards) != H or len(model.transitions) != H - 1:
        raise PlanningError(
            f"model needs {H} reward tables and {H - 1} transition tables, "
            f"got {len(model.rewards)} and {len(model.transitions)}"
        )
    for t, R in enumerate(model.rewards):
        if R.shape[0] != model.n_states[t]:
            raise PlanningError(f"reward table at level {t + 1} has {R.shape[0]} rows, expected {model.n_states[t]}")
    for t, T in enumerate(model.transitions):
        if T.shape != model.rewards[t].shape:
            raise PlanningError(f"transition table at level {t + 1} has shape {T.shape}")
        if T.size and (T.min() < 0 or T.max() >= model.n_states[t + 1]):
            raise PlanningError(f"transition table at level {t + 1} points outside level {t + 2}")


def model_value(model: RecoveredModel, actions: Sequence[int]) -> float:
    """Return of an action sequence on the recovered model from abstract state 0."""
    s, total = 0, 0.0
    for t, a in enumerate(actions):
        total += float(model.rewards[t][s, a])
        if t + 1 < model.H:
            s = int(model.transitions[t][s, a])
    return total


def vi_plan(model: RecoveredModel) -> OpenLoopPlan:
    _check_model(model)
    H = model.H
    Q = [None] * H
    V_next = None
    for t in reversed(range(H)):
        Q[t] = model.rewards[t].astype(float).copy()
        if t + 1 < H:
            Q[t] += V_next[model.transitions[t]]
        V_next = Q[t].max(axis=1)
    s, actions = 0, []
    for t in range(H):
        a = int(np.argmax(Q[t][s]))  # first maximizer, i.e. the smaller action
        actions.append(a)
        if t + 1 < H:
            s = int(model.transitions[t][s, a])
    # forward evaluation sums in the same order as enumeration, so equal plans compare bit-for-bit
    return OpenLoopPlan(tuple(actions), model_value(model, actions))


def exhaustive_open_loop(model: RecoveredModel) -> OpenLoopPlan:
    """Brute-force best sequence over all A^H candidates; a test oracle for ``vi_plan``."""
    best = None
    for actions in itertools.product(range(model.A), repeat=model.H):
        v = model_value(model, actions)
        if best is None or v > best.expected_value:
            best = OpenLoopPlan(tuple(actions), v)
    return best


def estimate_rewards(
    env: ExBmdpEnv, covers: Sequence[Sequence[Path]], n_per_pair: int, seed: int, workers: int = 1
) -> list:
    """R_hat_h(s, a): mean step-h reward over ``n_per_pair`` rollouts of each survivor ∘ a."""
    if n_per_pair < 1:
        raise ValueError(f"n_per_pair must be positive, got {n_per_pair}")
    tables = []
    for h, cover in enumerate(covers, start=1):
        R = np.zeros((len(cover), env.A))
        for k, path in enumerate(extend_cover(cover, env.A)):
            stream = REWARD_STREAM + 100_000 * h + k
            _, batch = collect(env, [path], n_per_pair, seed, stream, length=h, workers=workers)
            R.flat[k] = batch.rewards[:, h - 1].mean()
        tables.append(np.clip(R, 0.0, 1.0))
    return tables


# --------------------------------------------------------------------------
# per-step policies


class StepPolicy:
    A: int

    def __call__(self, X) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class TabularStepPolicy(StepPolicy):
    """Argmax over per-observation action scores; unseen observations get action 0."""

    def __init__(self, keys: np.ndarray, scores: np.ndarray):
        self.keys = keys
        self.scores = scores
        self.A = scores.shape[1]
        self.choice = scores.argmax(axis=1) if keys.size else np.zeros(0, dtype=np.int64)

    def __call__(self, X):
        X = np.asarray(X, dtype=np.int64)
        out = np.zeros(X.shape[0], dtype=np.int64)
        if self.keys.size:
            pos = np.minimum(np.searchsorted(self.keys, X), self.keys.size - 1)
            seen = self.keys[pos] == X
            out[seen] = self.choice[pos[seen]]
        return out

    def to_dict(self):
        return {
            "kind": "tabular",
            "A": self.A,
            "actions": {str(int(k)): int(a) for k, a in zip(self.keys, self.choice)},
        }


class LinearStepPolicy(StepPolicy):
    """Argmax of per-action linear scores ``[x, 1] @ weights``."""

    def __init__(self, weights: np.ndarray):
        self.weights = weights
        self.A = weights.shape[1]

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = np.hstack([X, np.ones((X.shape[0], 1))])
        return np.argmax(Z @ self.weights, axis=1)

    def to_dict(self):
        return {"kind": "linear", "A": self.A, "weights": self.weights.tolist()}


def step_policy_from_dict(doc: dict) -> StepPolicy:
    if doc["kind"] == "tabular":
        keys = np.array(sorted(int(k) for k in doc["actions"]), dtype=np.int64)
        scores = np.zeros((keys.size, doc["A"]))
        for i, k in enumerate(keys):
            scores[i, doc["actions"][str(k)]] = 1.0
        return TabularStepPolicy(keys, scores)
    if doc["kind"] == "linear":
        return LinearStepPolicy(np.asarray(doc["weights"], dtype=float))
    raise ValueError(f"unknown step policy kind {doc['kind']!r}")


@dataclass
class NonStationaryPolicy:
    """One step policy per level; callable as ``policy(h, X)`` like the samplers expect."""

    steps: list

    @property
    def H(self) -> int:
        return len(self.steps)

    def __call__(self, h: int, X) -> np.ndarray:
        return self.steps[h - 1](X)

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps]}

    @staticmethod
    def from_dict(doc: dict) -> "NonStationaryPolicy":
        return NonStationaryPolicy([step_policy_from_dict(s) for s in doc["steps"]])


def cb_optimize(
    X,
    actions: np.ndarray,
    propensities: np.ndarray,
    rewards: np.ndarray,
    A: int,
    kind: str = "tabular",
    ridge: float = 1e-3,
) -> StepPolicy:
    """Offline contextual-bandit step by per-action regression on IPS targets.

    The target for action ``a`` is ``reward * 1{logged == a} / propensity``.
    Tabular regression is the per-observation mean of those targets, which is
    the importance-weighted value of each action at that observation.
    """
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=float)
    propensities = np.asarray(propensities, dtype=float)
    n = actions.shape[0]
    if n == 0:
        raise PlanningError("contextual-bandit step received no data")
    if np.any(propensities <= 0):
        raise PlanningError("propensities must be positive")
    Y = np.zeros((n, A))
    Y[np.arange(n), actions] = rewards / propensities
    if kind == "tabular":
        keys, inverse = np.unique(np.asarray(X, dtype=np.int64), return_inverse=True)
        sums = np.zeros((keys.size, A))
        np.add.at(sums, inverse, Y)
        counts = np.bincount(inverse, minlength=keys.size)[:, None]
        return TabularStepPolicy(keys, sums / counts)
    if kind == "linear":
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = np.hstack([X, np.ones((n, 1))])
        gram = Z.T @ Z + ridge * n * np.eye(Z.shape[1])
        return LinearStepPolicy(np.linalg.solve(gram, Z.T @ Y))
    raise ValueError(f"unknown policy class {kind!r}")


CbSolver = Callable[..., StepPolicy]


def psdp(
    env: ExBmdpEnv,
    covers: Sequence[Sequence[Path]],
    n_per_level: int,
    seed: int,
    policy_kind: Optional[str] = None,
    workers: int = 1,
    solver: CbSolver = cb_optimize,
) -> NonStationaryPolicy:
    """Backward policy search: level h rolls in with Unf(cover_h), acts uniformly, then follows the policy built so far."""
    H = env.H
    if len(covers) != H:
        raise PlanningError(f"need one cover per level (H={H}), got {len(covers)}")
    if n_per_level < 1:
        raise ValueError(f"n_per_level must be positive, got {n_per_level}")
    kind = policy_kind or ("tabular" if env.emission.discrete else "linear")
    steps: list = [None] * H
    partial = NonStationaryPolicy(steps)
    for h in range(H, 0, -1):
        _, batch = collect(
            env,
            covers[h - 1],
            n_per_level,
            seed,
            PSDP_STREAM + h,
            length=H,
            policy=partial if h < H else None,
            workers=workers,
            uniform_action=True,
        )
        reward_to_go = batch.rewards[:, h - 1 :].sum(axis=1)
        prop = np.full(n_per_level, 1.0 / env.A)
        steps[h - 1] = solver(batch.obs(h), batch.actions[:, h - 1], prop, reward_to_go, env.A, kind=kind)
        log.debug("psdp level %d: mean return-to-go %.4f", h, reward_to_go.mean())
    return NonStationaryPolicy(steps)


def evaluate_policy(env: ExBmdpEnv, policy: NonStationaryPolicy, n: int, seed: int, workers: int = 1) -> float:
    """Monte Carlo value of a closed-loop policy."""
    _, batch = collect(env, [()], n, seed, EVAL_STREAM, length=env.H, policy=policy, workers=workers)
    return float(batch.rewards.sum(axis=1).mean())


def evaluate_plan(env: ExBmdpEnv, actions: Path, n: int, seed: int, workers: int = 1) -> float:
    """Monte Carlo value of an open-loop action sequence."""
    _, batch = collect(env, [tuple(actions)], n, seed, EVAL_STREAM, length=env.H, workers=workers)
    return float(batch.rewards.sum(axis=1).mean())
