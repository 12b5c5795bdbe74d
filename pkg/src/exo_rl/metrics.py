"""Evaluation: pairwise decoder agreement, model isomorphism, run summaries."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Path
from .env import ExBmdpEnv, collect
from .oracle import bayes_classifier, observation_distribution, reachable_states, twin_transition
from .ppe import RecoveredModel

DECODER_STREAM = 8000
DEFAULT_PAIRS = 5000


@dataclass
class RunMetrics:
    seed: int
    H: int
    episodes_ppe: int = 0
    episodes_reward: int = 0
    episodes_planning: int = 0
    episodes_evaluation: int = 0
    cover_sizes: list = field(default_factory=list)
    type1: int = 0
    type2: int = 0
    decoder_accuracy: float = float("nan")
    value: float = float("nan")
    optimal_value: float = float("nan")

    @property
    def episodes_used(self) -> int:
        return self.episodes_ppe + self.episodes_reward + self.episodes_planning + self.episodes_evaluation

    @property
    def regret(self) -> float:
        return self.optimal_value - self.value

    def row(self) -> dict:
        out = asdict(self)
        out.pop("cover_sizes")
        out["episodes_used"] = self.episodes_used
        out["regret"] = self.regret
        for h, size in enumerate(self.cover_sizes, start=1):
            out[f"cover_{h}"] = size
        return out


def decoder_accuracy(
    decoder: Callable,
    env: ExBmdpEnv,
    cover: Sequence[Path],
    h: int,
    m: int = DEFAULT_PAIRS,
    seed: int = 0,
    workers: int = 1,
) -> float:
    """Fraction of i.i.d. observation pairs on which the decoder and the true state agree about sameness.

    Pairs are drawn from the roll-in that picks a cover path uniformly and
    observes level h. Ground truth comes from the sampler's latent channel.
    """
    if m < 1:
        raise ValueError(f"need at least one pair, got m={m}")
    _, batch = collect(env, cover, 2 * m, seed, DECODER_STREAM + h, length=h, workers=workers)
    X = batch.obs(h)
    guess = np.asarray(decoder(X))
    truth = batch.endo[:, h - 1]
    same_guess = guess[0::2] == guess[1::2]
    same_truth = truth[0::2] == truth[1::2]
    return float(np.mean(same_guess == same_truth))


@dataclass
class IsomorphismResult:
    ok: bool
    mapping: list  # per level: dict abstract -> true state
    witness: Optional[tuple] = None  # (h, abstract state, action or None)
    reason: str = ""

    def __bool__(self):
        return self.ok


def model_isomorphic(
    model: RecoveredModel, env: ExBmdpEnv, reward_atol: Optional[float] = None
) -> IsomorphismResult:
    """Search for per-level bijections onto the twin's reachable states that commute with transitions.

    Since both models are deterministic and start from a single state, the
    only candidate bijection is the one obtained by walking both from the
    start, so the search is a single forward sweep. Rewards are compared when
    ``reward_atol`` is given and the environment's reward is endogenous.
    """
    if model.H != env.H:
        return IsomorphismResult(False, [], (1, None, None), f"horizons differ: {model.H} vs {env.H}")
    start = int(env.endo.mu.argmax())
    if model.n_states[0] != 1:
        return IsomorphismResult(False, [], (1, None, None), "recovered model has several start states")
    mapping = [{0: start}]
    for t in range(env.H - 1):
        succ = twin_transition(env, t)
        nxt: dict = {}
        used: dict = {}
        for s_hat in range(model.n_states[t]):
            if s_hat not in mapping[t]:
                return IsomorphismResult(False, mapping, (t + 1, s_hat, None), "abstract state is unreachable")
            for a in range(env.A):
                j, s_true = int(model.transitions[t][s_hat, a]), int(succ[mapping[t][s_hat], a])
                if j in nxt and nxt[j] != s_true:
                    return IsomorphismResult(False, mapping, (t + 1, s_hat, a), "edge lands in the wrong state")
                if j not in nxt and used.get(s_true, j) != j:
                    return IsomorphismResult(False, mapping, (t + 1, s_hat, a), "two abstract states share a true state")
                nxt[j] = s_true
                used[s_true] = j
        mapping.append(nxt)
        if sorted(nxt.values()) != reachable_states(env, t + 2) or len(nxt) != model.n_states[t + 1]:
            missing = sorted(set(range(model.n_states[t + 1])) - set(nxt))
            return IsomorphismResult(
                False, mapping, (t + 2, missing[0] if missing else None, None), "level sizes differ"
            )
    if reward_atol is not None and env.endogenous_reward:
        for t in range(env.H):
            for s_hat, s_true in mapping[t].items():
                diff = np.abs(model.rewards[t][s_hat] - env.endo.R[t][s_true])
                if np.any(diff > reward_atol):
                    a = int(np.argmax(diff > reward_atol))
                    return IsomorphismResult(False, mapping, (t + 1, s_hat, a), "reward mismatch")
    return IsomorphismResult(True, mapping)


def median(values: Sequence[float]) -> float:
    return float(np.median(np.asarray(values, dtype=float)))


def classifier_tv_error(classifier, env: ExBmdpEnv, paths: Sequence[Path], h: int) -> float:
    """E_x[TV(f_hat(.|x), f*(.|x))] with x from the uniform-over-paths roll-in, computed exactly."""
    env.require_tabular()
    p_x = np.mean([observation_distribution(env, p, h) for p in paths], axis=0)
    xs = np.flatnonzero(p_x > 0)
    truth = bayes_classifier(env, paths, h).probs[env.decode_endo(h, xs)]
    tv = 0.5 * np.abs(classifier.predict_proba(xs) - truth).sum(axis=1)
    return float(p_x[xs] @ tv)
