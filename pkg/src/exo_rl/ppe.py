"""Predictive Path Elimination.

Each level extends the previous cover by every action, learns to predict
which extended path produced the observation at that level, and eliminates
paths whose prediction gap to a lower-indexed survivor falls below
``(5/8) / |extended|``. The merge map recorded along the way yields the
deterministic latent transition table of the recovered model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .classifier import ClassifierFactory, LabeledDataset, PathClassifier
from .core import Path, PpeConfig, default_sample_count, derive_episode_seed, log_class_size_proxy
from .env import ExBmdpEnv, collect
from .oracle import extend_cover, twin_target

log = logging.getLogger(__name__)

FRESH_GAP_STREAM = 1000
REWARD_SWEEP_STREAM = 2000
CLASSIFIER_SEED_STREAM = 3000


class PpeError(RuntimeError):
    pass


class UnionFind:
    """Disjoint sets over 0..n-1 whose roots are always the minimum member."""

    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        keep, absorb = min(ra, rb), max(ra, rb)
        self.parent[absorb] = keep
        return keep

    def classes(self) -> dict:
        out: dict = {}
        for x in range(len(self.parent)):
            out.setdefault(self.find(x), []).append(x)
        return out


def estimate_gaps(P: np.ndarray) -> np.ndarray:
    """Delta_hat(i, j) = mean_n |P[n, i] - P[n, j]| for all pairs."""
    K = P.shape[1]
    gap = np.zeros((K, K))
    for i in range(K):
        gap[i] = np.abs(P[:, i : i + 1] - P).mean(axis=0)
    return gap


def eliminate(gap: np.ndarray, threshold: float) -> tuple:
    """Ascending (i, j) sweep; a dead j is never revisited. Returns (survivors, reps)."""
    K = gap.shape[0]
    alive = np.ones(K, dtype=bool)
    uf = UnionFind(K)
    for i in range(K):
        if not alive[i]:
            continue
        for j in range(i + 1, K):
            if alive[j] and gap[i, j] <= threshold:
                alive[j] = False
                uf.union(i, j)
    reps = [uf.find(k) for k in range(K)]
    return [int(k) for k in np.flatnonzero(alive)], reps


@dataclass
class PolicyCoverLevel:
    h: int
    extended: list  # Upsilon_h, index = cover position * A + action
    survivors: list  # indices into ``extended``, ascending
    reps: list  # merge-class representative of each extended index
    classifier: Optional[PathClassifier] = None
    gap: Optional[np.ndarray] = None
    n_samples: int = 0
    threshold: float = 0.0
    margin: float = 0.0
    reward_sum: Optional[np.ndarray] = None  # r_{h-1} totals per extended index
    reward_count: Optional[np.ndarray] = None
    sample_count_rule: str = ""

    @property
    def survivor_paths(self) -> list:
        return [self.extended[i] for i in self.survivors]

    def state_of(self, index: int) -> int:
        """Abstract state (position among survivors) of an extended index."""
        return self.survivors.index(self.reps[index])

    def classes(self) -> dict:
        out: dict = {}
        for k, r in enumerate(self.reps):
            out.setdefault(r, []).append(k)
        return out

    def to_dict(self) -> dict:
        doc = {
            "h": self.h,
            "extended": [list(p) for p in self.extended],
            "survivors": self.survivors,
            "merge_map": [sorted(c) for _, c in sorted(self.classes().items())],
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "decoder_margin": self.margin,
        }
        if self.sample_count_rule:
            doc["sample_count_rule"] = self.sample_count_rule
        if self.gap is not None:
            doc["gap_matrix"] = self.gap.tolist()
        if self.classifier is not None:
            doc["classifier"] = self.classifier.to_dict()
        return doc


def root_level() -> PolicyCoverLevel:
    return PolicyCoverLevel(h=1, extended=[()], survivors=[0], reps=[0])


def level_sample_count(cfg: PpeConfig, clf_factory, n_cover: int, A: int, obs_dim: int) -> tuple:
    """(N, rule label) for a level whose previous cover has ``n_cover`` paths."""
    if cfg.n_override is not None:
        return cfg.n_override, "override"
    K = n_cover * A
    if cfg.log_f_class_size is not None:
        log_f = cfg.log_f_class_size
    else:
        n_params = clf_factory.n_params(K, obs_dim) if hasattr(clf_factory, "n_params") else K
        log_f = log_class_size_proxy(n_params)
    if cfg.sample_count_rule == "cover":
        return default_sample_count(K, log_f, n_cover, A, cfg.horizon, cfg.delta), "cover"
    # pairwise variant: 16 |U|^2 log(|F| |U|^2 H / delta)
    return default_sample_count(K, log_f, K * K, 1, cfg.horizon, cfg.delta), "pairwise"


def ppe_level(
    env: ExBmdpEnv,
    prev: PolicyCoverLevel,
    h: int,
    cfg: PpeConfig,
    clf_factory: ClassifierFactory,
) -> PolicyCoverLevel:
    if prev.h != h - 1:
        raise PpeError(f"level {h} needs the level {h - 1} cover, got level {prev.h}")
    extended = extend_cover(prev.survivor_paths, env.A)
    K = len(extended)
    obs_dim = 1 if env.emission.discrete else env.emission.dim
    N, rule = level_sample_count(cfg, clf_factory, len(prev.survivors), env.A, obs_dim)
    if N < 1:
        raise PpeError(f"sample count must be positive, got {N}")
    idx, batch = collect(env, extended, N, cfg.seed, stream=h, length=h, workers=cfg.workers)
    data = LabeledDataset(batch.obs(h), idx, K)
    clf_seed = derive_episode_seed(cfg.seed, CLASSIFIER_SEED_STREAM + h, 0) % 2**32
    clf = clf_factory(data, env, extended, h, clf_seed)

    X_gap = data.X
    if cfg.fresh_gap_samples:
        _, fresh = collect(env, extended, N, cfg.seed, FRESH_GAP_STREAM + h, length=h, workers=cfg.workers)
        X_gap = fresh.obs(h)
    gap = estimate_gaps(clf.predict_proba(X_gap))
    threshold = cfg.threshold(K)
    survivors, reps = eliminate(gap, threshold)

    r_prev = batch.rewards[:, h - 2]
    reward_sum = np.bincount(idx, weights=r_prev, minlength=K)
    reward_count = np.bincount(idx, minlength=K).astype(float)
    log.info("level %d: %d extended paths, %d survivors (N=%d)", h, K, len(survivors), N)
    return PolicyCoverLevel(
        h=h,
        extended=extended,
        survivors=survivors,
        reps=reps,
        classifier=clf,
        gap=gap,
        n_samples=N * (2 if cfg.fresh_gap_samples else 1),
        threshold=threshold,
        margin=cfg.decoder_margin(K),
        reward_sum=reward_sum,
        reward_count=reward_count,
        sample_count_rule=rule,
    )


class Decoder:
    """phi_hat_h: smallest index within ``margin`` of the top score, mapped to its abstract state."""

    def __init__(self, level: PolicyCoverLevel):
        if level.classifier is None:
            raise PpeError(f"level {level.h} has no fitted classifier")
        self.level = level
        self._state = np.array([level.state_of(k) for k in range(len(level.extended))])

    def raw_index(self, X) -> np.ndarray:
        P = self.level.classifier.predict_proba(X)
        within = P >= P.max(axis=1, keepdims=True) - self.level.margin
        return np.argmax(within, axis=1)

    def __call__(self, X) -> np.ndarray:
        return self._state[self.raw_index(X)]


def recover_decoder(level: PolicyCoverLevel) -> Decoder:
    return Decoder(level)


@dataclass
class RecoveredModel:
    """Abstract deterministic model: one state per survivor, start state 0 at level 1."""

    covers: list  # per level, survivor paths
    transitions: list  # per level h < H: (|S_h|, A) int array into level h+1
    rewards: list  # per level: (|S_h|, A) estimates in [0, 1]
    reward_counts: list = field(default_factory=list)

    @property
    def H(self) -> int:
        return len(self.covers)

    @property
    def n_states(self) -> list:
        return [len(c) for c in self.covers]

    @property
    def A(self) -> int:
        return self.rewards[0].shape[1]

    def to_dict(self) -> dict:
        return {
            "covers": [[list(p) for p in c] for c in self.covers],
            "transitions": [T.tolist() for T in self.transitions],
            "rewards": [R.tolist() for R in self.rewards],
        }

    @staticmethod
    def from_dict(doc: dict) -> "RecoveredModel":
        return RecoveredModel(
            covers=[[tuple(p) for p in c] for c in doc["covers"]],
            transitions=[np.asarray(T, dtype=np.int64) for T in doc["transitions"]],
            rewards=[np.asarray(R, dtype=float) for R in doc["rewards"]],
        )


def _mean_rewards(total: np.ndarray, count: np.ndarray, shape: tuple) -> np.ndarray:
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return np.clip(out, 0.0, 1.0).reshape(shape)


def build_model(
    levels: Sequence[PolicyCoverLevel], A: int, final_sum: np.ndarray, final_count: np.ndarray
) -> RecoveredModel:
    """Read T_hat from the merge maps and R_hat from per-path reward averages.

    ``final_sum``/``final_count`` are step-H reward totals per index of the
    last cover extended by every action. Pairs never sampled get reward 0.
    """
    covers = [lvl.survivor_paths for lvl in levels]
    transitions, rewards, counts = [], [], []
    for t in range(len(levels) - 1):
        nxt = levels[t + 1]
        n_here = len(levels[t].survivors)
        T = np.array([[nxt.state_of(p * A + a) for a in range(A)] for p in range(n_here)], dtype=np.int64)
        transitions.append(T)
        rewards.append(_mean_rewards(nxt.reward_sum, nxt.reward_count, (n_here, A)))
        counts.append(nxt.reward_count.reshape(n_here, A))
    n_last = len(levels[-1].survivors)
    rewards.append(_mean_rewards(final_sum, final_count, (n_last, A)))
    counts.append(final_count.reshape(n_last, A))
    return RecoveredModel(covers, transitions, rewards, counts)


@dataclass
class PpeResult:
    levels: list
    model: RecoveredModel
    episodes: int
    sweep_episodes: int

    def covers(self) -> list:
        return [lvl.survivor_paths for lvl in self.levels]


def final_reward_sweep(env: ExBmdpEnv, cover: Sequence[Path], n: int, cfg: PpeConfig) -> tuple:
    """Roll every cover path extended by a uniform action to collect step-H rewards."""
    ext = extend_cover(cover, env.A)
    idx, batch = collect(env, ext, n, cfg.seed, REWARD_SWEEP_STREAM, length=env.H, workers=cfg.workers)
    r = batch.rewards[:, env.H - 1]
    return np.bincount(idx, weights=r, minlength=len(ext)), np.bincount(idx, minlength=len(ext)).astype(float)


def run_ppe(
    env: ExBmdpEnv,
    cfg: PpeConfig,
    clf_factory: ClassifierFactory,
    sweep_samples: Optional[int] = None,
) -> PpeResult:
    """Levels 2..H, then one reward sweep over Psi_H ∘ A (defaults to the last level's N)."""
    if cfg.horizon < 2:
        raise PpeError(f"PPE needs horizon >= 2, got {cfg.horizon}")
    if cfg.horizon != env.H:
        raise PpeError(f"config horizon {cfg.horizon} differs from environment horizon {env.H}")
    if cfg.eta > 0 and cfg.eta > 1.0 / (4 * env.max_states * env.H):
        log.warning("eta=%.4g is outside the theory regime 1/(4SH)", cfg.eta)
    levels = [root_level()]
    for h in range(2, env.H + 1):
        try:
            levels.append(ppe_level(env, levels[-1], h, cfg, clf_factory))
        except Exception as err:
            raise PpeError(f"PPE failed at level {h}: {err}") from err
    n_sweep = sweep_samples if sweep_samples is not None else levels[-1].n_samples
    final_sum, final_count = final_reward_sweep(env, levels[-1].survivor_paths, n_sweep, cfg)
    model = build_model(levels, env.A, final_sum, final_count)
    episodes = sum(lvl.n_samples for lvl in levels)
    return PpeResult(levels, model, episodes, n_sweep)


def elimination_error_counts(levels: Sequence[PolicyCoverLevel], env: ExBmdpEnv) -> tuple:
    """(type1, type2) summed over levels and pairs of extended paths.

    Type 1: merged although the twin targets differ. Type 2: kept apart
    although the twin targets coincide.
    """
    type1 = type2 = 0
    for lvl in levels:
        if lvl.h < 2:
            continue
        targets = [twin_target(env, p, lvl.h) for p in lvl.extended]
        K = len(targets)
        for i in range(K):
            for j in range(i + 1, K):
                merged = lvl.reps[i] == lvl.reps[j]
                same = targets[i] == targets[j]
                if merged and not same:
                    type1 += 1
                elif same and not merged:
                    type2 += 1
    return type1, type2


def theory_sample_count(n_states: int, A: int, H: int, delta: float, log_f: float) -> int:
    """Per-level budget shape O(S^2 A^2 log(|F| S A H / delta)) and leading constant 16."""
    return math.ceil(16 * (n_states * A) ** 2 * (log_f + math.log(n_states * A * H / delta)))
