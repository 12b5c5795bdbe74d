"""Path classifiers: conditional models f(i | x) over path indices.

Three fitters share one interface: count-based MLE for discrete observations,
linear softmax trained by minibatch Adam for dense observations, and a
ground-truth classifier built from the exact Bayes posterior.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Path
from .env import ExBmdpEnv, UnsupportedOperation
from .oracle import bayes_classifier

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    """Observations ``X`` ((n,) ids or (n, d) features) with labels in [0, K)."""

    X: np.ndarray
    y: np.ndarray
    K: int

    def __post_init__(self):
        self.X = np.asarray(self.X)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.X.shape[0]} observations but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.K):
            raise ValueError(f"labels must lie in [0, {self.K})")

    def __len__(self):
        return self.y.shape[0]

    @property
    def discrete(self) -> bool:
        return self.X.ndim == 1 and np.issubdtype(self.X.dtype, np.integer)


class PathClassifier:
    K: int
    kind: str

    def predict_proba(self, X) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _require_discrete(X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 1 or not np.issubdtype(X.dtype, np.integer):
        raise TypeError("tabular classifier needs discrete (integer id) observations")
    return X.astype(np.int64)


class TabularClassifier(PathClassifier):
    kind = "tabular"

    def __init__(self, K: int, keys: np.ndarray, counts: np.ndarray, smoothing: float):
        self.K = K
        self.keys = keys
        self.counts = counts
        self.smoothing = smoothing
        totals = counts.sum(axis=1, keepdims=True)
        self.table = (counts + smoothing) / (totals + K * smoothing)

    def predict_proba(self, X):
        X = _require_discrete(np.atleast_1d(X))
        out = np.full((X.shape[0], self.K), 1.0 / self.K)
        if self.keys.size:
            pos = np.minimum(np.searchsorted(self.keys, X), self.keys.size - 1)
            seen = self.keys[pos] == X
            out[seen] = self.table[pos[seen]]
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "K": self.K,
            "smoothing": self.smoothing,
            "counts": {str(int(k)): c.tolist() for k, c in zip(self.keys, self.counts)},
        }


def fit_tabular(data: LabeledDataset, smoothing: float = 0.5) -> TabularClassifier:
    """Empirical conditional frequencies with additive smoothing; unseen ids get 1/K."""
    X = _require_discrete(data.X)
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    keys, inverse = np.unique(X, return_inverse=True)
    counts = np.zeros((keys.size, data.K))
    np.add.at(counts, (inverse, data.y), 1.0)
    return TabularClassifier(data.K, keys, counts, smoothing)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_nll_and_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple:
    """Mean negative log-likelihood and its gradients with respect to W (K, d) and b (K,)."""
    logits = X @ W.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    n = X.shape[0]
    nll = float(np.mean(log_norm - z[np.arange(n), y]))
    P = np.exp(z - log_norm[:, None])
    P[np.arange(n), y] -= 1.0
    P /= n
    return nll, P.T @ X, P.sum(axis=0)


class SoftmaxClassifier(PathClassifier):
    kind = "softmax"

    def __init__(self, W: np.ndarray, b: np.ndarray, history: Optional[list] = None):
        self.W = W
        self.b = b
        self.K = W.shape[0]
        self.history = history or []

    def predict_proba(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.W.shape[1]:
            raise TypeError(f"expected {self.W.shape[1]}-dimensional observations, got {X.shape[1]}")
        return _softmax(X @ self.W.T + self.b)

    def to_dict(self):
        return {"kind": self.kind, "K": self.K, "W": self.W.tolist(), "b": self.b.tolist()}


@dataclass(frozen=True)
class SoftmaxHyper:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 256
    patience: int = 20
    validation_fraction: float = 0.2
    seed: int = 0
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def fit_softmax(data: LabeledDataset, hyper: SoftmaxHyper = SoftmaxHyper()) -> SoftmaxClassifier:
    """Linear softmax regression by minibatch Adam with validation early stopping.

    Parameters start at zero; the returned model is the one with the best
    validation NLL seen (the last one if there is no validation split).
    """
    X = np.asarray(data.X, dtype=float)
    if X.ndim != 2:
        raise TypeError("softmax classifier needs dense (n, d) observations")
    n, d = X.shape
    rng = np.random.default_rng(hyper.seed)
    order = rng.permutation(n)
    n_val = int(round(hyper.validation_fraction * n))
    val, train = order[:n_val], order[n_val:]
    if train.size == 0:
        raise TrainingError(f"no training examples left after holding out {n_val} of {n}")
    X_tr, y_tr = X[train], data.y[train]
    X_val, y_val = X[val], data.y[val]

    K = data.K
    params = [np.zeros((K, d)), np.zeros(K)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    best = (np.inf, [p.copy() for p in params])
    stale, step, history = 0, 0, []
    for epoch in range(hyper.epochs):
        perm = rng.permutation(train.size)
        for start in range(0, train.size, hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            loss, gW, gb = softmax_nll_and_grad(params[0], params[1], X_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            grads = [gW, gb]
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > hyper.clip_norm:
                grads = [g * (hyper.clip_norm / norm) for g in grads]
            step += 1
            for k, g in enumerate(grads):
                m[k] = hyper.beta1 * m[k] + (1 - hyper.beta1) * g
                v[k] = hyper.beta2 * v[k] + (1 - hyper.beta2) * g * g
                m_hat = m[k] / (1 - hyper.beta1**step)
                v_hat = v[k] / (1 - hyper.beta2**step)
                params[k] -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)
        if n_val:
            val_loss = softmax_nll_and_grad(params[0], params[1], X_val, y_val)[0]
        else:
            val_loss = softmax_nll_and_grad(params[0], params[1], X_tr, y_tr)[0]
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append(val_loss)
        if val_loss < best[0] - 1e-12:
            best = (val_loss, [p.copy() for p in params])
            stale = 0
        else:
            stale += 1
            if n_val and stale >= hyper.patience:
                log.debug("early stop at epoch %d, best val NLL %.5f", epoch, best[0])
                break
    W, b = best[1] if n_val else params
    return SoftmaxClassifier(W, b, history)


class CheatingClassifier(PathClassifier):
    """f*(. | phi*(x)) from the exact Bayes posterior; needs a ground-truth decoder."""

    kind = "cheating-ref"

    def __init__(self, env: ExBmdpEnv, paths: Sequence[Path], h: int):
        self.env = env
        self.paths = [tuple(p) for p in paths]
        self.h = h
        self.bayes = bayes_classifier(env, self.paths, h)
        self.K = len(self.paths)

    def predict_proba(self, X):
        s = self.env.decode_endo(self.h, X)
        out = np.full((s.shape[0], self.K), 1.0 / self.K)
        ok = s >= 0
        out[ok] = self.bayes.probs[s[ok]]
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "K": self.K,
            "h": self.h,
            "paths": [list(p) for p in self.paths],
            "table": self.bayes.probs.tolist(),
            "reachable": self.bayes.reachable.tolist(),
        }


def cheating_classifier(env: ExBmdpEnv, paths: Sequence[Path], h: int) -> CheatingClassifier:
    if not paths:
        raise ValueError("cheating_classifier needs at least one path")
    if not env.emission.has_decoder:
        raise UnsupportedOperation(f"{env.emission.kind} emission exposes no ground-truth decoder")
    return CheatingClassifier(env, paths, h)


def classifier_from_dict(doc: dict, env: Optional[ExBmdpEnv] = None) -> PathClassifier:
    kind = doc["kind"]
    if kind == "tabular":
        keys = np.array(sorted(int(k) for k in doc["counts"]), dtype=np.int64)
        counts = np.array([doc["counts"][str(k)] for k in keys], dtype=float).reshape(len(keys), doc["K"])
        return TabularClassifier(doc["K"], keys, counts, doc["smoothing"])
    if kind == "softmax":
        return SoftmaxClassifier(np.asarray(doc["W"], dtype=float), np.asarray(doc["b"], dtype=float))
    if kind == "cheating-ref":
        if env is None:
            raise ValueError("rebuilding a cheating classifier needs its environment")
        return CheatingClassifier(env, [tuple(p) for p in doc["paths"]], doc["h"])
    raise ValueError(f"unknown classifier kind {kind!r}")


# factory signature: (data, env, paths, h, seed) -> PathClassifier
ClassifierFactory = Callable[[LabeledDataset, ExBmdpEnv, Sequence[Path], int, int], PathClassifier]


@dataclass(frozen=True)
class TabularFactory:
    smoothing: float = 0.5

    def __call__(self, data, env, paths, h, seed):
        return fit_tabular(data, self.smoothing)

    def n_params(self, K, obs_dim):
        return K * obs_dim


@dataclass(frozen=True)
class SoftmaxFactory:
    hyper: SoftmaxHyper = field(default_factory=SoftmaxHyper)

    def __call__(self, data, env, paths, h, seed):
        hyper = SoftmaxHyper(**{**asdict(self.hyper), "seed": seed})
        return fit_softmax(data, hyper)

    def n_params(self, K, obs_dim):
        return K * (obs_dim + 1)


@dataclass(frozen=True)
class CheatingFactory:
    def __call__(self, data, env, paths, h, seed):
        return cheating_classifier(env, paths, h)

    def n_params(self, K, obs_dim):
        return K


def make_factory(kind: str, **params) -> ClassifierFactory:
    if kind == "tabular":
        return TabularFactory(**params)
    if kind == "softmax":
        return SoftmaxFactory(SoftmaxHyper(**params))
    if kind == "cheating":
        return CheatingFactory()
    raise ValueError(f"unknown classifier kind {kind!r}")
