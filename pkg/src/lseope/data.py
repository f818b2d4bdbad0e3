"""Logged bandit feedback: records, datasets, policies and weights."""
import csv
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .rng import as_generator

DEFAULT_PROPENSITY_FLOOR = 1e-3


class DataError(ValueError):
    """Raised for malformed or invalid logged data."""


# --------------------------------------------------------------------------
# records and datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LBFRecord:
    """One logged interaction ``(x, a, p, r)``."""

    context: np.ndarray
    action: int
    propensity: float
    reward: float


class LBFDataset:
    """Column-stored logged bandit feedback.

    Parameters
    ----------
    contexts : array of shape (n, d)
    actions : int array of shape (n,)
    propensities : array of shape (n,), values in (0, 1]
    rewards : array of shape (n,), non-negative
    action_count : int, optional
        Defaults to ``max(actions) + 1``.
    """

    def __init__(self, contexts, actions, propensities, rewards, action_count=None):
        X = np.array(contexts, dtype=np.float64, ndmin=2)
        a = np.asarray(actions)
        p = np.array(propensities, dtype=np.float64)
        r = np.array(rewards, dtype=np.float64)
        n = X.shape[0]
        if n == 0 or X.size == 0:
            raise DataError("empty dataset")
        if a.shape != (n,) or p.shape != (n,) or r.shape != (n,):
            raise DataError("contexts, actions, propensities and rewards must have matching lengths")
        if a.size and not np.all(np.equal(np.mod(a, 1), 0)):
            raise DataError("actions must be integers")
        a = a.astype(np.int64)
        if np.any(a < 0):
            raise DataError("actions must be non-negative")
        if action_count is None:
            action_count = int(a.max()) + 1
        if action_count < 1 or np.any(a >= action_count):
            raise DataError(f"actions must lie in [0, {action_count})")
        if not np.all(np.isfinite(X)):
            raise DataError("contexts must be finite")
        if np.any(~(p > 0.0)) or np.any(p > 1.0):
            raise DataError("propensities must lie in (0, 1]")
        if np.any(~np.isfinite(r)) or np.any(r < 0.0):
            raise DataError("rewards must be finite and non-negative")
        for arr in (X, a, p, r):
            arr.setflags(write=False)
        self.contexts = X
        self.actions = a
        self.propensities = p
        self.rewards = r
        self.action_count = int(action_count)

    @property
    def n(self) -> int:
        return self.contexts.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.contexts.shape[1]

    def __len__(self):
        return self.n

    def __iter__(self) -> Iterator[LBFRecord]:
        for i in range(self.n):
            yield self[i]

    def __getitem__(self, i) -> LBFRecord:
        return LBFRecord(self.contexts[i], int(self.actions[i]),
                         float(self.propensities[i]), float(self.rewards[i]))

    @property
    def records(self):
        return list(self)

    @classmethod
    def from_records(cls, records: Sequence[LBFRecord], action_count=None) -> "LBFDataset":
        if len(records) == 0:
            raise DataError("empty dataset")
        dims = {np.asarray(rec.context).shape for rec in records}
        if len(dims) != 1:
            raise DataError("records must share feature_dim")
        return cls(
            np.stack([np.asarray(rec.context, dtype=np.float64) for rec in records]),
            [rec.action for rec in records],
            [rec.propensity for rec in records],
            [rec.reward for rec in records],
            action_count,
        )

    def replace(self, **fields) -> "LBFDataset":
        """Copy with some columns swapped out."""
        kw = dict(contexts=self.contexts, actions=self.actions, propensities=self.propensities,
                  rewards=self.rewards, action_count=self.action_count)
        kw.update(fields)
        return LBFDataset(**kw)

    def subset(self, idx) -> "LBFDataset":
        return LBFDataset(self.contexts[idx], self.actions[idx], self.propensities[idx],
                          self.rewards[idx], self.action_count)

    def equals(self, other: "LBFDataset", atol=1e-12) -> bool:
        return (
            self.action_count == other.action_count
            and self.contexts.shape == other.contexts.shape
            and np.array_equal(self.actions, other.actions)
            and np.allclose(self.contexts, other.contexts, rtol=0, atol=atol)
            and np.allclose(self.propensities, other.propensities, rtol=0, atol=atol)
            and np.allclose(self.rewards, other.rewards, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"LBFDataset(n={self.n}, feature_dim={self.feature_dim}, action_count={self.action_count})"


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

class Policy(ABC):
    """Conditional distribution over ``action_count`` actions given a context."""

    action_count: int

    @abstractmethod
    def probs(self, X) -> np.ndarray:
        """Action probabilities, shape (n, action_count)."""

    def prob(self, context, action) -> float:
        return float(self.probs(np.atleast_2d(context))[0, action])

    def log_prob(self, context, action) -> float:
        return float(np.log(self.prob(context, action)))

    def grad_log_prob(self, context, action) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no parameters")

    def action_probs(self, X, actions) -> np.ndarray:
        """``pi(a_i | x_i)`` for each row."""
        P = self.probs(X)
        return P[np.arange(P.shape[0]), np.asarray(actions)]

    def sample_batch(self, X, rng) -> np.ndarray:
        """One action per row by inverse-CDF on a single uniform draw."""
        gen = as_generator(rng)
        P = self.probs(X)
        u = gen.random(P.shape[0])
        cdf = np.cumsum(P, axis=1)
        a = (cdf < u[:, None]).sum(axis=1)
        return np.minimum(a, self.action_count - 1)

    def sample(self, context, rng) -> int:
        return int(self.sample_batch(np.atleast_2d(context), rng)[0])


class UniformPolicy(Policy):
    def __init__(self, action_count: int):
        if action_count < 1:
            raise ValueError("action_count must be positive")
        self.action_count = int(action_count)

    def probs(self, X):
        n = np.atleast_2d(X).shape[0]
        return np.full((n, self.action_count), 1.0 / self.action_count)


def _log_softmax(logits):
    shift = logits.max(axis=1, keepdims=True)
    z = logits - shift
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class LinearSoftmaxPolicy(Policy):
    """Softmax over ``W x / tau``.

    Parameters
    ----------
    weights : array (action_count, feature_dim)
    inverse_temperature : float
        ``tau`` in ``exp(h / tau)``; larger values flatten the policy.
    """

    def __init__(self, weights, inverse_temperature: float = 1.0):
        W = np.array(weights, dtype=np.float64, ndmin=2)
        if not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite")
        if not inverse_temperature > 0:
            raise ValueError("inverse_temperature must be positive")
        self.weights = W
        self.inverse_temperature = float(inverse_temperature)
        self.action_count = W.shape[0]

    @property
    def feature_dim(self):
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, action_count, feature_dim, inverse_temperature=1.0):
        return cls(np.zeros((action_count, feature_dim)), inverse_temperature)

    def with_weights(self, weights) -> "LinearSoftmaxPolicy":
        return LinearSoftmaxPolicy(weights, self.inverse_temperature)

    def logits(self, X):
        return np.atleast_2d(X) @ self.weights.T / self.inverse_temperature

    def log_probs(self, X):
        return _log_softmax(self.logits(X))

    def probs(self, X):
        return np.exp(self.log_probs(X))

    def log_prob(self, context, action):
        return float(self.log_probs(np.atleast_2d(context))[0, action])

    def grad_log_prob(self, context, action):
        """Gradient of ``log pi(a|x)`` with respect to ``weights``."""
        x = np.asarray(context, dtype=np.float64)
        p = self.probs(x[None, :])[0]
        e = -p
        e[action] += 1.0
        return np.outer(e, x) / self.inverse_temperature

    def grad_log_prob_batch(self, X, actions):
        """Per-row gradients, shape (n, action_count, feature_dim)."""
        X = np.atleast_2d(X)
        E = -self.probs(X)
        E[np.arange(X.shape[0]), actions] += 1.0
        return E[:, :, None] * X[:, None, :] / self.inverse_temperature

    def predict(self, X):
        """Argmax action; ``np.argmax`` breaks ties toward the lowest index."""
        return np.argmax(self.logits(X), axis=1)


# --------------------------------------------------------------------------
# importance weights
# --------------------------------------------------------------------------

class WeightedSample(NamedTuple):
    weight: float
    reward: float
    weighted_reward: float


@dataclass(frozen=True)
class WeightedSamples:
    """Importance-weighted rewards with the raw probabilities kept alongside.

    ``target_prob`` and ``logging_prob`` are needed by estimators that are
    not functions of the ratio alone (ES, IX, LS_LIN). ``logging_prob`` is
    the floored propensity actually used in the ratio.
    """

    weight: np.ndarray
    reward: np.ndarray
    target_prob: np.ndarray
    logging_prob: np.ndarray

    @property
    def weighted_reward(self) -> np.ndarray:
        return self.weight * self.reward

    def __len__(self):
        return self.weight.shape[-1]

    def __iter__(self) -> Iterator[WeightedSample]:
        for w, r in zip(self.weight, self.reward):
            yield WeightedSample(float(w), float(r), float(w * r))

    @classmethod
    def from_arrays(cls, weight=None, reward=None, target_prob=None, logging_prob=None):
        """Build from any consistent subset of columns.

        Missing probabilities are filled so that ``target / logging == weight``
        (logging defaults to 1).
        """
        reward = np.asarray(reward, dtype=np.float64)
        if weight is None:
            if target_prob is None or logging_prob is None:
                raise ValueError("need weight or both probabilities")
            weight = np.asarray(target_prob, dtype=np.float64) / np.asarray(logging_prob, dtype=np.float64)
        weight = np.asarray(weight, dtype=np.float64)
        weight, reward = np.broadcast_arrays(weight, reward)
        if logging_prob is None:
            logging_prob = np.ones_like(weight) if target_prob is None else np.asarray(target_prob) / weight
        if target_prob is None:
            target_prob = weight * np.asarray(logging_prob, dtype=np.float64)
        return cls(np.array(weight, dtype=np.float64), np.array(reward, dtype=np.float64),
                   np.broadcast_to(np.asarray(target_prob, dtype=np.float64), weight.shape).copy(),
                   np.broadcast_to(np.asarray(logging_prob, dtype=np.float64), weight.shape).copy())


def compute_weighted_samples(dataset: LBFDataset, target: Policy,
                             propensity_floor: float = DEFAULT_PROPENSITY_FLOOR) -> WeightedSamples:
    """Weights ``pi_theta(a|x) / max(p, floor)`` in dataset order."""
    if not 0.0 <= propensity_floor < 1.0:
        raise ValueError("propensity_floor must lie in [0, 1)")
    p = np.maximum(dataset.propensities, propensity_floor)
    if np.any(p <= 0.0):
        raise DataError("non-positive propensity after flooring")
    pt = target.action_probs(dataset.contexts, dataset.actions)
    return WeightedSamples(pt / p, dataset.rewards.copy(), pt, p)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def save_lbf_csv(dataset: LBFDataset, path) -> None:
    header = [f"f{j}" for j in range(dataset.feature_dim)] + ["action", "propensity", "reward"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rec in dataset:
            w.writerow([repr(float(v)) for v in rec.context]
                       + [rec.action, repr(rec.propensity), repr(rec.reward)])


def load_lbf_csv(path, action_count: Optional[int] = None) -> LBFDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("missing header row")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 3
    expected = [f"f{j}" for j in range(d)] + ["action", "propensity", "reward"]
    if d < 1 or header != expected:
        raise DataError("line 1: header must be f0..f{d-1},action,propensity,reward")
    X, a, p, r = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d + 3:
            raise DataError(f"line {lineno}: expected {d + 3} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row[:d]]
            act = int(row[d])
            prop = float(row[d + 1])
            rew = float(row[d + 2])
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        if not 0.0 < prop <= 1.0:
            raise DataError(f"line {lineno}: propensity {prop} outside (0, 1]")
        X.append(vals)
        a.append(act)
        p.append(prop)
        r.append(rew)
    if not X:
        raise DataError("empty dataset")
    return LBFDataset(np.array(X), np.array(a, dtype=np.int64), p, r, action_count)


# --------------------------------------------------------------------------
# supervised -> bandit
# --------------------------------------------------------------------------

def supervised_to_bandit(features, labels, logging: Policy, rng) -> LBFDataset:
    """Log one action per example under ``logging``; reward 1 iff it hits the label."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise DataError("labels must have one entry per feature row")
    K = logging.action_count
    if np.any(y < 0) or np.any(y >= K):
        raise DataError(f"labels must lie in [0, {K})")
    P = logging.probs(X)
    gen = as_generator(rng)
    u = gen.random(X.shape[0])
    a = np.minimum((np.cumsum(P, axis=1) < u[:, None]).sum(axis=1), K - 1)
    p = P[np.arange(X.shape[0]), a]
    return LBFDataset(X, a, p, (a == y).astype(np.float64), K)
