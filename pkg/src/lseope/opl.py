"""Off-policy learning of linear softmax policies from logged feedback."""
import csv
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .data import (DEFAULT_PROPENSITY_FLOOR, DataError, LBFDataset, LinearSoftmaxPolicy,
                   supervised_to_bandit)
from .estimators import EstimatorError, EstimatorSpec, lse_gradient_weights, lse_signed
from .rng import as_generator


class TrainingDivergence(RuntimeError):
    """Objective or weights became non-finite; ``policy`` is the last finite state."""

    def __init__(self, message, policy, epoch):
        super().__init__(message)
        self.policy = policy
        self.epoch = epoch


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

def inject_propensity_noise(dataset: LBFDataset, b: float, rng) -> LBFDataset:
    """Replace ``p`` by ``min(1, p / U)``, ``U ~ Gamma(b, rate b)``."""
    if not b > 0:
        raise ValueError("b must be positive")
    gen = as_generator(rng)
    u = gen.gamma(b, 1.0 / b, size=dataset.n)
    with np.errstate(divide="ignore", over="ignore"):
        p = np.minimum(1.0, dataset.propensities / u)
    p[~(p > 0)] = np.finfo(float).tiny
    return dataset.replace(propensities=p)


def inject_reward_flip(dataset: LBFDataset, pf: float, rng) -> LBFDataset:
    """Flip each binary reward independently with probability ``pf``."""
    if not 0.0 <= pf <= 1.0:
        raise ValueError("pf must lie in [0, 1]")
    r = dataset.rewards
    if not np.all((r == 0.0) | (r == 1.0)):
        raise DataError("reward flipping needs binary {0, 1} rewards")
    flip = as_generator(rng).random(dataset.n) < pf
    return dataset.replace(rewards=np.where(flip, 1.0 - r, r))


# --------------------------------------------------------------------------
# reward model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardModel:
    """Per-action linear model; column 0 of ``coefficients`` is the intercept."""

    coefficients: np.ndarray
    ridge: float = 0.0

    def predict(self, X) -> np.ndarray:
        """Predicted rewards, shape (n, action_count)."""
        X = np.atleast_2d(X)
        return self.coefficients[:, 0][None, :] + X @ self.coefficients[:, 1:].T

    def predict_taken(self, X, actions) -> np.ndarray:
        return self.predict(X)[np.arange(len(actions)), actions]

    @classmethod
    def constant(cls, action_count, feature_dim, value=0.0):
        c = np.zeros((action_count, feature_dim + 1))
        c[:, 0] = value
        return cls(c, 0.0)


def fit_reward_model(dataset: LBFDataset, ridge: float = 1.0) -> RewardModel:
    """Ridge regression of reward on context, one model per observed action.

    The intercept is not penalised. Unobserved actions get the zero model.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    d = dataset.feature_dim
    coef = np.zeros((dataset.action_count, d + 1))
    pen = np.full(d + 1, float(ridge))
    pen[0] = 0.0
    for a in range(dataset.action_count):
        mask = dataset.actions == a
        if not mask.any():
            continue
        A = np.hstack([np.ones((mask.sum(), 1)), dataset.contexts[mask]])
        G = A.T @ A + np.diag(pen)
        if ridge == 0 and np.linalg.matrix_rank(G) < d + 1:
            raise np.linalg.LinAlgError(
                f"singular design for action {a} with ridge=0; use ridge > 0")
        coef[a] = np.linalg.solve(G, A.T @ dataset.rewards[mask])
    if not np.all(np.isfinite(coef)):
        raise np.linalg.LinAlgError("non-finite reward-model coefficients; use ridge > 0")
    return RewardModel(coef, float(ridge))


# --------------------------------------------------------------------------
# objectives and gradients
# --------------------------------------------------------------------------

def _weights(batch: LBFDataset, policy: LinearSoftmaxPolicy, floor):
    P = policy.probs(batch.contexts)
    idx = np.arange(batch.n)
    pt = P[idx, batch.actions]
    p0 = np.maximum(batch.propensities, floor)
    return P, pt, p0, pt / p0


def _score_grad(batch, policy, P, coef):
    """``sum_i coef_i grad log pi(a_i | x_i)`` without forming per-row tensors."""
    E = -P * coef[:, None]
    E[np.arange(batch.n), batch.actions] += coef
    return E.T @ batch.contexts / policy.inverse_temperature


def _dm_parts(batch, policy, P, model):
    Rh = model.predict(batch.contexts)
    v_row = (P * Rh).sum(axis=1)
    # d/dh_b sum_a pi_a rh_a = pi_b (rh_b - v)
    D = P * (Rh - v_row[:, None])
    grad = D.T @ batch.contexts / policy.inverse_temperature / batch.n
    return float(v_row.mean()), grad, Rh


def lse_objective_gradient(batch: LBFDataset, policy: LinearSoftmaxPolicy, lambda_magnitude: float,
                           floor: float = DEFAULT_PROPENSITY_FLOOR) -> np.ndarray:
    """Gradient of the LSE value with respect to the policy weights.

    ``sum_i softmax(lam z)_i r_i w_i grad log pi(a_i|x_i)``.
    """
    return objective_and_gradient(batch, policy, EstimatorSpec("LSE", lambda_magnitude), floor)[1]


def baseline_objective_gradient(batch: LBFDataset, policy: LinearSoftmaxPolicy, spec: EstimatorSpec,
                                floor: float = DEFAULT_PROPENSITY_FLOOR, model=None) -> np.ndarray:
    return objective_and_gradient(batch, policy, spec, floor, model)[1]


def objective_and_gradient(batch: LBFDataset, policy: LinearSoftmaxPolicy, spec: EstimatorSpec,
                           floor: float = DEFAULT_PROPENSITY_FLOOR,
                           model: Optional[RewardModel] = None) -> Tuple[float, np.ndarray]:
    """Estimator value of ``policy`` on ``batch`` and its weight gradient.

    IPS_TR uses the subgradient 0 where the weight is clipped.
    """
    P, pt, p0, w = _weights(batch, policy, floor)
    r = batch.rewards
    n = batch.n
    k, lam = spec.kind, spec.param
    z = w * r
    if k in ("DM", "DR", "DR_LSE"):
        if model is None:
            raise EstimatorError(f"{k} needs a reward model")
        v_dm, g_dm, Rh = _dm_parts(batch, policy, P, model)
        if k == "DM":
            return v_dm, g_dm
        res = r - Rh[np.arange(n), batch.actions]
        if k == "DR":
            return v_dm + float(np.mean(w * res)), g_dm + _score_grad(batch, policy, P, w * res / n)
        q = lse_gradient_weights(w * res, lam)
        return v_dm + lse_signed(w * res, lam), g_dm + _score_grad(batch, policy, P, q * w * res)
    if k == "LSE":
        q = lse_gradient_weights(z, lam)
        return lse_signed(z, lam), _score_grad(batch, policy, P, q * z)
    if k == "SNIPS":
        sw = w.sum()
        v = float(z.sum() / sw)
        return v, _score_grad(batch, policy, P, (r - v) * w / sw)
    if k == "IPS":
        g, dg_dw = z, r
    elif k == "IPS_TR":
        g = r * np.minimum(w, lam)
        dg_dw = np.where(w < lam, r, 0.0)
    elif k == "PM":
        s = spec.extra
        base = (1.0 - lam) * w ** s + lam
        g = r * base ** (1.0 / s)
        dg_dw = r * base ** (1.0 / s - 1.0) * (1.0 - lam) * w ** (s - 1.0)
    elif k == "OS":
        den = w * w + lam
        g = r * lam * w / den
        dg_dw = r * lam * (lam - w * w) / (den * den)
    elif k == "LS":
        g = np.log1p(lam * z) / lam
        dg_dw = r / (1.0 + lam * z)
    elif k in ("ES", "IX", "LS_LIN"):
        # linear in pi_theta: d g = g d log pi
        if k == "ES":
            g = r * pt / p0 ** lam
        elif k == "IX":
            g = r * pt / (p0 + lam)
        else:
            g = pt * np.log1p(lam * r / p0) / lam
        return float(g.mean()), _score_grad(batch, policy, P, g / n)
    else:
        raise EstimatorError(f"no gradient for {k}")
    # d g / d theta = dg_dw * w * grad log pi
    return float(g.mean()), _score_grad(batch, policy, P, dg_dw * w / n)


def objective_value(batch, policy, spec, floor=DEFAULT_PROPENSITY_FLOOR, model=None) -> float:
    return objective_and_gradient(batch, policy, spec, floor, model)[0]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def deterministic_accuracy(policy, features, labels) -> float:
    """Fraction of rows whose argmax action equals the label (ties to lowest index)."""
    X = np.atleast_2d(features)
    y = np.asarray(labels)
    if y.shape != (X.shape[0],):
        raise ValueError("features and labels disagree in length")
    pred = np.argmax(policy.probs(X), axis=1)
    return float(np.mean(pred == y))


def deterministic_ips_value(policy, dataset: LBFDataset, floor=DEFAULT_PROPENSITY_FLOOR) -> float:
    """IPS value of the argmax policy on logged data."""
    pred = np.argmax(policy.probs(dataset.contexts), axis=1)
    p = np.maximum(dataset.propensities, floor)
    return float(np.mean((pred == dataset.actions) * dataset.rewards / p))


def dm_value(dataset: LBFDataset, policy, model: RewardModel) -> float:
    """``mean_i sum_a pi(a|x_i) rhat(x_i, a)``."""
    return float((policy.probs(dataset.contexts) * model.predict(dataset.contexts)).sum(axis=1).mean())


def _residual_terms(dataset, policy, model, floor):
    P, pt, p0, w = _weights(dataset, policy, floor)
    rh = model.predict_taken(dataset.contexts, dataset.actions)
    return w * (dataset.rewards - rh)


def dr_value(dataset: LBFDataset, policy, model: RewardModel, floor=DEFAULT_PROPENSITY_FLOOR) -> float:
    return dm_value(dataset, policy, model) + float(_residual_terms(dataset, policy, model, floor).mean())


def dr_lse_value(dataset: LBFDataset, policy, model: RewardModel, lambda_magnitude: float,
                 floor=DEFAULT_PROPENSITY_FLOOR) -> float:
    """DM plus the LSE of signed weighted residuals."""
    return dm_value(dataset, policy, model) + lse_signed(
        _residual_terms(dataset, policy, model, floor), lambda_magnitude)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class OplConfig:
    """Settings for :func:`train_policy`.

    ``propensity_noise_b`` and ``reward_flip_pf`` are applied to the training
    data inside :func:`train_policy` when set.
    """

    objective: EstimatorSpec = field(default_factory=lambda: EstimatorSpec("LSE", 1.0))
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 300
    early_stop_patience: int = 10
    propensity_noise_b: Optional[float] = None
    reward_flip_pf: Optional[float] = None
    propensity_floor: float = DEFAULT_PROPENSITY_FLOOR
    ridge: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 0:
            raise ValueError("batch_size and max_epochs must be positive, patience non-negative")
        if self.propensity_noise_b is not None and not self.propensity_noise_b > 0:
            raise ValueError("propensity_noise_b must be positive")
        if self.reward_flip_pf is not None and not 0 <= self.reward_flip_pf <= 1:
            raise ValueError("reward_flip_pf must lie in [0, 1]")


@dataclass
class TrainingLog:
    epoch: List[int] = field(default_factory=list)
    objective: List[float] = field(default_factory=list)
    valid_accuracy: List[float] = field(default_factory=list)

    def append(self, epoch, objective, acc):
        self.epoch.append(epoch)
        self.objective.append(objective)
        self.valid_accuracy.append(acc)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "objective", "valid_accuracy"])
            for row in zip(self.epoch, self.objective, self.valid_accuracy):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


@dataclass
class TrainResult:
    policy: LinearSoftmaxPolicy
    log: TrainingLog
    best_epoch: int
    model: Optional[RewardModel] = None


Validation = Union[LBFDataset, Tuple[np.ndarray, np.ndarray]]


def _valid_score(policy, valid, floor):
    if isinstance(valid, LBFDataset):
        return deterministic_ips_value(policy, valid, floor)
    X, y = valid
    return deterministic_accuracy(policy, X, y)


def apply_noise(train: LBFDataset, cfg: OplConfig, gen) -> LBFDataset:
    if cfg.propensity_noise_b is not None:
        train = inject_propensity_noise(train, cfg.propensity_noise_b, gen)
    if cfg.reward_flip_pf is not None:
        train = inject_reward_flip(train, cfg.reward_flip_pf, gen)
    return train


def train_policy(train: LBFDataset, valid: Validation, cfg: OplConfig,
                 init: Optional[LinearSoftmaxPolicy] = None) -> TrainResult:
    """Mini-batch gradient ascent on the objective with early stopping.

    ``valid`` is either ``(features, labels)``, scored by deterministic
    accuracy, or a logged dataset, scored by the IPS value of the argmax
    policy. The best-scoring policy is returned; epoch 0 is the initial one.
    """
    gen = as_generator(cfg.seed)
    train = apply_noise(train, cfg, gen)
    policy = init or LinearSoftmaxPolicy.zeros(train.action_count, train.feature_dim)
    spec = cfg.objective
    model = fit_reward_model(train, cfg.ridge) if spec.kind in ("DM", "DR", "DR_LSE") else None
    floor = cfg.propensity_floor

    log = TrainingLog()
    obj0 = objective_value(train, policy, spec, floor, model)
    best_score = _valid_score(policy, valid, floor)
    log.append(0, obj0, best_score)
    best, best_epoch, stale = policy, 0, 0
    W = policy.weights.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        perm = gen.permutation(train.n)
        for s in range(0, train.n, cfg.batch_size):
            batch = train.subset(perm[s:s + cfg.batch_size])
            _, grad = objective_and_gradient(batch, policy, spec, floor, model)
            W_new = W + cfg.learning_rate * grad
            if not np.all(np.isfinite(W_new)):
                raise TrainingDivergence(f"non-finite weights at epoch {epoch}", policy, epoch)
            W = W_new
            policy = policy.with_weights(W)
        obj = objective_value(train, policy, spec, floor, model)
        if not np.isfinite(obj):
            raise TrainingDivergence(f"non-finite objective at epoch {epoch}", best, epoch)
        score = _valid_score(policy, valid, floor)
        log.append(epoch, obj, score)
        if score > best_score:
            best, best_score, best_epoch, stale = policy, score, epoch, 0
        else:
            stale += 1
            if stale > cfg.early_stop_patience:
                break
    return TrainResult(best, log, best_epoch, model)


# --------------------------------------------------------------------------
# synthetic benchmark
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlobSplits:
    X_train: np.ndarray
    y_train: np.ndarray
    X_valid: np.ndarray
    y_valid: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def make_blobs(n_train=5000, n_valid=1000, n_test=1000, n_classes=4, dim=10,
               separation=2.0, offset=5.0, rng=0) -> BlobSplits:
    """Unit-variance Gaussian classes in a randomly rotated frame.

    Class ``k`` is centred at ``offset e_0 + separation e_{k+1}`` before the
    rotation, so classes are equidistant and share a common shift that acts
    as an implicit intercept feature.
    """
    if dim < n_classes + 1:
        raise ValueError("dim must exceed n_classes")
    gen = as_generator(rng)
    centres = np.zeros((n_classes, dim))
    centres[:, 0] = offset
    centres[np.arange(n_classes), np.arange(1, n_classes + 1)] = separation
    Q, _ = np.linalg.qr(gen.standard_normal((dim, dim)))
    centres = centres @ Q.T
    n = n_train + n_valid + n_test
    y = gen.integers(0, n_classes, n)
    X = centres[y] + gen.standard_normal((n, dim))
    a, b = n_train, n_train + n_valid
    return BlobSplits(X[:a], y[:a], X[a:b], y[a:b], X[b:], y[b:])


def train_logging_policy(X, y, n_classes, fraction=0.1, inverse_temperature=10.0,
                         ridge=1e-3, rng=0) -> LinearSoftmaxPolicy:
    """Softmax regression fit on a labelled fraction, then flattened by ``tau``.

    The weights minimise the mean cross-entropy plus ``ridge/2 |W|^2`` on a
    random ``fraction`` of the rows; dividing the logits by ``tau`` makes the
    logging policy more uniform and less accurate without moving its argmax.
    """
    gen = as_generator(rng)
    m = max(n_classes, int(round(fraction * len(y))))
    idx = gen.choice(len(y), m, replace=False)
    Xs, ys = np.asarray(X)[idx], np.asarray(y)[idx]
    onehot = np.eye(n_classes)[ys]
    shape = (n_classes, Xs.shape[1])

    def loss(flat):
        W = flat.reshape(shape)
        logits = Xs @ W.T
        lz = logsumexp(logits, axis=1)
        P = np.exp(logits - lz[:, None])
        f = np.mean(lz - logits[np.arange(m), ys]) + 0.5 * ridge * flat @ flat
        g = (P - onehot).T @ Xs / m + ridge * W
        return f, g.ravel()

    res = minimize(loss, np.zeros(shape).ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": 1e-9, "ftol": 1e-15})
    return LinearSoftmaxPolicy(res.x.reshape(shape), inverse_temperature)


def expected_accuracy(policy, features, labels) -> float:
    """Mean probability the stochastic policy gives the true label."""
    X = np.atleast_2d(features)
    y = np.asarray(labels)
    if y.shape != (X.shape[0],):
        raise ValueError("features and labels disagree in length")
    return float(np.mean(policy.probs(X)[np.arange(len(y)), y]))


def blob_bandit(splits: BlobSplits, logging: LinearSoftmaxPolicy, rng) -> LBFDataset:
    return supervised_to_bandit(splits.X_train, splits.y_train, logging, rng)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(policy: LinearSoftmaxPolicy, path) -> None:
    """Three header lines (actions, features, tau) then one weight row per line."""
    K, d = policy.weights.shape
    with open(path, "w") as fh:
        fh.write(f"{K}\n{d}\n{policy.inverse_temperature!r}\n")
        for row in policy.weights:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_checkpoint(path) -> LinearSoftmaxPolicy:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 3:
        raise DataError("checkpoint needs a 3-line header")
    K, d, tau = int(lines[0]), int(lines[1]), float(lines[2])
    rows = [[float(v) for v in ln.split()] for ln in lines[3:]]
    W = np.array(rows, dtype=np.float64)
    if W.shape != (K, d):
        raise DataError(f"checkpoint weights have shape {W.shape}, header says ({K}, {d})")
    return LinearSoftmaxPolicy(W, tau)
