"""Value estimators over importance-weighted rewards.

Every estimator takes a :class:`~lseope.data.WeightedSamples`. Functions
that depend only on the weighted rewards ``z = w r`` (IPS, LSE and the LSE
analytics) also accept a plain array of ``z``.

The LSE uses a positive ``lambda_magnitude``; internally ``lam = -magnitude``.
"""
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .data import DEFAULT_PROPENSITY_FLOOR, LBFDataset, Policy, WeightedSamples, compute_weighted_samples

SEPARABLE_KINDS = ("IPS", "IPS_TR", "PM", "ES", "IX", "OS", "LS", "LS_LIN")
VALUE_KINDS = SEPARABLE_KINDS + ("SNIPS", "LSE")
MODEL_KINDS = ("DM", "DR", "DR_LSE")
ALL_KINDS = VALUE_KINDS + MODEL_KINDS

# param used when a spec omits it
_DEFAULT_PARAM = {
    "IPS": 0.0, "SNIPS": 0.0, "DM": 0.0, "DR": 0.0,
    "IPS_TR": np.inf, "PM": 0.0, "ES": 1.0,
}


class EstimatorError(ValueError):
    """Invalid estimator input or hyperparameter."""


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator kind plus its hyperparameter.

    ``param`` is M for IPS_TR, lambda-hat for PM, alpha for ES, eta for IX,
    tau for OS, lambda-tilde for LS / LS_LIN and the magnitude of lambda for
    LSE and DR_LSE. ``extra`` is the PM exponent ``s`` (default -1).
    """

    kind: str
    param: Optional[float] = None
    extra: Optional[float] = None

    def __post_init__(self):
        kind = str(self.kind).upper().replace("-", "_")
        object.__setattr__(self, "kind", kind)
        if kind not in ALL_KINDS:
            raise EstimatorError(f"unknown estimator kind {self.kind!r}")
        if self.param is None:
            if kind not in _DEFAULT_PARAM:
                raise EstimatorError(f"{kind} requires a parameter")
            object.__setattr__(self, "param", _DEFAULT_PARAM[kind])
        object.__setattr__(self, "param", float(self.param))
        if kind == "PM" and self.extra is None:
            object.__setattr__(self, "extra", -1.0)
        _check_param(kind, self.param, self.extra)

    @property
    def label(self) -> str:
        if self.kind in ("IPS", "SNIPS", "DM", "DR"):
            return self.kind
        return f"{self.kind}({self.param:g})"


def _check_param(kind, p, extra):
    if kind == "IPS_TR" and not p > 0:
        raise EstimatorError("IPS_TR requires M > 0")
    if kind == "PM":
        if not 0.0 <= p <= 1.0:
            raise EstimatorError("PM requires lambda_hat in [0, 1]")
        if extra == 0.0 or not np.isfinite(extra):
            raise EstimatorError("PM requires a finite s != 0")
    if kind == "ES" and not 0.0 <= p <= 1.0:
        raise EstimatorError("ES requires alpha in [0, 1]")
    if kind in ("IX", "OS", "LS", "LS_LIN", "LSE", "DR_LSE") and not (p > 0 and np.isfinite(p)):
        raise EstimatorError(f"{kind} requires a finite positive parameter")


class EstimateResult(NamedTuple):
    value: float
    per_sample_terms: Optional[np.ndarray] = None


class LseLimits(NamedTuple):
    at_zero: float
    at_neg_inf: float


# --------------------------------------------------------------------------
# input coercion
# --------------------------------------------------------------------------

def _as_samples(samples) -> WeightedSamples:
    if isinstance(samples, WeightedSamples):
        ws = samples
    else:
        raise EstimatorError("this estimator needs WeightedSamples (weights, rewards and probabilities)")
    if len(ws) == 0:
        raise EstimatorError("empty samples")
    return ws


def _as_z(samples, allow_negative=False) -> np.ndarray:
    if isinstance(samples, WeightedSamples):
        z = samples.weighted_reward
    else:
        z = np.asarray(samples, dtype=np.float64)
    if z.ndim != 1:
        raise EstimatorError("expected a 1-D sequence of weighted rewards")
    if z.size == 0:
        raise EstimatorError("empty samples")
    if not np.all(np.isfinite(z)):
        raise EstimatorError("weighted rewards must be finite")
    if not allow_negative and np.any(z < 0):
        raise EstimatorError("weighted rewards must be non-negative")
    return z


def _separable(kind, samples, param, extra=0.0) -> EstimateResult:
    ws = _as_samples(samples)
    terms = kernels.separable_terms(kernels.KIND_CODES[kind], ws.weight, ws.reward,
                                    ws.target_prob, ws.logging_prob, param, extra)
    if not np.all(np.isfinite(terms)):
        raise EstimatorError(f"{kind} produced non-finite terms")
    return EstimateResult(float(terms.mean()), terms)


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------

def estimate_ips(samples) -> float:
    """Mean of ``w r``."""
    return float(_as_z(samples).mean())


def estimate_ips_tr(samples, M: float) -> float:
    """Mean of ``r min(w, M)``."""
    _check_param("IPS_TR", M, None)
    return _separable("IPS_TR", samples, M).value


def estimate_snips(samples) -> float:
    """``sum(w r) / sum(w)``."""
    ws = _as_samples(samples)
    total = ws.weight.sum()
    if not total > 0:
        raise EstimatorError("SNIPS needs a positive weight sum")
    return float(ws.weighted_reward.sum() / total)


def estimate_pm(samples, lambda_hat: float, s: float = -1.0) -> float:
    """Mean of ``r ((1 - lh) w^s + lh)^(1/s)``."""
    _check_param("PM", lambda_hat, s)
    ws = _as_samples(samples)
    if s < 0 and np.any(ws.weight <= 0):
        raise EstimatorError("PM with s < 0 needs strictly positive weights")
    return _separable("PM", ws, lambda_hat, s).value


def estimate_es(samples, alpha: float) -> float:
    """Mean of ``r pi_theta / pi_0^alpha``."""
    _check_param("ES", alpha, None)
    return _separable("ES", samples, alpha).value


def estimate_ix(samples, eta: float) -> float:
    """Mean of ``r pi_theta / (pi_0 + eta)``."""
    _check_param("IX", eta, None)
    return _separable("IX", samples, eta).value


def estimate_os(samples, tau_os: float) -> float:
    """Mean of ``r tau w / (w^2 + tau)``."""
    _check_param("OS", tau_os, None)
    return _separable("OS", samples, tau_os).value


def estimate_ls(samples, lambda_tilde: float) -> float:
    """Mean of ``log(1 + lt w r) / lt``."""
    _check_param("LS", lambda_tilde, None)
    return _separable("LS", samples, lambda_tilde).value


def estimate_ls_lin(samples, lambda_tilde: float) -> float:
    """Mean of ``pi_theta log(1 + lt r / pi_0) / lt``."""
    _check_param("LS_LIN", lambda_tilde, None)
    return _separable("LS_LIN", samples, lambda_tilde).value


# --------------------------------------------------------------------------
# LSE
# --------------------------------------------------------------------------

def _lse(z, magnitude) -> float:
    if not (magnitude > 0 and np.isfinite(magnitude)):
        raise EstimatorError("lambda_magnitude must be finite and positive")
    return float(kernels.lse_rows_numpy(z[None, :], magnitude)[0])


def estimate_lse(samples, lambda_magnitude: float) -> float:
    """``(1/lam) log mean exp(lam z)`` with ``lam = -lambda_magnitude``.

    Examples
    --------
    >>> round(estimate_lse([0.0, 1e6], 1.0), 6)
    0.693147
    """
    return _lse(_as_z(samples), lambda_magnitude)


def lse_signed(values, lambda_magnitude: float) -> float:
    """LSE of arbitrary finite values (used on signed residuals)."""
    return _lse(_as_z(values, allow_negative=True), lambda_magnitude)


def lse_gradient_weights(samples, lambda_magnitude: float) -> np.ndarray:
    """``d LSE / d z_i = softmax(lam z)_i``."""
    z = _as_z(samples, allow_negative=True)
    if not lambda_magnitude > 0:
        raise EstimatorError("lambda_magnitude must be positive")
    e = np.exp(-lambda_magnitude * (z - z.min()))
    return e / e.sum()


def lse_limits_check(samples) -> LseLimits:
    """Analytic limits: mean as ``lam -> 0`` and min as ``lam -> -inf``."""
    z = _as_z(samples, allow_negative=True)
    return LseLimits(float(z.mean()), float(z.min()))


def lse_shrinkage_gap(samples, lambda_magnitude: float) -> float:
    """``mean(z) - LSE(z)``, equal to ``KL(uniform || softmax(lam z)) / |lam|``."""
    z = _as_z(samples, allow_negative=True)
    return float(z.mean() - _lse(z, lambda_magnitude))


def kl_regularized_objective(p, z, lambda_magnitude: float) -> float:
    """``sum p z + KL(p || uniform) / |lam|`` for a point ``p`` of the simplex."""
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    nz = p > 0
    kl = float(np.sum(p[nz] * np.log(p[nz] * n)))
    return float(p @ z) + kl / lambda_magnitude


def lse_kl_regularized_value(samples, lambda_magnitude: float) -> float:
    """The KL-regularized objective evaluated at its Gibbs minimiser."""
    z = _as_z(samples, allow_negative=True)
    return kl_regularized_objective(lse_gradient_weights(z, lambda_magnitude), z, lambda_magnitude)


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

def estimate(spec: EstimatorSpec, samples) -> EstimateResult:
    """Evaluate ``spec`` on precomputed weighted samples."""
    k = spec.kind
    if k == "LSE":
        return EstimateResult(estimate_lse(samples, spec.param))
    if k == "SNIPS":
        return EstimateResult(estimate_snips(samples))
    if k == "IPS":
        return _separable("IPS", samples, 0.0)
    if k == "PM":
        ws = _as_samples(samples)
        if spec.extra < 0 and np.any(ws.weight <= 0):
            raise EstimatorError("PM with s < 0 needs strictly positive weights")
        return _separable("PM", ws, spec.param, spec.extra)
    if k in SEPARABLE_KINDS:
        return _separable(k, samples, spec.param)
    raise EstimatorError(f"{k} needs a reward model; use the opl module")


def run_estimator(spec: EstimatorSpec, dataset: LBFDataset, target: Policy,
                  floor: float = DEFAULT_PROPENSITY_FLOOR) -> EstimateResult:
    """Weight ``dataset`` toward ``target`` and evaluate ``spec``."""
    if not isinstance(spec, EstimatorSpec):
        raise EstimatorError("spec must be an EstimatorSpec")
    return estimate(spec, compute_weighted_samples(dataset, target, floor))


def estimate_batch(spec: EstimatorSpec, w, r, pt=None, p0=None) -> np.ndarray:
    """One estimate per row of ``(trials, n)`` arrays via the compiled kernels."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    if spec.kind == "LSE":
        return kernels.lse_rows(w * r, spec.param)
    if spec.kind not in kernels.KIND_CODES:
        raise EstimatorError(f"{spec.kind} is not a batch estimator")
    if pt is None:
        pt = w
    if p0 is None:
        p0 = np.ones_like(w)
    return kernels.separable_rows(kernels.KIND_CODES[spec.kind], w, r, pt, p0,
                                  spec.param, spec.extra or 0.0)
