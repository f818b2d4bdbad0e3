"""Choosing lambda for the LSE, plus grid search for every estimator."""
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from .estimators import EstimatorSpec, _as_z

DEFAULT_LSE_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
ND_BRACKET = (1e-4, 1e2)
ND_POINTS = 200


@dataclass(frozen=True)
class LambdaSelectConfig:
    """Inputs shared by the lambda rules.

    Parameters
    ----------
    epsilon : float
        Heavy-tail order; the (1+epsilon)-th moment of ``w r`` is finite.
    delta : float
        Confidence level of the data-driven rule.
    tv_estimate : float
        Total-variation proxy between clean and noisy reward laws.
    grid : sequence of float
        Candidate magnitudes for grid search.
    """

    epsilon: float = 1.0
    delta: float = 0.05
    tv_estimate: float = 0.1
    grid: Tuple[float, ...] = field(default=DEFAULT_LSE_GRID)

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if not self.tv_estimate >= 0.0:
            raise ValueError("tv_estimate must be non-negative")
        grid = tuple(float(g) for g in self.grid)
        if not grid or any(not g > 0 for g in grid):
            raise ValueError("grid must be non-empty and strictly positive")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class LambdaChoice:
    """A selected magnitude with diagnostics."""

    rule: str
    magnitude: float
    objective: Optional[float] = None
    unclamped: Optional[float] = None
    clamped: bool = False
    degenerate: bool = False


def empirical_nu(samples, epsilon: float) -> float:
    """``mean((w r)^(1+epsilon))``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    z = _as_z(samples)
    return float(np.mean(z ** (1.0 + epsilon)))


def f_of_epsilon(epsilon: float) -> float:
    """Constant of the data-driven rule; undefined at ``epsilon = 0``."""
    if not 0.0 < epsilon <= 1.0:
        raise ValueError("f(epsilon) needs epsilon in (0, 1]; fall back to grid search for epsilon = 0")
    e = math.e
    inner = (1.0 - epsilon) + math.sqrt((1.0 - epsilon) ** 2 + 8.0 * epsilon / (3.0 * e * (1.0 + epsilon)))
    return (e * (1.0 + epsilon) / epsilon * inner) ** (2.0 / (1.0 + epsilon))


def lambda_data_driven_detail(cfg: LambdaSelectConfig, nu_hat: float, n: int) -> LambdaChoice:
    """``min(f(eps) (ln(1/delta) / (nu n))^(1/(1+eps)), 1)`` with its clamp flag."""
    if not nu_hat > 0:
        raise ValueError("empirical moment is zero (all-zero rewards); lambda_D undefined")
    if n < 1:
        raise ValueError("n must be positive")
    eps = cfg.epsilon
    raw = f_of_epsilon(eps) * (math.log(1.0 / cfg.delta) / (nu_hat * n)) ** (1.0 / (1.0 + eps))
    return LambdaChoice("data_driven", min(raw, 1.0), unclamped=raw, clamped=raw > 1.0)


def lambda_data_driven(samples, cfg: LambdaSelectConfig = LambdaSelectConfig()) -> float:
    """Data-driven magnitude from the empirical moment of ``samples``."""
    z = _as_z(samples)
    return lambda_data_driven_detail(cfg, empirical_nu(z, cfg.epsilon), z.size).magnitude


def lambda_adaptive(n: int, epsilon: float = 1.0) -> float:
    """``n^(-1/(1+epsilon))``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    return float(n ** (-1.0 / (1.0 + epsilon)))


def noisy_reward_objective(m, nu: float, epsilon: float, tv: float):
    """``m^eps nu / (1+eps) + 2 tv / m exp(m nu^(1/(1+eps)))``."""
    m = np.asarray(m, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = m ** epsilon * nu / (1.0 + epsilon)
        if tv > 0:
            out = out + 2.0 * tv / m * np.exp(m * nu ** (1.0 / (1.0 + epsilon)))
    return out


def lambda_noisy_reward(cfg: LambdaSelectConfig, nu_tilde: float) -> LambdaChoice:
    """Minimise the noisy-reward objective over the magnitude.

    A log-spaced scan over the bracket locates the basin; a bounded Brent
    search between the neighbours of the best scan point refines it. With
    ``tv_estimate = 0`` the objective only grows, so the bracket minimum is
    returned and flagged degenerate.
    """
    if not nu_tilde > 0:
        raise ValueError("nu_tilde must be positive")
    eps, tv = cfg.epsilon, cfg.tv_estimate
    lo, hi = ND_BRACKET

    def obj(m):
        return float(noisy_reward_objective(m, nu_tilde, eps, tv))

    if tv == 0.0:
        return LambdaChoice("noisy", lo, objective=obj(lo), degenerate=True)
    ms = np.logspace(math.log10(lo), math.log10(hi), ND_POINTS)
    vals = noisy_reward_objective(ms, nu_tilde, eps, tv)
    i = int(np.nanargmin(vals))
    best_m, best_v = float(ms[i]), float(vals[i])
    a, b = float(ms[max(i - 1, 0)]), float(ms[min(i + 1, ND_POINTS - 1)])
    res = minimize_scalar(obj, bounds=(a, b), method="bounded",
                          options={"xatol": 1e-12 * max(b, 1.0), "maxiter": 500})
    if res.success and res.fun <= best_v:
        best_m, best_v = float(res.x), float(res.fun)
    return LambdaChoice("noisy", best_m, objective=best_v, degenerate=False)


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridResult:
    best: EstimatorSpec
    scores: Dict[float, float]


def grid_search(kind: str, grid: Sequence[float],
                score_fn: Callable[[Sequence[EstimatorSpec]], Sequence[float]],
                criterion: str = "mse", extra: Optional[float] = None) -> GridResult:
    """Pick the best hyperparameter of ``kind`` from ``grid``.

    ``score_fn`` maps a list of specs to one score each; evaluating all of
    them in one call lets the caller share random numbers across the grid.
    ``criterion='mse'`` minimises, ``'accuracy'`` maximises. Ties go to the
    smaller parameter magnitude.
    """
    if len(grid) == 0:
        raise ValueError("grid must be non-empty")
    if criterion not in ("mse", "accuracy"):
        raise ValueError("criterion must be 'mse' or 'accuracy'")
    specs = [EstimatorSpec(kind, g, extra) for g in grid]
    scores = [float(s) for s in score_fn(specs)]
    if len(scores) != len(specs):
        raise ValueError("score_fn must return one score per spec")
    sign = 1.0 if criterion == "mse" else -1.0
    order = sorted(range(len(specs)), key=lambda j: (sign * _nan_last(scores[j], sign), abs(specs[j].param)))
    best = specs[order[0]]
    return GridResult(best, {s.param: sc for s, sc in zip(specs, scores)})


def _nan_last(v, sign):
    return v if np.isfinite(v) else sign * np.inf
