"""Synthetic OPE scenarios with known ground truth and a Monte-Carlo runner.

Each scenario has a single context. Actions are real numbers drawn from the
logging density; importance weights are exact density ratios.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .data import WeightedSamples
from .estimators import EstimatorSpec, estimate_batch
from .lambda_select import grid_search
from .rng import RngHandle

TUNING_SALT = 0x5EED_7A1E

# Grids applied when an experiment asks for tuned estimators.
DEFAULT_GRIDS = {
    "IPS": None,
    "SNIPS": None,
    "IPS_TR": (2.0, 5.0, 10.0, 50.0),
    "PM": (0.0, 0.1, 0.2, 0.4, 0.6, 0.8),
    "ES": (0.0, 0.1, 0.4, 0.7, 1.0),
    "IX": (0.01, 0.1, 1.0, 10.0, 100.0),
    "OS": (0.01, 0.1, 1.0, 10.0, 100.0),
    "LS": (0.001, 0.01, 0.1, 1.0, 10.0, 100.0),
    "LS_LIN": (0.001, 0.01, 0.1, 1.0, 10.0, 100.0),
    "LSE": (0.001, 0.01, 0.1, 1.0, 10.0, 100.0),
}


class ScenarioError(ValueError):
    """Scenario parameters give an infinite value or moment."""


def _normal_pdf(u, mu, sigma2):
    return np.exp(-((u - mu) ** 2) / (2.0 * sigma2)) / math.sqrt(2.0 * math.pi * sigma2)


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianScenario:
    """Logging ``N(mu2, sigma2)``, target ``N(mu1, sigma2)``, reward ``exp(alpha u^2)``."""

    mu1: float = 0.5
    mu2: float = 1.0
    sigma2: float = 0.25
    alpha: float = 1.1

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ScenarioError("sigma2 must be positive")
        if 2.0 * self.alpha * self.sigma2 >= 1.0:
            raise ScenarioError("2 * alpha * sigma2 must be < 1 for a finite value")

    name = "gaussian"

    def params(self):
        return dict(mu1=self.mu1, mu2=self.mu2, sigma2=self.sigma2, alpha=self.alpha)

    def true_value(self) -> float:
        c = 1.0 - 2.0 * self.alpha * self.sigma2
        return c ** -0.5 * math.exp(self.alpha * self.mu1 ** 2 / c)

    def moment(self, epsilon: float) -> float:
        """``E_pi0[(w r)^(1+epsilon)]``; finite iff ``2 (1+eps) alpha sigma2 < 1``."""
        k = 1.0 + epsilon
        c = 1.0 - 2.0 * k * self.alpha * self.sigma2
        if c <= 0:
            raise ScenarioError(
                f"(1+epsilon)-moment is infinite: need 2*(1+epsilon)*alpha*sigma2 < 1, got {1.0 - c:g}")
        m1, m2, s2 = self.mu1, self.mu2, self.sigma2
        b = k * m1 - epsilon * m2
        q = k * m1 ** 2 - epsilon * m2 ** 2
        return c ** -0.5 * math.exp((b * b - c * q) / (2.0 * s2 * c))

    def draw_actions(self, n, gen):
        u = self.mu2 + math.sqrt(self.sigma2) * gen.standard_normal(n)
        pt = _normal_pdf(u, self.mu1, self.sigma2)
        p0 = _normal_pdf(u, self.mu2, self.sigma2)
        w = np.exp(((u - self.mu2) ** 2 - (u - self.mu1) ** 2) / (2.0 * self.sigma2))
        return u, w, pt, p0

    def reward(self, u):
        return np.exp(self.alpha * u * u)


@dataclass(frozen=True)
class LomaxScenario:
    """Logging ``Lomax(alpha_l)``, target ``Lomax(alpha_t)``, reward ``(1+u)^beta``."""

    alpha_t: float = 2.5
    alpha_l: float = 1.5
    beta: float = 2.0

    def __post_init__(self):
        if not (self.alpha_t > 0 and self.alpha_l > 0 and self.beta > 0):
            raise ScenarioError("Lomax shapes and beta must be positive")
        if not self.alpha_t > self.beta:
            raise ScenarioError("alpha_t must exceed beta for a finite value")

    name = "lomax"

    def params(self):
        return dict(alpha_t=self.alpha_t, alpha_l=self.alpha_l, beta=self.beta)

    @property
    def k(self) -> float:
        return self.alpha_l / (self.alpha_t - self.beta)

    def true_value(self) -> float:
        return self.alpha_t / (self.alpha_t - self.beta)

    def moment(self, epsilon: float) -> float:
        k = self.k
        denom = 1.0 + epsilon * (1.0 - k)
        if denom <= 0:
            raise ScenarioError(f"(1+epsilon)-moment is infinite: need 1 + epsilon*(1-k) > 0 with k={k:g}")
        return self.true_value() ** (1.0 + epsilon) * k ** -epsilon / denom

    def draw_actions(self, n, gen):
        q = gen.random(n)
        u = (1.0 - q) ** (-1.0 / self.alpha_l) - 1.0
        a, al = self.alpha_t, self.alpha_l
        pt = a * (1.0 + u) ** (-a - 1.0)
        p0 = al * (1.0 + u) ** (-al - 1.0)
        w = (a / al) * (1.0 + u) ** (al - a)
        return u, w, pt, p0

    def reward(self, u):
        return (1.0 + u) ** self.beta


_HEAVY_FAMILIES = {
    "gev": lambda c: stats.genextreme(c),
    "student_t": lambda c: stats.t(c),
    "frechet": lambda c: stats.invweibull(c),
    "lomax": lambda c: stats.lomax(c),
}
HEAVY_DEFAULTS = {"gev": -0.9, "student_t": 1.2, "frechet": 1.2, "lomax": 1.2}


@dataclass(frozen=True)
class HeavyTailScenario:
    """Reward ``|X|`` from a heavy-tailed family, independent of the action.

    Actions and weights come from the Gaussian policy pair, so the value of
    any target is ``E|X|``, computed by quadrature.
    """

    family: str = "student_t"
    shape: Optional[float] = None
    mu1: float = 0.5
    mu2: float = 1.0
    sigma2: float = 0.25

    def __post_init__(self):
        if self.family not in _HEAVY_FAMILIES:
            raise ScenarioError(f"unknown family {self.family!r}; choose from {sorted(_HEAVY_FAMILIES)}")
        if self.shape is None:
            object.__setattr__(self, "shape", HEAVY_DEFAULTS[self.family])
        if not math.isfinite(self.true_value()):
            raise ScenarioError("E|X| is infinite for this shape")

    name = "heavy"

    def params(self):
        return dict(family=self.family, shape=self.shape)

    def true_value(self) -> float:
        return _abs_mean(self.family, float(self.shape))

    def draw_actions(self, n, gen):
        g = GaussianScenario(self.mu1, self.mu2, self.sigma2, 0.0)
        return g.draw_actions(n, gen)

    def draw_rewards(self, n, gen):
        c = float(self.shape)
        if self.family == "student_t":
            x = gen.standard_t(c, n)
        elif self.family == "lomax":
            x = gen.pareto(c, n)
        elif self.family == "frechet":
            x = gen.weibull(c, n) ** -1.0
        else:
            x = (1.0 - (-np.log(gen.random(n))) ** c) / c
        return np.abs(x)


_ABS_MEAN_CACHE: Dict = {}


def _abs_mean(family, shape):
    key = (family, shape)
    if key not in _ABS_MEAN_CACHE:
        with np.errstate(all="ignore"):
            _ABS_MEAN_CACHE[key] = float(_HEAVY_FAMILIES[family](shape).expect(np.abs))
    return _ABS_MEAN_CACHE[key]


def gaussian_true_value(scn: GaussianScenario) -> float:
    return scn.true_value()


def gaussian_moment(scn: GaussianScenario, epsilon: float) -> float:
    return scn.moment(epsilon)


def lomax_true_value(scn: LomaxScenario) -> float:
    return scn.true_value()


def lomax_moment(scn: LomaxScenario, epsilon: float) -> float:
    return scn.moment(epsilon)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardNoiseSpec:
    """Additive non-negative reward noise.

    ``positive_gaussian`` adds ``|N(0, param^2)|``; ``pareto`` adds a Lomax
    draw with shape ``param``.
    """

    kind: str = "none"
    param: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("none", "positive_gaussian", "pareto"):
            raise ValueError(f"unknown reward noise {self.kind!r}")
        if self.kind != "none" and not (self.param is not None and self.param > 0):
            raise ValueError("reward noise parameter must be positive")

    def sample(self, n, gen):
        if self.kind == "positive_gaussian":
            return np.abs(self.param * gen.standard_normal(n))
        if self.kind == "pareto":
            return gen.pareto(self.param, n)
        return np.zeros(n)


NO_NOISE = RewardNoiseSpec()


# --------------------------------------------------------------------------
# trials
# --------------------------------------------------------------------------

def draw_trial(scn, n: int, noise: RewardNoiseSpec = NO_NOISE, rng=None) -> WeightedSamples:
    """One simulated logged dataset as weighted samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator if isinstance(rng, RngHandle) else (rng or RngHandle(0).generator)
    u, w, pt, p0 = scn.draw_actions(n, gen)
    r = scn.draw_rewards(n, gen) if hasattr(scn, "draw_rewards") else scn.reward(u)
    if noise.kind != "none":
        r = r + noise.sample(n, gen)
    return WeightedSamples(w, r, pt, p0)


@dataclass(frozen=True)
class TrialStats:
    """Bias, variance and MSE of repeated estimates.

    ``bias = mean - truth``; the variance uses the ``trials`` denominator so
    that ``mse = bias^2 + variance`` holds exactly.
    """

    bias: float
    variance: float
    mse: float
    n_trials: int
    n_samples: int

    @classmethod
    def from_estimates(cls, estimates, truth, n_samples) -> "TrialStats":
        e = np.asarray(estimates, dtype=np.float64)
        mean = e.mean()
        var = float(np.mean((e - mean) ** 2))
        bias = float(mean - truth)
        return cls(bias, var, bias * bias + var, int(e.size), int(n_samples))


@dataclass
class OpeResult:
    """Output of :func:`run_ope_experiment`."""

    scenario: object
    n: int
    trials: int
    truth: float
    specs: List[EstimatorSpec]
    stats: Dict[EstimatorSpec, TrialStats]
    estimates: Optional[Dict[EstimatorSpec, np.ndarray]] = None

    def __getitem__(self, spec):
        return self.stats[spec]

    def by_kind(self, kind) -> TrialStats:
        for s in self.specs:
            if s.kind == kind:
                return self.stats[s]
        raise KeyError(kind)

    def rows(self):
        for s in self.specs:
            st = self.stats[s]
            yield dict(scenario=self.scenario.name, estimator=s.kind, param=s.param,
                       n=self.n, trials=self.trials, bias=st.bias, variance=st.variance, mse=st.mse)


def _chunks(trials, n):
    size = max(1, min(trials, 2_000_000 // max(n, 1)))
    return [(t, min(t + size, trials)) for t in range(0, trials, size)]


def simulate_estimates(scn, specs: Sequence[EstimatorSpec], n: int, trials: int,
                       noise: RewardNoiseSpec = NO_NOISE, seed: int = 0, threads: int = 1) -> np.ndarray:
    """Estimates of shape ``(len(specs), trials)`` on common random numbers."""
    handle = RngHandle(seed)
    out = np.empty((len(specs), trials))

    def work(bounds):
        t0, t1 = bounds
        m = t1 - t0
        W = np.empty((m, n))
        R = np.empty((m, n))
        PT = np.empty((m, n))
        P0 = np.empty((m, n))
        for i in range(m):
            s = draw_trial(scn, n, noise, handle.substream(t0 + i))
            W[i], R[i], PT[i], P0[i] = s.weight, s.reward, s.target_prob, s.logging_prob
        for j, spec in enumerate(specs):
            out[j, t0:t1] = estimate_batch(spec, W, R, PT, P0)

    chunks = _chunks(trials, n)
    if threads <= 1 or len(chunks) == 1:
        for c in chunks:
            work(c)
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            list(ex.map(work, chunks))
    return out


def run_ope_experiment(scn, specs: Sequence[EstimatorSpec], n: int, trials: int,
                       noise: RewardNoiseSpec = NO_NOISE, seed: int = 0, threads: int = 1,
                       keep_estimates: bool = False) -> OpeResult:
    """Bias / variance / MSE per spec against the clean ground truth."""
    if trials < 2:
        raise ValueError("trials must be >= 2")
    specs = list(specs)
    est = simulate_estimates(scn, specs, n, trials, noise, seed, threads)
    truth = scn.true_value()
    stats_ = {s: TrialStats.from_estimates(est[j], truth, n) for j, s in enumerate(specs)}
    kept = {s: est[j] for j, s in enumerate(specs)} if keep_estimates else None
    return OpeResult(scn, n, trials, truth, specs, stats_, kept)


def tune_specs(scn, kinds: Sequence[str], n: int, trials: int, noise: RewardNoiseSpec = NO_NOISE,
               seed: int = 0, threads: int = 1, grids=None) -> List[EstimatorSpec]:
    """Grid-search every kind on a seed independent of the evaluation seed."""
    grids = dict(DEFAULT_GRIDS, **(grids or {}))
    tune_seed = seed ^ TUNING_SALT
    fixed, tuned = [], {}
    grid_specs = []
    for kind in kinds:
        grid = grids.get(kind)
        if grid is None:
            fixed.append(EstimatorSpec(kind))
        else:
            grid_specs.extend(EstimatorSpec(kind, g) for g in grid)
    scores = {}
    if grid_specs:
        est = simulate_estimates(scn, grid_specs, n, trials, noise, tune_seed, threads)
        truth = scn.true_value()
        for j, s in enumerate(grid_specs):
            scores[s] = float(np.mean((est[j] - truth) ** 2))
    for kind in kinds:
        grid = grids.get(kind)
        if grid is None:
            continue
        res = grid_search(kind, grid, lambda specs: [scores[s] for s in specs], "mse")
        tuned[kind] = res.best
    return [tuned[k] if k in tuned else EstimatorSpec(k) for k in kinds]


def variance_reduction_holds(result: OpeResult, lse_spec=None, ips_spec=None) -> bool:
    """``Var(LSE) <= Var(IPS) (1 + 3 / sqrt(trials))``."""
    lse = result.stats[lse_spec] if lse_spec is not None else result.by_kind("LSE")
    ips = result.stats[ips_spec] if ips_spec is not None else result.by_kind("IPS")
    return lse.variance <= ips.variance * (1.0 + 3.0 / math.sqrt(result.trials))


# --------------------------------------------------------------------------
# mean estimation under a Pareto law
# --------------------------------------------------------------------------

PARETO_SCALE = 1.0 / 3.0
PARETO_SHAPE = 1.5
MEAN_ESTIMATE_NS = (10, 50, 100, 1000, 10000)


def pareto_mean(scale=PARETO_SCALE, shape=PARETO_SHAPE) -> float:
    if not shape > 1:
        raise ScenarioError("Pareto mean is infinite for shape <= 1")
    return shape * scale / (shape - 1.0)


def run_mean_estimation(ns: Sequence[int] = MEAN_ESTIMATE_NS, trials: int = 10000,
                        lambda_magnitude: float = 0.1, seed: int = 0,
                        scale: float = PARETO_SCALE, shape: float = PARETO_SHAPE, threads: int = 1):
    """Sample mean vs LSE on Pareto draws; returns ``[(estimator, n, TrialStats)]``."""
    from .kernels import lse_rows

    truth = pareto_mean(scale, shape)
    handle = RngHandle(seed)
    rows = []
    for k, n in enumerate(ns):
        mc = np.empty(trials)
        lse = np.empty(trials)

        def work(bounds, n=n, k=k, mc=mc, lse=lse):
            t0, t1 = bounds
            Z = np.empty((t1 - t0, n))
            for i in range(t1 - t0):
                q = handle.substream(k * trials + t0 + i).random(n)
                Z[i] = scale * (1.0 - q) ** (-1.0 / shape)
            mc[t0:t1] = Z.mean(axis=1)
            lse[t0:t1] = lse_rows(Z, lambda_magnitude)

        chunks = _chunks(trials, n)
        if threads <= 1:
            for c in chunks:
                work(c)
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                list(ex.map(work, chunks))
        rows.append(("MC", n, TrialStats.from_estimates(mc, truth, n)))
        rows.append(("LSE", n, TrialStats.from_estimates(lse, truth, n)))
    return rows
