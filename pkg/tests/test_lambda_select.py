import math

import numpy as np
import pytest

from lseope.estimators import EstimatorSpec, estimate_ips
from lseope.lambda_select import (ND_BRACKET, LambdaSelectConfig, empirical_nu, f_of_epsilon, grid_search,
                                  lambda_adaptive, lambda_data_driven, lambda_data_driven_detail,
                                  lambda_noisy_reward, noisy_reward_objective)

from conftest import random_samples

# Reference values computed with mpmath at 30 digits from the closed form.
F_ONE = 3.80755867782952334
F_HALF = 22.3289388883767118
LAMBDA_D_PLUGIN = 0.208400186847390522


def test_config_validation():
    with pytest.raises(ValueError):
        LambdaSelectConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        LambdaSelectConfig(delta=1.0)
    with pytest.raises(ValueError):
        LambdaSelectConfig(tv_estimate=-0.1)
    with pytest.raises(ValueError):
        LambdaSelectConfig(grid=())
    with pytest.raises(ValueError):
        LambdaSelectConfig(grid=(0.1, 0.0))


def test_empirical_nu_examples(gen):
    assert empirical_nu([1.0, 1.0, 1.0], 0.3) == 1.0
    assert empirical_nu([0.0, 2.0], 1.0) == 2.0
    s = random_samples(gen)
    assert empirical_nu(s, 0.0) == pytest.approx(estimate_ips(s), rel=1e-14)


def test_f_of_epsilon():
    assert f_of_epsilon(1.0) == pytest.approx(F_ONE, rel=1e-14)
    assert f_of_epsilon(1.0) == pytest.approx(4.0 * math.sqrt(math.e / 3.0), rel=1e-14)
    assert f_of_epsilon(0.5) == pytest.approx(F_HALF, rel=1e-13)
    with pytest.raises(ValueError):
        f_of_epsilon(0.0)


def test_lambda_d_plugin():
    ch = lambda_data_driven_detail(LambdaSelectConfig(1.0, 0.05), 1.0, 1000)
    assert abs(ch.magnitude - LAMBDA_D_PLUGIN) < 1e-6
    assert not ch.clamped


def test_lambda_d_clamp_and_errors():
    ch = lambda_data_driven_detail(LambdaSelectConfig(1.0, 0.05), 1e-3, 5)
    assert ch.magnitude == 1.0 and ch.clamped and ch.unclamped > 1.0
    with pytest.raises(ValueError):
        lambda_data_driven(np.zeros(10))


def test_lambda_d_scaling_laws(gen):
    cfg = LambdaSelectConfig(0.5, 0.05)
    a = lambda_data_driven_detail(cfg, 2.0, 1000).unclamped
    b = lambda_data_driven_detail(cfg, 2.0, 2000).unclamped
    assert b / a == pytest.approx(2.0 ** (-1.0 / 1.5), rel=1e-12)
    z = gen.uniform(0.5, 3.0, 400)
    c = 3.0
    raw = lambda s: lambda_data_driven_detail(cfg, empirical_nu(s, 0.5), s.size).unclamped
    assert raw(c * z) == pytest.approx(raw(z) / c, rel=1e-12)
    assert lambda_data_driven(z, cfg) <= 1.0


def test_lambda_adaptive():
    assert lambda_adaptive(1, 1.0) == 1.0
    got = [round(lambda_adaptive(n, 1.0), 4) for n in (16, 64, 128, 256, 512)]
    assert got == [0.25, 0.125, 0.0884, 0.0625, 0.0442]
    assert lambda_adaptive(100, 0.0) == pytest.approx(0.01, rel=1e-14)
    for n in (1, 7, 100, 12345):
        assert lambda_adaptive(n, 1.0) * math.sqrt(n) == pytest.approx(1.0, rel=1e-15)


def test_noisy_rule_degenerate():
    ch = lambda_noisy_reward(LambdaSelectConfig(tv_estimate=0.0), 1.0)
    assert ch.degenerate and ch.magnitude == ND_BRACKET[0]


def test_noisy_rule_matches_dense_grid():
    cfg = LambdaSelectConfig(1.0, tv_estimate=1.0)
    ch = lambda_noisy_reward(cfg, 1.0)
    grid = np.linspace(1e-4, 10.0, 2_000_001)
    oracle = (grid / 2.0 + 2.0 * np.exp(grid) / grid).min()
    assert ch.objective <= oracle + 1e-6
    assert ch.objective == pytest.approx(float(noisy_reward_objective(ch.magnitude, 1.0, 1.0, 1.0)), rel=1e-14)


def test_noisy_rule_minimal_against_probes(gen):
    for eps, nu, tv in [(1.0, 3.0, 0.1), (0.5, 0.2, 0.01), (0.0, 1.0, 0.5)]:
        cfg = LambdaSelectConfig(eps, tv_estimate=tv)
        ch = lambda_noisy_reward(cfg, nu)
        probes = np.exp(gen.uniform(math.log(ND_BRACKET[0]), math.log(ND_BRACKET[1]), 100))
        vals = noisy_reward_objective(probes, nu, eps, tv)
        assert ch.objective <= vals.min() + 1e-12
        ends = noisy_reward_objective(np.array(ND_BRACKET), nu, eps, tv)
        assert ch.objective <= ends.min()


def test_grid_search_single_point():
    res = grid_search("LSE", [0.3], lambda specs: [1.0])
    assert res.best == EstimatorSpec("LSE", 0.3)


def test_grid_search_picks_best_and_breaks_ties():
    scores = {0.01: 2.0, 0.1: 1.0, 1.0: 1.0, 10.0: 5.0}
    res = grid_search("LSE", list(scores), lambda specs: [scores[s.param] for s in specs])
    assert res.best.param == 0.1
    acc = {0.01: 0.5, 0.1: 0.9, 1.0: 0.9}
    res = grid_search("LSE", list(acc), lambda specs: [acc[s.param] for s in specs], criterion="accuracy")
    assert res.best.param == 0.1


def test_grid_search_ignores_nan():
    res = grid_search("IX", [0.1, 1.0], lambda specs: [float("nan"), 3.0])
    assert res.best.param == 1.0
