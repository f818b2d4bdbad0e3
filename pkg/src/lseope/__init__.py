"""Log-sum-exponential estimators for off-policy evaluation and learning."""
__version__ = "0.1.0"

from ._accel import backend_name
from .data import (LBFDataset, LBFRecord, LinearSoftmaxPolicy, Policy, UniformPolicy, WeightedSample,
                   WeightedSamples, compute_weighted_samples, load_lbf_csv, save_lbf_csv,
                   supervised_to_bandit)
from .estimators import (EstimateResult, EstimatorSpec, estimate, estimate_es, estimate_ips, estimate_ips_tr,
                         estimate_ix, estimate_ls, estimate_ls_lin, estimate_lse, estimate_os, estimate_pm,
                         estimate_snips, lse_gradient_weights, lse_kl_regularized_value, lse_limits_check,
                         lse_shrinkage_gap, run_estimator)
from .lambda_select import (LambdaSelectConfig, empirical_nu, f_of_epsilon, grid_search, lambda_adaptive,
                            lambda_data_driven, lambda_noisy_reward)
from .rng import RngHandle

__all__ = [name for name in dir() if not name.startswith("_")]
