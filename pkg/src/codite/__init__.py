"""Conditional distributional treatment effects with kernel mean embeddings and U-statistic regression."""

__version__ = "0.1.0"

from .cme import CmeModel, WitnessGrid, codite_mmd, codite_mmd_batch, fit_cme, select_lambda, witness, witness_grid
from .data import Dataset, SyntheticDataset, SyntheticTruth, gen_ihdp_like, gen_toy, load_csv, pehde, rmse, save_csv
from .errors import ArgumentError, CoditeError, DegenerateInputError, NumericError, ParseError, SchemaError
from .kcd import KcdTestResult, PropensityModel, fit_propensity_klr, kcd_statistic, kcd_test, predict_propensity
from .kernels import KernelSpec, eval_kernel, gram, median_heuristic
from .solvers import SpdFactor, kron_ridge_solve, spd_solve, sym_eigen
from .ustat import (
    GINI,
    MEAN,
    VARIANCE,
    UStatKernel,
    UStatModel,
    conditional_std,
    fit_ustat_regression,
    nw_conditional_ustat,
    predict_ustat,
    select_ustat_hyperparameters,
    standardized_cate_components,
    ukernel,
    ukernel_eval,
)

__all__ = [
    "__version__",
    "ArgumentError",
    "CmeModel",
    "CoditeError",
    "Dataset",
    "DegenerateInputError",
    "GINI",
    "KcdTestResult",
    "KernelSpec",
    "MEAN",
    "NumericError",
    "ParseError",
    "PropensityModel",
    "SchemaError",
    "SpdFactor",
    "SyntheticDataset",
    "SyntheticTruth",
    "UStatKernel",
    "UStatModel",
    "VARIANCE",
    "WitnessGrid",
    "codite_mmd",
    "codite_mmd_batch",
    "conditional_std",
    "eval_kernel",
    "fit_cme",
    "fit_propensity_klr",
    "fit_ustat_regression",
    "gen_ihdp_like",
    "gen_toy",
    "gram",
    "kcd_statistic",
    "kcd_test",
    "kron_ridge_solve",
    "load_csv",
    "median_heuristic",
    "nw_conditional_ustat",
    "pehde",
    "predict_propensity",
    "predict_ustat",
    "rmse",
    "save_csv",
    "select_lambda",
    "select_ustat_hyperparameters",
    "spd_solve",
    "standardized_cate_components",
    "sym_eigen",
    "ukernel",
    "ukernel_eval",
    "witness",
    "witness_grid",
]
