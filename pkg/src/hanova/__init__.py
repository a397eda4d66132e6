"""Hierarchical penalized ANOVA for sparse, unbalanced multi-way tables.

Cell means are fitted order by order: the order-k interaction model is
shrunk toward the order k-1 fit with a penalty derived from estimated
variance components.
"""
from ._kernels import BACKEND
from .errors import ConvergenceError, HanovaError, ParseError, ValidationError
from .evaluation import (CvResult, SimInstance, SimSpec, UnitSimSpec, cross_validate, rmse,
                         run_experiment, simulate, simulate_units)
from .model_io import load_model, save_model
from .preprocess import (UnitRecords, UnitVariances, aggregate_cells, estimate_unit_variances,
                         load_units, unit_shrinkage)
from .solver import (INF, ConvergenceOpts, HanovaFit, final_blend, fit_hanova, fit_order,
                     predict, wpls_objective)
from .table import FactorSpec, SparseTable, load_cells, margin_sum, save_cells
from .variance import (VarianceComponents, empirical_lambdas, estimate_sigmas,
                       lambdas_from_sigmas, projection_sq_norm, subspace_dim)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "INF", "ConvergenceError", "ConvergenceOpts", "CvResult", "FactorSpec",
    "HanovaError", "HanovaFit", "ParseError", "SimInstance", "SimSpec", "SparseTable",
    "UnitRecords", "UnitSimSpec", "UnitVariances", "ValidationError", "VarianceComponents",
    "aggregate_cells", "cross_validate", "empirical_lambdas", "estimate_sigmas",
    "estimate_unit_variances", "final_blend", "fit_hanova", "fit_order", "lambdas_from_sigmas",
    "load_cells", "load_model", "load_units", "margin_sum", "predict", "projection_sq_norm",
    "rmse", "run_experiment", "save_cells", "save_model", "simulate", "simulate_units",
    "subspace_dim", "unit_shrinkage", "wpls_objective",
]
