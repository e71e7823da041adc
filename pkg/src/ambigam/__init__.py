"""Linear, additive and additive mixed models with a two-step test for
interactions that smooth main effects of dependent covariates can absorb."""

from .am import AmFit, AmSpec, fit_am, predict
from .ambiguity import (ABSENT, AMBIGUOUS, ROBUST, AmbiguityReport, classify, compare_models,
                        product, two_step_test)
from .data import Dataset, center, dichotomize, from_arrays, load_csv, schema_for, write_csv
from .ols import DesignSpec, anova_two_way, build_design, fit_lm, fit_ols, parse_formula
from .smooth import fit_fixed_lambda, rank_check, select_lambda, tps_basis

__version__ = "0.1.0"

__all__ = [
    "ABSENT", "AMBIGUOUS", "ROBUST", "AmFit", "AmSpec", "AmbiguityReport", "Dataset", "DesignSpec",
    "anova_two_way", "build_design", "center", "classify", "compare_models", "dichotomize",
    "fit_am", "fit_fixed_lambda", "fit_lm", "fit_ols", "from_arrays", "load_csv", "parse_formula",
    "predict", "product", "rank_check", "schema_for", "select_lambda", "tps_basis",
    "two_step_test", "write_csv",
]
