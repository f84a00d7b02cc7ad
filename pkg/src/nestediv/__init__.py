"""Nested instrumental-variable analysis: switcher and always-complier effects.

Typical use::

    from nestediv import ObservationTable, make_folds, fit_nuisances, estimating_equation

    table = ObservationTable.from_csv("trial.csv")
    folds = make_folds(table.n, 5, table.z, seed=7)
    nuis = fit_nuisances(table, folds)
    report = estimating_equation(table, nuis, "SWATE")
"""

from .core import (
    Arm,
    DegenerateError,
    EmptyCellError,
    FoldAssignment,
    InputError,
    InstrumentCode,
    NestedIVError,
    NotFactorizable,
    ObservationTable,
    Stratum,
    TooFewRowsPerCell,
    ValidationReport,
    chol_jitter,
    design_matrix,
    make_folds,
    substream,
    validate,
)
from .estimators import (
    ConditionalContrasts,
    Estimand,
    EstimateReport,
    Method,
    StrataProfile,
    adjusted_compliance,
    conditional_contrasts,
    ee_acoate,
    ee_swate,
    eif_swate,
    eif_values,
    estimate,
    estimating_equation,
    one_step,
    onestep_acoate,
    onestep_swate,
    strata_profile,
    wald,
    wald_acoate,
    wald_swate,
)
from .homogeneity import TestReport, gradient_D, ks_test, omega_hat, projection_test
from .nuisance import CrossFitNuisances, Family, GlmModel, LearnerSpec, fit_glm, fit_nuisances, predict_nuisance

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
