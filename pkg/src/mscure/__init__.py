"""Multistate cure models: EM fitting, standard errors, dynamic prediction."""

__version__ = "0.1.0"

from .model import FitConfig, ModelSpec, Transition, load_model_spec, validate_model_spec
from .dataprep import (
    ExtendedTable,
    build_q2_table,
    determine_known_noncured,
    long_to_extended,
    prepare_tables,
    wide_to_long,
)
from .cox import (
    BaselineHazard,
    CoxCoefficients,
    breslow_baseline,
    cumulative_hazard,
    fit_weighted_cox,
    row_likelihood,
)
from .logistic import CureCoefficients, cure_probability, fit_weighted_logistic
from .em import FittedModel, e_step, em_fit, m_step, observed_loglik, posterior_weight
from .simulate import PiecewiseHazard, TrueModel, load_true_model, simulate_cohort
from .inference import (
    BootstrapResult,
    InformationMatrix,
    bootstrap_se,
    oakes_information,
    score_components,
    weight_derivatives,
)
from .predict import (
    History,
    PredictionCurve,
    dynamic_predict,
    posterior_cure_given_history,
    transition_probability_matrix,
)

__all__ = [
    "BaselineHazard",
    "BootstrapResult",
    "CoxCoefficients",
    "CureCoefficients",
    "ExtendedTable",
    "FitConfig",
    "FittedModel",
    "History",
    "InformationMatrix",
    "ModelSpec",
    "PiecewiseHazard",
    "PredictionCurve",
    "Transition",
    "TrueModel",
    "bootstrap_se",
    "breslow_baseline",
    "build_q2_table",
    "cumulative_hazard",
    "cure_probability",
    "determine_known_noncured",
    "dynamic_predict",
    "e_step",
    "em_fit",
    "fit_weighted_cox",
    "fit_weighted_logistic",
    "load_model_spec",
    "load_true_model",
    "long_to_extended",
    "m_step",
    "oakes_information",
    "observed_loglik",
    "posterior_cure_given_history",
    "posterior_weight",
    "prepare_tables",
    "row_likelihood",
    "score_components",
    "simulate_cohort",
    "transition_probability_matrix",
    "validate_model_spec",
    "weight_derivatives",
    "wide_to_long",
]
