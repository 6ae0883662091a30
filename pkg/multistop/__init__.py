"""
multistop - Optimal multiple stopping of extreme-value sequences

Core idea:
    Choose m ordered stopping times on X_1..X_n to maximize the expected
    maximum of the stopped values. For large n the problem converges to a
    Poisson limit whose stopping curves u^1..u^m solve a recursive system of
    first-order ODEs; the thresholds gamma^j derived from them give
    asymptotically optimal rules for the finite problem.

Usage:
    from multistop import load_model, backward_thresholds, optimal_value

    model = load_model("models/uniform01.yaml").require_discrete()
    table = backward_thresholds(model, m=1)
    optimal_value(table)            # 0.6953125 for n = 3

    from multistop import gumbel_intensity, solve_curve_family, eval_curve
    family = solve_curve_family(gumbel_intensity(), m=2)
    eval_curve(family, 1, 0.5, float("-inf"))   # ln(0.5)
"""

from .schema import (
    MultistopError, ConfigError, DomainError, QuadratureError, SolverError, ClassConditionError,
    QuadSpec, SolveSpec, RunConfig, RunRecord, Event, hash_content,
)
from .core import (
    NEG_INF, ClassTag, IntensityModel, StoppingCurveFamily, ThresholdFamily, InverseTable,
    MarkedPointSet, MultiStopResult, eval_curve, eval_threshold,
)
from .models import (
    ClassIntensity, ArrivalIntensity, ShiftedFrechetIntensity, DiscreteModel, BaseDistribution,
    FiniteSupport, DomainTag,
    gumbel_intensity, frechet_intensity, weibull_intensity, load_model, model_from_document,
)
from .dp_oracle import ThresholdTable, backward_thresholds, optimal_value, run_policy
from .ode_solver import solve_curve_family, invert_level, thresholds_from_family
from .closed_form import ClosedFormSolution, build_case, build_from_tag, eval_u, eval_gamma
from .simulate import (
    PolicySpec, EstimateReport, sample_poisson, stop_poisson, sample_discrete, stop_discrete,
    estimate_value, convergence_study, limit_families, read_study_csv, study_csv,
)
from .logger import RunLog
from .replayer import Replayer, replay_run, compare_runs

__version__ = "0.1.0"
__all__ = [
    "MultistopError", "ConfigError", "DomainError", "QuadratureError", "SolverError", "ClassConditionError",
    "QuadSpec", "SolveSpec", "RunConfig", "RunRecord", "Event", "hash_content",
    "NEG_INF", "ClassTag", "IntensityModel", "StoppingCurveFamily", "ThresholdFamily", "InverseTable",
    "MarkedPointSet", "MultiStopResult", "eval_curve", "eval_threshold",
    "ClassIntensity", "ArrivalIntensity", "ShiftedFrechetIntensity", "DiscreteModel", "BaseDistribution",
    "FiniteSupport", "DomainTag",
    "gumbel_intensity", "frechet_intensity", "weibull_intensity", "load_model", "model_from_document",
    "ThresholdTable", "backward_thresholds", "optimal_value", "run_policy",
    "solve_curve_family", "invert_level", "thresholds_from_family",
    "ClosedFormSolution", "build_case", "build_from_tag", "eval_u", "eval_gamma",
    "PolicySpec", "EstimateReport", "sample_poisson", "stop_poisson", "sample_discrete", "stop_discrete",
    "estimate_value", "convergence_study", "limit_families", "read_study_csv", "study_csv",
    "RunLog", "Replayer", "replay_run", "compare_runs",
]
