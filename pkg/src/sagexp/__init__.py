"""Safe guaranteed exploration for nonlinear systems."""

from .algorithms import ExploreConfig, RunResult, run, run_goal_directed, run_sageoc, run_sagempc
from .dynamics import DynModel, TerminalSet
from .gp import BetaSchedule, ConfBounds, GpModel, GridSpec, Kernel, PriorMean
from .harness import Environment, crafted_env, generate_env
from .solver import DistSpec, NlpProblem, NlpSolution, build_nlp, sqp_solve

__version__ = "0.1.0"

__all__ = [
    "BetaSchedule", "ConfBounds", "DistSpec", "DynModel", "Environment",
    "ExploreConfig", "GpModel", "GridSpec", "Kernel", "NlpProblem",
    "NlpSolution", "PriorMean", "RunResult", "TerminalSet", "build_nlp",
    "crafted_env", "generate_env", "run", "run_goal_directed", "run_sageoc",
    "run_sagempc", "sqp_solve", "__version__",
]
