"""Category-diverse evolutionary search over executable priority-function heuristics."""

from cdeoh.dsl import EvalError, EvalLimits, ParseError, Program, Value, evaluate, parse, render_grammar
from cdeoh.evolution import (
    Candidate,
    CategoryPool,
    EvolutionConfig,
    EvolutionEngine,
    GenerationStats,
    Population,
    joint_score,
    run_evolution,
    select_next_generation,
)
from cdeoh.llm import PromptContext, PromptKind, ProviderConfig, make_provider
from cdeoh.problems import (
    BenchmarkSuite,
    CandidateFailure,
    EvalReport,
    ObpInstance,
    TspInstance,
    evaluate_candidate,
    gen_obp,
    gen_tsp,
    make_obp_suite,
    make_tsp_suite,
    obp_lower_bound,
    simulate_obp,
    simulate_tsp,
    tsp_reference,
)

__all__ = [
    "BenchmarkSuite",
    "Candidate",
    "CandidateFailure",
    "CategoryPool",
    "EvalError",
    "EvalLimits",
    "EvalReport",
    "EvolutionConfig",
    "EvolutionEngine",
    "GenerationStats",
    "ObpInstance",
    "ParseError",
    "Population",
    "Program",
    "PromptContext",
    "PromptKind",
    "ProviderConfig",
    "TspInstance",
    "Value",
    "evaluate",
    "evaluate_candidate",
    "gen_obp",
    "gen_tsp",
    "joint_score",
    "make_obp_suite",
    "make_provider",
    "make_tsp_suite",
    "obp_lower_bound",
    "parse",
    "render_grammar",
    "run_evolution",
    "select_next_generation",
    "simulate_obp",
    "simulate_tsp",
    "tsp_reference",
]

__version__ = "0.1.0"
