"""Utility-function search for multi-requirement rate control."""
from .dsl import HerculesParams, StatVector, evaluate, hercules, parse, to_text, validate
from .evaluator import SatisfactionReport, optimal_min_satisfaction, score_experiment
from .evolution import GuidanceStrategy, run_evolution
from .generator import Generator, GeneratorSpec
from .netsim import LinkConfig, run, scenario_link
from .scenarios import ExperimentConfig, RequirementSet, load_config, paper_requirements

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "Generator", "GeneratorSpec", "GuidanceStrategy", "HerculesParams",
    "LinkConfig", "RequirementSet", "SatisfactionReport", "StatVector", "evaluate", "hercules",
    "load_config", "optimal_min_satisfaction", "paper_requirements", "parse", "run",
    "run_evolution", "scenario_link", "score_experiment", "to_text", "validate",
]
