"""Run a utility function (or fixed rates) over an experiment's repetitions."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from .dsl import Expr
from .evaluator import SatisfactionReport, optimal_allocation, score_experiment
from .netsim import FlowSpec, RunTrace, run
from .scenarios import ExperimentConfig


def flow_specs(config: ExperimentConfig, utility: Expr) -> list[FlowSpec]:
    ctl = config.controller_config
    return [FlowSpec(requirement=req, utility=utility, config=ctl) for req in config.requirements]


def fixed_rate_specs(config: ExperimentConfig, rates: list[float]) -> list[FlowSpec]:
    return [FlowSpec(requirement=req, fixed_rate=r) for req, r in zip(config.requirements, rates)]


def _one(args) -> RunTrace:
    link, flows, duration, seed = args
    return run(link, flows, duration, seed)


def simulate(config: ExperimentConfig, flows: list[FlowSpec], workers: int = 1) -> list[RunTrace]:
    jobs = [(config.link, flows, config.duration_s, seed) for seed in config.seeds()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_one, jobs))
    return [_one(job) for job in jobs]


def run_experiment(config: ExperimentConfig, utility: Expr,
                   workers: int = 1) -> tuple[SatisfactionReport, list[RunTrace]]:
    traces = simulate(config, flow_specs(config, utility), workers)
    return score_experiment(traces, config.requirements, config.link.capacity), traces


def replay_optimal(config: ExperimentConfig,
                   workers: int = 1) -> tuple[SatisfactionReport, list[RunTrace]]:
    """Send at the max-min optimal allocation with fixed-rate senders."""
    rates = optimal_allocation(config.link.capacity, config.requirements)
    traces = simulate(config, fixed_rate_specs(config, rates), workers)
    return score_experiment(traces, config.requirements, config.link.capacity), traces
