"""Command-line entry point: ``gencc {run,evolve,eval,optimal,parse-check}``.

Exit codes: 0 success, 2 config/validation error, 3 generator error,
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import dsl
from .evaluator import (
    PersistError, SatisfactionReport, load_summary, optimal_min_satisfaction, persist,
    score_experiment,
)
from .evolution import DEFAULT_BUDGET, DEFAULT_THRESHOLD, GuidanceStrategy, run_evolution
from .experiment import run_experiment
from .generator import Generator, GeneratorError, GeneratorSpec
from .netsim import SCENARIOS, SimConfigError, read_trace_jsonl
from .scenarios import ConfigError, ExperimentConfig, RequirementSet, default_config, load_config

EXIT_OK, EXIT_CONFIG, EXIT_GENERATOR, EXIT_IO = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
        if args.scenario and args.scenario != config.scenario:
            config = config.replace(scenario=args.scenario)
    else:
        config = default_config(args.scenario or "broadband")
    return config.replace(seed=args.seed, repetitions=args.repetitions, duration_s=args.duration)


def resolve_utility(source: str) -> tuple[dsl.Expr, str]:
    """Built-in name, path to a file holding an expression, or expression text."""
    if source in dsl.BUILTINS:
        return dsl.BUILTINS[source](), source
    path = Path(source)
    if len(source) < 256 and path.is_file():
        return dsl.parse(path.read_text().strip()), path.stem
    return dsl.parse(source), "expr"


def _check_utility(expr: dsl.Expr):
    report = dsl.validate(expr)
    if not report.valid:
        probe, reason = report.failures[0]
        where = f" at {probe}" if probe is not None else ""
        raise CLIError(f"invalid utility: {reason}{where} ({len(report.failures)} failing probe(s))")


def report_table(report: SatisfactionReport, reqs) -> str:
    lines = [f"{'conn':>4} {'min_mbps':>9} {'max_mbps':>9} {'satisfaction':>12}"]
    for i, ((a, b), s) in enumerate(zip(reqs, report.per_connection)):
        lines.append(f"{i:>4} {a:>9.4g} {b:>9.4g} {s:>12.4f}")
    lines.append(
        f"min-satisfaction mean {report.mean_min_satisfaction:.4f} "
        f"std {report.std_min_satisfaction:.4f} over {len(report.min_satisfaction)} repetition(s)"
    )
    lines.append(f"optimal s* {report.optimal_min_satisfaction:.5f}  performance {report.performance:.4f}")
    if report.faulted_repetitions:
        lines.append(f"faulted repetitions: {report.faulted_repetitions}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    config = _experiment_config(args)
    expr, name = resolve_utility(args.utility)
    _check_utility(expr)
    report, traces = run_experiment(config, expr, workers=args.workers)
    exp_id = args.experiment_id or f"run-{config.scenario}-{name}-{config.config_hash()[:8]}"
    record = persist(report, traces, exp_id, args.out, requirements=config.requirements.pairs,
                     config_hash=config.config_hash(),
                     extra={"utility": dsl.to_text(expr), "config": config.to_dict()})
    out = Path(args.out) / exp_id
    if not args.no_plots:
        from .plotting import plot_rates, plot_satisfaction
        suffix = "" if record["record"] == 0 else f"-r{record['record']}"
        plot_satisfaction(report, out / f"satisfaction{suffix}.png")
        plot_rates(traces[0], out / f"rates-run-0{suffix}.png")
    if args.json:
        print(json.dumps({"experiment_id": exp_id, **record["report"]}, indent=2))
    else:
        print(f"experiment {exp_id} ({config.scenario}, utility {name})")
        print(report_table(report, config.requirements))
        print(f"results: {out}")
    return EXIT_OK


def _generator_spec(args) -> GeneratorSpec:
    kind = args.generator
    if kind.startswith("fixed:"):
        exprs = tuple(e.strip() for e in kind[len("fixed:"):].split(";") if e.strip())
        return GeneratorSpec(kind="fixed", expressions=exprs)
    if kind == "mutator":
        seed = args.generator_seed if args.generator_seed is not None else (args.seed or 0)
        return GeneratorSpec(kind="mutator", seed=seed)
    if kind == "remote":
        return GeneratorSpec.remote_from_env(
            endpoint=args.endpoint, model=args.model, token_env=args.token_var,
            timeout=args.timeout, temperature=args.temperature,
        )
    raise GeneratorError(f"unknown generator {kind!r}; use mutator, remote or fixed:EXPR;EXPR")


def cmd_evolve(args) -> int:
    config = _experiment_config(args)
    strategy = GuidanceStrategy.parse(args.strategy)
    try:
        generator = Generator(_generator_spec(args))
        generator.check()
    except GeneratorError as exc:
        raise CLIError(f"generator: {exc}", EXIT_GENERATOR) from None
    exp_id = args.experiment_id or f"evolve-{config.scenario}-{strategy.value}-{config.config_hash()[:8]}"
    out = Path(args.out) / exp_id
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"{out}: {exc.strerror}", EXIT_IO) from None

    print(f"{'gen':>3} {'valid':>5} {'candidate':>10} {'best':>8} {'perf':>6}  expression")

    def show(entry):
        cand = entry["candidate"]
        text = cand["expression"] or cand["error"] or ""
        if len(text) > 60:
            text = text[:57] + "..."
        print(f"{entry['generation']:>3} {str(cand['valid']):>5} {cand['mean_min_satisfaction']:>10.4f} "
              f"{entry['best_mean_min_satisfaction']:>8.4f} {entry['best_performance']:>6.3f}  {text}")
        sys.stdout.flush()

    result = run_evolution(strategy, config, generator, budget=args.budget, threshold=args.threshold,
                           out_dir=out, on_generation=show)
    with (out / "generations.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["generation", "valid", "candidate_mean_min_satisfaction",
                         "best_mean_min_satisfaction", "best_performance", "expression"])
        for e in result.log.entries:
            c = e["candidate"]
            writer.writerow([e["generation"], c["valid"], c["mean_min_satisfaction"],
                             e["best_mean_min_satisfaction"], e["best_performance"], c["expression"]])
    optimal = optimal_min_satisfaction(config.link.capacity, config.requirements)
    if not args.no_plots:
        from .plotting import plot_best_curve
        plot_best_curve(result.log.best_curve(), optimal, out / "best_curve.png")
    if result.best is None:
        print("no valid candidate found")
    else:
        print(f"best: {dsl.to_text(result.best.expr)}")
        print(f"best mean min-satisfaction {result.best.score:.4f}, "
              f"performance {result.best.performance.performance:.4f} (s* {optimal:.5f})")
    print(f"results: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    summary = load_summary(args.results)
    base = Path(args.results)
    base = base if base.is_dir() else base.parent
    records = summary["records"]
    try:
        record = records[args.record]
    except IndexError:
        raise CLIError(f"record {args.record} not found ({len(records)} record(s))") from None
    traces = [read_trace_jsonl(base / name) for name in record["traces"]]
    reqs = [tuple(p) for p in record["requirements"]]
    report = score_experiment(traces, reqs, traces[0].link.capacity, warmup_rtts=args.warmup_rtts)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report_table(report, reqs))
    return EXIT_OK


def cmd_optimal(args) -> int:
    if args.scenario:
        config = default_config(args.scenario)
        capacity = args.capacity if args.capacity is not None else config.link.capacity
        reqs = config.requirements if args.min is None else None
    else:
        capacity = args.capacity
        reqs = None
    if capacity is None:
        raise CLIError("--capacity or --scenario is required")
    if reqs is None:
        if not args.min:
            raise CLIError("--min is required unless --scenario is given")
        maxs = args.max or [args.ratio * a for a in args.min]
        if len(maxs) != len(args.min):
            raise CLIError("--max needs one value per --min value")
        reqs = RequirementSet(tuple(zip(args.min, maxs)))
    print(f"{optimal_min_satisfaction(capacity, reqs):.6g}")
    return EXIT_OK


def cmd_parse_check(args) -> int:
    expr = dsl.parse(args.expression)
    report = dsl.validate(expr)
    if args.json:
        print(json.dumps({
            "canonical": dsl.to_text(expr),
            "valid": report.valid,
            "failures": [{"probe": None if p is None else vars(p), "reason": r} for p, r in report.failures],
        }, indent=2))
    else:
        print(dsl.to_text(expr))
        if report.valid:
            print("valid")
        else:
            print(f"invalid: {len(report.failures)} failing probe(s); first: {report.failures[0][1]}")
    return EXIT_OK if report.valid else EXIT_CONFIG


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="experiment config file (YAML)")
    p.add_argument("--scenario", choices=sorted(SCENARIOS), help="network scenario")
    p.add_argument("--seed", type=int, help="base seed; repetition k uses seed+k")
    p.add_argument("--repetitions", type=int, help="repetitions per evaluation")
    p.add_argument("--duration", type=float, help="simulated seconds per repetition")
    p.add_argument("--out", default="results", help="results directory (default: results)")
    p.add_argument("--experiment-id", help="subdirectory name under --out")
    p.add_argument("--no-plots", action="store_true", help="skip writing PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gencc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="evaluate one utility function")
    _add_experiment_flags(p)
    p.add_argument("--utility", default="hercules",
                   help="built-in name (hercules, vivace), expression text, or file")
    p.add_argument("--workers", type=int, default=1, help="parallel repetitions")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evolve", help="generate and select utility functions")
    _add_experiment_flags(p)
    p.add_argument("--strategy", default="evolve", help="zero-shot, one-shot, math-cot or evolve")
    p.add_argument("--generator", default="mutator", help="mutator, remote, or fixed:EXPR;EXPR;...")
    p.add_argument("--generator-seed", type=int, help="mutator seed (default: --seed)")
    p.add_argument("--endpoint", help="chat-completion URL (default: $GENCC_LLM_ENDPOINT)")
    p.add_argument("--model", help="model name (default: $GENCC_LLM_MODEL)")
    p.add_argument("--token-var", help="env variable holding the API token (default: $GENCC_LLM_TOKEN_VAR)")
    p.add_argument("--timeout", type=float, default=60.0, help="remote request timeout in seconds")
    p.add_argument("--temperature", type=float, default=1.0, help="remote sampling temperature")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="maximum generations")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD,
                   help="stop at this fraction of the optimum")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("eval", help="re-score stored traces without simulating")
    p.add_argument("results", help="results/<id> directory or its summary.json")
    p.add_argument("--record", type=int, default=-1, help="record index (default: latest)")
    p.add_argument("--warmup-rtts", type=float, default=2.0, help="warm-up excluded from averages")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("optimal", help="optimal max-min satisfaction s*")
    p.add_argument("--capacity", type=float, help="bottleneck capacity (Mbps)")
    p.add_argument("--scenario", choices=sorted(SCENARIOS), help="use the scenario's link and requirements")
    p.add_argument("--min", type=float, nargs="+", help="minimum requirements (Mbps)")
    p.add_argument("--max", type=float, nargs="+", help="maximum requirements (default: ratio x min)")
    p.add_argument("--ratio", type=float, default=1.5, help="max/min ratio when --max is absent")
    p.set_defaults(func=cmd_optimal)

    p = sub.add_parser("parse-check", help="parse, print and validate an expression")
    p.add_argument("expression")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_parse_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (dsl.DSLError, ConfigError, SimConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GeneratorError as exc:
        print(f"generator error: {exc}", file=sys.stderr)
        return EXIT_GENERATOR
    except (PersistError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
