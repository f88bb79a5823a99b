"""Guidance strategies and the generate-evaluate-select loop."""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import dsl
from .dsl import Expr, to_text
from .evaluator import SatisfactionReport
from .experiment import run_experiment
from .generator import GeneratorError, GenerationResult
from .scenarios import ExperimentConfig

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 25
DEFAULT_THRESHOLD = 0.95


class GuidanceStrategy(enum.Enum):
    ZERO_SHOT = "zero-shot"
    ONE_SHOT = "one-shot"
    MATH_COT = "math-cot"
    EVOLVE = "evolve"

    @classmethod
    def parse(cls, name: str) -> GuidanceStrategy:
        key = name.strip().lower().replace("_", "-")
        aliases = {"zeroshot": "zero-shot", "oneshot": "one-shot", "mathcot": "math-cot", "cot": "math-cot"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}") from None


@dataclass
class Candidate:
    expr: Expr | None
    source: str
    generation: int
    performance: SatisfactionReport | None = None
    valid: bool = False
    error: str | None = None
    text: str | None = None

    @property
    def least_satisfied(self) -> tuple[int, float] | None:
        return self.performance.least_satisfied if self.performance else None

    @property
    def score(self) -> float:
        return self.performance.mean_min_satisfaction if self.performance else 0.0

    def summary(self) -> dict:
        least = self.least_satisfied
        return {
            "expression": to_text(self.expr) if self.expr is not None else self.text,
            "source": self.source,
            "valid": self.valid,
            "error": self.error,
            "mean_min_satisfaction": self.score,
            "performance": self.performance.performance if self.performance else 0.0,
            "least_satisfied": list(least) if least else None,
        }


@dataclass
class GenerationLog:
    entries: list = field(default_factory=list)

    def append(self, generation: int, candidate: Candidate, best: Candidate | None):
        best_score = best.score if best else 0.0
        if self.entries and best_score < self.entries[-1]["best_mean_min_satisfaction"]:
            raise AssertionError("best-so-far score decreased")
        self.entries.append({
            "generation": generation,
            "candidate": candidate.summary(),
            "best_expression": to_text(best.expr) if best else None,
            "best_mean_min_satisfaction": best_score,
            "best_performance": best.performance.performance if best else 0.0,
        })

    def best_curve(self) -> list[float]:
        return [e["best_mean_min_satisfaction"] for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def write_jsonl(self, path):
        with Path(path).open("w") as fh:
            for entry in self.entries:
                fh.write(json.dumps(entry) + "\n")


# --- Prompts ---------------------------------------------------------------

TASK = """\
You are designing the utility function of an online-learning congestion
control protocol.  Every connection sends at a constant rate during each
monitor interval, measures loss and RTT from acknowledgments, and moves its
rate along the gradient of the utility function you write.  All connections
share one bottleneck and run the same function, each with its own rate
requirements.  The goal is to maximize the worst-case satisfaction ratio
(average rate divided by minimum requirement) across the connections."""

GRAMMAR = """\
Language: a single arithmetic expression.
  operators: + - * / ^ (power, right-associative), unary minus, parentheses
  functions: arctan(e) exp(e) log(e) sqrt(e) abs(e) max(e, e) min(e, e)
  constant:  pi
Variables:
  x         current sending rate (Mbps)
  a         the connection's minimum rate requirement (Mbps)
  b         the connection's maximum rate requirement (Mbps)
  xn        normalized rate (x - a) / (b - a)
  L         loss rate in the interval (fraction 0..1)
  rtt_grad  RTT gradient over the interval (ms per ms)
  rtt_dev   standard deviation of RTT in the interval (ms)
The expression must use x, and must stay finite for any x > 0, any loss
rate, and RTT gradients of either sign."""

OUTPUT_FORMAT = """\
Output format: reply with exactly one expression in the language above,
inside a ```utility fenced block, and nothing else: no prose, no comments."""

MATH_PROPERTIES = """\
Required analytical properties:
  1. With zero loss and zero RTT growth the function is strictly increasing in x.
  2. Loss, RTT-gradient and RTT-deviation penalties grow with x, so that a
     congested link pushes every sender down.
  3. The penalty weight depends on xn through a bounded, increasing scaling
     in (0, 1): connections below their minimum are penalized less than
     connections above it.
  4. The function is continuous and smooth in x, apart from max/min clamps
     on penalty terms.
Steps:
  1. Choose a concave reward term in x.
  2. Choose penalty terms for L, rtt_grad (only when positive) and rtt_dev.
  3. Choose the scaling in xn and multiply it into the penalties.
  4. Check each property above against your expression before answering."""


def _scenario_block(context: dict) -> str:
    config: ExperimentConfig = context["config"]
    link = config.link
    lines = [
        f"Scenario: {config.scenario}, bottleneck {link.capacity:g} Mbps, base RTT {link.base_rtt:g} ms.",
        "Connections (minimum, maximum requirement in Mbps):",
    ]
    for i, (a, b) in enumerate(config.requirements):
        lines.append(f"  #{i}: a={a:.4g}, b={b:.4g}")
    return "\n".join(lines)


def _utility_block(expr: Expr) -> str:
    return f"```utility\n{to_text(expr)}\n```"


def build_prompt(strategy: GuidanceStrategy, context: dict) -> str:
    """Prompt text for one generation.

    ``context`` carries ``config`` (the experiment), ``generation`` and, for
    the evolve strategy, ``best`` (a scored :class:`Candidate`).
    """
    parts = [TASK, _scenario_block(context), GRAMMAR]
    if strategy is GuidanceStrategy.ONE_SHOT:
        parts.append("Example utility function (Hercules):\n" + _utility_block(dsl.hercules()))
    elif strategy is GuidanceStrategy.MATH_COT:
        parts.append(MATH_PROPERTIES)
    elif strategy is GuidanceStrategy.EVOLVE:
        best: Candidate | None = context.get("best")
        if best is None or best.performance is None:
            raise ValueError("the evolve strategy needs a scored best-so-far candidate")
        idx, s_i = best.least_satisfied
        a, b = context["config"].requirements.pairs[idx]
        rep = best.performance
        parts.append(
            "Best utility function so far:\n" + _utility_block(best.expr) + "\n"
            f"Its mean worst-case satisfaction is {rep.mean_min_satisfaction:.4f} "
            f"(optimal {rep.optimal_min_satisfaction:.4f}, performance {rep.performance:.4f}).\n"
            f"Its least satisfied connection is #{idx} (a={a:.4g}, b={b:.4g}) "
            f"with satisfaction {s_i:.4f}.\n"
            "Improve the function so that the least satisfied connection gets more bandwidth "
            "without starving the others."
        )
    parts.append(OUTPUT_FORMAT)
    return "\n\n".join(parts) + "\n"


# --- Loop ------------------------------------------------------------------

Evaluate = Callable[[Expr, ExperimentConfig], SatisfactionReport]


def default_evaluate(expr: Expr, config: ExperimentConfig) -> SatisfactionReport:
    report, _ = run_experiment(config, expr)
    return report


def score_candidate(candidate: Candidate, config: ExperimentConfig, evaluate: Evaluate) -> Candidate:
    validity = dsl.validate(candidate.expr)
    if not validity.valid:
        probe, reason = validity.failures[0]
        candidate.error = f"invalid: {reason}"
        candidate.valid = False
        return candidate
    candidate.valid = True
    candidate.performance = evaluate(candidate.expr, config)
    return candidate


@dataclass
class EvolutionResult:
    best: Candidate | None
    log: GenerationLog
    candidates: list
    prompts: list
    generator_calls: int


def run_evolution(
    strategy: GuidanceStrategy,
    config: ExperimentConfig,
    generator,
    budget: int = DEFAULT_BUDGET,
    threshold: float = DEFAULT_THRESHOLD,
    evaluate: Evaluate = default_evaluate,
    out_dir=None,
    on_generation: Callable[[dict], None] | None = None,
) -> EvolutionResult:
    """Iterate prompt -> generate -> validate -> evaluate -> select.

    Stops once the best candidate reaches ``threshold`` of the optimal
    worst-case satisfaction, or after ``budget`` generations.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "prompts").mkdir(parents=True, exist_ok=True)

    evo_log = GenerationLog()
    best: Candidate | None = None
    candidates, prompts = [], []
    calls = 0

    for gen in range(budget):
        prompt = None
        if strategy is GuidanceStrategy.EVOLVE and gen == 0:
            cand = Candidate(expr=dsl.hercules(), source="seed:hercules", generation=0)
            score_candidate(cand, config, evaluate)
        else:
            prompt = build_prompt(strategy, {"config": config, "generation": gen, "best": best})
            calls += 1
            cand = _generate_candidate(generator, prompt, gen)
            if cand.expr is not None:
                score_candidate(cand, config, evaluate)
        prompts.append(prompt)
        if out is not None and prompt is not None:
            (out / "prompts" / f"gen-{gen:03d}.txt").write_text(prompt)
        candidates.append(cand)
        if cand.valid and (best is None or cand.score > best.score):
            best = cand
        evo_log.append(gen, cand, best)
        log.info("generation %d: %s", gen, evo_log.entries[-1]["candidate"])
        if on_generation is not None:
            on_generation(evo_log.entries[-1])
        if best is not None and best.performance.performance >= threshold:
            break

    if out is not None:
        evo_log.write_jsonl(out / "generations.jsonl")
        if best is not None:
            (out / "best.txt").write_text(to_text(best.expr) + "\n")
    return EvolutionResult(best, evo_log, candidates, prompts, calls)


def _generate_candidate(generator, prompt: str, gen: int) -> Candidate:
    source = getattr(generator, "name", type(generator).__name__)
    try:
        result: GenerationResult = generator.generate(prompt)
    except GeneratorError as exc:
        return Candidate(expr=None, source=source, generation=gen, error=f"{exc.kind}: {exc}")
    if result.expr is None:
        return Candidate(expr=None, source=source, generation=gen,
                         error=f"parse: {result.parse_error}", text=result.expression_text)
    return Candidate(expr=result.expr, source=source, generation=gen)
