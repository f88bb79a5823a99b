import json

import pytest

from gencc import dsl
from gencc.dsl import parse, to_text
from gencc.evaluator import SatisfactionReport
from gencc.evolution import (
    Candidate, GenerationLog, GuidanceStrategy, build_prompt, run_evolution, score_candidate,
)
from gencc.generator import Generator, GeneratorSpec, GeneratorTimeout
from gencc.scenarios import default_config

CONFIG = default_config("satellite", repetitions=1, duration_s=3.0)
HERCULES_TEXT = to_text(dsl.hercules())


def report(score, optimal=1.0, n=5, least=0):
    per = [score + 0.1] * n
    per[least] = score
    return SatisfactionReport(per_connection=per, per_repetition=[per], min_satisfaction=[score],
                              mean_min_satisfaction=score, std_min_satisfaction=0.0,
                              optimal_min_satisfaction=optimal, performance=score / optimal)


def scored_by_length(expr, config):
    """Longer expressions score higher, capped below 1."""
    return report(min(0.9, len(to_text(expr)) / 1000))


class Scripted:
    name = "scripted"

    def __init__(self, items):
        self.items = list(items)
        self.calls = 0

    def generate(self, prompt):
        item = self.items[self.calls % len(self.items)]
        self.calls += 1
        if isinstance(item, Exception):
            raise item
        return Generator(GeneratorSpec(kind="fixed", expressions=(item,))).generate(prompt)


def test_strategy_names():
    assert GuidanceStrategy.parse("Math_CoT") is GuidanceStrategy.MATH_COT
    assert GuidanceStrategy.parse("oneshot") is GuidanceStrategy.ONE_SHOT
    with pytest.raises(ValueError):
        GuidanceStrategy.parse("few-shot")


# --- prompts ----------------------------------------------------------------

def _best():
    cand = Candidate(expr=parse("x^0.8 - 20.0 * x * L"), source="t", generation=0, valid=True)
    cand.performance = report(0.55, optimal=0.714, least=3)
    return cand


@pytest.mark.parametrize("strategy", [GuidanceStrategy.ZERO_SHOT, GuidanceStrategy.MATH_COT])
def test_no_example_strategies(strategy):
    prompt = build_prompt(strategy, {"config": CONFIG, "generation": 4, "best": _best()})
    assert "```utility\n" not in prompt
    assert HERCULES_TEXT not in prompt
    assert "x^0.8 - 20.0" not in prompt
    assert "```utility" in prompt  # output-format instruction names the fence
    if strategy is GuidanceStrategy.MATH_COT:
        assert "strictly increasing" in prompt


def test_zero_shot_prompt_identical_across_generations():
    prompts = {build_prompt(GuidanceStrategy.ZERO_SHOT, {"config": CONFIG, "generation": g}) for g in range(5)}
    assert len(prompts) == 1


def test_one_shot_embeds_hercules_verbatim():
    prompt = build_prompt(GuidanceStrategy.ONE_SHOT, {"config": CONFIG, "generation": 2, "best": _best()})
    assert f"```utility\n{HERCULES_TEXT}\n```" in prompt
    assert "x^0.8 - 20.0" not in prompt


def test_evolve_embeds_best_and_least_satisfied():
    prompt = build_prompt(GuidanceStrategy.EVOLVE, {"config": CONFIG, "generation": 1, "best": _best()})
    assert "```utility\nx^0.8 - 20.0 * x * L\n```" in prompt
    assert "0.5500" in prompt
    a, b = CONFIG.requirements.pairs[3]
    assert f"#3 (a={a:.4g}, b={b:.4g})" in prompt


def test_evolve_needs_best():
    with pytest.raises(ValueError):
        build_prompt(GuidanceStrategy.EVOLVE, {"config": CONFIG, "generation": 1})


def test_prompts_lists_every_variable():
    prompt = build_prompt(GuidanceStrategy.ZERO_SHOT, {"config": CONFIG})
    for var in dsl.VARIABLES:
        assert f"  {var} " in prompt


# --- loop -------------------------------------------------------------------

def test_budget_one_returns_single_candidate():
    gen = Generator(GeneratorSpec(kind="fixed", expressions=("x",)))
    result = run_evolution(GuidanceStrategy.ZERO_SHOT, CONFIG, gen, budget=1, evaluate=scored_by_length)
    assert len(result.log) == 1
    assert result.best.expr == parse("x")
    assert result.generator_calls == 1


def test_threshold_stops_loop():
    scores = iter([0.2, 0.5, 0.6, 0.97, 0.99])
    gen = Generator(GeneratorSpec(kind="fixed", expressions=("x", "x - L", "x - 2 * L", "x - 3 * L", "x - 4 * L")))
    result = run_evolution(GuidanceStrategy.ZERO_SHOT, CONFIG, gen, budget=10, threshold=0.95,
                           evaluate=lambda e, c: report(next(scores)))
    assert len(result.log) == 4
    assert result.log.entries[-1]["generation"] == 3
    assert result.best.expr == parse("x - 3 * L")


def test_ties_keep_earlier_candidate():
    gen = Generator(GeneratorSpec(kind="fixed", expressions=("x", "x - L")))
    result = run_evolution(GuidanceStrategy.ZERO_SHOT, CONFIG, gen, budget=2, evaluate=lambda e, c: report(0.4))
    assert result.best.expr == parse("x")


def test_mutator_curve_is_monotone_with_real_scoring():
    gen = Generator(GeneratorSpec(kind="mutator", seed=1))
    result = run_evolution(GuidanceStrategy.EVOLVE, CONFIG, gen, budget=10)
    curve = result.log.best_curve()
    assert len(curve) == 10
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    assert result.generator_calls == 9
    assert result.candidates[0].source == "seed:hercules"
    assert result.prompts[0] is None


def test_evolve_prompt_tracks_best(tmp_path):
    gen = Generator(GeneratorSpec(kind="mutator", seed=2))
    result = run_evolution(GuidanceStrategy.EVOLVE, CONFIG, gen, budget=6, evaluate=scored_by_length,
                           out_dir=tmp_path)
    for g in range(1, 6):
        best_before = result.log.entries[g - 1]["best_expression"]
        assert f"```utility\n{best_before}\n```" in result.prompts[g]
        assert (tmp_path / "prompts" / f"gen-{g:03d}.txt").read_text() == result.prompts[g]
    rows = [json.loads(line) for line in (tmp_path / "generations.jsonl").read_text().splitlines()]
    assert len(rows) == 6
    assert (tmp_path / "best.txt").read_text().strip() == to_text(result.best.expr)


def test_same_seed_reproduces_run():
    runs = []
    for _ in range(2):
        gen = Generator(GeneratorSpec(kind="mutator", seed=3))
        runs.append(run_evolution(GuidanceStrategy.EVOLVE, CONFIG, gen, budget=4).log.entries)
    assert runs[0] == runs[1]


def test_invalid_candidates_consume_budget_and_score_zero():
    items = ["1/0", GeneratorTimeout("late"), "x +", "L + 1", "x / L", "x"]
    gen = Scripted(items)
    result = run_evolution(GuidanceStrategy.ZERO_SHOT, CONFIG, gen, budget=6)
    assert len(result.log) == 6
    assert gen.calls == 6
    scores = [e["candidate"]["mean_min_satisfaction"] for e in result.log.entries]
    assert scores[:5] == [0.0] * 5
    assert not any(c.valid for c in result.candidates[:5])
    assert result.candidates[1].error.startswith("timeout")
    assert result.candidates[2].error.startswith("parse")
    assert result.best.expr == parse("x")


def test_score_candidate_rejects_invalid_without_evaluating():
    def boom(expr, config):
        raise AssertionError("invalid candidates must not be simulated")

    cand = score_candidate(Candidate(parse("1/0"), "t", 0), CONFIG, boom)
    assert not cand.valid and cand.score == 0.0 and "invalid" in cand.error


def test_log_rejects_decreasing_best():
    log = GenerationLog()
    good = Candidate(parse("x"), "t", 0, performance=report(0.5), valid=True)
    worse = Candidate(parse("x"), "t", 1, performance=report(0.3), valid=True)
    log.append(0, good, good)
    with pytest.raises(AssertionError):
        log.append(1, worse, worse)


@pytest.mark.parametrize("kw", [{"budget": 0}, {"threshold": 0}, {"threshold": 1.5}])
def test_loop_argument_validation(kw):
    gen = Generator(GeneratorSpec(kind="fixed", expressions=("x",)))
    with pytest.raises(ValueError):
        run_evolution(GuidanceStrategy.ZERO_SHOT, CONFIG, gen, evaluate=scored_by_length, **kw)
