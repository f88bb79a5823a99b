import time

import pytest

from gencc import dsl
from gencc.dsl import parse, to_text, validate, variables
from gencc.generator import (
    EmptyExtractionError, EmptyResponseError, GenerationResult, Generator, GeneratorConfigError,
    GeneratorHTTPError, GeneratorSpec, GeneratorTimeout, MalformedResponseError, embedded_expression,
    extract_expression, generate, mutate,
)

PROMPT = "Improve this:\n```utility\n" + to_text(dsl.hercules()) + "\n```\n"


# --- extraction -------------------------------------------------------------

def test_fence_stripping():
    assert extract_expression("```\nx^0.9 - L\n```") == "x^0.9 - L"
    assert extract_expression("Here you go:\n```utility\nx - L\n```\nThanks") == "x - L"


def test_trim():
    assert extract_expression("  x + L  ") == "x + L"


@pytest.mark.parametrize("raw", ["", "   ", "```\n\n```"])
def test_empty_extraction(raw):
    with pytest.raises(EmptyExtractionError) as info:
        extract_expression(raw)
    assert info.value.kind == "empty_extraction"


def test_embedded_expression_takes_last_block():
    prompt = "```utility\nx\n```\nthen\n```utility\nx - L\n```"
    assert embedded_expression(prompt) == "x - L"
    assert embedded_expression("no blocks here") is None


# --- spec -------------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"kind": "remote"},
    {"kind": "remote", "endpoint": "http://h", "seed": 1},
    {"kind": "mutator", "endpoint": "http://h"},
    {"kind": "mutator", "weights": {"teleport": 1}},
    {"kind": "fixed"},
    {"kind": "fixed", "expressions": ("x",), "seed": 2},
    {"kind": "oracle"},
    {"kind": "remote", "endpoint": "http://h", "timeout": 0},
])
def test_spec_validation(kw):
    with pytest.raises(GeneratorConfigError):
        GeneratorSpec(**kw)


def test_remote_from_env(monkeypatch):
    monkeypatch.setenv("GENCC_LLM_ENDPOINT", "http://example.invalid/v1/chat/completions")
    monkeypatch.setenv("GENCC_LLM_MODEL", "m")
    spec = GeneratorSpec.remote_from_env(timeout=5)
    assert spec.endpoint.startswith("http://example.invalid") and spec.model == "m" and spec.timeout == 5


def test_check_fails_fast_on_missing_token(monkeypatch):
    monkeypatch.delenv("GENCC_TEST_TOKEN", raising=False)
    gen = Generator(GeneratorSpec(kind="remote", endpoint="http://127.0.0.1:9", token_env="GENCC_TEST_TOKEN"))
    with pytest.raises(GeneratorConfigError):
        gen.check()


# --- fixed and mutator ------------------------------------------------------

def test_fixed_returns_canned_expressions_in_order():
    gen = Generator(GeneratorSpec(kind="fixed", expressions=("x", "x - L")))
    assert [gen.generate("p").expression_text for _ in range(3)] == ["x", "x - L", "x"]
    assert gen.generate("p").expr == parse("x - L")


def test_fixed_parse_failure_is_reported_not_raised():
    result = generate(GeneratorSpec(kind="fixed", expressions=("x +",)), "p")
    assert isinstance(result, GenerationResult)
    assert result.expr is None and result.parse_error


def test_mutator_is_deterministic():
    spec = GeneratorSpec(kind="mutator", seed=5)
    assert generate(spec, PROMPT).raw == generate(spec, PROMPT).raw
    assert Generator(spec).generate(PROMPT).raw == Generator(spec).generate(PROMPT).raw


def test_mutator_calls_differ_across_the_sequence():
    gen = Generator(GeneratorSpec(kind="mutator", seed=5))
    outputs = {gen.generate(PROMPT).raw for _ in range(10)}
    assert len(outputs) > 5


def test_mutator_without_embedded_expression_starts_from_x():
    for seed in range(20):
        result = generate(GeneratorSpec(kind="mutator", seed=seed), "no example")
        assert result.expr is not None
        assert "x" in variables(result.expr)


@pytest.mark.parametrize("seed", range(10))
def test_mutate_base_x_references_x(seed):
    out = mutate(parse("x"), seed)
    assert "x" in variables(out)
    assert mutate(parse("x"), seed) == out


def test_mutations_of_hercules_parse_and_validate():
    base = dsl.hercules()
    valid = changed = 0
    for seed in range(1000):
        out = mutate(base, seed)
        assert parse(to_text(out)) == out
        valid += validate(out).valid
        changed += out != base
    assert valid >= 950
    assert changed >= 990


def test_mutation_weights_select_edit_kind():
    base = dsl.hercules()
    only_perturb = {k: 0.0 for k in ("swap_op", "wrap", "penalty", "delete")}
    only_perturb["perturb"] = 1.0
    for seed in range(20):
        out = mutate(base, seed, only_perturb)
        # same shape, one literal changed
        assert to_text(out).count("*") == to_text(base).count("*")
    with pytest.raises(ValueError):
        mutate(base, 0, {k: 0.0 for k in ("perturb", "swap_op", "wrap", "penalty", "delete")})


# --- remote (recorded fixture server) --------------------------------------

def _remote(server, route="", **kw):
    return GeneratorSpec(kind="remote", endpoint=f"{server.base_url}{route}/v1/chat/completions",
                         model="fixture-model", **kw)


def test_remote_well_formed_response(fixture_server, monkeypatch):
    monkeypatch.setenv("GENCC_TEST_TOKEN", "secret-token")
    result = generate(_remote(fixture_server, token_env="GENCC_TEST_TOKEN", temperature=0.7), "PROMPT TEXT")
    assert result.expression_text.startswith("x^0.9 - x * (arctan(6.0")
    assert result.expr is not None and validate(result.expr).valid
    req = fixture_server.requests[-1]
    assert req["headers"]["Authorization"] == "Bearer secret-token"
    assert req["json"]["model"] == "fixture-model"
    assert req["json"]["temperature"] == 0.7
    assert req["json"]["messages"] == [{"role": "user", "content": "PROMPT TEXT"}]


def test_remote_unfenced_reply_is_trimmed(fixture_server):
    result = generate(_remote(fixture_server, "/plain"), "p")
    assert result.expression_text == "x^0.8 - 5.0 * x * L"


@pytest.mark.parametrize("route, status", [("/error", 500), ("/ratelimit", 429)])
def test_remote_non_success_status(fixture_server, route, status):
    with pytest.raises(GeneratorHTTPError) as info:
        generate(_remote(fixture_server, route), "p")
    assert info.value.kind == "http_status"
    assert info.value.status == status


def test_remote_empty_content(fixture_server):
    with pytest.raises(EmptyResponseError) as info:
        generate(_remote(fixture_server, "/empty"), "p")
    assert info.value.kind == "empty_response"


def test_remote_malformed_body(fixture_server):
    with pytest.raises(MalformedResponseError):
        generate(_remote(fixture_server, "/garbage"), "p")


def test_remote_slow_endpoint_times_out(fixture_server):
    start = time.monotonic()
    with pytest.raises(GeneratorTimeout) as info:
        generate(_remote(fixture_server, "/slow", timeout=0.5), "p")
    assert info.value.kind == "timeout"
    assert time.monotonic() - start < 2.0


def test_unresponsive_endpoint_times_out(silent_endpoint):
    spec = GeneratorSpec(kind="remote", endpoint=silent_endpoint, timeout=0.5)
    start = time.monotonic()
    with pytest.raises(GeneratorTimeout):
        generate(spec, "p")
    assert time.monotonic() - start < 2.0
