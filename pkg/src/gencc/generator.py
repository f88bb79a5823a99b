"""Sources of candidate utility expressions.

Three kinds share one interface:

* ``remote``: a chat-completion style HTTP endpoint.  Request body::

      {"model": "...", "messages": [{"role": "user", "content": PROMPT}],
       "temperature": 1.0}

  and the reply is read from ``choices[0].message.content``.  The bearer
  token is taken from the environment variable named by ``token_env``.
* ``mutator``: an offline, seeded single-edit mutation of the expression in
  the prompt's ```` ```utility ```` block (``x`` when the prompt has none).
* ``fixed``: a canned list of expressions, returned in order.
"""
from __future__ import annotations

import concurrent.futures
import math
import os
import random
import re
from dataclasses import dataclass

import httpx

from .dsl import (
    BinOp, Call, DSLError, Expr, Neg, Num, Var, parse, to_text, variables,
)

ENV_ENDPOINT = "GENCC_LLM_ENDPOINT"
ENV_MODEL = "GENCC_LLM_MODEL"
ENV_TOKEN_VAR = "GENCC_LLM_TOKEN_VAR"

DEFAULT_WEIGHTS = {"perturb": 0.35, "swap_op": 0.1, "wrap": 0.15, "penalty": 0.2, "delete": 0.2}
MAX_RETRIES = 25


class GeneratorError(Exception):
    kind = "generator"


class GeneratorConfigError(GeneratorError):
    kind = "config"


class GeneratorTimeout(GeneratorError):
    kind = "timeout"


class GeneratorHTTPError(GeneratorError):
    kind = "http_status"

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"endpoint returned HTTP {status}")
        self.status = status
        self.body = body


class GeneratorConnectionError(GeneratorError):
    kind = "connection"


class EmptyResponseError(GeneratorError):
    kind = "empty_response"


class MalformedResponseError(GeneratorError):
    kind = "malformed_response"


class EmptyExtractionError(GeneratorError):
    kind = "empty_extraction"


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    endpoint: str | None = None
    model: str | None = None
    token_env: str | None = None
    timeout: float = 60.0
    temperature: float = 1.0
    seed: int | None = None
    weights: dict | None = None
    expressions: tuple = ()

    def __post_init__(self):
        remote = (self.endpoint, self.model, self.token_env)
        if self.kind == "remote":
            if not self.endpoint:
                raise GeneratorConfigError("remote generator needs an endpoint URL")
            if self.seed is not None or self.weights or self.expressions:
                raise GeneratorConfigError("remote generator takes no mutator or fixed fields")
        elif self.kind == "mutator":
            if any(remote) or self.expressions:
                raise GeneratorConfigError("mutator generator takes no remote or fixed fields")
            if self.seed is None:
                object.__setattr__(self, "seed", 0)
            unknown = set(self.weights or {}) - set(DEFAULT_WEIGHTS)
            if unknown:
                raise GeneratorConfigError(f"unknown mutation kind(s) {sorted(unknown)}")
        elif self.kind == "fixed":
            if any(remote) or self.seed is not None or self.weights:
                raise GeneratorConfigError("fixed generator takes no remote or mutator fields")
            if not self.expressions:
                raise GeneratorConfigError("fixed generator needs at least one expression")
            object.__setattr__(self, "expressions", tuple(self.expressions))
        else:
            raise GeneratorConfigError(f"unknown generator kind {self.kind!r}")
        if not self.timeout > 0:
            raise GeneratorConfigError(f"timeout must be positive, got {self.timeout}")

    @classmethod
    def remote_from_env(cls, **overrides) -> GeneratorSpec:
        fields = {
            "endpoint": os.environ.get(ENV_ENDPOINT),
            "model": os.environ.get(ENV_MODEL),
            "token_env": os.environ.get(ENV_TOKEN_VAR),
        }
        fields.update({k: v for k, v in overrides.items() if v is not None})
        return cls(kind="remote", **fields)


@dataclass
class GenerationResult:
    raw: str
    expression_text: str | None = None
    expr: Expr | None = None
    parse_error: str | None = None

    @property
    def ok(self) -> bool:
        return self.expr is not None


_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n?(.*?)```", re.DOTALL)


def extract_expression(raw: str) -> str:
    """Strip code fences and whitespace from a model reply."""
    match = _FENCE.search(raw or "")
    text = match.group(2) if match else (raw or "")
    text = text.strip()
    if not text:
        raise EmptyExtractionError("no expression found in the response")
    return text


_BLOCK = re.compile(r"```utility[ \t]*\n(.*?)```", re.DOTALL)


def embedded_expression(prompt: str) -> str | None:
    """Expression text of the last ```utility block in ``prompt``."""
    blocks = _BLOCK.findall(prompt)
    return blocks[-1].strip() if blocks else None


# --- Mutation --------------------------------------------------------------


def _children(node: Expr) -> tuple:
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, BinOp):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    return ()


def _with_children(node: Expr, children: tuple) -> Expr:
    if isinstance(node, Neg):
        return Neg(children[0])
    if isinstance(node, BinOp):
        return BinOp(node.op, children[0], children[1])
    return Call(node.func, tuple(children))


def _paths(expr: Expr, prefix: tuple = ()):
    yield prefix, expr
    for i, child in enumerate(_children(expr)):
        yield from _paths(child, prefix + (i,))


def _replace(expr: Expr, path: tuple, new: Expr) -> Expr:
    if not path:
        return new
    children = list(_children(expr))
    children[path[0]] = _replace(children[path[0]], path[1:], new)
    return _with_children(expr, tuple(children))


_PENALTY_SCALE = {"L": (1.0, 100.0), "rtt_grad": (10.0, 1000.0), "rtt_dev": (0.001, 0.1)}
# literals are scaled by a log-uniform factor in [1/PERTURB_SPAN, PERTURB_SPAN]
PERTURB_SPAN = 2.0


def _log_uniform(rng: random.Random, lo: float, hi: float) -> float:
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def _edit(base: Expr, kind: str, rng: random.Random) -> Expr | None:
    nodes = list(_paths(base))
    if kind == "perturb":
        literals = [(p, n) for p, n in nodes if isinstance(n, Num) and n.value != 0]
        if not literals:
            return None
        path, node = rng.choice(literals)
        return _replace(base, path, Num(node.value * _log_uniform(rng, 1 / PERTURB_SPAN, PERTURB_SPAN)))
    if kind == "swap_op":
        ops = [(p, n) for p, n in nodes if isinstance(n, BinOp)]
        if not ops:
            return None
        path, node = rng.choice(ops)
        new_op = rng.choice([op for op in "+-*/" if op != node.op])
        return _replace(base, path, BinOp(new_op, node.left, node.right))
    if kind == "wrap":
        path, node = rng.choice(nodes)
        func = rng.choice(["arctan", "abs", "sqrt", "log"])
        if func == "sqrt":
            wrapped = Call("sqrt", (Call("abs", (node,)),))
        elif func == "log":
            wrapped = Call("log", (BinOp("+", Num(1.0), Call("abs", (node,))),))
        else:
            wrapped = Call(func, (node,))
        return _replace(base, path, wrapped)
    if kind == "penalty":
        var = rng.choice(sorted(_PENALTY_SCALE))
        coef = _log_uniform(rng, *_PENALTY_SCALE[var])
        term = BinOp("*", BinOp("*", Num(coef), Var("x")), Var(var))
        return BinOp("-", base, term)
    if kind == "delete":
        additive = [(p, n) for p, n in nodes if isinstance(n, BinOp) and n.op in "+-"]
        if not additive:
            return None
        path, node = rng.choice(additive)
        if rng.random() < 0.5:
            keep = node.left
        else:
            keep = node.right if node.op == "+" else Neg(node.right)
        return _replace(base, path, keep)
    raise ValueError(f"unknown mutation kind {kind!r}")


def mutate(base: Expr, seed: int | str, weights: dict | None = None) -> Expr:
    """Apply one random edit to ``base``; the result always references ``x``.

    Edits that would drop ``x`` (or cannot apply) are redrawn; after
    ``MAX_RETRIES`` failed draws ``base`` is returned unchanged.
    """
    weights = {**DEFAULT_WEIGHTS, **(weights or {})}
    kinds = [k for k in sorted(weights) if weights[k] > 0]
    if not kinds:
        raise ValueError("at least one mutation weight must be positive")
    rng = random.Random(f"mutate:{seed}")
    for _ in range(MAX_RETRIES):
        kind = rng.choices(kinds, weights=[weights[k] for k in kinds])[0]
        candidate = _edit(base, kind, rng)
        if candidate is None or "x" not in variables(candidate):
            continue
        # the printed form is what gets parsed downstream; keep it a fixed point
        text = to_text(candidate)
        if parse(text) == candidate:
            return candidate
    return base


# --- Generation ------------------------------------------------------------


def _post_chat(spec: GeneratorSpec, prompt: str) -> str:
    headers = {"Content-Type": "application/json"}
    if spec.token_env:
        token = os.environ.get(spec.token_env)
        if not token:
            raise GeneratorConfigError(f"environment variable {spec.token_env} is not set")
        headers["Authorization"] = f"Bearer {token}"
    body = {
        "model": spec.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": spec.temperature,
    }
    try:
        response = httpx.post(spec.endpoint, json=body, headers=headers, timeout=spec.timeout)
    except httpx.TimeoutException as exc:
        raise GeneratorTimeout(f"no response within {spec.timeout}s: {exc}") from None
    except httpx.HTTPError as exc:
        raise GeneratorConnectionError(f"request to {spec.endpoint} failed: {exc}") from None
    if not response.is_success:
        raise GeneratorHTTPError(response.status_code, response.text[:500])
    try:
        content = response.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise MalformedResponseError("response is not a chat completion") from None
    if not content or not str(content).strip():
        raise EmptyResponseError("endpoint returned an empty completion")
    return str(content)


def _remote(spec: GeneratorSpec, prompt: str) -> str:
    # The whole exchange, not just each socket operation, is bounded by the timeout.
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
    future = pool.submit(_post_chat, spec, prompt)
    try:
        return future.result(timeout=spec.timeout)
    except concurrent.futures.TimeoutError:
        raise GeneratorTimeout(f"no response within {spec.timeout}s") from None
    finally:
        pool.shutdown(wait=False)


def generate(spec: GeneratorSpec, prompt: str, call_index: int = 0) -> GenerationResult:
    if spec.kind == "remote":
        raw = _remote(spec, prompt)
    elif spec.kind == "fixed":
        raw = spec.expressions[call_index % len(spec.expressions)]
    else:
        text = embedded_expression(prompt) or "x"
        try:
            base = parse(text)
        except DSLError:
            base = Var("x")
        raw = to_text(mutate(base, f"{spec.seed}:{call_index}", spec.weights))
    result = GenerationResult(raw=raw)
    result.expression_text = extract_expression(raw)
    try:
        result.expr = parse(result.expression_text)
    except DSLError as exc:
        result.parse_error = str(exc)
    return result


class Generator:
    """Stateful wrapper that numbers successive calls."""

    def __init__(self, spec: GeneratorSpec):
        self.spec = spec
        self.calls = 0

    @property
    def name(self) -> str:
        if self.spec.kind == "remote":
            return f"remote:{self.spec.model or 'default'}"
        if self.spec.kind == "mutator":
            return f"mutator:{self.spec.seed}"
        return "fixed"

    def check(self):
        """Fail fast on a misconfigured remote generator."""
        if self.spec.kind == "remote" and self.spec.token_env and not os.environ.get(self.spec.token_env):
            raise GeneratorConfigError(f"environment variable {self.spec.token_env} is not set")

    def generate(self, prompt: str) -> GenerationResult:
        index = self.calls
        self.calls += 1
        return generate(self.spec, prompt, index)


__all__ = [
    "EmptyExtractionError", "EmptyResponseError", "GenerationResult", "Generator",
    "GeneratorConfigError", "GeneratorConnectionError", "GeneratorError", "GeneratorHTTPError",
    "GeneratorSpec", "GeneratorTimeout", "MalformedResponseError", "embedded_expression",
    "extract_expression", "generate", "mutate",
]
