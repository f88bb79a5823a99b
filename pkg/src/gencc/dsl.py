"""Arithmetic expression language for congestion-control utility functions.

Grammar (EBNF)::

    expr     = term { ("+" | "-") term } ;
    term     = unary { ("*" | "/") unary } ;
    unary    = "-" unary | power ;
    power    = atom [ "^" unary ] ;
    atom     = number | "pi" | variable | call | "(" expr ")" ;
    call     = func1 "(" expr ")" | func2 "(" expr "," expr ")" ;
    func1    = "arctan" | "exp" | "log" | "sqrt" | "abs" ;
    func2    = "max" | "min" ;
    variable = "x" | "a" | "b" | "xn" | "L" | "rtt_grad" | "rtt_dev" ;
    number   = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ] ;

``^`` is right-associative and binds tighter than unary minus, so ``-x^2``
means ``-(x^2)``.  ``*`` and ``/`` also accept the unicode forms ``×``/``÷``
and ``−`` is read as ``-``.
"""
from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Union

VARIABLES = ("x", "a", "b", "xn", "L", "rtt_grad", "rtt_dev")
FUNCTIONS = {"arctan": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1, "max": 2, "min": 2}
CONSTANTS = {"pi": math.pi}


class DSLError(Exception):
    pass


class ParseError(DSLError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownIdentifierError(ParseError):
    def __init__(self, name: str, position: int):
        super().__init__(f"unknown identifier {name!r}", position)
        self.name = name


class EvaluationFault(DSLError):
    """Raised when an expression produces a non-finite or undefined value."""

    def __init__(self, node: Expr, reason: str):
        super().__init__(f"{reason} in {to_text(node)}")
        self.node = node
        self.reason = reason


# --- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value) or self.value < 0:
            raise ValueError(f"literal must be finite and non-negative, got {self.value}")


@dataclass(frozen=True)
class Var:
    name: str

    def __post_init__(self):
        if self.name not in VARIABLES:
            raise ValueError(f"unknown variable {self.name!r}")


@dataclass(frozen=True)
class Const:
    name: str

    def __post_init__(self):
        if self.name not in CONSTANTS:
            raise ValueError(f"unknown constant {self.name!r}")


@dataclass(frozen=True)
class Neg:
    operand: Expr


@dataclass(frozen=True)
class BinOp:
    op: str
    left: Expr
    right: Expr

    def __post_init__(self):
        if self.op not in "+-*/^" or len(self.op) != 1:
            raise ValueError(f"unknown operator {self.op!r}")


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple = field(default=())

    def __post_init__(self):
        arity = FUNCTIONS.get(self.func)
        if arity is None:
            raise ValueError(f"unknown function {self.func!r}")
        if len(self.args) != arity:
            raise ValueError(f"{self.func} takes {arity} argument(s), got {len(self.args)}")


Expr = Union[Num, Var, Const, Neg, BinOp, Call]


def walk(expr: Expr):
    """Yield every node of ``expr`` in pre-order."""
    stack = [expr]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Neg):
            stack.append(node.operand)
        elif isinstance(node, BinOp):
            stack.extend((node.right, node.left))
        elif isinstance(node, Call):
            stack.extend(reversed(node.args))


def variables(expr: Expr) -> set[str]:
    return {n.name for n in walk(expr) if isinstance(n, Var)}


# --- Parsing ---------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>\*\*|[-+*/^(),×÷−])
    """,
    re.VERBOSE,
)
_OP_ALIASES = {"×": "*", "÷": "/", "−": "-", "**": "^"}


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "op":
                value = _OP_ALIASES.get(value, value)
            tokens.append((kind, value, pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, got, pos = self.take()
        if got != value or kind == "end":
            found = "end of input" if kind == "end" else repr(got)
            raise ParseError(f"expected {value!r}, found {found}", pos)

    def parse(self) -> Expr:
        node = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {value!r}", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expr:
        if self.peek()[:2] == ("op", "-"):
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, value, pos = self.take()
        if kind == "num":
            number = float(value)
            if not math.isfinite(number):
                raise ParseError(f"literal {value} is out of range", pos)
            return Num(number)
        if kind == "ident":
            if value in VARIABLES:
                return Var(value)
            if value in CONSTANTS:
                return Const(value)
            if value in FUNCTIONS:
                return self.call(value, pos)
            raise UnknownIdentifierError(value, pos)
        if (kind, value) == ("op", "("):
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(value)
        raise ParseError(f"expected an operand, found {found}", pos)

    def call(self, func: str, pos: int) -> Expr:
        self.expect("(")
        args = [self.expr()]
        while self.peek()[:2] == ("op", ","):
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[func]:
            raise ParseError(f"{func} takes {FUNCTIONS[func]} argument(s), got {len(args)}", pos)
        return Call(func, tuple(args))


def parse(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Raises :class:`ParseError` (with a character position) on malformed input
    and :class:`UnknownIdentifierError` on names outside the variable set.
    """
    return _Parser(text).parse()


# --- Printing --------------------------------------------------------------

_PREC_ADD, _PREC_MUL, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _prec(node: Expr) -> int:
    if isinstance(node, BinOp):
        return {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL}.get(node.op, _PREC_POW)
    if isinstance(node, Neg):
        return _PREC_UNARY
    return _PREC_ATOM


def _wrap(node: Expr, min_prec: int) -> str:
    text = to_text(node)
    return f"({text})" if _prec(node) < min_prec else text


def to_text(expr: Expr) -> str:
    """Canonical text form; ``parse(to_text(e)) == e`` for every tree."""
    if isinstance(expr, Num):
        return repr(float(expr.value))
    if isinstance(expr, (Var, Const)):
        return expr.name
    if isinstance(expr, Neg):
        return "-" + _wrap(expr.operand, _PREC_UNARY)
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(to_text(a) for a in expr.args)})"
    if expr.op == "^":
        return f"{_wrap(expr.left, _PREC_ATOM)}^{_wrap(expr.right, _PREC_UNARY)}"
    prec = _prec(expr)
    return f"{_wrap(expr.left, prec)} {expr.op} {_wrap(expr.right, prec + 1)}"


# --- Evaluation ------------------------------------------------------------


@dataclass(frozen=True)
class StatVector:
    """Inputs of a utility function for one monitor interval.

    Rates are in Mbps, ``L`` is a loss fraction, ``rtt_grad`` is a
    dimensionless slope and ``rtt_dev`` is in milliseconds.
    """

    x: float
    a: float
    b: float
    L: float = 0.0
    rtt_grad: float = 0.0
    rtt_dev: float = 0.0

    def __post_init__(self):
        if not self.x >= 0:
            raise ValueError(f"x must be >= 0, got {self.x}")
        if not 0 < self.a < self.b:
            raise ValueError(f"need 0 < a < b, got a={self.a}, b={self.b}")
        if not 0 <= self.L <= 1:
            raise ValueError(f"L must lie in [0, 1], got {self.L}")
        if not self.rtt_dev >= 0:
            raise ValueError(f"rtt_dev must be >= 0, got {self.rtt_dev}")
        if not math.isfinite(self.rtt_grad):
            raise ValueError("rtt_grad must be finite")

    @property
    def xn(self) -> float:
        return (self.x - self.a) / (self.b - self.a)


def _checked(node: Expr, value: float) -> float:
    if not math.isfinite(value):
        raise EvaluationFault(node, "non-finite value")
    return value


def _compile(node: Expr) -> Callable[[dict], float]:
    if isinstance(node, Num):
        value = node.value
        return lambda env: value
    if isinstance(node, Const):
        value = CONSTANTS[node.name]
        return lambda env: value
    if isinstance(node, Var):
        name = node.name
        return lambda env: env[name]
    if isinstance(node, Neg):
        inner = _compile(node.operand)
        return lambda env: -inner(env)
    if isinstance(node, Call):
        args = [_compile(a) for a in node.args]
        return _compile_call(node, args)
    return _compile_binop(node, _compile(node.left), _compile(node.right))


def _compile_binop(node: BinOp, left, right):
    op = node.op
    if op == "+":
        return lambda env: _checked(node, left(env) + right(env))
    if op == "-":
        return lambda env: _checked(node, left(env) - right(env))
    if op == "*":
        return lambda env: _checked(node, left(env) * right(env))
    if op == "/":
        def div(env):
            num, den = left(env), right(env)
            if den == 0:
                raise EvaluationFault(node, "division by zero")
            return _checked(node, num / den)
        return div

    def power(env):
        base, exponent = left(env), right(env)
        if base < 0 and not float(exponent).is_integer():
            raise EvaluationFault(node, "negative base with non-integer exponent")
        if base == 0 and exponent < 0:
            raise EvaluationFault(node, "zero to a negative power")
        try:
            return _checked(node, math.pow(base, exponent))
        except OverflowError:
            raise EvaluationFault(node, "overflow") from None
    return power


def _compile_call(node: Call, args):
    func = node.func
    if func == "max":
        f, g = args
        return lambda env: max(f(env), g(env))
    if func == "min":
        f, g = args
        return lambda env: min(f(env), g(env))
    (f,) = args
    if func == "arctan":
        return lambda env: math.atan(f(env))
    if func == "abs":
        return lambda env: abs(f(env))
    if func == "exp":
        def exp(env):
            try:
                return _checked(node, math.exp(f(env)))
            except OverflowError:
                raise EvaluationFault(node, "overflow") from None
        return exp
    if func == "log":
        def log(env):
            v = f(env)
            if v <= 0:
                raise EvaluationFault(node, "log of a non-positive value")
            return math.log(v)
        return log

    def sqrt(env):
        v = f(env)
        if v < 0:
            raise EvaluationFault(node, "sqrt of a negative value")
        return math.sqrt(v)
    return sqrt


@functools.lru_cache(maxsize=512)
def compile_expr(expr: Expr) -> Callable[[StatVector], float]:
    """Return a fast evaluator for ``expr``; it raises :class:`EvaluationFault`."""
    body = _compile(expr)

    def run(stats: StatVector) -> float:
        env = {
            "x": stats.x, "a": stats.a, "b": stats.b, "xn": stats.xn,
            "L": stats.L, "rtt_grad": stats.rtt_grad, "rtt_dev": stats.rtt_dev,
        }
        return _checked(expr, float(body(env)))

    return run


def evaluate(expr: Expr, stats: StatVector) -> float:
    return compile_expr(expr)(stats)


# --- Reference functions ---------------------------------------------------


@dataclass(frozen=True)
class HerculesParams:
    t: float = 0.9
    beta: float = 11.35
    gamma: float = 900.0
    phi: float = 0.01135
    D: float = 4.0

    def __post_init__(self):
        if not 0 < self.t <= 1:
            raise ValueError(f"t must lie in (0, 1], got {self.t}")
        if min(self.beta, self.gamma, self.phi) < 0:
            raise ValueError("beta, gamma and phi must be non-negative")
        if not self.D > 0:
            raise ValueError(f"D must be positive, got {self.D}")


def hercules_scaling(D: float) -> Expr:
    """Arctan scaling factor over the normalized rate, bounded in (0, 1)."""
    return parse(f"arctan({D!r} * (xn - 0.5)) / pi + 0.5")


def hercules(params: HerculesParams | None = None) -> Expr:
    p = params or HerculesParams()
    scaling = to_text(hercules_scaling(p.D))
    return parse(
        f"x^{p.t!r} - x * ({scaling})"
        f" * ({p.beta!r} * L + {p.gamma!r} * max(0, rtt_grad) + {p.phi!r} * rtt_dev)"
    )


def vivace(exponent: float = 0.9, loss_coef: float = 11.35, latency_coef: float = 900.0) -> Expr:
    return parse(f"x^{exponent!r} - {latency_coef!r} * x * max(0, rtt_grad) - {loss_coef!r} * x * L")


BUILTINS: dict[str, Callable[[], Expr]] = {"hercules": hercules, "vivace": vivace}


# --- Validation ------------------------------------------------------------


@dataclass
class ValidityReport:
    failures: list = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.failures


def default_probes(a: float = 1.0, b: float = 1.5) -> list[StatVector]:
    probes = []
    for x in (0.1 * a, a, (a + b) / 2, b, 2 * b):
        for loss in (0.0, 0.05, 0.5):
            for grad in (-1.0, 0.0, 1.0):
                for dev in (0.0, 10.0):
                    probes.append(StatVector(x=x, a=a, b=b, L=loss, rtt_grad=grad, rtt_dev=dev))
    return probes


def validate(expr: Expr, probes: list[StatVector] | None = None) -> ValidityReport:
    """Check that ``expr`` uses ``x`` and evaluates finitely on every probe."""
    probes = default_probes() if probes is None else probes
    if not probes:
        raise ValueError("validate needs at least one probe")
    report = ValidityReport()
    if "x" not in variables(expr):
        report.failures.append((None, "expression does not reference x"))
    fn = compile_expr(expr)
    for probe in probes:
        try:
            fn(probe)
        except EvaluationFault as exc:
            report.failures.append((probe, str(exc)))
    return report
