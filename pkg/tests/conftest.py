import json
import math
import random
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from gencc.dsl import CONSTANTS, FUNCTIONS, VARIABLES, BinOp, Call, Const, Neg, Num, StatVector, Var

FIXTURES = Path(__file__).parent / "fixtures"


def random_expr(rng: random.Random, depth: int = 8):
    """Random expression tree of depth at most ``depth``."""
    if depth <= 1 or rng.random() < 0.25:
        roll = rng.random()
        if roll < 0.45:
            return Var(rng.choice(VARIABLES))
        if roll < 0.9:
            value = rng.choice([rng.uniform(0, 10), float(rng.randint(0, 5)), 10 ** rng.uniform(-6, 6)])
            return Num(value)
        return Const("pi")
    roll = rng.random()
    if roll < 0.15:
        return Neg(random_expr(rng, depth - 1))
    if roll < 0.7:
        return BinOp(rng.choice("+-*/^"), random_expr(rng, depth - 1), random_expr(rng, depth - 1))
    func = rng.choice(sorted(FUNCTIONS))
    return Call(func, tuple(random_expr(rng, depth - 1) for _ in range(FUNCTIONS[func])))


def random_stats(rng: random.Random) -> StatVector:
    a = rng.uniform(0.1, 20)
    b = a * rng.uniform(1.05, 3)
    return StatVector(
        x=rng.uniform(0, 3 * b),
        a=a,
        b=b,
        L=rng.choice([0.0, rng.uniform(0, 1)]),
        rtt_grad=rng.uniform(-1, 1),
        rtt_dev=rng.choice([0.0, rng.uniform(0, 20)]),
    )


class OracleFault(Exception):
    pass


def oracle_eval(node, env: dict) -> float:
    """Plain recursive tree walk with explicit domain checks."""

    def ok(v):
        if isinstance(v, complex) or math.isnan(v) or math.isinf(v):
            raise OracleFault()
        return v

    if isinstance(node, Num):
        return node.value
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -oracle_eval(node.operand, env)
    if isinstance(node, Call):
        args = [oracle_eval(a, env) for a in node.args]
        f = node.func
        if f == "max":
            return max(args)
        if f == "min":
            return min(args)
        (v,) = args
        if f == "arctan":
            return math.atan(v)
        if f == "abs":
            return abs(v)
        if f == "sqrt":
            if v < 0:
                raise OracleFault()
            return v ** 0.5
        if f == "log":
            if v <= 0:
                raise OracleFault()
            return math.log(v)
        if v > 709.78:
            raise OracleFault()
        return ok(math.exp(v))
    left = oracle_eval(node.left, env)
    right = oracle_eval(node.right, env)
    if node.op == "+":
        return ok(left + right)
    if node.op == "-":
        return ok(left - right)
    if node.op == "*":
        return ok(left * right)
    if node.op == "/":
        if right == 0:
            raise OracleFault()
        return ok(left / right)
    if left < 0 and right != int(right):
        raise OracleFault()
    if left == 0 and right < 0:
        raise OracleFault()
    try:
        return ok(left ** right)
    except OverflowError:
        raise OracleFault() from None


def oracle_env(stats: StatVector) -> dict:
    return {
        "x": stats.x, "a": stats.a, "b": stats.b, "xn": (stats.x - stats.a) / (stats.b - stats.a),
        "L": stats.L, "rtt_grad": stats.rtt_grad, "rtt_dev": stats.rtt_dev,
    }


class _Handler(BaseHTTPRequestHandler):
    routes: dict = {}
    requests: list = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        _Handler.requests.append({
            "path": self.path,
            "headers": dict(self.headers),
            "json": json.loads(body or b"{}"),
        })
        status, payload, delay = _Handler.routes.get(self.path, (404, {"error": "no route"}, 0))
        if delay:
            time.sleep(delay)
        data = json.dumps(payload).encode() if not isinstance(payload, bytes) else payload
        try:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        except (BrokenPipeError, ConnectionResetError):
            pass


@pytest.fixture
def fixture_server():
    """Local HTTP server replaying recorded chat-completion responses."""
    recorded = json.loads((FIXTURES / "chat_completion.json").read_text())
    plain = json.loads(json.dumps(recorded))
    plain["choices"][0]["message"]["content"] = "  x^0.8 - 5.0 * x * L  "
    empty = json.loads(json.dumps(recorded))
    empty["choices"][0]["message"]["content"] = ""
    _Handler.routes = {
        "/v1/chat/completions": (200, recorded, 0),
        "/plain/v1/chat/completions": (200, plain, 0),
        "/empty/v1/chat/completions": (200, empty, 0),
        "/error/v1/chat/completions": (500, {"error": {"message": "internal"}}, 0),
        "/ratelimit/v1/chat/completions": (429, {"error": {"message": "slow down"}}, 0),
        "/garbage/v1/chat/completions": (200, b"not json", 0),
        "/slow/v1/chat/completions": (200, recorded, 3.0),
    }
    _Handler.requests = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _Handler)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    server.base_url = f"http://{host}:{port}"
    server.requests = _Handler.requests
    yield server
    server.shutdown()
    server.server_close()


@pytest.fixture
def silent_endpoint():
    """A socket that accepts connections but never answers."""
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen(8)
    host, port = sock.getsockname()
    yield f"http://{host}:{port}/v1/chat/completions"
    sock.close()


def assert_trace_invariants(trace):
    """Packet conservation, capacity ceiling and RTT floor for one run."""
    link = trace.link
    service = link.service_ms
    for ft in trace.flows:
        assert ft.sent == ft.delivered + ft.dropped_queue + ft.dropped_random + ft.in_flight
        assert sum(ft.delivered_bins) <= ft.delivered
        if ft.min_rtt is not None:
            assert ft.min_rtt >= link.base_rtt - link.jitter
    # any window of >= 10 service times carries at most one packet more than capacity allows
    total = [sum(col) for col in zip(*(ft.delivered_bins for ft in trace.flows))]
    per_window = max(1, int(math.ceil(10 * service / trace.bin_ms)))
    for width in {per_window, 10, 100}:
        if width > len(total):
            continue
        window = sum(total[:width])
        limit = width * trace.bin_ms / service + 1 + 1e-9
        assert window <= limit
        for i in range(width, len(total)):
            window += total[i] - total[i - width]
            assert window <= limit
    assert trace.max_queue <= link.queue_packets


def grid_min_satisfaction(capacity, pairs, points=9, rounds=30):
    """Brute-force max-min satisfaction over allocation grids.

    The first n-1 rates are enumerated on a grid; the last connection takes
    whatever capacity is left (up to its maximum).  The grid is re-centred
    on the best point and shrunk each round.
    """
    import itertools

    if capacity <= 0:
        return 0.0
    n = len(pairs)
    lo = [0.0] * (n - 1)
    hi = [b for _, b in pairs[:-1]]
    best, best_x = -1.0, None
    for _ in range(rounds):
        axes = [[l + (h - l) * k / (points - 1) for k in range(points)] for l, h in zip(lo, hi)]
        for head in itertools.product(*axes):
            left = capacity - sum(head)
            if left < 0:
                continue
            a_n, b_n = pairs[-1]
            x = list(head) + [min(b_n, left)]
            s = min(xi / a for xi, (a, _) in zip(x, pairs))
            if s > best:
                best, best_x = s, x
        if best_x is None:
            return 0.0
        span = [(h - l) / (points - 1) * 2 for l, h in zip(lo, hi)]
        lo = [max(0.0, xi - w) for xi, w in zip(best_x, span)]
        hi = [min(b, xi + w) for xi, w, (_, b) in zip(best_x, span, pairs)]
    return best


# --- acceptance reporting ---------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[number] = (title, "PASS" if report.passed else "FAIL", detail, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail, duration = _CRITERIA[number]
        line = f"criterion {number:>2}: {status}  {title} [{duration:.1f}s]"
        if detail:
            line += f"  -- {detail}"
        terminalreporter.write_line(line)
