"""Seeded packet-level simulation of senders sharing one shaped bottleneck.

The bottleneck sits on the senders' egress: a drop-tail FIFO served at the
link capacity.  After service a packet may be dropped at random; otherwise it
reaches the receiver, and its acknowledgment returns one base RTT (plus
uniform jitter) after leaving the queue.  Acks are never lost.
"""
from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .controller import ControllerConfig, IntervalStats, RateController, compute_stats
from .dsl import EvaluationFault, Expr, parse

BIN_MS = 10.0
FLOW_STAGGER_MS = 100.0

_FEEDBACK, _BOUNDARY, _SEND = 0, 1, 2


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    capacity: float  # Mbps
    base_rtt: float  # ms
    jitter: float = 2.0  # ms, uniform +/-
    loss_prob: float = 0.0
    queue_capacity: int | None = None  # packets; None means one BDP (at least 10)
    packet_size: int = 1250  # bytes

    def __post_init__(self):
        if not self.capacity > 0:
            raise SimConfigError(f"capacity must be positive, got {self.capacity}")
        if not self.base_rtt > 0:
            raise SimConfigError(f"base_rtt must be positive, got {self.base_rtt}")
        if not 0 <= self.jitter < self.base_rtt / 2:
            raise SimConfigError(f"jitter must lie in [0, base_rtt/2), got {self.jitter}")
        if not 0 <= self.loss_prob < 1:
            raise SimConfigError(f"loss_prob must lie in [0, 1), got {self.loss_prob}")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise SimConfigError(f"queue_capacity must be >= 1, got {self.queue_capacity}")
        if self.packet_size < 1:
            raise SimConfigError(f"packet_size must be >= 1, got {self.packet_size}")

    @property
    def packet_bits(self) -> float:
        return self.packet_size * 8.0

    @property
    def service_ms(self) -> float:
        return self.packet_bits / (self.capacity * 1000.0)

    @property
    def queue_packets(self) -> int:
        if self.queue_capacity is not None:
            return self.queue_capacity
        bdp = self.capacity * 1000.0 * self.base_rtt / self.packet_bits
        return max(10, int(round(bdp)))


SCENARIOS = {
    "satellite": (10.0, 60.0),
    "cellular": (20.0, 40.0),
    "broadband": (50.0, 20.0),
}


def scenario_link(name: str, **overrides) -> LinkConfig:
    """Link shaping for one of the named access scenarios."""
    try:
        capacity, rtt = SCENARIOS[name]
    except KeyError:
        raise SimConfigError(f"unknown scenario {name!r}; expected one of {sorted(SCENARIOS)}") from None
    link = LinkConfig(capacity=capacity, base_rtt=rtt, **overrides)
    if link.queue_capacity is None:
        link = LinkConfig(**{**asdict(link), "queue_capacity": link.queue_packets})
    return link


@dataclass(frozen=True)
class FlowSpec:
    requirement: tuple[float, float]
    utility: Expr | None = None
    config: ControllerConfig = field(default_factory=ControllerConfig)
    fixed_rate: float | None = None  # bypasses the controller when set

    def __post_init__(self):
        a, b = self.requirement
        if not 0 < a < b:
            raise SimConfigError(f"requirement needs 0 < a < b, got {self.requirement}")
        if self.utility is None and self.fixed_rate is None:
            raise SimConfigError("a flow needs a utility or a fixed rate")


class FixedRateController:
    """Constant-rate sender with the controller's MI interface."""

    def __init__(self, rate: float, requirement: tuple[float, float]):
        self.rate = rate
        self.requirement = requirement
        self.smoothed_rtt: float | None = None
        self.mi_counter = 0
        self.faulted = None

    def observe_rtt(self, rtt: float):
        srtt = self.smoothed_rtt
        self.smoothed_rtt = rtt if srtt is None else 0.875 * srtt + 0.125 * rtt

    def start_interval(self):
        mi_id = self.mi_counter
        self.mi_counter += 1
        duration = 100.0 if self.smoothed_rtt is None else max(self.smoothed_rtt, 10.0)
        return mi_id, self.rate, duration

    def interval_done(self, mi_id: int, rate: float, stats: IntervalStats) -> float:
        return 0.0


@dataclass
class FlowTrace:
    requirement: tuple[float, float]
    start_ms: float
    intervals: list = field(default_factory=list)
    delivered_bins: list = field(default_factory=list)
    sent: int = 0
    delivered: int = 0
    dropped_queue: int = 0
    dropped_random: int = 0
    in_flight: int = 0
    min_rtt: float | None = None
    max_rtt: float | None = None

    def goodput(self, t0_ms: float, t1_ms: float, packet_bits: float, bin_ms: float = BIN_MS) -> float:
        """Delivered rate in Mbps over ``[t0, t1)``, at bin resolution."""
        lo = max(0, int(math.floor(t0_ms / bin_ms)))
        hi = min(len(self.delivered_bins), int(math.ceil(t1_ms / bin_ms)))
        if hi <= lo:
            return 0.0
        packets = sum(self.delivered_bins[lo:hi])
        return packets * packet_bits / ((hi - lo) * bin_ms * 1000.0)


@dataclass
class RunTrace:
    link: LinkConfig
    duration_s: float
    seed: int
    flows: list
    bin_ms: float = BIN_MS
    max_queue: int = 0
    fault: str | None = None
    fault_flow: int | None = None

    @property
    def faulted(self) -> bool:
        return self.fault is not None

    @property
    def totals(self) -> dict:
        keys = ("sent", "delivered", "dropped_queue", "dropped_random", "in_flight")
        return {k: sum(getattr(f, k) for f in self.flows) for k in keys}

    def to_dict(self) -> dict:
        return {
            "link": asdict(self.link),
            "duration_s": self.duration_s,
            "seed": self.seed,
            "bin_ms": self.bin_ms,
            "max_queue": self.max_queue,
            "fault": self.fault,
            "fault_flow": self.fault_flow,
            "flows": [asdict(f) for f in self.flows],
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunTrace:
        flows = []
        for f in data["flows"]:
            f = dict(f)
            f["requirement"] = tuple(f["requirement"])
            flows.append(FlowTrace(**f))
        return cls(
            link=LinkConfig(**data["link"]),
            duration_s=data["duration_s"],
            seed=data["seed"],
            flows=flows,
            bin_ms=data["bin_ms"],
            max_queue=data["max_queue"],
            fault=data["fault"],
            fault_flow=data["fault_flow"],
        )


class _MI:
    __slots__ = ("mi_id", "rate", "start", "end", "records", "outstanding", "closed")

    def __init__(self, mi_id, rate, start, end):
        self.mi_id = mi_id
        self.rate = rate
        self.start = start
        self.end = end
        self.records = []
        self.outstanding = 0
        self.closed = False


def run(
    link: LinkConfig,
    flows: list[FlowSpec],
    duration: float,
    seed: int,
    stagger_ms: float = FLOW_STAGGER_MS,
) -> RunTrace:
    """Simulate ``flows`` over ``link`` for ``duration`` seconds."""
    if not flows:
        raise SimConfigError("at least one flow is required")
    if not duration > 0:
        raise SimConfigError(f"duration must be positive, got {duration}")

    rng = random.Random(seed)
    end = duration * 1000.0
    service = link.service_ms
    qcap = link.queue_packets
    base_rtt = link.base_rtt
    jitter = link.jitter
    loss_prob = link.loss_prob
    bits = link.packet_bits
    nbins = int(math.ceil(end / BIN_MS))

    controllers = []
    traces = []
    for i, spec in enumerate(flows):
        a = spec.requirement[0]
        if spec.fixed_rate is not None:
            ctl = FixedRateController(spec.fixed_rate, spec.requirement)
        else:
            ctl = RateController(spec.config.resolved(link.capacity, a), spec.requirement, spec.utility)
        controllers.append(ctl)
        traces.append(FlowTrace(requirement=tuple(spec.requirement), start_ms=i * stagger_ms,
                                delivered_bins=[0] * nbins))
    trace = RunTrace(link=link, duration_s=duration, seed=seed, flows=traces)

    current = [None] * len(flows)  # MI being sent
    open_mis = [dict() for _ in flows]  # mi_id -> _MI awaiting feedback
    next_send = [0.0] * len(flows)
    gap = [0.0] * len(flows)

    heap: list = []
    seq = 0
    for i, ft in enumerate(traces):
        if ft.start_ms < end:
            heap.append((ft.start_ms, seq, _BOUNDARY, i, None))
            seq += 1
    heapq.heapify(heap)

    queue: deque = deque()  # departure times of packets in the bottleneck
    last_dep = 0.0
    push, pop = heapq.heappush, heapq.heappop

    def finalize(i: int, mi: _MI) -> bool:
        del open_mis[i][mi.mi_id]
        stats = compute_stats(mi.records, mi.end - mi.start, packet_bits=bits)
        try:
            u = controllers[i].interval_done(mi.mi_id, mi.rate, stats)
        except EvaluationFault as exc:
            trace.fault = str(exc)
            trace.fault_flow = i
            return False
        traces[i].intervals.append({
            "mi": mi.mi_id,
            "time_ms": mi.start,
            "duration_ms": mi.end - mi.start,
            "rate": mi.rate,
            "achieved_rate": stats.achieved_rate,
            "sent": stats.packets_sent,
            "acked": stats.packets_acked,
            "lost": stats.packets_lost,
            "L": stats.loss_rate,
            "rtt_grad": stats.rtt_grad,
            "rtt_dev": stats.rtt_dev,
            "utility": u,
        })
        return True

    while heap:
        t, _, kind, i, payload = pop(heap)
        if kind == _SEND:
            mi = current[i]
            ft = traces[i]
            ft.sent += 1
            mi.outstanding += 1
            while queue and queue[0] <= t:
                queue.popleft()
            if len(queue) >= qcap:
                ft.dropped_queue += 1
                notify = (queue[-1] if queue else t) + base_rtt
                if notify <= end:
                    push(heap, (notify, seq, _FEEDBACK, i, (mi, t, None)))
                    seq += 1
            else:
                dep = (last_dep if last_dep > t else t) + service
                last_dep = dep
                queue.append(dep)
                if len(queue) > trace.max_queue:
                    trace.max_queue = len(queue)
                lost = loss_prob > 0 and rng.random() < loss_prob
                if dep >= end:
                    ft.in_flight += 1
                elif lost:
                    ft.dropped_random += 1
                else:
                    ft.delivered += 1
                    ft.delivered_bins[int(dep / BIN_MS)] += 1
                if lost:
                    notify, rtt = dep + base_rtt, None
                else:
                    notify = dep + base_rtt + (rng.uniform(-jitter, jitter) if jitter else 0.0)
                    rtt = notify - t
                if notify <= end:
                    push(heap, (notify, seq, _FEEDBACK, i, (mi, t, rtt)))
                    seq += 1
            nxt = t + gap[i]
            next_send[i] = nxt
            if nxt < mi.end:
                push(heap, (nxt, seq, _SEND, i, None))
                seq += 1
        elif kind == _FEEDBACK:
            mi, sent_at, rtt = payload
            ft = traces[i]
            mi.records.append((sent_at, rtt))
            mi.outstanding -= 1
            if rtt is not None:
                controllers[i].observe_rtt(rtt)
                if ft.min_rtt is None or rtt < ft.min_rtt:
                    ft.min_rtt = rtt
                if ft.max_rtt is None or rtt > ft.max_rtt:
                    ft.max_rtt = rtt
            if mi.closed and mi.outstanding == 0 and not finalize(i, mi):
                break
        else:
            old = current[i]
            if old is not None:
                old.closed = True
                if old.outstanding == 0 and not finalize(i, old):
                    break
            if t >= end:
                continue
            mi_id, rate, length = controllers[i].start_interval()
            mi = _MI(mi_id, rate, t, min(t + length, end))
            current[i] = mi
            open_mis[i][mi_id] = mi
            new_gap = bits / (rate * 1000.0)
            if old is None or gap[i] <= 0:
                first = t
            else:
                frac = max(0.0, (next_send[i] - t) / gap[i])
                first = t + min(frac, 1.0) * new_gap
            gap[i] = new_gap
            if first < mi.end:
                push(heap, (first, seq, _SEND, i, None))
                seq += 1
            else:
                next_send[i] = first
            push(heap, (mi.end, seq, _BOUNDARY, i, None))
            seq += 1

    return trace


def write_trace_jsonl(trace: RunTrace, path: Path):
    """One header record for the run, then one record per MI per flow."""
    path = Path(path)
    with path.open("w") as fh:
        header = trace.to_dict()
        intervals = [f.pop("intervals") for f in header["flows"]]
        fh.write(json.dumps({"type": "run", **header}) + "\n")
        rows = []
        for flow_id, ivs in enumerate(intervals):
            for iv in ivs:
                rows.append({"type": "mi", "flow": flow_id, **iv})
        rows.sort(key=lambda r: (r["time_ms"], r["flow"]))
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_trace_jsonl(path: Path) -> RunTrace:
    path = Path(path)
    header = None
    intervals: dict[int, list] = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            kind = rec.pop("type", None)
            if kind == "run":
                header = rec
            elif kind == "mi":
                intervals.setdefault(rec.pop("flow"), []).append(rec)
    if header is None:
        raise ValueError(f"{path}: missing run header record")
    for flow_id, f in enumerate(header["flows"]):
        f["intervals"] = sorted(intervals.get(flow_id, []), key=lambda r: r["mi"])
    return RunTrace.from_dict(header)


def utility_flows(
    requirements: list[tuple[float, float]],
    utility: Expr | str,
    config: ControllerConfig | None = None,
) -> list[FlowSpec]:
    expr = parse(utility) if isinstance(utility, str) else utility
    config = config or ControllerConfig()
    return [FlowSpec(requirement=tuple(r), utility=expr, config=config) for r in requirements]


__all__ = [
    "FlowSpec", "FlowTrace", "LinkConfig", "RunTrace", "SCENARIOS", "SimConfigError",
    "read_trace_jsonl", "run", "scenario_link", "utility_flows", "write_trace_jsonl",
]
