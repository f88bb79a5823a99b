"""Scoring of simulated runs against per-connection rate requirements.

The optimum against which runs are normalized is the max-min satisfaction
program: maximize ``min_i x_i / a_i`` subject to ``sum(x) <= C`` and
``0 <= x_i <= b_i``.
"""
from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from filelock import FileLock

from .netsim import RunTrace, write_trace_jsonl

WARMUP_RTTS = 2.0


class PersistError(OSError):
    pass


def satisfaction_ratio(avg_rate: float, a: float) -> float:
    if not a > 0:
        raise ValueError(f"minimum requirement must be positive, got {a}")
    return avg_rate / a


def _pairs(reqs) -> list[tuple[float, float]]:
    return [(float(a), float(b)) for a, b in reqs]


def optimal_min_satisfaction(capacity: float, reqs, tol: float = 1e-9) -> float:
    """Largest ``s`` with ``sum(min(s*a_i, b_i)) <= capacity``, by bisection."""
    pairs = _pairs(reqs)
    if capacity <= 0:
        return 0.0

    def demand(s: float) -> float:
        return sum(min(s * a, b) for a, b in pairs)

    hi = max(b / a for a, b in pairs)
    if demand(hi) <= capacity:
        return hi
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if demand(mid) <= capacity:
            lo = mid
        else:
            hi = mid
    return lo


def optimal_allocation(capacity: float, reqs) -> list[float]:
    s = optimal_min_satisfaction(capacity, reqs)
    return [min(s * a, b) for a, b in _pairs(reqs)]


def jain_fairness(rates) -> float:
    rates = [float(r) for r in rates]
    if len(rates) < 2:
        raise ValueError("Jain's index needs at least two rates")
    if any(r < 0 for r in rates):
        raise ValueError("rates must be non-negative")
    total_sq = sum(r * r for r in rates)
    if total_sq == 0:
        raise ValueError("Jain's index is undefined when every rate is zero")
    return sum(rates) ** 2 / (len(rates) * total_sq)


def flow_goodputs(trace: RunTrace, warmup_rtts: float = WARMUP_RTTS) -> list[float]:
    """Average delivered rate per flow, skipping each flow's warm-up."""
    end = trace.duration_s * 1000.0
    skip = warmup_rtts * trace.link.base_rtt
    return [
        f.goodput(f.start_ms + skip, end, trace.link.packet_bits, trace.bin_ms) for f in trace.flows
    ]


def run_satisfaction(trace: RunTrace, warmup_rtts: float = WARMUP_RTTS) -> list[float]:
    if trace.faulted:
        return [0.0] * len(trace.flows)
    return [
        satisfaction_ratio(rate, f.requirement[0])
        for rate, f in zip(flow_goodputs(trace, warmup_rtts), trace.flows)
    ]


@dataclass
class SatisfactionReport:
    per_connection: list  # mean s_i over repetitions
    per_repetition: list  # s_i lists, one per repetition
    min_satisfaction: list  # one value per repetition
    mean_min_satisfaction: float
    std_min_satisfaction: float
    optimal_min_satisfaction: float
    performance: float
    faulted_repetitions: int = 0
    seeds: list = field(default_factory=list)
    warmup_rtts: float = WARMUP_RTTS

    @property
    def least_satisfied(self) -> tuple[int, float]:
        idx = min(range(len(self.per_connection)), key=lambda i: self.per_connection[i])
        return idx, self.per_connection[idx]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SatisfactionReport:
        return cls(**data)


def score_experiment(traces: list[RunTrace], reqs, capacity: float,
                     warmup_rtts: float = WARMUP_RTTS) -> SatisfactionReport:
    """Aggregate repetitions; a faulted repetition scores zero."""
    if not traces:
        raise ValueError("at least one trace is required")
    pairs = _pairs(reqs)
    per_rep = []
    for trace in traces:
        if len(trace.flows) != len(pairs):
            raise ValueError("trace flow count does not match the requirement set")
        per_rep.append(run_satisfaction(trace, warmup_rtts))
    mins = [min(s) for s in per_rep]
    mean_min = statistics.fmean(mins)
    optimal = optimal_min_satisfaction(capacity, pairs)
    return SatisfactionReport(
        per_connection=[statistics.fmean(col) for col in zip(*per_rep)],
        per_repetition=per_rep,
        min_satisfaction=mins,
        mean_min_satisfaction=mean_min,
        std_min_satisfaction=statistics.pstdev(mins) if len(mins) > 1 else 0.0,
        optimal_min_satisfaction=optimal,
        performance=mean_min / optimal if optimal > 0 else 0.0,
        faulted_repetitions=sum(t.faulted for t in traces),
        seeds=[t.seed for t in traces],
        warmup_rtts=warmup_rtts,
    )


def failed_report(reqs, capacity: float, repetitions: int) -> SatisfactionReport:
    """Report for a candidate that could not be run at all."""
    n = len(_pairs(reqs))
    return SatisfactionReport(
        per_connection=[0.0] * n,
        per_repetition=[[0.0] * n for _ in range(repetitions)],
        min_satisfaction=[0.0] * repetitions,
        mean_min_satisfaction=0.0,
        std_min_satisfaction=0.0,
        optimal_min_satisfaction=optimal_min_satisfaction(capacity, reqs),
        performance=0.0,
        faulted_repetitions=repetitions,
    )


CSV_COLUMNS = [
    "experiment_id", "record", "timestamp", "config_hash", "connection", "min_mbps", "max_mbps",
    "satisfaction", "mean_min_satisfaction", "std_min_satisfaction", "optimal_min_satisfaction",
    "performance",
]


def csv_rows(experiment_id: str, record: dict) -> list[dict]:
    rep = record["report"]
    rows = []
    for i, ((a, b), s) in enumerate(zip(record["requirements"], rep["per_connection"])):
        rows.append({
            "experiment_id": experiment_id,
            "record": record["record"],
            "timestamp": record["timestamp"],
            "config_hash": record["config_hash"],
            "connection": i,
            "min_mbps": a,
            "max_mbps": b,
            "satisfaction": s,
            "mean_min_satisfaction": rep["mean_min_satisfaction"],
            "std_min_satisfaction": rep["std_min_satisfaction"],
            "optimal_min_satisfaction": rep["optimal_min_satisfaction"],
            "performance": rep["performance"],
        })
    return rows


def persist(
    report: SatisfactionReport,
    traces: list[RunTrace],
    experiment_id: str,
    results_dir="results",
    requirements=None,
    config_hash: str | None = None,
    extra: dict | None = None,
) -> dict:
    """Append one record to ``results/<id>/summary.json`` and write traces.

    Existing records and trace files are never overwritten.
    """
    out = Path(results_dir) / experiment_id
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistError(exc.errno, f"cannot create results directory: {exc.strerror}", str(out)) from None
    summary_path = out / "summary.json"
    try:
        with FileLock(str(out / ".lock")):
            if summary_path.exists():
                summary = json.loads(summary_path.read_text())
            else:
                summary = {"experiment_id": experiment_id, "records": []}
            index = len(summary["records"])
            trace_files = []
            for rep, trace in enumerate(traces):
                name = f"run-{rep}.jsonl" if index == 0 else f"run-{rep}-r{index}.jsonl"
                write_trace_jsonl(trace, out / name)
                trace_files.append(name)
            record = {
                "record": index,
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "config_hash": config_hash,
                "seeds": list(report.seeds),
                "requirements": [list(p) for p in (requirements or [f.requirement for f in traces[0].flows])],
                "report": report.to_dict(),
                "traces": trace_files,
                **(extra or {}),
            }
            summary["records"].append(record)
            tmp = summary_path.with_suffix(".json.tmp")
            tmp.write_text(json.dumps(summary, indent=2))
            tmp.replace(summary_path)
            csv_path = out / "summary.csv"
            new_csv = not csv_path.exists()
            with csv_path.open("a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
                if new_csv:
                    writer.writeheader()
                writer.writerows(csv_rows(experiment_id, record))
    except PersistError:
        raise
    except OSError as exc:
        path = exc.filename or str(out)
        raise PersistError(exc.errno, f"cannot write results: {exc.strerror}", path) from None
    return record


def load_summary(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    return json.loads(path.read_text())


