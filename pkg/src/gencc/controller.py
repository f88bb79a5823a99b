"""Online-learning rate control driven by a pluggable utility function.

Each connection sends at a constant rate per monitor interval (MI).  Rates
are probed in pairs, one MI at ``r(1+eps)`` and one at ``r(1-eps)``; once
both utilities are known the rate moves along the central-difference
gradient.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

from .dsl import EvaluationFault, Expr, StatVector, compile_expr

MIN_MI_MS = 10.0


class Phase(enum.Enum):
    PROBE_UP = "ProbeUp"
    PROBE_DOWN = "ProbeDown"
    MOVING = "Moving"


@dataclass(frozen=True)
class ControllerConfig:
    epsilon: float = 0.05
    step_gain: float = 3.0
    step_cap: float = 0.25
    rate_min: float = 0.05
    rate_max: float | None = None  # None: twice the link capacity
    mi_duration_factor: float = 1.0
    initial_rate: float | None = None  # None: the connection's minimum requirement
    # Gradient samples whose t-statistic stays below this are treated as noise.
    rtt_grad_significance: float = 2.0

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if not self.step_gain > 0:
            raise ValueError(f"step_gain must be positive, got {self.step_gain}")
        if not 0 < self.step_cap < 1:
            raise ValueError(f"step_cap must lie in (0, 1), got {self.step_cap}")
        if not self.rate_min > 0:
            raise ValueError(f"rate_min must be positive, got {self.rate_min}")
        if self.rate_max is not None and not self.rate_max > self.rate_min:
            raise ValueError("rate_max must exceed rate_min")
        if not self.mi_duration_factor > 0:
            raise ValueError("mi_duration_factor must be positive")
        if self.rtt_grad_significance < 0:
            raise ValueError("rtt_grad_significance must be non-negative")

    def resolved(self, capacity: float, min_requirement: float) -> ControllerConfig:
        """Fill the capacity- and requirement-dependent defaults."""
        rate_max = self.rate_max if self.rate_max is not None else 2.0 * capacity
        initial = self.initial_rate if self.initial_rate is not None else min_requirement
        return replace(self, rate_max=rate_max, initial_rate=initial)


@dataclass
class FlowState:
    current_rate: float
    phase: Phase = Phase.PROBE_UP
    smoothed_rtt: float | None = None
    mi_counter: int = 0
    probe_up_mi: int | None = None
    probe_down_mi: int | None = None
    u_plus: float | None = None
    u_minus: float | None = None


@dataclass
class IntervalStats:
    duration: float = 0.0
    packets_sent: int = 0
    packets_acked: int = 0
    packets_lost: int = 0
    loss_rate: float = 0.0
    rtt_samples: list = field(default_factory=list)
    rtt_grad: float = 0.0
    rtt_grad_stderr: float = 0.0
    rtt_dev: float = 0.0
    achieved_rate: float = 0.0


def clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def interval_rate(state: FlowState, config: ControllerConfig) -> float:
    """Rate commanded for the next MI given the flow's phase."""
    r = state.current_rate
    if state.phase is Phase.PROBE_UP:
        r *= 1 + config.epsilon
    elif state.phase is Phase.PROBE_DOWN:
        r *= 1 - config.epsilon
    return clamp(r, config.rate_min, config.rate_max)


def compute_stats(
    ack_trace: list[tuple[float, float | None]],
    duration: float,
    in_flight: int = 0,
    packet_bits: float = 10_000.0,
) -> IntervalStats:
    """Summarize one MI from its per-packet feedback.

    ``ack_trace`` holds ``(send_time_ms, rtt_ms)`` per packet, with ``rtt_ms``
    set to ``None`` for packets reported lost.  ``in_flight`` counts packets
    of the interval whose fate is still unknown.
    """
    rtt_samples = [(t, r) for t, r in ack_trace if r is not None]
    acked = len(rtt_samples)
    lost = len(ack_trace) - acked
    sent = len(ack_trace) + in_flight
    stats = IntervalStats(
        duration=duration,
        packets_sent=sent,
        packets_acked=acked,
        packets_lost=lost,
        loss_rate=lost / sent if sent else 0.0,
        rtt_samples=rtt_samples,
        achieved_rate=acked * packet_bits / (duration * 1000.0) if duration > 0 else 0.0,
    )
    if acked < 2:
        return stats
    n = float(acked)
    mean_t = sum(t for t, _ in rtt_samples) / n
    mean_r = sum(r for _, r in rtt_samples) / n
    sxx = sum((t - mean_t) ** 2 for t, _ in rtt_samples)
    sxy = sum((t - mean_t) * (r - mean_r) for t, r in rtt_samples)
    syy = sum((r - mean_r) ** 2 for _, r in rtt_samples)
    stats.rtt_dev = math.sqrt(syy / n)
    if sxx > 0:
        slope = sxy / sxx
        stats.rtt_grad = slope
        if acked > 2:
            resid = max(syy - slope * sxy, 0.0)
            stats.rtt_grad_stderr = math.sqrt(resid / (n - 2) / sxx)
    return stats


def effective_rtt_grad(stats: IntervalStats, significance: float) -> float:
    """RTT slope with statistically insignificant values zeroed."""
    if stats.rtt_grad_stderr > 0 and abs(stats.rtt_grad) < significance * stats.rtt_grad_stderr:
        return 0.0
    return stats.rtt_grad


def utility_of_interval(
    utility: Expr,
    stats: IntervalStats,
    requirement: tuple[float, float],
    rate: float,
    rtt_grad_significance: float = 0.0,
) -> float:
    """Evaluate ``utility`` on one MI; raises :class:`EvaluationFault`."""
    a, b = requirement
    vector = StatVector(
        x=rate,
        a=a,
        b=b,
        L=stats.loss_rate,
        rtt_grad=effective_rtt_grad(stats, rtt_grad_significance),
        rtt_dev=stats.rtt_dev,
    )
    return compile_expr(utility)(vector)


def update_rate(state: FlowState, u_plus: float, u_minus: float, config: ControllerConfig) -> FlowState:
    r = state.current_rate
    gradient = (u_plus - u_minus) / (2 * config.epsilon * r)
    step = config.step_gain * gradient
    new_rate = clamp(r + step, r * (1 - config.step_cap), r * (1 + config.step_cap))
    new_rate = clamp(new_rate, config.rate_min, config.rate_max)
    return replace(
        state,
        current_rate=new_rate,
        phase=Phase.PROBE_UP,
        probe_up_mi=None,
        probe_down_mi=None,
        u_plus=None,
        u_minus=None,
    )


class RateController:
    """Per-connection controller; the simulator calls it at MI boundaries."""

    def __init__(self, config: ControllerConfig, requirement: tuple[float, float], utility: Expr):
        if config.rate_max is None or config.initial_rate is None:
            raise ValueError("config must be resolved against the link first")
        self.config = config
        self.requirement = requirement
        self.utility = utility
        self.state = FlowState(current_rate=clamp(config.initial_rate, config.rate_min, config.rate_max))
        self.faulted: EvaluationFault | None = None

    def mi_duration(self) -> float:
        srtt = self.state.smoothed_rtt
        if srtt is None:
            return 100.0
        return max(srtt * self.config.mi_duration_factor, MIN_MI_MS)

    def observe_rtt(self, rtt: float):
        srtt = self.state.smoothed_rtt
        self.state.smoothed_rtt = rtt if srtt is None else 0.875 * srtt + 0.125 * rtt

    def start_interval(self) -> tuple[int, float, float]:
        """Open the next MI; return ``(mi_id, rate, duration_ms)``."""
        s = self.state
        mi_id = s.mi_counter
        rate = interval_rate(s, self.config)
        s.mi_counter += 1
        if s.phase is Phase.PROBE_UP:
            s.probe_up_mi = mi_id
            s.phase = Phase.PROBE_DOWN
        elif s.phase is Phase.PROBE_DOWN:
            s.probe_down_mi = mi_id
            s.phase = Phase.MOVING
        return mi_id, rate, self.mi_duration()

    def interval_done(self, mi_id: int, rate: float, stats: IntervalStats) -> float:
        """Feed a finished MI; returns its utility or raises on a fault."""
        try:
            u = utility_of_interval(
                self.utility, stats, self.requirement, rate, self.config.rtt_grad_significance
            )
        except EvaluationFault as exc:
            self.faulted = exc
            raise
        s = self.state
        if mi_id == s.probe_up_mi:
            s.u_plus = u
        elif mi_id == s.probe_down_mi:
            s.u_minus = u
        if s.u_plus is not None and s.u_minus is not None and s.phase is Phase.MOVING:
            self.state = update_rate(s, s.u_plus, s.u_minus, self.config)
        return u
