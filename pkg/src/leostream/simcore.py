"""Chunk-by-chunk playback simulation and QoE accounting.

One session downloads a fixed ladder video chunk by chunk over a
time-varying satellite link. Each step charges an optional handoff delay,
one link RTT, and the transfer time obtained by integrating the
piecewise-constant trace, then updates the playback buffer and the three
QoE terms (quality reward, rebuffer penalty, smoothness penalty).
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field

import numpy as np

from .traces import TraceSet

DEFAULT_LADDER_MBPS = (0.3, 1.2, 2.85)
EXTENDED_LADDER_MBPS = (0.3, 0.75, 1.2, 1.85, 2.85, 4.3)


class SimulationError(RuntimeError):
    pass


class UnboundedDownloadError(SimulationError):
    """A download can never finish: zero throughput past the end of the trace."""


@dataclass(frozen=True)
class VideoSpec:
    n_chunks: int = 49
    chunk_duration_s: float = 2.0
    bitrate_ladder_mbps: tuple[float, ...] = DEFAULT_LADDER_MBPS

    def __post_init__(self):
        if self.n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        ladder = self.bitrate_ladder_mbps
        if not ladder or any(b <= 0 for b in ladder):
            raise ValueError("bitrate ladder entries must be > 0")
        if any(a >= b for a, b in zip(ladder, ladder[1:])):
            raise ValueError("bitrate ladder must be strictly ascending")

    def chunk_mb(self, bitrate_idx: int) -> float:
        """Chunk size in megabits (CBR: bitrate times duration, exactly)."""
        return self.bitrate_ladder_mbps[bitrate_idx] * self.chunk_duration_s


@dataclass(frozen=True)
class SimConfig:
    mu1: float = 1.0
    mu2: float = 4.3
    mu3: float = 1.0
    rtt_s: float = 0.08
    handoff_delay_s: float = 0.2
    max_buffer_s: float = 60.0
    dt_s: float = 1.0

    def __post_init__(self):
        for name in ("mu1", "mu2", "mu3", "rtt_s", "handoff_delay_s", "max_buffer_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.dt_s <= 0:
            raise ValueError("dt_s must be > 0")


@dataclass(frozen=True)
class PlayerState:
    chunk_index: int
    wallclock_s: float
    buffer_s: float
    last_bitrate_idx: int
    current_satellite: int
    rebuffer_total_s: float = 0.0


@dataclass(frozen=True)
class Decision:
    bitrate_idx: int
    target_satellite: int
    handoff_now: bool = False


@dataclass(frozen=True)
class ChunkOutcome:
    chunk_index: int
    bitrate_mbps: float
    satellite_id: int
    download_time_s: float
    rebuffer_s: float
    handoff_performed: bool
    drain_s: float
    qoe_quality: float
    qoe_rebuf_penalty: float
    qoe_smooth_penalty: float


@dataclass(frozen=True)
class QoEBreakdown:
    quality_total: float
    rebuf_penalty_total: float
    smooth_penalty_total: float
    qoe_total: float
    per_chunk: tuple[ChunkOutcome, ...] = field(repr=False, default=())


class RateSeries:
    """Piecewise-constant Mbps: value i holds on [anchor + i*dt, anchor + (i+1)*dt).

    The final value extends past the end of the series, so lookups never
    run out of data. Used both for trace playback and for predicted
    throughput handed to the planners.
    """

    __slots__ = ("anchor_t", "sample_dt", "rates")

    def __init__(self, anchor_t: float, sample_dt: float, rates):
        self.anchor_t = anchor_t
        self.sample_dt = sample_dt
        self.rates = np.asarray(rates, dtype=float)
        if len(self.rates) == 0:
            raise ValueError("RateSeries needs at least one sample")

    @classmethod
    def constant(cls, rate_mbps: float) -> "RateSeries":
        return cls(0.0, 1.0, [rate_mbps])

    @classmethod
    def for_satellite(cls, trace: TraceSet, sat_id: int) -> "RateSeries":
        return cls(0.0, trace.sample_dt, trace.track(sat_id).throughput_mbps)

    def rate_and_edge(self, t: float) -> tuple[float, float]:
        """Rate at time t and the end of its constant segment (inf on the last)."""
        idx = int((t - self.anchor_t) / self.sample_dt)
        if idx < 0:
            idx = 0
        last = len(self.rates) - 1
        if idx >= last:
            return float(self.rates[last]), math.inf
        return float(self.rates[idx]), self.anchor_t + (idx + 1) * self.sample_dt

    def scaled(self, factor: float) -> "RateSeries":
        return RateSeries(self.anchor_t, self.sample_dt, self.rates * factor)


def piecewise_download(
    series: RateSeries, start_t: float, size_mb: float, rtt_s: float
) -> float:
    """Seconds to fetch size_mb starting at start_t: one RTT plus transfer.

    Transfer time is the smallest tau whose rate integral over
    [start_t + rtt, start_t + rtt + tau] reaches size_mb.
    """
    if size_mb <= 0:
        return rtt_s
    t = start_t + rtt_s
    remaining = size_mb
    while True:
        rate, seg_end = series.rate_and_edge(t)
        if rate > 0:
            finish = t + remaining / rate
            if finish <= seg_end:
                return finish - start_t
            remaining = remaining - rate * (seg_end - t)
        elif seg_end == math.inf:
            raise UnboundedDownloadError(
                f"zero throughput beyond the end of the trace at t={t:.3f}"
            )
        t = seg_end


def settle_chunk(
    buffer_s: float, wait_s: float, chunk_duration_s: float, max_buffer_s: float
) -> tuple[float, float, float]:
    """Buffer update for one chunk: returns (rebuffer_s, new_buffer_s, drain_s).

    If adding the chunk would exceed the buffer cap the player idles for
    the excess (drain_s) before requesting the next chunk.
    """
    rebuffer = max(0.0, wait_s - buffer_s)
    buf = max(0.0, buffer_s - wait_s) + chunk_duration_s
    drain = 0.0
    if buf > max_buffer_s:
        drain = buf - max_buffer_s
        buf = max_buffer_s
    return rebuffer, buf, drain


def quality(bitrate_mbps: float) -> float:
    """Linear quality mapping: the bitrate itself, in Mbps."""
    return bitrate_mbps


def chunk_qoe(
    prev_bitrate_mbps: float, bitrate_mbps: float, rebuffer_s: float, cfg: SimConfig
) -> float:
    """Per-chunk score: weighted quality minus rebuffer and switch penalties."""
    return (
        cfg.mu1 * quality(bitrate_mbps)
        - cfg.mu2 * rebuffer_s
        - cfg.mu3 * abs(quality(bitrate_mbps) - quality(prev_bitrate_mbps))
    )


def download_time(
    trace: TraceSet, sat_id: int, start_t: float, chunk_mb: float, cfg: SimConfig
) -> float:
    return piecewise_download(
        RateSeries.for_satellite(trace, sat_id), start_t, chunk_mb, cfg.rtt_s
    )


def validate_decision(state: PlayerState, decision: Decision, video: VideoSpec) -> None:
    if state.chunk_index >= video.n_chunks:
        raise SimulationError("session already complete")
    if not 0 <= decision.bitrate_idx < len(video.bitrate_ladder_mbps):
        raise SimulationError(f"bitrate index {decision.bitrate_idx} off the ladder")
    if decision.handoff_now and decision.target_satellite == state.current_satellite:
        raise SimulationError("handoff_now requires a different target satellite")


def apply_chunk(
    state: PlayerState,
    decision: Decision,
    download_time_s: float,
    video: VideoSpec,
    cfg: SimConfig,
) -> tuple[PlayerState, ChunkOutcome]:
    """Buffer, wallclock and QoE bookkeeping once the download time is known.

    Shared by the single-user stepper and the multi-user event loop so
    both settle a chunk with identical arithmetic.
    """
    handoff = decision.handoff_now
    wait = cfg.handoff_delay_s + download_time_s if handoff else download_time_s
    rebuffer, new_buffer, drain = settle_chunk(
        state.buffer_s, wait, video.chunk_duration_s, cfg.max_buffer_s
    )

    bitrate = video.bitrate_ladder_mbps[decision.bitrate_idx]
    prev_bitrate = video.bitrate_ladder_mbps[state.last_bitrate_idx]
    smooth = 0.0 if state.chunk_index == 0 else abs(
        quality(bitrate) - quality(prev_bitrate)
    )
    outcome = ChunkOutcome(
        chunk_index=state.chunk_index,
        bitrate_mbps=bitrate,
        satellite_id=decision.target_satellite,
        download_time_s=download_time_s,
        rebuffer_s=rebuffer,
        handoff_performed=handoff,
        drain_s=drain,
        qoe_quality=cfg.mu1 * quality(bitrate),
        qoe_rebuf_penalty=cfg.mu2 * rebuffer,
        qoe_smooth_penalty=cfg.mu3 * smooth,
    )
    new_wall = state.wallclock_s + wait
    if drain > 0.0:
        new_wall += drain
    new_state = PlayerState(
        chunk_index=state.chunk_index + 1,
        wallclock_s=new_wall,
        buffer_s=new_buffer,
        last_bitrate_idx=decision.bitrate_idx,
        current_satellite=decision.target_satellite,
        rebuffer_total_s=state.rebuffer_total_s + rebuffer,
    )
    return new_state, outcome


def step_chunk(
    state: PlayerState,
    decision: Decision,
    trace: TraceSet,
    video: VideoSpec,
    cfg: SimConfig,
) -> tuple[PlayerState, ChunkOutcome]:
    """Download one chunk and advance the player state."""
    validate_decision(state, decision, video)
    if decision.handoff_now:
        start_t = state.wallclock_s + cfg.handoff_delay_s
    else:
        start_t = state.wallclock_s
    dl = download_time(
        trace, decision.target_satellite, start_t, video.chunk_mb(decision.bitrate_idx), cfg
    )
    return apply_chunk(state, decision, dl, video, cfg)


def session_qoe(outcomes, cfg: SimConfig) -> QoEBreakdown:
    """Sum per-chunk terms into a session breakdown.

    qoe_total is accumulated per chunk independently of the three totals so
    the breakdown identity is an actual check, not a tautology.
    """
    outcomes = tuple(outcomes)
    if not outcomes:
        raise SimulationError("no chunk outcomes")
    for prev, cur in zip(outcomes, outcomes[1:]):
        if cur.chunk_index != prev.chunk_index + 1:
            raise SimulationError(
                f"gap in chunk indices: {prev.chunk_index} -> {cur.chunk_index}"
            )
    q = r = s = total = 0.0
    for oc in outcomes:
        q += oc.qoe_quality
        r += oc.qoe_rebuf_penalty
        s += oc.qoe_smooth_penalty
        total += oc.qoe_quality - oc.qoe_rebuf_penalty - oc.qoe_smooth_penalty
    return QoEBreakdown(
        quality_total=q,
        rebuf_penalty_total=r,
        smooth_penalty_total=s,
        qoe_total=total,
        per_chunk=outcomes,
    )


def qos(per_user_qoe) -> float:
    """Mean QoE across users."""
    values = list(per_user_qoe)
    if not values:
        raise ValueError("qos of an empty user list")
    return sum(values) / len(values)


def initial_state(trace: TraceSet, video: VideoSpec, cfg: SimConfig) -> PlayerState:
    """Session start: empty buffer, lowest ladder entry, best visible satellite."""
    best_sat = None
    best_thr = -1.0
    for tr in trace.tracks:
        if tr.visible[0] and tr.throughput_mbps[0] > best_thr:
            best_sat = tr.sat_id
            best_thr = float(tr.throughput_mbps[0])
    if best_sat is None:
        raise SimulationError("no satellite visible at t=0")
    return PlayerState(
        chunk_index=0,
        wallclock_s=0.0,
        buffer_s=0.0,
        last_bitrate_idx=0,
        current_satellite=best_sat,
        rebuffer_total_s=0.0,
    )


@dataclass
class SessionResult:
    breakdown: QoEBreakdown
    decisions: tuple[Decision, ...]
    decision_latencies_s: tuple[float, ...]

    @property
    def handoff_count(self) -> int:
        return sum(1 for oc in self.breakdown.per_chunk if oc.handoff_performed)


def run_session(
    trace: TraceSet, controller, video: VideoSpec, cfg: SimConfig
) -> SessionResult:
    """Drive one client session: controller decides, simulator steps.

    The controller must provide decide(state, trace) -> Decision plus the
    observe_start / observe_chunk hooks used to feed its predictors.
    """
    state = initial_state(trace, video, cfg)
    controller.observe_start(trace, state)
    outcomes = []
    decisions = []
    latencies = []
    for _ in range(video.n_chunks):
        t0 = _time.perf_counter()
        decision = controller.decide(state, trace)
        latencies.append(_time.perf_counter() - t0)
        state, outcome = step_chunk(state, decision, trace, video, cfg)
        controller.observe_chunk(trace, state, outcome)
        outcomes.append(outcome)
        decisions.append(decision)
    return SessionResult(
        breakdown=session_qoe(outcomes, cfg),
        decisions=tuple(decisions),
        decision_latencies_s=tuple(latencies),
    )


def _fmt9(x: float) -> float:
    return float(f"{x:.9g}")


def session_json(breakdown: QoEBreakdown, video: VideoSpec, cfg: SimConfig) -> dict:
    """Session result payload with floats trimmed to 9 significant digits."""
    return {
        "config": {
            "video": {
                "n_chunks": video.n_chunks,
                "chunk_duration_s": _fmt9(video.chunk_duration_s),
                "bitrate_ladder_mbps": [_fmt9(b) for b in video.bitrate_ladder_mbps],
            },
            "sim": {
                "mu1": _fmt9(cfg.mu1),
                "mu2": _fmt9(cfg.mu2),
                "mu3": _fmt9(cfg.mu3),
                "rtt_s": _fmt9(cfg.rtt_s),
                "handoff_delay_s": _fmt9(cfg.handoff_delay_s),
                "max_buffer_s": _fmt9(cfg.max_buffer_s),
                "dt_s": _fmt9(cfg.dt_s),
            },
        },
        "chunks": [
            {
                "chunk_index": oc.chunk_index,
                "bitrate_mbps": _fmt9(oc.bitrate_mbps),
                "satellite_id": oc.satellite_id,
                "download_time_s": _fmt9(oc.download_time_s),
                "rebuffer_s": _fmt9(oc.rebuffer_s),
                "handoff_performed": oc.handoff_performed,
                "drain_s": _fmt9(oc.drain_s),
                "qoe_quality": _fmt9(oc.qoe_quality),
                "qoe_rebuf_penalty": _fmt9(oc.qoe_rebuf_penalty),
                "qoe_smooth_penalty": _fmt9(oc.qoe_smooth_penalty),
            }
            for oc in breakdown.per_chunk
        ],
        "totals": {
            "quality": _fmt9(breakdown.quality_total),
            "rebuf_penalty": _fmt9(breakdown.rebuf_penalty_total),
            "smooth_penalty": _fmt9(breakdown.smooth_penalty_total),
            "qoe": _fmt9(breakdown.qoe_total),
        },
    }


__all__ = [
    "VideoSpec",
    "SimConfig",
    "PlayerState",
    "Decision",
    "ChunkOutcome",
    "QoEBreakdown",
    "RateSeries",
    "SessionResult",
    "SimulationError",
    "UnboundedDownloadError",
    "DEFAULT_LADDER_MBPS",
    "EXTENDED_LADDER_MBPS",
    "piecewise_download",
    "settle_chunk",
    "quality",
    "chunk_qoe",
    "download_time",
    "validate_decision",
    "apply_chunk",
    "step_chunk",
    "session_qoe",
    "qos",
    "initial_state",
    "run_session",
    "session_json",
]
