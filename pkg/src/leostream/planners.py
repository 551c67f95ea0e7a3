"""Bitrate and satellite-handoff decision algorithms.

The joint planners use receding-horizon search: at each chunk boundary
they score every bitrate plan over the next F chunks both with and
without a single satellite handoff at some point h in [1, F], then
execute only the first action of the winner. Two interchangeable inner
searches are provided: exhaustive enumeration of all |R|^F plans, and a
dynamic program over discretized (time, buffer, bitrate) states that
merges plans whose states collide on the grid.

Separate-selection baselines (max visible time, max signal, max
bandwidth paired with a bitrate-only planner) and an offline optimal
dynamic program over the full session are included for comparison runs.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from . import simcore
from .predictors import MIN_OBSERVED_MBPS, OracleProvider, PredictorBank
from .simcore import (
    Decision,
    PlayerState,
    QoEBreakdown,
    RateSeries,
    SimConfig,
    UnboundedDownloadError,
    VideoSpec,
    chunk_qoe,
    piecewise_download,
    settle_chunk,
)
from .traces import TraceSet, remaining_visible_time, slant_range

NEG_INF = float("-inf")


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanInstance:
    """One inner-search problem: fixed handoff point, predicted links."""

    horizon: int
    buffer_s: float
    last_bitrate_idx: int
    start_t: float
    handoff_chunk: int | None
    current_link: RateSeries
    target_link: RateSeries | None
    video: VideoSpec
    sim: SimConfig

    def __post_init__(self):
        if self.horizon < 1:
            raise PlanningError("horizon must be >= 1")
        h = self.handoff_chunk
        if h is not None:
            if not 1 <= h <= self.horizon:
                raise PlanningError(f"handoff chunk {h} outside [1, {self.horizon}]")
            if self.target_link is None:
                raise PlanningError("handoff requires a target link")


@dataclass
class PlanResult:
    best_qoe: float
    first_bitrate_idx: int
    full_bitrate_plan: tuple[int, ...]
    states_visited: int | None = None


def _chunk_wait(inst: PlanInstance, n: int, t: float, rate_idx: int) -> float:
    """Wait for horizon chunk n (1-based): handoff delay, RTT, transfer."""
    h = inst.handoff_chunk
    if h is not None and n >= h:
        link = inst.target_link
        handoff = n == h
    else:
        link = inst.current_link
        handoff = False
    if handoff:
        start = t + inst.sim.handoff_delay_s
        dl = piecewise_download(link, start, inst.video.chunk_mb(rate_idx), inst.sim.rtt_s)
        return inst.sim.handoff_delay_s + dl
    return piecewise_download(link, t, inst.video.chunk_mb(rate_idx), inst.sim.rtt_s)


def evaluate_plan(inst: PlanInstance, plan) -> float:
    """Horizon QoE of one bitrate plan, simulated with the buffer dynamics."""
    ladder = inst.video.bitrate_ladder_mbps
    t = inst.start_t
    buf = inst.buffer_s
    prev = inst.last_bitrate_idx
    total = 0.0
    for n, rate_idx in enumerate(plan, start=1):
        wait = _chunk_wait(inst, n, t, rate_idx)
        rebuf, buf, drain = settle_chunk(
            buf, wait, inst.video.chunk_duration_s, inst.sim.max_buffer_s
        )
        total += chunk_qoe(ladder[prev], ladder[rate_idx], rebuf, inst.sim)
        t = t + wait
        if drain > 0.0:
            t += drain
        prev = rate_idx
    return total


def _plan_exhaustive(inst: PlanInstance) -> PlanResult:
    n_rates = len(inst.video.bitrate_ladder_mbps)
    best_q = NEG_INF
    best_plan = None
    # Ascending lexicographic iteration with >= acceptance leaves the
    # lexicographically highest plan (hence highest first bitrate) on ties.
    for plan in itertools.product(range(n_rates), repeat=inst.horizon):
        try:
            q = evaluate_plan(inst, plan)
        except UnboundedDownloadError:
            continue
        if q >= best_q:
            best_q = q
            best_plan = plan
    if best_plan is None:
        raise UnboundedDownloadError("all horizon plans are unbounded")
    return PlanResult(best_q, best_plan[0], best_plan)


def f_mpc(inst: PlanInstance) -> PlanResult:
    """Exhaustive bitrate-only search; no handoff in the horizon."""
    if inst.handoff_chunk is not None:
        raise PlanningError("f_mpc expects no handoff point")
    return _plan_exhaustive(inst)


def f_sat_mpc(inst: PlanInstance) -> PlanResult:
    """Exhaustive search with one handoff fixed at inst.handoff_chunk."""
    if inst.handoff_chunk is None:
        raise PlanningError("f_sat_mpc expects a handoff point")
    return _plan_exhaustive(inst)


def f_sat_dpmpc(inst: PlanInstance, dt: float | None = None) -> PlanResult:
    """DP-accelerated equivalent of the exhaustive search.

    States are keyed by (floor(time/dt), floor(buffer/dt), bitrate); each
    key keeps the best accumulated QoE together with its exact time and
    buffer, so the returned QoE is the true value of a real plan and
    matches the exhaustive search whenever no two plans collide on the
    grid. handoff_chunk may be None for the stay branch.
    """
    dt = inst.sim.dt_s if dt is None else dt
    if dt <= 0:
        raise PlanningError("dt must be > 0")
    ladder = inst.video.bitrate_ladder_mbps
    n_rates = len(ladder)

    init_key = (
        int(inst.start_t / dt),
        int(inst.buffer_s / dt),
        inst.last_bitrate_idx,
    )
    stage = {init_key: (0.0, inst.start_t, inst.buffer_s)}
    parents: list[dict] = []
    visited = 0

    for n in range(1, inst.horizon + 1):
        new_stage: dict = {}
        par: dict = {}
        for key, (q, t, buf) in stage.items():
            prev_idx = key[2]
            for rate_idx in range(n_rates):
                try:
                    wait = _chunk_wait(inst, n, t, rate_idx)
                except UnboundedDownloadError:
                    continue
                rebuf, new_buf, drain = settle_chunk(
                    buf, wait, inst.video.chunk_duration_s, inst.sim.max_buffer_s
                )
                new_q = q + chunk_qoe(ladder[prev_idx], ladder[rate_idx], rebuf, inst.sim)
                new_t = t + wait
                if drain > 0.0:
                    new_t += drain
                new_key = (int(new_t / dt), int(new_buf / dt), rate_idx)
                cur = new_stage.get(new_key)
                if cur is None or new_q > cur[0]:
                    new_stage[new_key] = (new_q, new_t, new_buf)
                    par[new_key] = key
        if not new_stage:
            raise UnboundedDownloadError("all horizon plans are unbounded")
        parents.append(par)
        stage = new_stage
        visited += len(new_stage)

    best_q = max(v[0] for v in stage.values())
    tied = [key for key, v in stage.items() if v[0] == best_q]
    best_plan = max(_reconstruct(parents, key) for key in tied)
    return PlanResult(best_q, best_plan[0], best_plan, states_visited=visited)


def _reconstruct(parents: list[dict], final_key) -> tuple[int, ...]:
    plan = []
    key = final_key
    for par in reversed(parents):
        plan.append(key[2])
        key = par[key]
    plan.reverse()
    return tuple(plan)


def select_candidates(
    mode: str,
    visible: list[int],
    predictions: dict[int, float],
    current: int,
    previous: int | None,
) -> list[int]:
    """Handoff candidates: every other visible satellite (manifold) or just
    the best-predicted runner-up, excluding the satellite we last left
    (dual)."""
    others = [s for s in visible if s != current]
    if mode == "manifold":
        return sorted(others)
    if mode != "dual":
        raise PlanningError(f"unknown candidate mode {mode!r}")
    eligible = [s for s in others if s != previous]
    if not eligible:
        return []
    best = min(eligible, key=lambda s: (-predictions.get(s, 0.0), s))
    return [best]


def baseline_handoff(
    strategy: str,
    current_sat: int,
    trace: TraceSet,
    t: float,
    chunk_duration_s: float,
) -> int:
    """Separate-selection satellite rules: MVT, MRSS, or MB."""
    idx = trace.clamped_index(t)
    t = idx * trace.sample_dt  # clamp queries to the trace
    visible = sorted(tr.sat_id for tr in trace.tracks if tr.visible[idx])
    if not visible:
        raise PlanningError(f"no satellite visible at t={t:.3f}")

    if strategy == "mrss":
        elev = {s: float(trace.track(s).elevation_deg[idx]) for s in visible}
        best = min(visible, key=lambda s: (-elev[s], s))
        cur_elev = elev.get(current_sat, NEG_INF)
        return best if elev[best] > cur_elev else current_sat

    if strategy not in ("mvt", "mb"):
        raise PlanningError(f"unknown handoff strategy {strategy!r}")
    remaining = (
        remaining_visible_time(trace, current_sat, t)
        if current_sat in trace.sat_ids
        else 0.0
    )
    if remaining > chunk_duration_s:
        return current_sat
    if strategy == "mvt":
        return min(
            visible, key=lambda s: (-remaining_visible_time(trace, s, t), s)
        )
    thr = {s: float(trace.track(s).throughput_mbps[idx]) for s in visible}
    return min(visible, key=lambda s: (-thr[s], s))


@dataclass
class DecisionStats:
    inner_calls: int = 0
    best_qoe: float = NEG_INF
    chose_handoff: bool = False
    target_satellite: int | None = None
    handoff_chunk: int | None = None


class _PredictingController:
    """Shared prediction plumbing for the online controllers."""

    def __init__(self, video: VideoSpec, cfg: SimConfig, predictor: str, horizon: int):
        if predictor not in ("robust", "oracle"):
            raise PlanningError(f"unknown predictor {predictor!r}")
        self.video = video
        self.cfg = cfg
        self.predictor = predictor
        self.horizon = horizon
        self.bank = PredictorBank() if predictor == "robust" else None

    def observe_start(self, trace: TraceSet, state: PlayerState) -> None:
        if self.bank is not None:
            self.bank.observe_epoch(trace, 0.0)

    def observe_chunk(self, trace: TraceSet, state: PlayerState, outcome) -> None:
        if self.bank is None:
            return
        transfer = outcome.download_time_s - self.cfg.rtt_s
        realized = (
            outcome.bitrate_mbps * self.video.chunk_duration_s / transfer
            if transfer > 0
            else 0.0
        )
        self.bank.observe_epoch(
            trace,
            state.wallclock_s,
            serving_sat=outcome.satellite_id,
            serving_actual_mbps=realized,
        )

    def _visible(self, trace: TraceSet, t: float) -> list[int]:
        idx = trace.clamped_index(t)
        return sorted(tr.sat_id for tr in trace.tracks if tr.visible[idx])

    def _rank_window_s(self, chunks: int) -> float:
        return max(chunks, 1) * self.video.chunk_duration_s

    def _horizon_link(self, trace: TraceSet, t: float, sat: int, value: float) -> RateSeries:
        """Predicted link: the scalar forecast carried forward along the
        satellite's known pass, collapsing to the observation floor once
        the pass ends.

        Trajectories are deterministic, so two things are knowable ahead
        of time even though throughput itself is only estimated: when the
        satellite leaves visibility, and the inverse-square shape of the
        rate along the pass. The scalar sets the level; the geometry sets
        the trend. Hand-built traces without pass geometry fall back to a
        flat forecast over the visibility window.
        """
        dt = trace.sample_dt
        t_q = trace.clamped_index(t) * trace.sample_dt
        remaining = remaining_visible_time(trace, sat, t_q)
        if remaining < math.inf:
            # Model the cliff one sample early: a download stranded past
            # the true edge stalls until the next pass, so the boundary
            # sample is never worth scheduling into.
            remaining -= dt
        if remaining <= 0.0:
            return RateSeries.constant(MIN_OBSERVED_MBPS)

        active = None
        for geom in trace.track(sat).passes:
            if geom.pass_start <= t_q <= geom.pass_end:
                active = geom
                break
        if active is None:
            if remaining == math.inf:
                return RateSeries.constant(value)
            return RateSeries(t_q, remaining, [value, MIN_OBSERVED_MBPS])

        if remaining < math.inf:
            n = max(int(remaining // dt), 1)
        else:
            n = max(1, int(math.ceil(max(active.pass_end - t_q, dt) / dt)))
        d_now_sq = slant_range(active, t_q) ** 2
        rates = [
            value * d_now_sq / slant_range(active, t_q + (k + 0.5) * dt) ** 2
            for k in range(n)
        ]
        if remaining < math.inf:
            rates.append(MIN_OBSERVED_MBPS)
        return RateSeries(t_q, dt, rates)

    def _predictions(
        self, trace: TraceSet, t: float, sats: list[int], chunks: int
    ) -> tuple[dict[int, RateSeries], dict[int, float]]:
        """Per-satellite predicted link and ranking scalar."""
        links: dict[int, RateSeries] = {}
        scalars: dict[int, float] = {}
        if self.predictor == "robust":
            for sat in sats:
                if not self.bank.has_history(sat):
                    idx = trace.clamped_index(t)
                    self.bank.record(
                        sat, float(trace.track(sat).throughput_mbps[idx]), t
                    )
                value = self.bank.predict(sat)
                scalars[sat] = value
                links[sat] = self._horizon_link(trace, t, sat, value)
        else:
            oracle = OracleProvider(trace)
            window = self._rank_window_s(chunks)
            for sat in sats:
                links[sat] = oracle.link(sat, t, max(window, trace.duration_s - t))
                scalars[sat] = oracle.scalar(sat, t, window)
        return links, scalars


class JointMpcController(_PredictingController):
    """Receding-horizon joint bitrate and handoff planner.

    mode selects the candidate rule (dual or manifold); search picks the
    inner solver (dp or exhaustive). Only the first action of the winning
    horizon plan is executed; a handoff happens only when the winner
    switches before the immediate chunk.
    """

    def __init__(
        self,
        video: VideoSpec,
        cfg: SimConfig,
        mode: str = "dual",
        predictor: str = "robust",
        search: str = "dp",
        horizon: int = 5,
        dp_dt: float | None = None,
        dump_candidates: bool = False,
    ):
        super().__init__(video, cfg, predictor, horizon)
        if mode not in ("dual", "manifold"):
            raise PlanningError(f"unknown mode {mode!r}")
        if search not in ("dp", "exhaustive"):
            raise PlanningError(f"unknown search {search!r}")
        self.mode = mode
        self.search = search
        self.dp_dt = cfg.dt_s if dp_dt is None else dp_dt
        self.previous_satellite: int | None = None
        self._last_handoff_chunk: int | None = None
        self.dump_candidates = dump_candidates
        self.candidate_rows: list[tuple[int, int, int | None, float]] = []
        self.last_stats = DecisionStats()

    def _solve(self, inst: PlanInstance) -> PlanResult:
        if self.search == "dp":
            return f_sat_dpmpc(inst, self.dp_dt)
        if inst.handoff_chunk is None:
            return f_mpc(inst)
        return f_sat_mpc(inst)

    def decide(self, state: PlayerState, trace: TraceSet) -> Decision:
        t = state.wallclock_s
        cur = state.current_satellite
        stats = DecisionStats()
        self.last_stats = stats
        visible = self._visible(trace, t)
        if not visible:
            return Decision(0, cur, False)
        # The no-bounce-back exclusion only guards against an immediate
        # return: it lapses once the satellite we left has set, or one
        # full horizon after the handoff. A permanent exclusion would
        # strand the planner on a dying satellite in two-satellite skies.
        if self.previous_satellite is not None:
            expired = (
                self._last_handoff_chunk is not None
                and state.chunk_index - self._last_handoff_chunk >= self.horizon
            )
            if expired or self.previous_satellite not in visible:
                self.previous_satellite = None

        chunks = min(self.horizon, self.video.n_chunks - state.chunk_index)
        links, scalars = self._predictions(
            trace, t, sorted(set(visible) | {cur}), chunks
        )

        def make_inst(h: int | None, target: int | None) -> PlanInstance:
            return PlanInstance(
                horizon=chunks,
                buffer_s=state.buffer_s,
                last_bitrate_idx=state.last_bitrate_idx,
                start_t=t,
                handoff_chunk=h,
                current_link=links[cur],
                target_link=links[target] if target is not None else None,
                video=self.video,
                sim=self.cfg,
            )

        # Tie order: higher QoE, then stay over handoff, later handoff
        # point, lower satellite id, higher first bitrate.
        options = []

        def add_option(res: PlanResult, sat: int, h: int | None) -> None:
            stay = 1 if h is None else 0
            options.append(
                ((res.best_qoe, stay, h or 0, -sat, res.first_bitrate_idx), res, sat, h)
            )

        try:
            add_option(self._solve(make_inst(None, None)), cur, None)
        except UnboundedDownloadError:
            pass
        stats.inner_calls = 1

        candidates = select_candidates(
            self.mode, visible, scalars, cur, self.previous_satellite
        )
        for cand in candidates:
            for h in range(1, chunks + 1):
                stats.inner_calls += 1
                try:
                    res = self._solve(make_inst(h, cand))
                except UnboundedDownloadError:
                    continue
                add_option(res, cand, h)
                if self.dump_candidates:
                    self.candidate_rows.append(
                        (state.chunk_index, cand, h, res.best_qoe)
                    )

        if not options:
            # Every plan diverged: limp along on the strongest visible signal.
            idx = trace.clamped_index(t)
            fallback = min(
                visible,
                key=lambda s: (-float(trace.track(s).throughput_mbps[idx]), s),
            )
            return Decision(0, fallback, fallback != cur)

        key, res, sat, h = max(options)
        stats.best_qoe = res.best_qoe
        stats.target_satellite = sat
        stats.handoff_chunk = h
        if h == 1 and sat != cur:
            stats.chose_handoff = True
            self.previous_satellite = cur
            self._last_handoff_chunk = state.chunk_index
            return Decision(res.first_bitrate_idx, sat, True)
        return Decision(res.first_bitrate_idx, cur, False)


class SeparateController(_PredictingController):
    """Baseline: satellite picked by a handoff rule, bitrate by MPC on it."""

    def __init__(
        self,
        video: VideoSpec,
        cfg: SimConfig,
        strategy: str = "mb",
        predictor: str = "robust",
        horizon: int = 5,
    ):
        super().__init__(video, cfg, predictor, horizon)
        if strategy not in ("mvt", "mrss", "mb"):
            raise PlanningError(f"unknown handoff strategy {strategy!r}")
        self.strategy = strategy
        self.last_stats = DecisionStats()

    def decide(self, state: PlayerState, trace: TraceSet) -> Decision:
        t = state.wallclock_s
        cur = state.current_satellite
        sat = baseline_handoff(
            self.strategy, cur, trace, t, self.video.chunk_duration_s
        )
        chunks = min(self.horizon, self.video.n_chunks - state.chunk_index)
        links, _ = self._predictions(trace, t, [sat], chunks)
        inst = PlanInstance(
            horizon=chunks,
            buffer_s=state.buffer_s,
            last_bitrate_idx=state.last_bitrate_idx,
            start_t=t,
            handoff_chunk=None,
            current_link=links[sat],
            target_link=None,
            video=self.video,
            sim=self.cfg,
        )
        stats = DecisionStats(inner_calls=1)
        self.last_stats = stats
        try:
            res = f_mpc(inst)
        except UnboundedDownloadError:
            return Decision(0, sat, sat != cur)
        stats.best_qoe = res.best_qoe
        stats.target_satellite = sat
        stats.chose_handoff = sat != cur
        return Decision(res.first_bitrate_idx, sat, sat != cur)


def _offline_actions(trace: TraceSet, t: float) -> list[int]:
    idx = trace.clamped_index(t)
    return [tr.sat_id for tr in trace.tracks if tr.visible[idx]]


def offline_optimal_plan(
    trace: TraceSet, video: VideoSpec, cfg: SimConfig, dt: float | None = None
) -> tuple[list[Decision], float]:
    """Full-session DP over true throughput.

    State is (time index, buffer index, bitrate, satellite) with exact
    time/buffer carried along each kept path; handoffs (with delay) are
    allowed before any chunk. Returns the per-chunk decisions and the DP
    objective, which equals the realized session QoE of those decisions.
    """
    dt = cfg.dt_s if dt is None else dt
    if dt <= 0:
        raise PlanningError("dt must be > 0")
    ladder = video.bitrate_ladder_mbps
    series = {tr.sat_id: RateSeries.for_satellite(trace, tr.sat_id) for tr in trace.tracks}
    start = simcore.initial_state(trace, video, cfg)

    init_key = (0, 0, start.last_bitrate_idx, start.current_satellite)
    stage = {init_key: (0.0, 0.0, 0.0)}
    parents: list[dict] = []

    for k in range(video.n_chunks):
        new_stage: dict = {}
        par: dict = {}
        for key, (q, t, buf) in stage.items():
            prev_idx, cur_sat = key[2], key[3]
            for sat in _offline_actions(trace, t):
                handoff = sat != cur_sat
                for rate_idx in range(len(ladder)):
                    start_t = t + cfg.handoff_delay_s if handoff else t
                    try:
                        dl = piecewise_download(
                            series[sat], start_t, video.chunk_mb(rate_idx), cfg.rtt_s
                        )
                    except UnboundedDownloadError:
                        continue
                    wait = cfg.handoff_delay_s + dl if handoff else dl
                    rebuf, new_buf, drain = settle_chunk(
                        buf, wait, video.chunk_duration_s, cfg.max_buffer_s
                    )
                    smooth = (
                        0.0
                        if k == 0
                        else cfg.mu3 * abs(ladder[rate_idx] - ladder[prev_idx])
                    )
                    new_q = q + cfg.mu1 * ladder[rate_idx] - cfg.mu2 * rebuf - smooth
                    new_t = t + wait
                    if drain > 0.0:
                        new_t += drain
                    new_key = (int(new_t / dt), int(new_buf / dt), rate_idx, sat)
                    cur_entry = new_stage.get(new_key)
                    if cur_entry is None or new_q > cur_entry[0]:
                        new_stage[new_key] = (new_q, new_t, new_buf)
                        par[new_key] = key
        if not new_stage:
            raise PlanningError(f"offline search dead-ended at chunk {k}")
        parents.append(par)
        stage = new_stage

    best_key = max(stage, key=lambda key: (stage[key][0],) + key)
    best_q = stage[best_key][0]

    path = []
    key = best_key
    for par in reversed(parents):
        path.append((key[2], key[3]))
        key = par[key]
    path.reverse()

    decisions = []
    prev_sat = start.current_satellite
    for rate_idx, sat in path:
        decisions.append(Decision(rate_idx, sat, sat != prev_sat))
        prev_sat = sat
    return decisions, best_q


def offline_optimal(
    trace: TraceSet, video: VideoSpec, cfg: SimConfig, dt: float | None = None
) -> QoEBreakdown:
    """Best achievable session QoE under full trace knowledge (DP, then replay)."""
    decisions, _ = offline_optimal_plan(trace, video, cfg, dt)
    state = simcore.initial_state(trace, video, cfg)
    outcomes = []
    for decision in decisions:
        state, outcome = simcore.step_chunk(state, decision, trace, video, cfg)
        outcomes.append(outcome)
    return simcore.session_qoe(outcomes, cfg)
