"""Multiple clients sharing satellite capacity, plus a centralized planner.

Capacity is split equally among the users actively transferring on a
satellite, after background (non-video) demand has taken its fraction.
The event loop advances all transfers between breakpoints (trace sample
edges, background windows, phase changes, chunk completions) where every
rate is constant, so download progress integrates exactly. With one user
and no background load the loop performs the same arithmetic as the
single-user simulator, chunk for chunk, bit for bit.
"""

from __future__ import annotations

import itertools
import math
import time as _time
from dataclasses import dataclass

import numpy as np

from . import simcore
from .planners import PlanInstance, PlanningError, f_sat_dpmpc, select_candidates
from .simcore import (
    Decision,
    PlayerState,
    QoEBreakdown,
    RateSeries,
    SimConfig,
    VideoSpec,
)
from .traces import TraceSet

BACKGROUND_WINDOW_S = 10.0
BACKGROUND_DEMAND_LOW = 0.0
BACKGROUND_DEMAND_HIGH = 0.06
BACKGROUND_CAP = 0.8
CENTRALIZED_USER_CAP = 3


class MultiUserError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackgroundProfile:
    """Piecewise-constant fraction of each satellite's capacity consumed by
    non-video users."""

    window_s: float
    fractions: dict[int, np.ndarray]

    def fraction(self, sat_id: int, t: float) -> float:
        values = self.fractions[sat_id]
        if t < 0:
            raise MultiUserError(f"t={t} before profile start")
        idx = min(int(t / self.window_s), len(values) - 1)
        return float(values[idx])

    def next_edge(self, t: float) -> float:
        any_values = next(iter(self.fractions.values()))
        idx = int(t / self.window_s)
        if idx >= len(any_values) - 1:
            return math.inf
        return (idx + 1) * self.window_s


def make_background_profile(
    trace: TraceSet,
    n_background: int,
    seed: int,
    window_s: float = BACKGROUND_WINDOW_S,
    demand_low: float = BACKGROUND_DEMAND_LOW,
    demand_high: float = BACKGROUND_DEMAND_HIGH,
    cap: float = BACKGROUND_CAP,
) -> BackgroundProfile:
    """Per-satellite background demand: one uniform draw per user per window,
    summed and capped."""
    rng = np.random.default_rng(seed)
    n_windows = max(1, int(np.ceil(trace.duration_s / window_s)))
    fractions = {}
    for sat_id in trace.sat_ids:
        if n_background == 0:
            fractions[sat_id] = np.zeros(n_windows)
        else:
            draws = rng.uniform(demand_low, demand_high, size=(n_windows, n_background))
            fractions[sat_id] = np.minimum(draws.sum(axis=1), cap)
    return BackgroundProfile(window_s=window_s, fractions=fractions)


def background_capacity_fraction(
    profile: BackgroundProfile | None, sat_id: int, t: float
) -> float:
    if profile is None:
        return 0.0
    return profile.fraction(sat_id, t)


def allocate_shares(
    capacity_mbps: float, active: list[int], background_fraction: float
) -> dict[int, float]:
    """Equal split of the residual capacity among active downloaders."""
    if capacity_mbps < 0:
        raise MultiUserError("capacity must be >= 0")
    if not 0.0 <= background_fraction < 1.0:
        raise MultiUserError("background fraction must be in [0, 1)")
    if not active:
        return {}
    residual = capacity_mbps * (1.0 - background_fraction)
    share = residual / len(active)
    return {uid: share for uid in active}


@dataclass(frozen=True)
class ShareEvent:
    time_s: float
    satellite_id: int
    active_users: tuple[int, ...]
    per_user_mbps: dict[int, float]
    capacity_mbps: float
    background_fraction: float


@dataclass
class MultiUserScenario:
    trace: TraceSet
    controllers: list
    n_background: int = 0
    background_profile: BackgroundProfile | None = None

    @property
    def n_users(self) -> int:
        return len(self.controllers)


@dataclass
class MultiUserResult:
    per_user: list[QoEBreakdown | None]
    failures: dict[int, str]
    qos: float
    share_events: list[ShareEvent]
    decisions: list[tuple[Decision, ...]]
    decision_latencies_s: list[tuple[float, ...]]


class _User:
    __slots__ = (
        "uid", "controller", "state", "phase", "ready_t", "transfer_pos",
        "transfer_remaining", "transfer_sat", "transfer_start", "decision",
        "outcomes", "decisions", "latencies",
    )

    def __init__(self, uid: int, controller, state: PlayerState):
        self.uid = uid
        self.controller = controller
        self.state = state
        self.phase = "decide"
        self.ready_t = 0.0
        self.transfer_pos = 0.0
        self.transfer_remaining = 0.0
        self.transfer_sat = 0
        self.transfer_start = 0.0
        self.decision: Decision | None = None
        self.outcomes = []
        self.decisions = []
        self.latencies = []


def _decide(user: _User, users: list[_User], trace: TraceSet) -> Decision:
    ctrl = user.controller
    t0 = _time.perf_counter()
    if hasattr(ctrl, "decide_multi"):
        decision = ctrl.decide_multi(user.uid, [u.state for u in users], trace)
    else:
        decision = ctrl.decide(user.state, trace)
    user.latencies.append(_time.perf_counter() - t0)
    return decision


def _observe_start(user: _User, trace: TraceSet) -> None:
    ctrl = user.controller
    if hasattr(ctrl, "observe_start_user"):
        ctrl.observe_start_user(user.uid, trace, user.state)
    else:
        ctrl.observe_start(trace, user.state)


def _observe_chunk(user: _User, trace: TraceSet, outcome) -> None:
    ctrl = user.controller
    if hasattr(ctrl, "observe_chunk_user"):
        ctrl.observe_chunk_user(user.uid, trace, user.state, outcome)
    else:
        ctrl.observe_chunk(trace, user.state, outcome)


def simulate_multi(
    scenario: MultiUserScenario,
    video: VideoSpec,
    cfg: SimConfig,
    seed: int = 0,
) -> MultiUserResult:
    """Event-driven shared-capacity simulation of all video users."""
    trace = scenario.trace
    if scenario.n_users < 1:
        raise MultiUserError("need at least one video user")
    profile = scenario.background_profile
    if profile is None and scenario.n_background > 0:
        profile = make_background_profile(trace, scenario.n_background, seed)

    series = {tr.sat_id: RateSeries.for_satellite(trace, tr.sat_id) for tr in trace.tracks}
    users = []
    failures: dict[int, str] = {}
    start = simcore.initial_state(trace, video, cfg)
    for uid, controller in enumerate(scenario.controllers):
        user = _User(uid, controller, start)
        users.append(user)
        try:
            _observe_start(user, trace)
        except Exception as exc:  # pragma: no cover - defensive
            user.phase = "failed"
            failures[uid] = repr(exc)

    share_events: list[ShareEvent] = []
    last_logged: dict[int, tuple] = {}

    def fail(user: _User, exc: Exception) -> None:
        user.phase = "failed"
        failures[user.uid] = repr(exc)

    def complete_chunk(user: _User, finish_t: float) -> None:
        decision = user.decision
        handoff = decision.handoff_now
        if handoff:
            t_h = user.state.wallclock_s + cfg.handoff_delay_s
        else:
            t_h = user.state.wallclock_s
        dl = finish_t - t_h
        new_state, outcome = simcore.apply_chunk(user.state, decision, dl, video, cfg)
        user.state = new_state
        user.outcomes.append(outcome)
        user.decisions.append(decision)
        _observe_chunk(user, trace, outcome)
        if new_state.chunk_index >= video.n_chunks:
            user.phase = "done"
        else:
            user.phase = "decide"
            user.ready_t = new_state.wallclock_s

    def cascade(now: float) -> None:
        changed = True
        while changed:
            changed = False
            for user in users:
                if user.phase == "decide" and user.ready_t <= now:
                    try:
                        decision = _decide(user, users, trace)
                        simcore.validate_decision(user.state, decision, video)
                    except Exception as exc:
                        fail(user, exc)
                        continue
                    user.decision = decision
                    if decision.handoff_now:
                        t_h = user.state.wallclock_s + cfg.handoff_delay_s
                    else:
                        t_h = user.state.wallclock_s
                    user.transfer_start = t_h + cfg.rtt_s
                    user.phase = "prep"
                    changed = True
                elif user.phase == "prep" and user.transfer_start <= now:
                    user.phase = "transfer"
                    user.transfer_pos = user.transfer_start
                    user.transfer_remaining = video.chunk_mb(user.decision.bitrate_idx)
                    user.transfer_sat = user.decision.target_satellite
                    changed = True

    now = 0.0
    max_iterations = 10_000_000
    for _ in range(max_iterations):
        cascade(now)
        if all(u.phase in ("done", "failed") for u in users):
            break

        active_by_sat: dict[int, list[_User]] = {}
        for user in users:
            if user.phase == "transfer":
                active_by_sat.setdefault(user.transfer_sat, []).append(user)

        next_candidates: list[float] = []
        rate_of: dict[int, float] = {}
        finish_of: dict[int, float] = {}
        for sat_id in sorted(active_by_sat):
            members = active_by_sat[sat_id]
            pos = members[0].transfer_pos
            capacity, seg_end = series[sat_id].rate_and_edge(pos)
            bg = background_capacity_fraction(profile, sat_id, pos)
            shares = allocate_shares(capacity, [u.uid for u in members], bg)
            if seg_end < math.inf:
                next_candidates.append(seg_end)
            signature = (
                tuple(u.uid for u in members),
                tuple(sorted(shares.items())),
                capacity,
                bg,
            )
            if last_logged.get(sat_id) != signature:
                last_logged[sat_id] = signature
                share_events.append(
                    ShareEvent(
                        time_s=pos,
                        satellite_id=sat_id,
                        active_users=tuple(u.uid for u in members),
                        per_user_mbps=dict(shares),
                        capacity_mbps=capacity,
                        background_fraction=bg,
                    )
                )
            for user in members:
                rate = shares[user.uid]
                rate_of[user.uid] = rate
                if rate > 0:
                    finish_of[user.uid] = (
                        user.transfer_pos + user.transfer_remaining / rate
                    )
                elif seg_end == math.inf:
                    fail(
                        user,
                        simcore.UnboundedDownloadError(
                            f"zero capacity beyond the trace on satellite {sat_id}"
                        ),
                    )
            if profile is not None:
                bg_edge = profile.next_edge(pos)
                if bg_edge < math.inf:
                    next_candidates.append(bg_edge)

        # A recomputed share can land a finish at or before the current
        # time; settle those downloads before advancing the clock.
        overdue = [
            u for u in users
            if u.phase == "transfer" and finish_of.get(u.uid, math.inf) <= now
        ]
        if overdue:
            for user in overdue:
                complete_chunk(user, finish_of[user.uid])
            continue

        next_candidates.extend(
            f for f in finish_of.values() if f < math.inf
        )
        for user in users:
            if user.phase == "decide" and user.ready_t > now:
                next_candidates.append(user.ready_t)
            elif user.phase == "prep" and user.transfer_start > now:
                next_candidates.append(user.transfer_start)

        future = [t for t in next_candidates if t > now]
        if not future:
            stuck = [u for u in users if u.phase not in ("done", "failed")]
            for user in stuck:
                fail(user, MultiUserError("simulation stalled"))
            break
        t_next = min(future)

        for user in users:
            if user.phase != "transfer":
                continue
            candidate = finish_of.get(user.uid, math.inf)
            if candidate == t_next:
                complete_chunk(user, candidate)
                continue
            rate = rate_of.get(user.uid, 0.0)
            if rate > 0:
                user.transfer_remaining = user.transfer_remaining - rate * (
                    t_next - user.transfer_pos
                )
            user.transfer_pos = t_next
        now = t_next
    else:  # pragma: no cover - defensive
        raise MultiUserError("event loop exceeded the iteration budget")

    per_user: list[QoEBreakdown | None] = []
    for user in users:
        if user.uid in failures or not user.outcomes:
            per_user.append(None)
            if user.uid not in failures:
                failures[user.uid] = "no chunks completed"
        else:
            per_user.append(simcore.session_qoe(user.outcomes, cfg))
    scores = [b.qoe_total for b in per_user if b is not None]
    if not scores:
        raise MultiUserError(f"all users failed: {failures}")
    return MultiUserResult(
        per_user=per_user,
        failures=failures,
        qos=simcore.qos(scores),
        share_events=share_events,
        decisions=[tuple(u.decisions) for u in users],
        decision_latencies_s=[tuple(u.latencies) for u in users],
    )


def result_json(result: MultiUserResult, include_share_events: bool = False) -> dict:
    """Scenario result payload: per-user breakdowns and QoS, with the
    share-event log behind a flag."""
    payload = {
        "qos": result.qos,
        "users": [
            None
            if breakdown is None
            else {
                "qoe_total": breakdown.qoe_total,
                "quality": breakdown.quality_total,
                "rebuf_penalty": breakdown.rebuf_penalty_total,
                "smooth_penalty": breakdown.smooth_penalty_total,
                "handoff_count": sum(
                    1 for oc in breakdown.per_chunk if oc.handoff_performed
                ),
            }
            for breakdown in result.per_user
        ],
        "failures": {str(uid): msg for uid, msg in result.failures.items()},
    }
    if include_share_events:
        payload["share_events"] = [
            {
                "time_s": ev.time_s,
                "satellite_id": ev.satellite_id,
                "active_users": list(ev.active_users),
                "per_user_mbps": {str(u): r for u, r in ev.per_user_mbps.items()},
                "capacity_mbps": ev.capacity_mbps,
                "background_fraction": ev.background_fraction,
            }
            for ev in result.share_events
        ]
    return payload


@dataclass
class UserPlanView:
    """One user's planning inputs as seen by the centralized coordinator."""

    user_id: int
    buffer_s: float
    last_bitrate_idx: int
    start_t: float
    current_satellite: int
    previous_satellite: int | None
    links: dict[int, RateSeries]
    scalars: dict[int, float]
    visible: list[int]
    horizon: int


@dataclass
class CentralizedDecision:
    decisions: dict[int, Decision]
    objective: float
    per_user_qoe: dict[int, float]


def _best_handoff_option(
    view: UserPlanView,
    target: int,
    scale_cur: float,
    scale_target: float,
    video: VideoSpec,
    cfg: SimConfig,
    dp_dt: float,
) -> tuple[float, int | None, tuple[int, ...]]:
    """Best (qoe, h, plan) for one user given a target satellite assignment."""
    cur_link = view.links[view.current_satellite].scaled(scale_cur)
    if target == view.current_satellite:
        inst = PlanInstance(
            horizon=view.horizon,
            buffer_s=view.buffer_s,
            last_bitrate_idx=view.last_bitrate_idx,
            start_t=view.start_t,
            handoff_chunk=None,
            current_link=cur_link,
            target_link=None,
            video=video,
            sim=cfg,
        )
        res = f_sat_dpmpc(inst, dp_dt)
        return res.best_qoe, None, res.full_bitrate_plan
    target_link = view.links[target].scaled(scale_target)
    best = None
    for h in range(1, view.horizon + 1):
        inst = PlanInstance(
            horizon=view.horizon,
            buffer_s=view.buffer_s,
            last_bitrate_idx=view.last_bitrate_idx,
            start_t=view.start_t,
            handoff_chunk=h,
            current_link=cur_link,
            target_link=target_link,
            video=video,
            sim=cfg,
        )
        try:
            res = f_sat_dpmpc(inst, dp_dt)
        except simcore.UnboundedDownloadError:
            continue
        key = (res.best_qoe, h, res.first_bitrate_idx)
        if best is None or key > best[0]:
            best = (key, h, res.full_bitrate_plan)
    if best is None:
        raise simcore.UnboundedDownloadError("no feasible handoff plan")
    return best[0][0], best[1], best[2]


def centralized_mpc_decide(
    views: list[UserPlanView],
    video: VideoSpec,
    cfg: SimConfig,
    dp_dt: float | None = None,
    max_users: int = CENTRALIZED_USER_CAP,
) -> CentralizedDecision:
    """Joint assignment search maximizing the sum of horizon QoEs.

    Each user's candidates are its current satellite and the
    best-predicted runner-up; predicted throughput on a satellite is
    split equally among the users assigned to it within the horizon.
    """
    if len(views) > max_users:
        raise PlanningError(
            f"centralized search capped at {max_users} users, got {len(views)}"
        )
    dp_dt = cfg.dt_s if dp_dt is None else dp_dt

    candidate_lists = []
    for view in views:
        runner = select_candidates(
            "dual",
            view.visible,
            view.scalars,
            view.current_satellite,
            view.previous_satellite,
        )
        candidates = [view.current_satellite] + [
            s for s in runner if s in view.links
        ]
        candidate_lists.append(candidates)

    # Everyone rides their current satellite until their handoff point,
    # so pre-handoff shares are counted by current satellite while
    # post-handoff shares are counted by the assigned target.
    current_counts: dict[int, int] = {}
    for view in views:
        current_counts[view.current_satellite] = (
            current_counts.get(view.current_satellite, 0) + 1
        )

    best_total = None
    best_options = None
    for assignment in itertools.product(*candidate_lists):
        target_counts: dict[int, int] = {}
        for sat in assignment:
            target_counts[sat] = target_counts.get(sat, 0) + 1

        total = 0.0
        options = []
        feasible = True
        for view, target in zip(views, assignment):
            scale_cur = 1.0 / max(1, current_counts.get(view.current_satellite, 0))
            scale_target = 1.0 / max(1, target_counts.get(target, 0))
            try:
                qoe, h, plan = _best_handoff_option(
                    view, target, scale_cur, scale_target, video, cfg, dp_dt
                )
            except simcore.UnboundedDownloadError:
                feasible = False
                break
            total += qoe
            options.append((target, h, plan, qoe))
        if not feasible:
            continue
        if best_total is None or total > best_total:
            best_total = total
            best_options = options

    if best_options is None:
        raise PlanningError("centralized search found no feasible assignment")

    decisions = {}
    per_user_qoe = {}
    for view, (target, h, plan, qoe) in zip(views, best_options):
        per_user_qoe[view.user_id] = qoe
        if target != view.current_satellite and h == 1:
            decisions[view.user_id] = Decision(plan[0], target, True)
        else:
            decisions[view.user_id] = Decision(plan[0], view.current_satellite, False)
    return CentralizedDecision(
        decisions=decisions, objective=best_total, per_user_qoe=per_user_qoe
    )


class CentralizedCoordinator:
    """Session-state wrapper driving centralized_mpc_decide inside the
    multi-user loop.

    Invoked at each user's own chunk boundary; plans jointly over all
    users' latest settled states but applies only the deciding user's
    action (the others re-plan at their own boundaries).
    """

    def __init__(
        self,
        video: VideoSpec,
        cfg: SimConfig,
        predictor: str = "robust",
        horizon: int = 5,
        dp_dt: float | None = None,
        max_users: int = CENTRALIZED_USER_CAP,
    ):
        from .planners import _PredictingController

        self.video = video
        self.cfg = cfg
        self.horizon = horizon
        self.dp_dt = cfg.dt_s if dp_dt is None else dp_dt
        self.max_users = max_users
        self._delegates: dict[int, _PredictingController] = {}
        self.previous_satellite: dict[int, int | None] = {}
        self._last_handoff_chunk: dict[int, int | None] = {}
        self.predictor = predictor

    def _delegate(self, uid: int):
        from .planners import _PredictingController

        if uid not in self._delegates:
            self._delegates[uid] = _PredictingController(
                self.video, self.cfg, self.predictor, self.horizon
            )
            self.previous_satellite.setdefault(uid, None)
        return self._delegates[uid]

    def observe_start_user(self, uid: int, trace: TraceSet, state: PlayerState) -> None:
        self._delegate(uid).observe_start(trace, state)

    def observe_chunk_user(self, uid: int, trace: TraceSet, state, outcome) -> None:
        self._delegate(uid).observe_chunk(trace, state, outcome)

    def _view(self, uid: int, state: PlayerState, trace: TraceSet) -> UserPlanView:
        delegate = self._delegate(uid)
        chunks = min(self.horizon, self.video.n_chunks - state.chunk_index)
        chunks = max(1, chunks)
        t = state.wallclock_s
        visible = delegate._visible(trace, t)
        prev = self.previous_satellite.get(uid)
        if prev is not None:
            last_handoff = self._last_handoff_chunk.get(uid)
            expired = (
                last_handoff is not None
                and state.chunk_index - last_handoff >= self.horizon
            )
            if expired or prev not in visible:
                self.previous_satellite[uid] = None
        sats = sorted(set(visible) | {state.current_satellite})
        links, scalars = delegate._predictions(trace, t, sats, chunks)
        return UserPlanView(
            user_id=uid,
            buffer_s=state.buffer_s,
            last_bitrate_idx=state.last_bitrate_idx,
            start_t=t,
            current_satellite=state.current_satellite,
            previous_satellite=self.previous_satellite.get(uid),
            links=links,
            scalars=scalars,
            visible=visible,
            horizon=chunks,
        )

    def decide_multi(
        self, uid: int, states: list[PlayerState], trace: TraceSet
    ) -> Decision:
        views = [
            self._view(i, state, trace)
            for i, state in enumerate(states)
            if state.chunk_index < self.video.n_chunks
        ]
        if not views:
            raise PlanningError("no active users to plan for")
        result = centralized_mpc_decide(
            views, self.video, self.cfg, self.dp_dt, self.max_users
        )
        decision = result.decisions[uid]
        if decision.handoff_now:
            self.previous_satellite[uid] = states[uid].current_satellite
            self._last_handoff_chunk[uid] = states[uid].chunk_index
        return decision
