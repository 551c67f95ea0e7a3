import math

import numpy as np
import pytest

from leostream.multiuser import (
    BackgroundProfile,
    CentralizedCoordinator,
    MultiUserError,
    MultiUserScenario,
    UserPlanView,
    allocate_shares,
    background_capacity_fraction,
    centralized_mpc_decide,
    make_background_profile,
    simulate_multi,
)
from leostream.planners import JointMpcController, PlanningError, SeparateController
from leostream.simcore import RateSeries, run_session
from leostream.traces import TraceGenConfig, gen_trace_set

from conftest import make_flat_trace, suite_trace


def test_allocate_equal_split():
    shares = allocate_shares(120.0, [0, 1], 0.0)
    assert shares == {0: 60.0, 1: 60.0}


def test_allocate_single_user_gets_everything():
    assert allocate_shares(37.5, [4], 0.0) == {4: 37.5}


def test_allocate_with_background():
    shares = allocate_shares(100.0, [0, 1, 2, 3], 0.2)
    assert all(v == pytest.approx(20.0) for v in shares.values())


def test_allocate_empty_set():
    assert allocate_shares(100.0, [], 0.3) == {}


def test_allocate_validates_inputs():
    with pytest.raises(MultiUserError):
        allocate_shares(-1.0, [0], 0.0)
    with pytest.raises(MultiUserError):
        allocate_shares(10.0, [0], 1.0)


def test_background_profile_zero_users():
    trace = make_flat_trace([10.0], duration_s=60.0)
    profile = make_background_profile(trace, 0, seed=1)
    assert background_capacity_fraction(profile, 0, 33.0) == 0.0
    assert background_capacity_fraction(None, 0, 33.0) == 0.0


def test_background_profile_cap_binds():
    trace = make_flat_trace([10.0], duration_s=100.0)
    profile = make_background_profile(trace, 40, seed=2, demand_low=0.02, demand_high=0.08)
    for sat in trace.sat_ids:
        assert np.all(profile.fractions[sat] <= 0.8)
    assert any(np.any(profile.fractions[s] == 0.8) for s in trace.sat_ids)


def test_background_profile_deterministic():
    trace = make_flat_trace([10.0, 5.0], duration_s=100.0)
    p1 = make_background_profile(trace, 5, seed=3)
    p2 = make_background_profile(trace, 5, seed=3)
    for sat in trace.sat_ids:
        assert np.array_equal(p1.fractions[sat], p2.fractions[sat])


def test_single_user_degeneracy_bit_for_bit(video, sim_cfg):
    trace = suite_trace(3)
    single = run_session(
        trace, JointMpcController(video, sim_cfg, mode="dual", search="dp"), video, sim_cfg
    )
    scenario = MultiUserScenario(
        trace=trace,
        controllers=[JointMpcController(video, sim_cfg, mode="dual", search="dp")],
        n_background=0,
    )
    multi = simulate_multi(scenario, video, sim_cfg, seed=0)
    assert multi.failures == {}
    assert multi.per_user[0].per_chunk == single.breakdown.per_chunk
    assert multi.per_user[0].qoe_total == single.breakdown.qoe_total
    assert multi.decisions[0] == single.decisions


def test_two_users_split_flat_capacity(video, sim_cfg):
    trace = make_flat_trace([10.0], duration_s=400.0)
    scenario = MultiUserScenario(
        trace=trace,
        controllers=[SeparateController(video, sim_cfg, strategy="mb") for _ in range(2)],
    )
    result = simulate_multi(scenario, video, sim_cfg, seed=0)
    both_active = [ev for ev in result.share_events if len(ev.active_users) == 2]
    assert both_active
    for ev in both_active:
        for rate in ev.per_user_mbps.values():
            assert rate == pytest.approx(5.0)


def test_capacity_and_work_conservation(video, sim_cfg):
    trace = suite_trace(4)
    scenario = MultiUserScenario(
        trace=trace,
        controllers=[JointMpcController(video, sim_cfg, mode="dual", search="dp") for _ in range(3)],
        n_background=5,
    )
    result = simulate_multi(scenario, video, sim_cfg, seed=4)
    assert result.share_events
    for ev in result.share_events:
        used = sum(ev.per_user_mbps.values()) + ev.background_fraction * ev.capacity_mbps
        assert used <= ev.capacity_mbps + 1e-6
        if ev.active_users:
            residual = ev.capacity_mbps * (1.0 - ev.background_fraction)
            assert sum(ev.per_user_mbps.values()) == pytest.approx(residual, abs=1e-6)


def test_contention_never_helps_the_first_user(video, sim_cfg):
    # One shared satellite: adding a second streamer cannot improve the
    # first user's session.
    for seed in range(6):
        rng = np.random.default_rng(seed)
        rate = float(rng.uniform(3.0, 8.0))
        trace = make_flat_trace([rate], duration_s=500.0)
        alone = simulate_multi(
            MultiUserScenario(trace=trace, controllers=[
                SeparateController(video, sim_cfg, strategy="mb")
            ]),
            video, sim_cfg, seed=seed,
        )
        crowded = simulate_multi(
            MultiUserScenario(trace=trace, controllers=[
                SeparateController(video, sim_cfg, strategy="mb"),
                SeparateController(video, sim_cfg, strategy="mb"),
            ]),
            video, sim_cfg, seed=seed,
        )
        assert crowded.per_user[0].qoe_total <= alone.per_user[0].qoe_total + 1e-9


def test_failed_user_excluded_with_diagnostic(video, sim_cfg):
    # Satellite dies for good halfway through: the download can never
    # finish, the user fails, the run still completes.
    vis = np.zeros(400, dtype=bool)
    vis[:40] = True
    trace = make_flat_trace([6.0, 6.0], duration_s=400.0,
                            visible=[np.ones(400, bool), vis])
    class StubbornController:
        def observe_start(self, trace, state): pass
        def observe_chunk(self, trace, state, outcome): pass
        def decide(self, state, trace):
            from leostream.simcore import Decision
            return Decision(2, 1, state.current_satellite != 1)
    scenario = MultiUserScenario(
        trace=trace,
        controllers=[SeparateController(video, sim_cfg, strategy="mb"), StubbornController()],
    )
    result = simulate_multi(scenario, video, sim_cfg, seed=0)
    assert 1 in result.failures
    assert result.per_user[1] is None
    assert result.per_user[0] is not None


def _view(uid, links, scalars, cur, video, horizon=5, buffer_s=6.0, last_idx=2, t=0.0):
    return UserPlanView(
        user_id=uid,
        buffer_s=buffer_s,
        last_bitrate_idx=last_idx,
        start_t=t,
        current_satellite=cur,
        previous_satellite=None,
        links={s: RateSeries.constant(v) for s, v in links.items()},
        scalars=scalars,
        visible=sorted(links),
        horizon=horizon,
    )


def test_centralized_splits_crowded_satellite(video, sim_cfg):
    # Shared 4 Mbps cannot carry two top-rung streams; a 3 Mbps spare can
    # carry one. With a thin buffer, lingering on the shared link costs
    # rebuffer immediately, so the joint optimum parks one user on each
    # satellite and moves the second user right away.
    links = {0: 4.0, 1: 3.0}
    scalars = dict(links)
    views = [
        _view(0, links, scalars, cur=0, video=video, buffer_s=1.0),
        _view(1, links, scalars, cur=0, video=video, buffer_s=1.0),
    ]
    result = centralized_mpc_decide(views, video, sim_cfg, dp_dt=1.0)
    targets = {uid: d.target_satellite if d.handoff_now else 0 for uid, d in result.decisions.items()}
    assert sorted(targets.values()) == [0, 1]
    assert result.objective == pytest.approx(sum(result.per_user_qoe.values()))


def test_centralized_single_user_matches_joint_controller(video, sim_cfg):
    trace = suite_trace(5)
    coord = CentralizedCoordinator(video, sim_cfg, predictor="robust")
    central = simulate_multi(
        MultiUserScenario(trace=trace, controllers=[coord]), video, sim_cfg, seed=5
    )
    solo = run_session(
        trace, JointMpcController(video, sim_cfg, mode="dual", search="dp"), video, sim_cfg
    )
    assert central.decisions[0] == solo.decisions
    assert central.per_user[0].qoe_total == solo.breakdown.qoe_total


def test_centralized_user_cap(video, sim_cfg):
    links = {0: 4.0}
    views = [_view(i, links, dict(links), cur=0, video=video) for i in range(4)]
    with pytest.raises(PlanningError):
        centralized_mpc_decide(views, video, sim_cfg, max_users=3)


def test_centralized_dominates_independent_two_user_oracle(video, sim_cfg):
    for seed in range(6):
        trace = suite_trace(seed)
        coord = CentralizedCoordinator(video, sim_cfg, predictor="oracle")
        central = simulate_multi(
            MultiUserScenario(trace=trace, controllers=[coord, coord]),
            video, sim_cfg, seed=seed,
        )
        independents = [
            JointMpcController(video, sim_cfg, mode="dual", predictor="oracle", search="dp")
            for _ in range(2)
        ]
        independent = simulate_multi(
            MultiUserScenario(trace=trace, controllers=independents),
            video, sim_cfg, seed=seed,
        )
        assert central.qos >= independent.qos - 1e-6
