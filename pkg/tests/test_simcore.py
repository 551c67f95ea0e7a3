import math

import numpy as np
import pytest

from leostream.simcore import (
    Decision,
    PlayerState,
    RateSeries,
    SimConfig,
    SimulationError,
    UnboundedDownloadError,
    VideoSpec,
    chunk_qoe,
    download_time,
    initial_state,
    piecewise_download,
    qos,
    quality,
    session_json,
    session_qoe,
    settle_chunk,
    step_chunk,
)

from conftest import make_flat_trace


def test_quality_is_linear():
    assert quality(2.85) == 2.85
    assert quality(0.3) == 0.3
    ladder = VideoSpec().bitrate_ladder_mbps
    values = [quality(b) for b in ladder]
    assert values == sorted(values) and len(set(values)) == len(values)


def test_chunk_qoe_examples(sim_cfg):
    assert chunk_qoe(1.2, 2.85, 0.0, sim_cfg) == pytest.approx(2.85 - 1.65)
    assert chunk_qoe(0.3, 0.3, 0.0, sim_cfg) == pytest.approx(0.3)
    assert chunk_qoe(2.85, 2.85, 1.0, sim_cfg) == pytest.approx(2.85 - 4.3)


def test_download_time_flat(sim_cfg):
    trace = make_flat_trace([10.0], duration_s=60.0)
    # 2.85 Mbps x 2 s = 5.7 Mb at 10 Mbps, plus one 80 ms RTT.
    assert download_time(trace, 0, 0.0, 5.7, sim_cfg) == pytest.approx(0.65)


def test_download_time_zero_size(sim_cfg):
    trace = make_flat_trace([10.0], duration_s=60.0)
    assert download_time(trace, 0, 3.0, 0.0, sim_cfg) == sim_cfg.rtt_s


def test_download_time_piecewise():
    # 5 Mbps for the first second, then 20 Mbps: 10 Mb takes 1 + 5/20.
    series = RateSeries(0.0, 1.0, [5.0, 20.0])
    assert piecewise_download(series, 0.0, 10.0, 0.0) == pytest.approx(1.25)


def test_download_time_extrapolates_final_sample(sim_cfg):
    trace = make_flat_trace([4.0], duration_s=10.0)
    # 80 Mb needs 20 s at 4 Mbps; the 10 s trace's final rate extends.
    assert download_time(trace, 0, 0.0, 80.0, sim_cfg) == pytest.approx(20.0 + 0.08)


def test_download_unbounded_error():
    series = RateSeries(0.0, 1.0, [5.0, 0.0])
    with pytest.raises(UnboundedDownloadError):
        piecewise_download(series, 0.0, 10.0, 0.0)


def test_download_skips_zero_segments_inside_trace():
    series = RateSeries(0.0, 1.0, [5.0, 0.0, 0.0, 5.0])
    # 7.5 Mb: 5 Mb in second 0, stall for two seconds, 2.5 Mb in second 3.
    assert piecewise_download(series, 0.0, 7.5, 0.0) == pytest.approx(3.5)


def test_settle_chunk_cap_drain():
    rebuf, buf, drain = settle_chunk(59.5, 0.5, 2.0, 60.0)
    assert rebuf == 0.0
    assert buf == 60.0
    assert drain == pytest.approx(1.0)


def _state(buffer_s, chunk_index=1, sat=0, last_idx=0, wallclock=10.0):
    return PlayerState(
        chunk_index=chunk_index,
        wallclock_s=wallclock,
        buffer_s=buffer_s,
        last_bitrate_idx=last_idx,
        current_satellite=sat,
    )


def test_step_chunk_buffer_growth(video, sim_cfg):
    trace = make_flat_trace([10.0], duration_s=120.0)
    state, outcome = step_chunk(_state(8.0, last_idx=2), Decision(2, 0), trace, video, sim_cfg)
    assert outcome.rebuffer_s == 0.0
    assert outcome.download_time_s == pytest.approx(0.65)
    assert state.buffer_s == pytest.approx(9.35)


def test_step_chunk_rebuffer(video, sim_cfg):
    trace = make_flat_trace([10.0], duration_s=120.0)
    state, outcome = step_chunk(_state(0.1, last_idx=2), Decision(2, 0), trace, video, sim_cfg)
    assert outcome.rebuffer_s == pytest.approx(0.55)
    assert state.buffer_s == pytest.approx(2.0)


def test_step_chunk_handoff_delay(video, sim_cfg):
    trace = make_flat_trace([10.0, 10.0], duration_s=120.0)
    stay, oc_stay = step_chunk(_state(8.0, sat=0, last_idx=2), Decision(2, 0), trace, video, sim_cfg)
    move, oc_move = step_chunk(_state(8.0, sat=0, last_idx=2), Decision(2, 1, True), trace, video, sim_cfg)
    wait_stay = oc_stay.download_time_s
    wait_move = oc_move.download_time_s + sim_cfg.handoff_delay_s
    assert wait_move - wait_stay == pytest.approx(sim_cfg.handoff_delay_s)
    assert oc_move.rebuffer_s == 0.0
    assert move.buffer_s == pytest.approx(stay.buffer_s - sim_cfg.handoff_delay_s)


def test_step_chunk_validates_decision(video, sim_cfg):
    trace = make_flat_trace([10.0], duration_s=120.0)
    with pytest.raises(SimulationError):
        step_chunk(_state(5.0), Decision(9, 0), trace, video, sim_cfg)
    with pytest.raises(SimulationError):
        step_chunk(_state(5.0, sat=0), Decision(0, 0, True), trace, video, sim_cfg)


def test_first_chunk_has_no_smoothness_penalty(video, sim_cfg):
    trace = make_flat_trace([10.0], duration_s=120.0)
    state = _state(0.0, chunk_index=0, last_idx=0, wallclock=0.0)
    _, outcome = step_chunk(state, Decision(2, 0), trace, video, sim_cfg)
    assert outcome.qoe_smooth_penalty == 0.0


def _random_session(rng, video, sim_cfg, n_chunks=None):
    rates = rng.uniform(1.0, 20.0, size=3)
    trace = make_flat_trace(rates, duration_s=600.0)
    state = initial_state(trace, video, sim_cfg)
    outcomes = []
    n = n_chunks or video.n_chunks
    for _ in range(n):
        idx = int(rng.integers(0, len(video.bitrate_ladder_mbps)))
        sat = int(rng.integers(0, 3))
        handoff = sat != state.current_satellite
        state, outcome = step_chunk(
            state, Decision(idx, sat, handoff), trace, video, sim_cfg
        )
        outcomes.append(outcome)
    return state, outcomes


def test_session_qoe_single_chunk(video, sim_cfg):
    trace = make_flat_trace([10.0], duration_s=60.0)
    state = initial_state(trace, video, sim_cfg)
    state, outcome = step_chunk(state, Decision(0, 0), trace, video, sim_cfg)
    breakdown = session_qoe([outcome], sim_cfg)
    # One chunk at 0.3 Mbps with the startup stall charged.
    assert breakdown.quality_total == pytest.approx(0.3)
    assert breakdown.qoe_total == pytest.approx(
        0.3 - sim_cfg.mu2 * outcome.rebuffer_s
    )


def test_session_qoe_two_chunks_no_smoothness(video, sim_cfg):
    trace = make_flat_trace([50.0], duration_s=60.0)
    state = _state(10.0, chunk_index=0, last_idx=2, wallclock=0.0)
    outcomes = []
    for _ in range(2):
        state, outcome = step_chunk(state, Decision(2, 0), trace, video, sim_cfg)
        outcomes.append(outcome)
    breakdown = session_qoe(outcomes, sim_cfg)
    assert breakdown.qoe_total == pytest.approx(5.7)


def test_session_qoe_rejects_gaps(video, sim_cfg):
    rng = np.random.default_rng(0)
    _, outcomes = _random_session(rng, video, sim_cfg, n_chunks=5)
    with pytest.raises(SimulationError):
        session_qoe([outcomes[0], outcomes[2]], sim_cfg)


def test_breakdown_identity_random_sessions(video, sim_cfg):
    rng = np.random.default_rng(42)
    for _ in range(25):
        _, outcomes = _random_session(rng, video, sim_cfg, n_chunks=12)
        b = session_qoe(outcomes, sim_cfg)
        assert abs(
            b.qoe_total - (b.quality_total - b.rebuf_penalty_total - b.smooth_penalty_total)
        ) < 1e-9


def test_buffer_bounds_and_rebuffer_consistency(video, sim_cfg):
    rng = np.random.default_rng(7)
    trace = make_flat_trace([3.0], duration_s=600.0)
    state = initial_state(trace, video, sim_cfg)
    for _ in range(video.n_chunks):
        idx = int(rng.integers(0, 3))
        prev_buffer = state.buffer_s
        state, outcome = step_chunk(state, Decision(idx, 0), trace, video, sim_cfg)
        assert 0.0 <= state.buffer_s <= sim_cfg.max_buffer_s
        if outcome.rebuffer_s > 0:
            wait = outcome.download_time_s
            assert wait > prev_buffer  # the buffer fully drained


def test_time_conservation(video, sim_cfg):
    rng = np.random.default_rng(3)
    state, outcomes = _random_session(rng, video, sim_cfg, n_chunks=20)
    total = sum(
        oc.download_time_s
        + (sim_cfg.handoff_delay_s if oc.handoff_performed else 0.0)
        + oc.drain_s
        for oc in outcomes
    )
    assert state.wallclock_s == pytest.approx(total, abs=1e-9)
    assert state.rebuffer_total_s == pytest.approx(
        sum(oc.rebuffer_s for oc in outcomes), abs=1e-12
    )


def test_qos():
    assert qos([1.0]) == 1.0
    assert qos([1.0, 3.0]) == 2.0
    assert qos([3.0, 1.0, 2.0]) == qos([2.0, 3.0, 1.0])
    with pytest.raises(ValueError):
        qos([])


def test_initial_state_picks_best_visible(video, sim_cfg):
    trace = make_flat_trace([4.0, 9.0, 6.0], duration_s=60.0)
    state = initial_state(trace, video, sim_cfg)
    assert state.current_satellite == 1
    assert state.buffer_s == 0.0
    assert state.last_bitrate_idx == 0


def test_session_json_nine_significant_digits(video, sim_cfg):
    rng = np.random.default_rng(5)
    _, outcomes = _random_session(rng, video, sim_cfg, n_chunks=4)
    payload = session_json(session_qoe(outcomes, sim_cfg), video, sim_cfg)
    value = payload["chunks"][0]["download_time_s"]
    assert value == float(f"{value:.9g}")
    assert payload["totals"]["qoe"] == float(f"{payload['totals']['qoe']:.9g}")
