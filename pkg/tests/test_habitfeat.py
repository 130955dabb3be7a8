import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from logrisk.habitfeat import (
    DEFAULT_PARTITION,
    FEATURES,
    SessionParams,
    TimeWindowPartition,
    build_sessions,
    event_counts,
    extract_features,
    habit_entropy,
    habit_table,
    regression_frame,
    window_proportions,
)
from logrisk.logmodel import Dataset, EventRecord, Timestamp
from oracles import entropy_bits, sessions as oracle_sessions, window_seconds


def ts(text):
    return Timestamp.from_iso(text).seconds_since_epoch


def test_default_partition_windows():
    assert DEFAULT_PARTITION.describe() == {
        "morning": "00:00-04:59",
        "afternoon": "05:00-11:59",
        "evening": "12:00-16:59",
        "overnight": "17:00-23:59",
        "tz_offset_min": 0,
    }


def test_partition_validation():
    with pytest.raises(ValueError):
        TimeWindowPartition((("a", 0, 600), ("b", 600, 1440)))
    with pytest.raises(ValueError):
        TimeWindowPartition((("a", 0, 300), ("b", 301, 600), ("c", 600, 900), ("d", 900, 1440)))


def test_session_examples():
    s = build_sessions([0, 600], 1800, 300)
    assert [(x.start, x.end, x.duration, x.n_events) for x in s] == [(0, 600, 900, 2)]
    assert len(build_sessions([0, 7200], 1800, 300)) == 2
    assert build_sessions([5], 1800, 300)[0].duration == 300
    # the tail never exceeds the timeout
    assert build_sessions([5], 100, 300)[0].duration == 100


@given(st.lists(st.integers(0, 50_000), min_size=1, max_size=80), st.integers(1, 4000), st.integers(0, 600))
def test_sessions_match_loop_oracle(raw, timeout, tail):
    t = sorted(raw)
    got = [(s.start, s.end, s.duration, s.n_events) for s in build_sessions(t, timeout, tail)]
    assert got == oracle_sessions(t, timeout, tail)
    assert sum(s[3] for s in got) == len(t)


def test_one_hot_and_boundary_split():
    day = ts("2021-04-05T00:00:00Z")
    inside = build_sessions([day + 6 * 3600], 1800, 300)
    assert window_proportions(inside).tolist() == [0.0, 1.0, 0.0, 0.0]
    # 30 minutes each side of 05:00: events at 04:30 and 05:25 plus a 300 s tail
    split = build_sessions([day + 4 * 3600 + 1800, day + 5 * 3600 + 1500], 3600, 300)
    assert window_proportions(split).tolist() == [0.5, 0.5, 0.0, 0.0]


@given(
    st.lists(st.tuples(st.integers(0, 10**7), st.integers(0, 3 * 86400)), min_size=1, max_size=20),
    st.integers(-720, 720),
)
def test_overlap_matches_oracle_and_conserves_time(intervals, offset):
    part = TimeWindowPartition(tz_offset_min=offset)
    start = np.array([a for a, _ in intervals])
    end = start + np.array([d for _, d in intervals])
    got = part.overlap(start, end)
    windows = [(b, c) for _, b, c in part.windows]
    for row, a, b in zip(got, start, end):
        assert row.tolist() == window_seconds(int(a), int(b), windows, offset * 60)
    assert np.allclose(got.sum(axis=1), end - start, rtol=1e-9, atol=0)


def test_entropy_examples():
    assert habit_entropy([1, 0, 0, 0]) == 0.0
    assert habit_entropy([0.25] * 4) == pytest.approx(2.0, abs=1e-12)
    assert habit_entropy([0.5, 0.25, 0.25, 0]) == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(ValueError):
        habit_entropy([0.5, 0.6, 0, 0])


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda v: sum(v) > 1e-6))
def test_entropy_bounds_and_oracle(v):
    p = np.asarray(v) / sum(v)
    h = habit_entropy(p)
    assert 0.0 <= h <= 2.0
    assert h == pytest.approx(entropy_bits(p), abs=1e-12)


def test_entropy_extremes_characterized():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=2000)
    h = np.array([habit_entropy(x) for x in p])
    assert np.all((h > 0) & (h < 2))


def _two_actor_log():
    ev = [
        ("A", "2021-04-05T09:00:00Z"),
        ("A", "2021-04-05T09:10:00Z"),
        ("A", "2021-04-05T13:00:00Z"),
        ("A", "2021-04-07T08:00:00Z"),
        ("A", "2021-04-10T10:00:00Z"),
        ("B", "2021-04-06T23:50:00Z"),
        ("B", "2021-04-07T00:10:00Z"),
    ]
    return Dataset.from_records([EventRecord(a, ts(t)) for a, t in ev])


def test_hand_feature_rows():
    d = _two_actor_log()
    fm = extract_features(d)
    f = fm.frame
    # hand computation (see the event list above)
    a_mean_gap = (3 + 50 / 60 + 43 + 74) / 3
    expect = {
        "A": dict(
            active_days=3,
            events_per_active_day=5 / 3,
            session_count=4,
            mean_session_duration=7.5,
            mean_intersession_gap=a_mean_gap,
            median_intersession_gap=43.0,
            weekday_share=0.8,
            sd_first_event_hour=math.sqrt(2 / 3),
            span_days=5 + 1 / 24,
        ),
        "B": dict(
            active_days=2,
            events_per_active_day=1.0,
            session_count=1,
            mean_session_duration=25.0,
            mean_intersession_gap=a_mean_gap,
            median_intersession_gap=43.0,
            weekday_share=1.0,
            sd_first_event_hour=11 + 50 / 60,
            span_days=1 / 72,
        ),
    }
    for actor, row in expect.items():
        for col, v in row.items():
            assert f.loc[actor, col] == pytest.approx(v, rel=1e-12), (actor, col)
    assert fm.imputed.loc["B"].all() and not fm.imputed.loc["A"].any()
    side = fm.sidecar()
    assert side["imputed_counts"] == {"mean_intersession_gap": 1, "median_intersession_gap": 1}
    assert [c["name"] for c in side["columns"]] == fm.columns


def test_hand_habit_entropy():
    h = habit_table(_two_actor_log()).frame
    assert h.loc["A", ["p_morning", "p_afternoon", "p_evening", "p_overnight"]].tolist() == pytest.approx([0, 5 / 6, 1 / 6, 0])
    assert h.loc["A", "habit_entropy"] == pytest.approx(entropy_bits([5 / 6, 1 / 6]), abs=1e-12)
    assert h.loc["B", ["p_morning", "p_afternoon", "p_evening", "p_overnight"]].tolist() == pytest.approx([0.6, 0, 0, 0.4])
    assert h.loc["B", "habit_entropy"] == pytest.approx(entropy_bits([0.6, 0.4]), abs=1e-12)


def test_count_mode_uses_event_shares():
    h = habit_table(_two_actor_log(), params=SessionParams(duration_mode="count")).frame
    assert h.loc["A", ["p_morning", "p_afternoon", "p_evening", "p_overnight"]].tolist() == pytest.approx([0, 0.8, 0.2, 0])


def test_timezone_shifts_windows():
    d = _two_actor_log()
    h = habit_table(d, TimeWindowPartition(tz_offset_min=540), SessionParams(tz_offset_min=540)).frame
    # B's session runs 08:50-09:15 local: all afternoon
    assert h.loc["B", "p_afternoon"] == 1.0


def test_proportions_sum_to_one_on_synthetic():
    from logrisk.synthgen import LogGenConfig, gen_event_log

    d, _ = gen_event_log(LogGenConfig(n_actors=300, seed=6))
    h = habit_table(d).frame
    p = h[["p_morning", "p_afternoon", "p_evening", "p_overnight"]].to_numpy()
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    assert h["habit_entropy"].between(0, 2).all()


def test_zero_time_and_single_event_dropped():
    d = Dataset.from_records(
        [EventRecord("A", 0), EventRecord("A", 60), EventRecord("B", 100), EventRecord("C", 5000), EventRecord("C", 9000)]
    )
    params = SessionParams(tail_cap_s=0)
    habit = habit_table(d, params=params)
    assert habit.frame.loc["B", "flag_zero_time"]
    assert habit.n_flagged == 2
    frame, counts = regression_frame(extract_features(d, params), habit, event_counts(d))
    # C has two zero-length sessions: zero time as well
    assert counts == {"dropped_zero_time": 2, "dropped_single_event": 0, "n_rows": 1}
    assert list(frame.index) == ["A"]
    frame, counts = regression_frame(extract_features(d), habit_table(d), event_counts(d))
    assert counts == {"dropped_zero_time": 0, "dropped_single_event": 1, "n_rows": 2}


def test_feature_registry_never_reads_the_response():
    for f in FEATURES:
        assert not f.inputs & {"window_proportions", "habit_entropy"}
    assert len({f.name for f in FEATURES}) == len(FEATURES)


def test_features_deterministic():
    d = _two_actor_log()
    assert extract_features(d).frame.equals(extract_features(d).frame)
