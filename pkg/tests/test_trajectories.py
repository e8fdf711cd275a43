import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmmsim.geomap import grid_map, in_constraint
from cmmsim.trajectories import (Trajectory, TrajectoryFormatError, TrajectorySet, en_to_latlon, filter_valid,
                                 heading_change, latlon_to_en, load_csv, sample_network, synth_trajectories,
                                 write_csv)

HEADER = "vehicle_id,t_s,lat_deg,lon_deg,speed_mps,heading_deg\n"


def smooth(vid, m, heading=90.0):
    s = np.column_stack([np.arange(m) * 1.0, np.zeros(m), np.full(m, 10.0), np.full(m, heading)])
    return Trajectory(vid, s)


def test_projection_examples():
    o = (42.28, -83.74)
    np.testing.assert_allclose(latlon_to_en(o, o), [0.0, 0.0])
    assert latlon_to_en(o, (42.281, -83.74))[1] == pytest.approx(111.19, abs=0.01)
    with pytest.raises(ValueError):
        latlon_to_en((89.5, 0.0), (89.5, 0.0))


@settings(max_examples=200, deadline=None)
@given(st.floats(42.22, 42.34), st.floats(-83.82, -83.64))
def test_projection_round_trip(lat, lon):
    o = (42.28, -83.74)
    back = en_to_latlon(o, latlon_to_en(o, (lat, lon)))
    np.testing.assert_allclose(back, [lat, lon], atol=1e-9)


def test_load_two_vehicles(tmp_path):
    p = tmp_path / "t.csv"
    rows = [f"{v},{k * 0.1:.1f},{42.28 + k * 1e-6},{-83.74},10,0\n" for v in ("a", "b") for k in range(5)]
    p.write_text(HEADER + "".join(rows))
    ts = load_csv(p)
    assert len(ts) == 2 and [len(t) for t in ts] == [5, 5]
    assert ts.origin == (42.28, -83.74)


def test_empty_file_gives_empty_set(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    assert len(load_csv(p)) == 0
    p.write_text(HEADER)
    assert len(load_csv(p)) == 0


def test_parse_errors_name_the_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(HEADER + "a,0.0,42.28,-83.74,10,0\na,0.1,north,-83.74,10,0\n")
    with pytest.raises(TrajectoryFormatError, match="row 3"):
        load_csv(p)
    p.write_text(HEADER + "a,0.1,42.28,-83.74,10,0\na,0.0,42.28,-83.74,10,0\n")
    with pytest.raises(TrajectoryFormatError, match="row 3"):
        load_csv(p)
    p.write_text(HEADER + "a,0.1,42.28\n")
    with pytest.raises(TrajectoryFormatError, match="row 2"):
        load_csv(p)
    p.write_text("id,time\n")
    with pytest.raises(TrajectoryFormatError, match="row 1"):
        load_csv(p)
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv")


def test_gap_splits_trajectory(tmp_path):
    p = tmp_path / "gap.csv"
    times = [0.0, 0.1, 0.2, 1.0, 1.1]
    p.write_text(HEADER + "".join(f"a,{t:.1f},42.28,-83.74,0,0\n" for t in times))
    ts = load_csv(p)
    assert [t.vehicle_id for t in ts] == ["a", "a.1"]
    assert [len(t) for t in ts] == [3, 2]
    assert ts.trajectories[1].t0 == pytest.approx(1.0)


def test_write_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    trs = [Trajectory(str(i), np.column_stack([rng.uniform(-3000, 3000, (20, 2)), rng.uniform(0, 30, 20),
                                               rng.uniform(0, 360, 20)])) for i in range(3)]
    ts = TrajectorySet(trs, (42.28, -83.74))
    back = load_csv(write_csv(ts, tmp_path / "rt.csv"), origin=ts.origin)
    for a, b in zip(ts, back):
        assert a.vehicle_id == b.vehicle_id
        np.testing.assert_allclose(en_to_latlon(ts.origin, b.positions), en_to_latlon(ts.origin, a.positions),
                                   atol=1e-6)


def test_filter_rules():
    ts = TrajectorySet([smooth("short", 2999), smooth("long", 4000)])
    kept = filter_valid(ts)
    assert [t.vehicle_id for t in kept] == ["long"]
    assert len(kept.trajectories[0]) == 3000 and kept.trajectories[0].duration == pytest.approx(300.0)
    wrap = smooth("wrap", 3000, 350.0)
    wrap.samples[1500:, 3] = 5.0
    assert heading_change(350.0, 5.0) == pytest.approx(15.0)
    assert len(filter_valid(TrajectorySet([wrap]))) == 0
    ok = smooth("ok", 3000, 355.0)
    ok.samples[1500:, 3] = 3.0
    assert len(filter_valid(TrajectorySet([ok]))) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2000, 5000), min_size=1, max_size=5), st.floats(0, 30))
def test_filter_idempotent(lengths, jump):
    trs = []
    for i, m in enumerate(lengths):
        t = smooth(str(i), m)
        t.samples[m // 2:, 3] = 90.0 + jump
        trs.append(t)
    once = filter_valid(TrajectorySet(trs))
    twice = filter_valid(once)
    assert [t.vehicle_id for t in once] == [t.vehicle_id for t in twice]
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a.samples, b.samples)


def test_sample_network():
    ts = TrajectorySet([smooth(str(i), 10) for i in range(6)])
    assert len(sample_network(ts, 6, np.random.default_rng(0))) == 6
    assert len(sample_network(ts, 0, np.random.default_rng(0))) == 0
    a = [t.vehicle_id for t in sample_network(ts, 3, np.random.default_rng(7))]
    b = [t.vehicle_id for t in sample_network(ts, 3, np.random.default_rng(7))]
    assert a == b
    with pytest.raises(ValueError, match="short by 4"):
        sample_network(ts, 10, np.random.default_rng(0))


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        TrajectorySet([smooth("a", 3), smooth("a", 3)])


def test_synthetic_kinematics():
    m = grid_map()
    ts = synth_trajectories(m, 1, 300.0, (10.0, 10.0), np.random.default_rng(0))
    tr = ts.trajectories[0]
    assert len(tr) == 3000
    step = np.linalg.norm(np.diff(tr.positions, axis=0), axis=1)
    # spacing is 1 m except at a bounce, where the path folds back
    assert np.median(step) == pytest.approx(1.0)
    assert np.all(step <= 1.0 + 1e-9)
    np.testing.assert_allclose(tr.samples[:, 2], 10.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_synthetic_stays_on_road(seed):
    m = grid_map()
    ts = synth_trajectories(m, 5, 60.0, (8.0, 15.0), np.random.default_rng(seed))
    for tr in ts:
        assert np.all(in_constraint(m, tr.positions))
        speeds = np.linalg.norm(tr.velocities, axis=1)
        np.testing.assert_allclose(speeds, tr.samples[:, 2])
