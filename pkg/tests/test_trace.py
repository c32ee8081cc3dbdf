import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oppraim.errors import EmptyMasterStream, MalformedTrace, NonMonotonicTimestamps
from oppraim.geo import GeodeticPosition, OrientationAngles
from oppraim.trace import (
    AnchorDatabase,
    AnchorRecord,
    Infrastructure,
    MotionSample,
    Mobility,
    RangingObservation,
    TraceFrame,
    align_epochs,
    clean_anchors,
    load_anchor_db,
    load_trace,
    save_anchor_db,
    save_trace,
)

SAT = (2.0e7, 1.0e7, 1.0e7)
HOME = GeodeticPosition(59.91, 10.75, 50.0)


def gnss(t, sat="G01", pr=2.2e7, const="GPS"):
    return RangingObservation(t, Infrastructure.GNSS, sat, pr, const, SAT)


def wifi(t, aid="ap1", rssi=-60.0):
    return RangingObservation(t, Infrastructure.WIFI, aid, rssi)


def motion(t, v=(1.0, 0.0, 0.0), a=(0.0, 0.0, 0.0)):
    return MotionSample(t, v, a, OrientationAngles(0, 0, 0))


def write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))


MINIMAL = [
    {"t": 0.0, "kind": "motion", "vx": 1, "vy": 0, "vz": 0, "ax": 0, "ay": 0, "az": 0,
     "roll": 0, "pitch": 0, "yaw": 0},
    {"t": 0.0, "kind": "wifi", "anchor": "ap1", "rssi_dbm": -55.0},
    {"t": 0.0, "kind": "lbs", "lat": 59.91, "lon": 10.75, "alt": 50.0},
]


def test_minimal_file(tmp_path):
    p = tmp_path / "t.jsonl"
    write_lines(p, MINIMAL)
    frames = load_trace(p)
    assert len(frames) == 1
    assert frames[0].observations[0].value == -55.0
    assert frames[0].ground_truth is None


def test_positive_rssi_rejected(tmp_path):
    p = tmp_path / "t.jsonl"
    recs = [dict(r) for r in MINIMAL]
    recs[1]["rssi_dbm"] = 5.0
    write_lines(p, recs)
    with pytest.raises(MalformedTrace) as exc:
        load_trace(p)
    assert exc.value.line == 2 and exc.value.field == "rssi_dbm"


@pytest.mark.parametrize("mutate, field", [
    (lambda r: r[1].pop("anchor"), "anchor"),
    (lambda r: r[0].update(vx="fast"), "vx"),
    (lambda r: r[1].update(kind="lora"), "kind"),
])
def test_bad_fields(tmp_path, mutate, field):
    recs = [dict(r) for r in MINIMAL]
    mutate(recs)
    p = tmp_path / "t.jsonl"
    write_lines(p, recs)
    with pytest.raises(MalformedTrace) as exc:
        load_trace(p)
    assert exc.value.field == field


def test_non_monotonic(tmp_path):
    recs = [dict(r) for r in MINIMAL]
    recs[2]["t"] = -1.0
    p = tmp_path / "t.jsonl"
    write_lines(p, recs)
    with pytest.raises(NonMonotonicTimestamps):
        load_trace(p)


def test_bad_json(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(MalformedTrace):
        load_trace(p)


def make_frame(t, label=None, lat_off=0.0):
    obs = (gnss(t), gnss(t, "E07", 2.5e7, "GAL"), wifi(t), wifi(t, "ap2", -71.5),
           RangingObservation(t, Infrastructure.GEOIP, "srv1", 12.5))
    truth = GeodeticPosition(HOME.latitude + lat_off, HOME.longitude, HOME.altitude)
    return TraceFrame(t, motion(t, (1.0, 0.5, 0.0), (0.1, 0.0, -0.2)), obs,
                      GeodeticPosition(59.9101, 10.7499, 51.0), truth, label, "10.0.0.1")


def test_roundtrip(tmp_path):
    frames = [make_frame(float(t), label=bool(t % 2), lat_off=t * 1e-5) for t in range(5)]
    p = tmp_path / "t.jsonl"
    save_trace(frames, p)
    assert load_trace(p) == frames


finite = st.floats(-50, 50, allow_nan=False)


@st.composite
def frames_strategy(draw):
    n = draw(st.integers(1, 6))
    out = []
    for k in range(n):
        t = float(k)
        n_wifi = draw(st.integers(0, 3))
        obs = [wifi(t, f"ap{i}", draw(st.floats(-120, 0))) for i in range(n_wifi)]
        obs.append(gnss(t, pr=draw(st.floats(1.8e7, 3.0e7))))
        m = MotionSample(t, (draw(finite), draw(finite), 0.0), (draw(st.floats(-20, 20)), 0.0, 0.0),
                         OrientationAngles(draw(st.floats(-180, 179)), 0.0, draw(st.floats(-180, 179))))
        lbs = GeodeticPosition(draw(st.floats(-80, 80)), draw(st.floats(-180, 179)), draw(st.floats(-100, 1e3)))
        truth = draw(st.none() | st.just(lbs))
        label = None if truth is None else draw(st.booleans())
        out.append(TraceFrame(t, m, tuple(obs), lbs, truth, label))
    return out


@settings(max_examples=40, deadline=None)
@given(frames_strategy())
def test_roundtrip_property(tmp_path_factory, frames):
    p = tmp_path_factory.mktemp("rt") / "t.jsonl"
    save_trace(frames, p)
    assert load_trace(p) == frames


def test_identical_timestamps_align():
    ts = [0.0, 1.0, 2.0]
    frames = align_epochs([motion(t) for t in ts], [gnss(t) for t in ts], [wifi(t) for t in ts],
                          lbs=[(t, HOME) for t in ts])
    assert [f.timestamp for f in frames] == ts
    for f in frames:
        kinds = {o.infrastructure for o in f.observations}
        assert kinds == {Infrastructure.GNSS, Infrastructure.WIFI}


def test_nearest_neighbor_attachment():
    ts = [10.0, 11.0, 12.0]
    frames = align_epochs([motion(t) for t in ts], [gnss(t) for t in ts], [wifi(10.4, "ap9")],
                          lbs=[(10.0, HOME)], staleness=0.5)
    has = [any(o.anchor_id == "ap9" for o in f.observations) for f in frames]
    assert has == [True, False, False]


def test_staleness_bound():
    ts = [float(t) for t in range(30)]
    net = [wifi(0.0, "ap1"), wifi(3.0, "ap1")]
    frames = align_epochs([motion(t) for t in ts], [gnss(t) for t in ts], net, lbs=[(0.0, HOME)])
    carried = {f.timestamp: any(o.anchor_id == "ap1" for o in f.observations) for f in frames}
    # last report at t=3; carried while age <= 10 s, gone once the 12 s silence passes the bound
    assert all(carried[t] for t in range(0, 14))
    assert not any(carried[t] for t in range(14, 30))


def test_jammed_gnss_synthetic_epochs():
    ts = [t * 0.5 for t in range(21)]
    gn = [gnss(t) for t in range(0, 4)]
    frames = align_epochs([motion(t) for t in ts], gn, [wifi(float(t)) for t in range(11)],
                          lbs=[(0.0, HOME)])
    assert [f.timestamp for f in frames] == [float(t) for t in range(11)]
    assert all(not any(o.infrastructure is Infrastructure.GNSS for o in f.observations)
               for f in frames[4:])


def test_motion_reduction():
    ms = [motion(0.0), MotionSample(0.5, (2.0, 0, 0), (1.0, 0, 0), OrientationAngles(0, 0, 10)),
          MotionSample(1.0, (3.0, 0, 0), (3.0, 0, 0), OrientationAngles(0, 0, 20))]
    frames = align_epochs(ms, [gnss(0.0), gnss(1.0)], [], lbs=[(0.0, HOME)])
    f = frames[1].motion
    assert f.acceleration[0] == pytest.approx(2.0)
    assert f.velocity == (3.0, 0, 0)
    assert f.orientation.yaw == 20


def test_empty_master():
    with pytest.raises(EmptyMasterStream):
        align_epochs([], [], [wifi(0.0)])


@st.composite
def streams(draw):
    n = draw(st.integers(2, 25))
    mt = sorted(set(draw(st.lists(st.floats(0, n), min_size=2, max_size=3 * n))))
    gt = sorted(set(draw(st.lists(st.integers(0, n), max_size=n))))
    nt = draw(st.lists(st.floats(0, n), max_size=2 * n))
    ms = [motion(t, (draw(finite), 0.0, 0.0)) for t in mt]
    gs = [gnss(float(t)) for t in gt]
    ns = [wifi(t, f"ap{draw(st.integers(0, 4))}") for t in nt]
    return ms, gs, ns


@settings(max_examples=100, deadline=None)
@given(streams())
def test_align_emits_valid_frames(s):
    ms, gs, ns = s
    frames = align_epochs(ms, gs, ns, lbs=[(0.0, HOME)])
    times = [f.timestamp for f in frames]
    assert times == sorted(set(times))
    for f in frames:
        assert f.observations
        assert all(abs(o.timestamp - f.timestamp) <= 0.5 for o in f.observations)
        assert f.motion.timestamp == f.timestamp


def anchor_db():
    db = AnchorDatabase()
    names = ["AndroidAP_1234", "iPhone von Kim", "DIRECT-xy-printer"] + [f"office-{i}" for i in range(7)]
    for i, name in enumerate(names):
        db.add(AnchorRecord(f"a{i}", Infrastructure.WIFI, GeodeticPosition(59.9, 10.7 + i * 1e-4), name=name))
    db.geoip_table["10.0.0.0/16"] = HOME
    return db


def test_clean_default_patterns():
    out = clean_anchors(anchor_db())
    assert len(out) == 7
    assert len(out.removals) == 3
    assert {r.anchor_id for r in out.removals} == {"a0", "a1", "a2"}
    assert out.geoip_table == {"10.0.0.0/16": HOME}


def test_clean_keeps_fixed_eduroam():
    db = AnchorDatabase()
    db.add(AnchorRecord("e", Infrastructure.WIFI, HOME, Mobility.FIXED, "eduroam"))
    db.add(AnchorRecord("m", Infrastructure.BLUETOOTH, None, Mobility.MOBILE, "beacon"))
    out = clean_anchors(db)
    assert list(out.anchors) == [(Infrastructure.WIFI, "e")]


def test_clean_idempotent():
    once = clean_anchors(anchor_db())
    twice = clean_anchors(once)
    assert twice.anchors == once.anchors
    assert twice.removals == ()


def test_anchor_db_roundtrip(tmp_path):
    db = anchor_db()
    p = tmp_path / "db.csv"
    save_anchor_db(db, p)
    back = load_anchor_db(p)
    assert back.anchors == db.anchors
    assert back.geoip_table == db.geoip_table
    assert back.lookup_ip("10.0.3.7") == HOME
    assert back.lookup_ip("192.168.1.1") is None


def test_anchor_db_bad_header(tmp_path):
    p = tmp_path / "db.csv"
    p.write_text("id,lat,lon\n")
    with pytest.raises(MalformedTrace):
        load_anchor_db(p)


def test_observation_invariants():
    with pytest.raises(ValueError):
        RangingObservation(0.0, Infrastructure.GEOIP, "s", -1.0)
    with pytest.raises(ValueError):
        RangingObservation(0.0, Infrastructure.GNSS, "G1", 1.0e6, "GPS", SAT)
    with pytest.raises(ValueError):
        MotionSample(0.0, (0, 0, 0), (60.0, 0, 0))
