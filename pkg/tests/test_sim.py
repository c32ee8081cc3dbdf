import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oppraim.errors import ConfigInvalid, ScheduleOutOfRange
from oppraim.geo import GeodeticPosition, LocalFrame, distance
from oppraim.positioning import RangingModelParams, geolocation_wls, gnss_trilateration, rssi_to_distance
from oppraim.sim import (
    AnchorLayout,
    AttackEntry,
    AttackKind,
    AttackSchedule,
    NoiseModel,
    Satellite,
    ScenarioConfig,
    apply_attack,
    offset_spoof_trace,
    rtt_from_distance,
    simulate,
    synth_geoip_observations,
    synth_gnss_observations,
    synth_network_observations,
)
from oppraim.trace import Infrastructure

ORIGIN = GeodeticPosition(59.91, 10.75, 50.0)
LOCAL = LocalFrame(ORIGIN)


def straight(n_epochs=101, noise=NoiseModel.zero(), **kw):
    end = LOCAL.to_geodetic([100.0, 0.0, 0.0])
    layouts = (AnchorLayout(Infrastructure.WIFI, 30, 60.0, 2000.0, 3.0),)
    return ScenarioConfig((ORIGIN, end), speed=1.0, n_epochs=n_epochs, noise=noise, layouts=layouts,
                          n_geoip_servers=5, **kw)


def gnss_of(frame, const=None):
    obs = [o for o in frame.observations if o.infrastructure is Infrastructure.GNSS
           and (const is None or o.constellation in const)]
    return np.array([o.sat_ecef for o in obs]), np.array([o.value for o in obs])


def test_noise_free_straight_path():
    frames, world = simulate(straight())
    truth = np.array([world.local.to_enu(f.ground_truth) for f in frames])
    assert np.allclose(np.linalg.norm(np.diff(truth, axis=0), axis=1), 1.0, atol=1e-6)
    for k in (0, 37, 100):
        sat, pr = gnss_of(frames[k])
        est = gnss_trilateration(sat, pr, world.local)
        assert np.linalg.norm(est.enu - truth[k]) < 1e-3


def test_determinism():
    a, _ = simulate(straight(30, NoiseModel()))
    b, _ = simulate(straight(30, NoiseModel()))
    assert a == b
    c, _ = simulate(straight(30, NoiseModel(), rng_seed=1))
    assert c != a


def test_pseudorange_residual_rms():
    frames, world = simulate(straight(300, NoiseModel()))
    res = []
    for f in frames:
        sat, pr = gnss_of(f)
        truth = world.local.enu_to_ecef(world.local.to_enu(f.ground_truth))
        r = pr - np.linalg.norm(sat - truth, axis=1)
        res.append(r - r.mean())             # common clock removed
    rms = math.sqrt(np.mean(np.concatenate(res) ** 2) * 24 / 23)
    assert 1.5 <= rms <= 4.5


def sat_list():
    pos = LOCAL.enu_to_ecef(np.array([[1e7, 1e7, 1.5e7], [-1e7, 5e6, 1.8e7], [0, -1.2e7, 1.6e7],
                                      [5e6, 0, 2e7], [-5e6, -5e6, 1.9e7]]))
    return [Satellite(f"G{i}", "GPS", p) for i, p in enumerate(pos)]


def test_gnss_forward_model():
    sats = sat_list()
    truth = LOCAL.origin_ecef
    rng = np.random.default_rng(0)
    geo = np.linalg.norm(np.array([s.ecef for s in sats]) - truth, axis=1)
    obs = synth_gnss_observations(truth, 0.0, sats, NoiseModel.zero(), rng)
    assert np.array_equal([o.value for o in obs], geo)
    obs_b = synth_gnss_observations(truth, 299792.458, sats, NoiseModel.zero(), rng)
    assert np.allclose(np.array([o.value for o in obs_b]) - [o.value for o in obs], 299792.458, atol=1e-6)


def test_gnss_noise_variance():
    sats = sat_list()
    rng = np.random.default_rng(1)
    geo = np.linalg.norm(np.array([s.ecef for s in sats]) - LOCAL.origin_ecef, axis=1)
    errs = np.concatenate([
        np.array([o.value for o in synth_gnss_observations(LOCAL.origin_ecef, 10.0, sats, NoiseModel(), rng)])
        - geo - 10.0 for _ in range(2000)])
    assert np.var(errs, ddof=1) == pytest.approx(9.0, rel=0.05)


def test_rssi_forward_model():
    rng = np.random.default_rng(0)
    anchors = np.array([[1.0, 0, 0], [0, 10.0, 0]])
    obs = synth_network_observations(np.zeros(3), ["a", "b"], anchors, Infrastructure.WIFI, NoiseModel.zero(), rng)
    assert [o.value for o in obs] == pytest.approx([-40.0, -70.0])
    far = synth_network_observations(np.zeros(3), ["a"], np.array([[500.0, 0, 0]]), Infrastructure.WIFI,
                                     NoiseModel.zero(), rng, radius=300.0)
    assert far == []


def test_rtt_forward_model():
    assert float(rtt_from_distance(1.5e6)) == pytest.approx(2 * 1.5e6 / (299792458.0 * 0.5) * 1e3 + 10.0)
    assert float(rtt_from_distance(1.5e6)) == pytest.approx(30.0, abs=0.05)
    assert float(rtt_from_distance(0.0)) == 10.0
    rng = np.random.default_rng(2)
    srv = np.array([[1e5, 0, 0], [0, 1e5, 0], [-1e5, 0, 0]])
    base = rtt_from_distance(np.linalg.norm(srv, axis=1))
    draws = np.array([[o.value for o in synth_geoip_observations(np.zeros(3), ["a", "b", "c"], srv,
                                                                   NoiseModel(), rng)]
                      for _ in range(3400)]) - base
    assert np.std(draws.ravel(), ddof=1) == pytest.approx(5.0, rel=0.05)


@pytest.fixture(scope="module")
def benign():
    frames, world = simulate(straight(60))
    return frames, world


def test_jam_window(benign):
    frames, world = benign
    sched = AttackSchedule((AttackEntry(AttackKind.GNSS_JAM, 10.0, 20.0),))
    out = apply_attack(frames, sched, world.db, local=world.local)
    for f, g in zip(frames, out):
        n = sum(o.infrastructure is Infrastructure.GNSS for o in g.observations)
        if 10 <= f.timestamp <= 20:
            assert n == 0
        else:
            assert g is f


def test_gps_only_spoof(benign):
    frames, world = benign
    local = world.local
    trace, s, e = offset_spoof_trace(frames, 5.0, 59.0, local, offset=(600.0, 0, 0))
    sched = AttackSchedule((AttackEntry(AttackKind.GNSS_SPOOF, s, e, trace, ("GPS",)),))
    out = apply_attack(frames, sched, world.db, local=local)
    k = 30
    truth = local.to_enu(out[k].ground_truth)
    gps = gnss_trilateration(*gnss_of(out[k], ("GPS",)), local)
    gal = gnss_trilateration(*gnss_of(out[k], ("GAL",)), local)
    assert np.linalg.norm(gps.enu - (truth + [600, 0, 0])) < 1e-3
    assert np.linalg.norm(gal.enu - truth) < 1e-3
    assert out[k].attack_label is True
    assert out[0].attack_label is False


def test_small_coordinated_offset_not_labelled(benign):
    frames, world = benign
    trace, s, e = offset_spoof_trace(frames, 5.0, 59.0, world.local, offset=(20.0, 0, 0))
    out = apply_attack(frames, AttackSchedule((AttackEntry(AttackKind.COORDINATED, s, e, trace),)),
                       world.db, local=world.local)
    assert all(f.attack_label is False for f in out)


def test_schedule_out_of_range(benign):
    frames, world = benign
    with pytest.raises(ScheduleOutOfRange):
        apply_attack(frames, AttackSchedule((AttackEntry(AttackKind.GNSS_JAM, 500.0, 600.0),)), world.db)


def test_attack_entry_validation():
    with pytest.raises(ConfigInvalid):
        AttackEntry(AttackKind.GNSS_JAM, 5.0, 5.0)
    with pytest.raises(ConfigInvalid):
        AttackEntry(AttackKind.GNSS_SPOOF, 0.0, 5.0)


@pytest.fixture(scope="module")
def wide():
    # anchors spread far off the route so the replayed set near the spoof is disjoint from the genuine one
    layouts = (AnchorLayout(Infrastructure.WIFI, 400, 2000.0, 300.0, 3.0),)
    end = LOCAL.to_geodetic([100.0, 0.0, 0.0])
    cfg = ScenarioConfig((ORIGIN, end), speed=1.0, n_epochs=60, noise=NoiseModel.zero(), layouts=layouts,
                         n_geoip_servers=5)
    return simulate(cfg)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([AttackKind.GNSS_SPOOF, AttackKind.WIFI_REPLAY, AttackKind.COORDINATED]),
       st.floats(0, 2 * math.pi), st.floats(5, 40), st.floats(20, 50))
def test_apply_attack_properties(wide, kind, ang, start, length):
    frames, world = wide
    local = world.local
    off = 1500.0 * np.array([math.cos(ang), math.sin(ang), 0.0])
    trace, s, e = offset_spoof_trace(frames, start, min(start + length, 59.0), local, offset=off)
    sched = AttackSchedule((AttackEntry(kind, s, e, trace),))
    quiet = NoiseModel.zero()
    out = apply_attack(frames, sched, world.db, noise=quiet, local=local, radius=world.radius)
    assert out == apply_attack(frames, sched, world.db, noise=quiet, local=local, radius=world.radius)
    for f, g in zip(frames, out):
        if not s <= f.timestamp <= e:
            assert g is f
            continue
        spoof = local.to_enu(f.ground_truth) + off
        checked = False
        if kind in (AttackKind.GNSS_SPOOF, AttackKind.COORDINATED):
            est = gnss_trilateration(*gnss_of(g), local)
            assert np.linalg.norm(est.enu - spoof) < 1e-2
            checked = True
        if kind in (AttackKind.WIFI_REPLAY, AttackKind.COORDINATED):
            genuine = {o.anchor_id for o in f.observations if o.infrastructure is Infrastructure.WIFI}
            replayed = [o for o in g.observations
                        if o.infrastructure is Infrastructure.WIFI and o.anchor_id not in genuine]
            if len(replayed) >= 3:
                ids, pts = world.anchors_enu[Infrastructure.WIFI]
                where = {a: i for i, a in enumerate(ids)}
                a = np.array([pts[where[o.anchor_id]] for o in replayed])
                d = rssi_to_distance(np.array([o.value for o in replayed]), RangingModelParams())
                fix = geolocation_wls(a, d, up=spoof[2])
                assert np.linalg.norm(fix.enu[:2] - spoof[:2]) < 1e-2
                checked = True
        assert checked or kind is AttackKind.WIFI_REPLAY
        assert g.attack_label is (distance(g.lbs_position, g.ground_truth) > 30.0)


def test_replay_consistency_is_exercised(wide):
    frames, world = wide
    local = world.local
    off = np.array([1500.0, 0.0, 0.0])
    trace, s, e = offset_spoof_trace(frames, 5.0, 50.0, local, offset=off)
    out = apply_attack(frames, AttackSchedule((AttackEntry(AttackKind.WIFI_REPLAY, s, e, trace),)), world.db,
                       noise=NoiseModel.zero(), local=local, radius=world.radius)
    counts = []
    for f, g in zip(frames[5:51], out[5:51]):
        genuine = {o.anchor_id for o in f.observations if o.infrastructure is Infrastructure.WIFI}
        counts.append(sum(o.infrastructure is Infrastructure.WIFI and o.anchor_id not in genuine
                          for o in g.observations))
    assert min(counts) >= 3
