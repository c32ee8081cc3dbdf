"""Synthetic traces: route, motion, GNSS/network/GeoIP ranging, and attack injection."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigInvalid, InsufficientSatellites, ScheduleOutOfRange
from .geo import (
    SPEED_OF_LIGHT,
    WGS84_A,
    GeodeticPosition,
    LocalFrame,
    OrientationAngles,
    distance,
    geodetic_to_ecef_array,
)
from .positioning import RangingModelParams, distance_to_rssi
from .trace import (
    CONSTELLATIONS,
    AnchorDatabase,
    AnchorRecord,
    Infrastructure,
    MotionSample,
    RangingObservation,
    TraceFrame,
)

SAT_ALTITUDE = 20_200e3
LABEL_DISTANCE = 30.0
CLIENT_IP = "10.0.0.1"
CLIENT_PREFIX = "10.0.0.0/16"


@dataclass(frozen=True)
class NoiseModel:
    pr_sigma: float = 3.0               # m
    clock_walk: float = 5.0             # m / sqrt(s)
    rssi_sigma: float = 4.0             # dB
    rtt_sigma: float = 5.0              # ms
    velocity_sigma: float = 0.05        # m/s
    accel_sigma: float = 0.02           # m/s^2
    orientation_sigma: float = 0.1      # deg
    lbs_sigma: float = 3.0              # m, benign LBS scatter per axis
    process_accel_sigma: float = 1.0    # m/s^2, used by the Kalman baseline

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigInvalid(f"noise parameter {k} must be a finite value >= 0")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0, 0, 0, 0, 0, 0, 0, 0, 0)


@dataclass(frozen=True)
class AnchorLayout:
    """Anchors scattered along the route within ``corridor`` meters of it."""

    infrastructure: Infrastructure
    count: int
    corridor: float
    radius: float
    height: float = 0.0

    def __post_init__(self):
        if not self.infrastructure.is_network:
            raise ConfigInvalid("anchor layouts are for Wi-Fi, cellular or Bluetooth")
        if self.count < 3:
            raise ConfigInvalid(f"need at least 3 {self.infrastructure.name} anchors")
        if self.corridor < 0 or self.radius <= 0:
            raise ConfigInvalid("corridor must be >= 0 and radius > 0")


DEFAULT_LAYOUTS = (
    AnchorLayout(Infrastructure.WIFI, 40, 120.0, 300.0, 3.0),
    AnchorLayout(Infrastructure.CELLULAR, 8, 3000.0, 5000.0, 30.0),
    AnchorLayout(Infrastructure.BLUETOOTH, 6, 30.0, 300.0, 1.0),
)


@dataclass(frozen=True)
class ScenarioConfig:
    waypoints: tuple
    speed: float = 10.0
    epoch_rate: float = 1.0
    n_epochs: int | None = None
    n_satellites: int = 24
    geometry_seed: int = 0
    min_elevation: float = 15.0
    layouts: tuple = DEFAULT_LAYOUTS
    n_geoip_servers: int = 12
    geoip_distance: tuple[float, float] = (200e3, 3000e3)
    geoip_servers: tuple = ()           # explicit GeodeticPositions override the random layout
    db_position_sigma: float = 0.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    rng_seed: int = 0

    def __post_init__(self):
        if len(self.waypoints) < 2:
            raise ConfigInvalid("need at least 2 waypoints")
        if not self.speed > 0:
            raise ConfigInvalid("speed must be positive")
        if not self.epoch_rate > 0:
            raise ConfigInvalid("epoch rate must be positive")
        if self.n_satellites < 4:
            raise ConfigInvalid("need at least 4 satellites")
        if self.n_epochs is not None and self.n_epochs < 1:
            raise ConfigInvalid("n_epochs must be positive")
        n_srv = len(self.geoip_servers) or self.n_geoip_servers
        if n_srv < 3:
            raise ConfigInvalid("need at least 3 GeoIP servers")
        if not 0 <= self.min_elevation < 90:
            raise ConfigInvalid("min elevation must be in [0, 90)")


# ---------------------------------------------------------------------------
# world geometry

@dataclass
class Satellite:
    sat_id: str
    constellation: str
    ecef: np.ndarray


@dataclass
class World:
    """Static scenario geometry: frame, route, satellites, anchor database."""

    local: LocalFrame
    route_enu: np.ndarray               # (W, 3) waypoints in ENU
    satellites: list
    db: AnchorDatabase
    anchors_enu: dict                   # infra -> (ids, (J, 3) true ENU positions)
    servers_enu: tuple                  # (ids, (K, 3))
    radius: dict                        # infra -> reception radius


def place_satellites(origin: GeodeticPosition, count: int, seed: int, min_elevation: float = 15.0,
                     constellations=CONSTELLATIONS) -> list[Satellite]:
    """Satellites on the 20,200 km-altitude sphere, uniform azimuth, elevation >= ``min_elevation``."""
    if count < 4:
        raise InsufficientSatellites(f"{count} satellites")
    rng = np.random.default_rng(seed)
    local = LocalFrame(origin)
    az = rng.uniform(0.0, 2 * math.pi, count)
    # uniform on the visible cap above the mask
    s_lo = math.sin(math.radians(min_elevation))
    el = np.arcsin(rng.uniform(s_lo, 1.0, count))
    los = np.stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)], axis=1)
    o = local.origin_ecef
    u = los @ local.rot                  # ENU directions to ECEF
    r_sat = WGS84_A + SAT_ALTITUDE
    b = u @ o
    rng_m = -b + np.sqrt(b * b - (o @ o - r_sat * r_sat))
    pos = o[None, :] + rng_m[:, None] * u
    out = []
    for i in range(count):
        c = constellations[i % len(constellations)]
        out.append(Satellite(f"{c}{i // len(constellations) + 1:02d}", c, pos[i]))
    return out


def _route_geometry(route_enu):
    seg = np.diff(route_enu, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    return seg, seg_len, cum


def route_points(route_enu, s) -> np.ndarray:
    """Positions at arc lengths ``s`` along the polyline (held at the end)."""
    seg, seg_len, cum = _route_geometry(route_enu)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    i = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = np.where(seg_len[i] > 0, (s - cum[i]) / np.where(seg_len[i] > 0, seg_len[i], 1.0), 0.0)
    return route_enu[i] + frac[:, None] * seg[i]


def _scatter_along(route_enu, count, corridor, height, rng):
    _, _, cum = _route_geometry(route_enu)
    s = rng.uniform(0.0, cum[-1], count)
    base = route_points(route_enu, s)
    offset = rng.uniform(-corridor, corridor, (count, 2))
    pts = base.copy()
    pts[:, :2] += offset
    pts[:, 2] = height
    return pts


ID_PREFIX = {
    Infrastructure.WIFI: "ap",
    Infrastructure.CELLULAR: "bs",
    Infrastructure.BLUETOOTH: "bt",
    Infrastructure.GEOIP: "srv",
}


def build_world(cfg: ScenarioConfig) -> World:
    origin = cfg.waypoints[0]
    local = LocalFrame(origin)
    route = np.array([local.to_enu(w) for w in cfg.waypoints])
    rng = np.random.default_rng([cfg.geometry_seed, 1])
    sats = place_satellites(origin, cfg.n_satellites, cfg.geometry_seed, cfg.min_elevation)
    db = AnchorDatabase()
    anchors = {}
    radius = {}
    for lay in cfg.layouts:
        pts = _scatter_along(route, lay.count, lay.corridor, lay.height, rng)
        ids = [f"{ID_PREFIX[lay.infrastructure]}{i:03d}" for i in range(lay.count)]
        noisy = pts + rng.normal(0.0, cfg.db_position_sigma, pts.shape) * np.array([1, 1, 0])
        for aid, p in zip(ids, noisy):
            db.add(AnchorRecord(aid, lay.infrastructure, local.to_geodetic(p)))
        anchors[lay.infrastructure] = (ids, pts)
        radius[lay.infrastructure] = lay.radius

    if cfg.geoip_servers:
        srv = np.array([local.to_enu(p) for p in cfg.geoip_servers])
    else:
        k = cfg.n_geoip_servers
        bearing = rng.uniform(0, 2 * math.pi, k)
        dist = rng.uniform(*cfg.geoip_distance, k)
        geo = []
        for b, d in zip(bearing, dist):
            # great-circle destination, then project
            lat1, lon1 = math.radians(origin.latitude), math.radians(origin.longitude)
            ang = d / 6371e3
            lat2 = math.asin(math.sin(lat1) * math.cos(ang) + math.cos(lat1) * math.sin(ang) * math.cos(b))
            lon2 = lon1 + math.atan2(math.sin(b) * math.sin(ang) * math.cos(lat1),
                                     math.cos(ang) - math.sin(lat1) * math.sin(lat2))
            geo.append(GeodeticPosition(math.degrees(lat2), math.degrees(lon2), 0.0))
        srv = np.array([local.to_enu(p) for p in geo])
    srv_ids = [f"srv{i:02d}" for i in range(len(srv))]
    for sid, p in zip(srv_ids, srv):
        db.add(AnchorRecord(sid, Infrastructure.GEOIP, local.to_geodetic(p)))
    db.geoip_table[CLIENT_PREFIX] = local.to_geodetic(np.array([4000.0, -3000.0, 0.0]))
    return World(local, route, sats, db, anchors, (srv_ids, srv), radius)


# ---------------------------------------------------------------------------
# forward models

def synth_gnss_observations(truth_ecef, clock_bias, satellites, noise: NoiseModel, rng, t=0.0):
    """Pseudoranges rho = |p - sat| + clock bias + N(0, pr_sigma)."""
    if len(satellites) < 4:
        raise InsufficientSatellites(f"{len(satellites)} satellites")
    sat = np.array([s.ecef for s in satellites])
    rng_m = np.linalg.norm(sat - np.asarray(truth_ecef)[None, :], axis=1)
    eps = rng.normal(0.0, noise.pr_sigma, len(sat)) if noise.pr_sigma > 0 else np.zeros(len(sat))
    pr = rng_m + clock_bias + eps
    return [
        RangingObservation(t, Infrastructure.GNSS, s.sat_id, float(v), s.constellation, tuple(map(float, s.ecef)))
        for s, v in zip(satellites, pr)
    ]


def synth_network_observations(truth_enu, ids, anchors_enu, infra, noise: NoiseModel, rng, t=0.0,
                               radius=300.0, params=RangingModelParams()):
    """Log-distance RSSI for every anchor within ``radius`` of the receiver."""
    d = np.linalg.norm(np.asarray(anchors_enu) - np.asarray(truth_enu)[None, :], axis=1)
    heard = np.nonzero(d <= radius)[0]
    if len(heard) == 0:
        return []
    rssi = distance_to_rssi(np.maximum(d[heard], 1e-3), params.for_infra(infra))
    if noise.rssi_sigma > 0:
        rssi = rssi + rng.normal(0.0, noise.rssi_sigma, len(heard))
    rssi = np.minimum(rssi, 0.0)
    return [RangingObservation(t, infra, ids[j], float(v)) for j, v in zip(heard, rssi)]


def rtt_from_distance(d, params=RangingModelParams()):
    """Noise-free RTT in ms: 2 d / (c * kappa) + base latency."""
    return 2.0 * np.asarray(d, dtype=float) / (SPEED_OF_LIGHT * params.fiber_factor) * 1e3 + params.rtt_intercept


def synth_geoip_observations(truth_enu, ids, servers_enu, noise: NoiseModel, rng, t=0.0,
                             params=RangingModelParams()):
    if len(ids) < 3:
        raise ConfigInvalid("need at least 3 GeoIP servers")
    d = np.linalg.norm(np.asarray(servers_enu) - np.asarray(truth_enu)[None, :], axis=1)
    rtt = rtt_from_distance(d, params)
    if noise.rtt_sigma > 0:
        rtt = rtt + rng.normal(0.0, noise.rtt_sigma, len(d))
    rtt = np.maximum(rtt, 0.0)
    return [RangingObservation(t, Infrastructure.GEOIP, i, float(v)) for i, v in zip(ids, rtt)]


# ---------------------------------------------------------------------------
# benign trace

def truth_track(cfg: ScenarioConfig, world: World):
    _, _, cum = _route_geometry(world.route_enu)
    n = cfg.n_epochs or int(math.floor(cum[-1] / cfg.speed * cfg.epoch_rate)) + 1
    t = np.arange(n) / cfg.epoch_rate
    return t, route_points(world.route_enu, cfg.speed * t)


def _motion_samples(t, truth, noise: NoiseModel, rng):
    """Motion at epoch k reproduces truth[k+1] - truth[k] (the last repeats the previous step)."""
    n = len(t)
    d = np.diff(truth, axis=0)
    dt = np.diff(t)
    if n > 1:
        d = np.vstack([d, d[-1:]])
        dt = np.concatenate([dt, dt[-1:]])
    else:
        d = np.zeros((1, 3))
        dt = np.ones(1)
    out = []
    for k in range(n):
        h = float(np.hypot(d[k, 0], d[k, 1]))
        yaw = math.degrees(math.atan2(d[k, 1], d[k, 0])) if h > 0 else (
            out[-1].orientation.yaw if out else 0.0)
        v = np.array([h / dt[k], 0.0, d[k, 2] / dt[k]])
        v = v + rng.normal(0.0, noise.velocity_sigma, 3) if noise.velocity_sigma > 0 else v
        a = rng.normal(0.0, noise.accel_sigma, 3) if noise.accel_sigma > 0 else np.zeros(3)
        if noise.orientation_sigma > 0:
            yaw = yaw + rng.normal(0.0, noise.orientation_sigma)
        out.append(MotionSample(float(t[k]), tuple(map(float, v)), tuple(map(float, a)),
                                OrientationAngles(0.0, 0.0, yaw)))
    return out


def generate_benign_trace(cfg: ScenarioConfig, world: World | None = None) -> list[TraceFrame]:
    """Benign labeled frames for ``cfg``; deterministic in ``cfg.rng_seed``."""
    world = world or build_world(cfg)
    rng = np.random.default_rng([cfg.rng_seed, 2])
    noise = cfg.noise
    t, truth = truth_track(cfg, world)
    local = world.local
    motion = _motion_samples(t, truth, noise, rng)
    truth_ecef = local.enu_to_ecef(truth)
    srv_ids, srv = world.servers_enu
    bias = 0.0
    frames = []
    for k in range(len(t)):
        if k and noise.clock_walk > 0:
            bias += rng.normal(0.0, noise.clock_walk * math.sqrt(t[k] - t[k - 1]))
        obs = synth_gnss_observations(truth_ecef[k], bias, world.satellites, noise, rng, float(t[k]))
        for infra, (ids, pts) in world.anchors_enu.items():
            obs += synth_network_observations(truth[k], ids, pts, infra, noise, rng, float(t[k]),
                                              world.radius[infra])
        obs += synth_geoip_observations(truth[k], srv_ids, srv, noise, rng, float(t[k]))
        lbs = truth[k] + (rng.normal(0.0, noise.lbs_sigma, 3) if noise.lbs_sigma > 0 else 0.0)
        frames.append(TraceFrame(
            float(t[k]), motion[k], tuple(obs), local.to_geodetic(lbs), local.to_geodetic(truth[k]),
            False, CLIENT_IP,
        ))
    return frames


def simulate(cfg: ScenarioConfig):
    """Build the world and its benign trace; returns (frames, world)."""
    world = build_world(cfg)
    return generate_benign_trace(cfg, world), world


# ---------------------------------------------------------------------------
# attacks

class AttackKind(enum.Enum):
    GNSS_JAM = "gnss_jam"
    GNSS_SPOOF = "gnss_spoof"
    WIFI_REPLAY = "wifi_replay"
    COORDINATED = "coordinated"
    GEOIP_DELAY = "geoip_delay"

    @property
    def spoofing(self) -> bool:
        return self in (AttackKind.GNSS_SPOOF, AttackKind.WIFI_REPLAY, AttackKind.COORDINATED)


@dataclass(frozen=True)
class AttackEntry:
    kind: AttackKind
    start: float
    end: float
    spoof_trace: tuple = ()             # GeodeticPositions spread evenly over [start, end]
    constellations: tuple = ()          # GNSS_SPOOF: empty means all
    replayed: tuple = ()                # anchor ids; empty means those audible at the spoof position
    delay_ms: float = 0.0

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigInvalid(f"attack window [{self.start}, {self.end}] is empty")
        if self.kind.spoofing and not self.spoof_trace:
            raise ConfigInvalid(f"{self.kind.name} needs a spoof trace")
        if self.delay_ms < 0:
            raise ConfigInvalid("delay must be >= 0")

    def covers(self, t: float) -> bool:
        return self.start <= t <= self.end


@dataclass(frozen=True)
class AttackSchedule:
    entries: tuple = ()

    def active(self, t: float):
        return [e for e in self.entries if e.covers(t)]


def _spoof_enu(entry: AttackEntry, t: float, pts: np.ndarray) -> np.ndarray:
    if len(pts) == 1:
        return pts[0]
    u = (t - entry.start) / (entry.end - entry.start) * (len(pts) - 1)
    i = int(min(max(math.floor(u), 0), len(pts) - 2))
    f = min(max(u - i, 0.0), 1.0)
    return pts[i] + f * (pts[i + 1] - pts[i])


REPLAY_INFRAS = {
    AttackKind.WIFI_REPLAY: (Infrastructure.WIFI,),
    AttackKind.COORDINATED: (Infrastructure.WIFI, Infrastructure.CELLULAR, Infrastructure.BLUETOOTH),
}


def _db_enu(db, infra, local):
    recs = [r for r in db.of(infra) if r.position is not None]
    if not recs:
        return [], np.zeros((0, 3))
    pos = local.to_enu_many(np.array([r.position.latitude for r in recs]),
                            np.array([r.position.longitude for r in recs]),
                            np.array([r.position.altitude for r in recs]))
    return [r.anchor_id for r in recs], pos


def _replay(obs, spoof, entry, anchors, noise, rng, t, params, radius):
    out = list(obs)
    for infra in REPLAY_INFRAS[entry.kind]:
        ids, pos = anchors[infra]
        if len(ids) == 0:
            continue
        if entry.replayed:
            keep = np.array([a in set(entry.replayed) for a in ids], dtype=bool)
        else:
            keep = np.linalg.norm(pos - spoof[None, :], axis=1) <= radius.get(infra, 300.0)
        if not keep.any():
            continue
        chosen = [a for a, k in zip(ids, keep) if k]
        d = np.maximum(np.linalg.norm(pos[keep] - spoof[None, :], axis=1), 1e-3)
        rssi = distance_to_rssi(d, params.for_infra(infra))
        if noise.rssi_sigma > 0:
            rssi = rssi + rng.normal(0.0, noise.rssi_sigma, len(d))
        rssi = np.minimum(rssi, 0.0)
        index = {(o.infrastructure, o.anchor_id): i for i, o in enumerate(out)}
        for aid, v in zip(chosen, rssi):
            new = RangingObservation(t, infra, aid, float(v))
            i = index.get((infra, aid))
            if i is None:
                index[(infra, aid)] = len(out)
                out.append(new)
            elif v > out[i].value:
                # a replayed beacon drowning out the genuine one
                out[i] = new
    return out


def _spoof_gnss(obs, spoof_ecef, truth_ecef, constellations):
    out = []
    for o in obs:
        if o.infrastructure is Infrastructure.GNSS and (not constellations or o.constellation in constellations):
            sat = np.asarray(o.sat_ecef)
            err = o.value - np.linalg.norm(truth_ecef - sat)
            o = replace(o, value=float(np.linalg.norm(spoof_ecef - sat) + err))
        out.append(o)
    return out


def _delay_geoip(obs, delay_ms, spoof, truth, servers, params):
    ids, pos = servers
    where = {a: i for i, a in enumerate(ids)}
    out = []
    for o in obs:
        if o.infrastructure is Infrastructure.GEOIP:
            extra = delay_ms
            if spoof is not None:
                i = where.get(o.anchor_id)
                if i is not None:
                    a = pos[i]
                    gap = np.linalg.norm(a - spoof) - np.linalg.norm(a - truth)
                    extra += max(0.0, float(rtt_from_distance(gap, params) - params.rtt_intercept))
            o = replace(o, value=o.value + extra)
        out.append(o)
    return out


def apply_attack(frames, schedule: AttackSchedule, db: AnchorDatabase, rng_seed: int = 0,
                 noise: NoiseModel = NoiseModel(), params: RangingModelParams = RangingModelParams(),
                 local: LocalFrame | None = None, radius: dict | None = None) -> list[TraceFrame]:
    """Mutate observations inside each entry's window; frames outside every window are returned as-is."""
    frames = list(frames)
    if not frames:
        return frames
    t0, t1 = frames[0].timestamp, frames[-1].timestamp
    for e in schedule.entries:
        if e.end < t0 or e.start > t1:
            raise ScheduleOutOfRange(f"{e.kind.name} window [{e.start}, {e.end}] outside trace [{t0}, {t1}]")
    if local is None:
        first = next((f.ground_truth for f in frames if f.ground_truth is not None), frames[0].lbs_position)
        local = LocalFrame(first)
    radius = radius or {Infrastructure.WIFI: 300.0, Infrastructure.BLUETOOTH: 300.0,
                        Infrastructure.CELLULAR: 5000.0}
    spoof_pts = [np.array([local.to_enu(p) for p in e.spoof_trace]) for e in schedule.entries]
    anchors = {i: _db_enu(db, i, local) for i in Infrastructure}
    entry_index = {id(e): i for i, e in enumerate(schedule.entries)}
    out = []
    for k, f in enumerate(frames):
        active = schedule.active(f.timestamp)
        if not active:
            out.append(f)
            continue
        if f.ground_truth is None:
            raise ConfigInvalid(f"frame at t={f.timestamp} lacks ground truth needed to inject attacks")
        rng = np.random.default_rng([rng_seed, 3, k])
        truth = local.to_enu(f.ground_truth)
        truth_ecef = local.enu_to_ecef(truth)
        obs = list(f.observations)
        lbs = f.lbs_position
        spoofed = False
        for e in active:
            spoof = _spoof_enu(e, f.timestamp, spoof_pts[entry_index[id(e)]]) if e.spoof_trace else None
            if e.kind is AttackKind.GNSS_JAM:
                obs = [o for o in obs if o.infrastructure is not Infrastructure.GNSS]
            elif e.kind is AttackKind.GNSS_SPOOF:
                obs = _spoof_gnss(obs, local.enu_to_ecef(spoof), truth_ecef, e.constellations)
            elif e.kind is AttackKind.WIFI_REPLAY:
                obs = _replay(obs, spoof, e, anchors, noise, rng, f.timestamp, params, radius)
            elif e.kind is AttackKind.COORDINATED:
                obs = _spoof_gnss(obs, local.enu_to_ecef(spoof), truth_ecef, ())
                obs = _replay(obs, spoof, e, anchors, noise, rng, f.timestamp, params, radius)
                obs = _delay_geoip(obs, e.delay_ms, spoof, truth, anchors[Infrastructure.GEOIP], params)
            elif e.kind is AttackKind.GEOIP_DELAY:
                obs = _delay_geoip(obs, e.delay_ms, spoof, truth, anchors[Infrastructure.GEOIP], params)
            if spoof is not None:
                jitter = rng.normal(0.0, noise.lbs_sigma, 3) if noise.lbs_sigma > 0 else 0.0
                lbs = local.to_geodetic(spoof + jitter)
                spoofed = True
        label = distance(lbs, f.ground_truth) > LABEL_DISTANCE if spoofed else f.attack_label
        out.append(replace(f, observations=tuple(obs), lbs_position=lbs, attack_label=label))
    return out


def _window_frames(frames, start, end):
    return [f for f in frames if start <= f.timestamp <= end]


def offset_spoof_trace(frames, start, end, local: LocalFrame, offset=None, drift=None):
    """Spoof positions, one per frame in [start, end]: truth + ``offset`` + ``drift`` * (epochs since start)."""
    win = _window_frames(frames, start, end)
    if not win:
        raise ScheduleOutOfRange(f"no frames in [{start}, {end}]")
    off = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)
    dr = np.zeros(3) if drift is None else np.asarray(drift, dtype=float)
    pts = []
    for i, f in enumerate(win):
        p = local.to_enu(f.ground_truth) + off + dr * (i + 1)
        pts.append(local.to_geodetic(p))
    return tuple(pts), win[0].timestamp, win[-1].timestamp


# ---------------------------------------------------------------------------
# bundled scenario families used by the evaluation suites

ORIGIN = GeodeticPosition(59.91, 10.75, 50.0)


def _route(seed, n_legs=4, leg=(1500.0, 3000.0)):
    rng = np.random.default_rng([seed, 9])
    local = LocalFrame(ORIGIN)
    p = np.zeros(3)
    heading = rng.uniform(0, 2 * math.pi)
    pts = [local.to_geodetic(p)]
    for _ in range(n_legs):
        heading += rng.uniform(-1.0, 1.0)
        p = p + rng.uniform(*leg) * np.array([math.cos(heading), math.sin(heading), 0.0])
        pts.append(local.to_geodetic(p))
    return tuple(pts)


def rural_config(seed: int, n_epochs: int = 600, **kw) -> ScenarioConfig:
    """Sparse rural drive: few access points, a handful of cell towers."""
    layouts = (
        AnchorLayout(Infrastructure.WIFI, 15, 150.0, 300.0, 3.0),
        AnchorLayout(Infrastructure.CELLULAR, 10, 3000.0, 5000.0, 30.0),
    )
    base = dict(waypoints=_route(seed), speed=12.0, n_epochs=n_epochs, layouts=layouts,
                geometry_seed=seed, rng_seed=seed)
    base.update(kw)
    return ScenarioConfig(**base)


def urban_config(seed: int, n_epochs: int = 600, **kw) -> ScenarioConfig:
    """Dense urban walk/drive: many access points and beacons."""
    layouts = (
        AnchorLayout(Infrastructure.WIFI, 140, 80.0, 300.0, 3.0),
        AnchorLayout(Infrastructure.CELLULAR, 10, 2000.0, 5000.0, 30.0),
        AnchorLayout(Infrastructure.BLUETOOTH, 30, 30.0, 300.0, 1.0),
    )
    base = dict(waypoints=_route(seed, leg=(600.0, 1200.0)), speed=4.0, n_epochs=n_epochs,
                layouts=layouts, geometry_seed=seed, rng_seed=seed)
    base.update(kw)
    return ScenarioConfig(**base)


def step_spoof_trace(seed: int, n_epochs: int = 600, offset_m: float | None = None,
                     constellations=("GPS", "GAL"), start: float | None = None, **kw):
    """Rural trace with a GNSS step spoof of 600-700 m on the given constellations."""
    cfg = rural_config(seed, n_epochs, **kw)
    frames, world = simulate(cfg)
    rng = np.random.default_rng([seed, 11])
    off = offset_m if offset_m is not None else rng.uniform(600.0, 700.0)
    ang = rng.uniform(0, 2 * math.pi)
    t_start = start if start is not None else float(frames[n_epochs // 3].timestamp)
    trace, s, e = offset_spoof_trace(frames, t_start, frames[-1].timestamp, world.local,
                                     offset=(off * math.cos(ang), off * math.sin(ang), 0.0))
    sched = AttackSchedule((AttackEntry(AttackKind.GNSS_SPOOF, s, e, trace, tuple(constellations)),))
    attacked = apply_attack(frames, sched, world.db, seed, cfg.noise, local=world.local, radius=world.radius)
    return attacked, world, sched


def coordinated_spoof_trace(seed: int, n_epochs: int = 600, drift_m: float = 1.0,
                            start: float | None = None, delay_ms: float = 0.0, along_route: bool = True,
                            family=None, **kw):
    """Urban trace with a coordinated spoof drifting ``drift_m`` per epoch away from truth.

    With ``along_route`` the spoofed position runs ahead of the vehicle along
    its own route (a plausible track, with beacons to replay); otherwise it
    drifts in a fixed random direction.
    """
    cfg = (family or urban_config)(seed, n_epochs, **kw)
    frames, world = simulate(cfg)
    rng = np.random.default_rng([seed, 12])
    ang = rng.uniform(0, 2 * math.pi)
    t_start = start if start is not None else float(frames[n_epochs // 6].timestamp)
    if along_route:
        win = _window_frames(frames, t_start, frames[-1].timestamp)
        s = cfg.speed * np.array([f.timestamp for f in win]) + drift_m * np.arange(1, len(win) + 1)
        pts = route_points(world.route_enu, s)
        trace = tuple(world.local.to_geodetic(p) for p in pts)
        s0, e0 = win[0].timestamp, win[-1].timestamp
    else:
        trace, s0, e0 = offset_spoof_trace(frames, t_start, frames[-1].timestamp, world.local,
                                           drift=(drift_m * math.cos(ang), drift_m * math.sin(ang), 0.0))
    sched = AttackSchedule((AttackEntry(AttackKind.COORDINATED, s0, e0, trace, delay_ms=delay_ms),))
    attacked = apply_attack(frames, sched, world.db, seed, cfg.noise, local=world.local, radius=world.radius)
    return attacked, world, sched
