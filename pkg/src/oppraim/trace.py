"""Trace data model: observations, anchors, epochs, trace I/O, alignment and anchor cleaning."""

from __future__ import annotations

import bisect
import csv
import enum
import ipaddress
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMasterStream, InvalidCoordinate, MalformedTrace, NonMonotonicTimestamps
from .geo import ECEF_NORM_MAX, ECEF_NORM_MIN, GeodeticPosition, OrientationAngles

log = logging.getLogger(__name__)

ALIGN_TOLERANCE_S = 0.5
STALENESS_S = 10.0
MAX_ACCEL = 50.0
PSEUDORANGE_RANGE = (1.8e7, 3.0e7)


class Infrastructure(enum.Enum):
    GNSS = 1
    WIFI = 2
    CELLULAR = 3
    BLUETOOTH = 4
    GEOIP = 5

    @property
    def is_network(self) -> bool:
        return self in (Infrastructure.WIFI, Infrastructure.CELLULAR, Infrastructure.BLUETOOTH)


class Mobility(enum.Enum):
    FIXED = "fixed"
    MOBILE = "mobile"
    UNKNOWN = "unknown"


CONSTELLATIONS = ("GPS", "GAL", "GLO", "BDS")
_CONST_ALIASES = {
    "GPS": "GPS", "G": "GPS",
    "GAL": "GAL", "GALILEO": "GAL", "E": "GAL",
    "GLO": "GLO", "GLONASS": "GLO", "R": "GLO",
    "BDS": "BDS", "BEIDOU": "BDS", "C": "BDS",
}


def normalize_constellation(name: str) -> str:
    try:
        return _CONST_ALIASES[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown constellation {name!r}") from None


# trace "kind" tags <-> infrastructures
KIND_TO_INFRA = {
    "gnss": Infrastructure.GNSS,
    "wifi": Infrastructure.WIFI,
    "cell": Infrastructure.CELLULAR,
    "bt": Infrastructure.BLUETOOTH,
    "geoip": Infrastructure.GEOIP,
}
INFRA_TO_KIND = {v: k for k, v in KIND_TO_INFRA.items()}

INFRA_NAMES = {
    "gnss": Infrastructure.GNSS,
    "wifi": Infrastructure.WIFI,
    "cell": Infrastructure.CELLULAR,
    "cellular": Infrastructure.CELLULAR,
    "bt": Infrastructure.BLUETOOTH,
    "bluetooth": Infrastructure.BLUETOOTH,
    "geoip": Infrastructure.GEOIP,
}


def parse_infrastructure(name: str) -> Infrastructure:
    try:
        return INFRA_NAMES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown infrastructure {name!r}") from None


@dataclass(frozen=True)
class RangingObservation:
    """One ranging measurement rho_j^m(t).

    ``value`` is a pseudorange in meters (GNSS), an RSSI in dBm
    (Wi-Fi/cellular/Bluetooth) or a round-trip time in milliseconds (GeoIP).
    GNSS observations carry the satellite ECEF position inline.
    """

    timestamp: float
    infrastructure: Infrastructure
    anchor_id: str
    value: float
    constellation: str | None = None
    sat_ecef: tuple[float, float, float] | None = None

    def __post_init__(self):
        validate_observation(self)


def validate_observation(o: RangingObservation) -> None:
    if not math.isfinite(o.value) or not math.isfinite(o.timestamp):
        raise ValueError(f"non-finite observation value for {o.anchor_id}")
    infra = o.infrastructure
    if infra is Infrastructure.GNSS:
        lo, hi = PSEUDORANGE_RANGE
        if not lo <= o.value <= hi:
            raise ValueError(f"pseudorange {o.value} outside [{lo}, {hi}] m")
        if o.sat_ecef is None:
            raise ValueError(f"GNSS observation {o.anchor_id} lacks satellite position")
        norm = math.sqrt(sum(c * c for c in o.sat_ecef))
        if not ECEF_NORM_MIN <= norm <= ECEF_NORM_MAX:
            raise ValueError(f"satellite position norm {norm:.0f} m out of range")
        if o.constellation is not None and o.constellation not in CONSTELLATIONS:
            raise ValueError(f"unknown constellation {o.constellation!r}")
    elif infra.is_network:
        if o.value > 0.0:
            raise ValueError(f"RSSI {o.value} dBm must be <= 0")
    elif infra is Infrastructure.GEOIP:
        if o.value < 0.0:
            raise ValueError(f"RTT {o.value} ms must be >= 0")


@dataclass(frozen=True)
class AnchorRecord:
    anchor_id: str
    infrastructure: Infrastructure
    position: GeodeticPosition | None
    mobility: Mobility = Mobility.FIXED
    name: str | None = None

    def __post_init__(self):
        if self.mobility is Mobility.FIXED and self.position is None:
            raise ValueError(f"fixed anchor {self.anchor_id} has no position")


@dataclass(frozen=True)
class MotionSample:
    """Velocity (m/s) and acceleration (m/s^2) in the sensor frame plus attitude."""

    timestamp: float
    velocity: tuple[float, float, float]
    acceleration: tuple[float, float, float]
    orientation: OrientationAngles = field(default_factory=OrientationAngles)

    def __post_init__(self):
        vals = (*self.velocity, *self.acceleration, self.timestamp)
        if len(self.velocity) != 3 or len(self.acceleration) != 3:
            raise ValueError("velocity and acceleration must be 3-vectors")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite motion sample")
        if math.sqrt(sum(a * a for a in self.acceleration)) > MAX_ACCEL:
            raise ValueError(f"acceleration norm exceeds {MAX_ACCEL} m/s^2")


@dataclass(frozen=True)
class TraceFrame:
    """One time-aligned epoch."""

    timestamp: float
    motion: MotionSample
    observations: tuple[RangingObservation, ...]
    lbs_position: GeodeticPosition
    ground_truth: GeodeticPosition | None = None
    attack_label: bool | None = None
    client_ip: str | None = None

    def __post_init__(self):
        if not self.observations:
            raise ValueError(f"frame at t={self.timestamp} has no observations")
        for o in self.observations:
            if abs(o.timestamp - self.timestamp) > ALIGN_TOLERANCE_S:
                raise ValueError(
                    f"observation at {o.timestamp} outside alignment tolerance of frame {self.timestamp}"
                )

    def by_infrastructure(self) -> dict[Infrastructure, list[RangingObservation]]:
        groups: dict[Infrastructure, list[RangingObservation]] = {}
        for o in self.observations:
            groups.setdefault(o.infrastructure, []).append(o)
        return groups


@dataclass(frozen=True)
class Removal:
    infrastructure: Infrastructure
    anchor_id: str
    rule: str


@dataclass
class AnchorDatabase:
    """Anchor positions keyed by (infrastructure, anchor_id), plus a GeoIP prefix table."""

    anchors: dict[tuple[Infrastructure, str], AnchorRecord] = field(default_factory=dict)
    geoip_table: dict[str, GeodeticPosition] = field(default_factory=dict)
    removals: tuple[Removal, ...] = field(default=(), compare=False)

    def __post_init__(self):
        self._networks = None

    def add(self, rec: AnchorRecord) -> None:
        key = (rec.infrastructure, rec.anchor_id)
        if key in self.anchors:
            raise ValueError(f"duplicate anchor {rec.anchor_id} in {rec.infrastructure.name}")
        self.anchors[key] = rec

    def get(self, infra: Infrastructure, anchor_id: str) -> AnchorRecord | None:
        return self.anchors.get((infra, anchor_id))

    def position(self, infra: Infrastructure, anchor_id: str) -> GeodeticPosition | None:
        rec = self.anchors.get((infra, anchor_id))
        return None if rec is None else rec.position

    def lookup_ip(self, ip: str) -> GeodeticPosition | None:
        """Longest-prefix match of ``ip`` against the GeoIP table."""
        if self._networks is None:
            nets = [(ipaddress.ip_network(k, strict=False), v) for k, v in self.geoip_table.items()]
            nets.sort(key=lambda nv: nv[0].prefixlen, reverse=True)
            self._networks = nets
        try:
            addr = ipaddress.ip_address(ip)
        except ValueError:
            return None
        for net, pos in self._networks:
            if addr.version == net.version and addr in net:
                return pos
        return None

    def of(self, infra: Infrastructure) -> list[AnchorRecord]:
        return [r for (i, _), r in self.anchors.items() if i is infra]

    def __len__(self):
        return len(self.anchors)


DB_HEADER = ["anchor_id", "infra", "lat", "lon", "alt", "mobility", "name"]
GEOIP_TABLE_INFRA = "ipprefix"


def load_anchor_db(path) -> AnchorDatabase:
    """Read an anchor database CSV.

    Rows whose ``infra`` is ``ipprefix`` populate the GeoIP lookup table
    (``anchor_id`` holds the CIDR prefix).
    """
    db = AnchorDatabase()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != DB_HEADER:
            raise MalformedTrace(f"anchor db header must be {','.join(DB_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(DB_HEADER):
                raise MalformedTrace("wrong column count", line=lineno)
            aid, infra, lat, lon, alt, mob, name = (c.strip() for c in row)
            pos = None
            if lat and lon:
                try:
                    pos = GeodeticPosition(float(lat), float(lon), float(alt or 0.0))
                except (ValueError, InvalidCoordinate) as exc:
                    raise MalformedTrace(str(exc), line=lineno, field="lat/lon/alt") from None
            if infra.lower() == GEOIP_TABLE_INFRA:
                if pos is None:
                    raise MalformedTrace("ip prefix without position", line=lineno)
                try:
                    ipaddress.ip_network(aid, strict=False)
                except ValueError:
                    raise MalformedTrace(f"bad ip prefix {aid!r}", line=lineno, field="anchor_id") from None
                db.geoip_table[aid] = pos
                continue
            try:
                rec = AnchorRecord(
                    anchor_id=aid,
                    infrastructure=parse_infrastructure(infra),
                    position=pos,
                    mobility=Mobility(mob.lower() or "unknown"),
                    name=name or None,
                )
                db.add(rec)
            except ValueError as exc:
                raise MalformedTrace(str(exc), line=lineno) from None
    return db


def save_anchor_db(db: AnchorDatabase, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(DB_HEADER)
        for rec in db.anchors.values():
            p = rec.position
            w.writerow([
                rec.anchor_id, INFRA_TO_KIND[rec.infrastructure],
                "" if p is None else repr(p.latitude),
                "" if p is None else repr(p.longitude),
                "" if p is None else repr(p.altitude),
                rec.mobility.value, rec.name or "",
            ])
        for prefix, p in db.geoip_table.items():
            w.writerow([prefix, GEOIP_TABLE_INFRA, repr(p.latitude), repr(p.longitude),
                        repr(p.altitude), "fixed", ""])


# ---------------------------------------------------------------------------
# anchor cleaning

DEFAULT_HOTSPOT_PATTERNS = (
    r"AndroidAP",
    r"iPhone",
    r"Galaxy.*Hotspot",
    r"DIRECT-",
)


@dataclass(frozen=True)
class CleaningRules:
    """Name patterns (regular expressions, case-insensitive) that mark non-fixed anchors."""

    patterns: tuple[str, ...] = DEFAULT_HOTSPOT_PATTERNS
    operator_prefixes: tuple[str, ...] = ()
    drop_mobile: bool = True

    def compiled(self):
        pats = list(self.patterns) + ["^" + re.escape(p) for p in self.operator_prefixes]
        return [(p, re.compile(p, re.IGNORECASE)) for p in pats]


def clean_anchors(db: AnchorDatabase, rules: CleaningRules | None = None) -> AnchorDatabase:
    """Drop hotspot-like and mobile anchors; every removal is logged with its rule."""
    rules = rules or CleaningRules()
    compiled = rules.compiled()
    kept: dict = {}
    removals = []
    for key, rec in db.anchors.items():
        rule = None
        if rules.drop_mobile and rec.mobility is Mobility.MOBILE:
            rule = "mobility=mobile"
        elif rec.name:
            for src, rx in compiled:
                if rx.search(rec.name):
                    rule = f"name~{src}"
                    break
        if rule is None:
            kept[key] = rec
        else:
            removals.append(Removal(rec.infrastructure, rec.anchor_id, rule))
            log.info("removed anchor %s/%s (%s)", rec.infrastructure.name, rec.anchor_id, rule)
    return AnchorDatabase(anchors=kept, geoip_table=dict(db.geoip_table), removals=tuple(removals))


# ---------------------------------------------------------------------------
# trace I/O

_MOTION_FIELDS = ("vx", "vy", "vz", "ax", "ay", "az", "roll", "pitch", "yaw")


def _num(rec, key, lineno):
    try:
        v = rec[key]
    except KeyError:
        raise MalformedTrace("missing field", line=lineno, field=key) from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MalformedTrace("expected a number", line=lineno, field=key)
    v = float(v)
    if not math.isfinite(v):
        raise MalformedTrace("non-finite number", line=lineno, field=key)
    return v


def _position(rec, lineno):
    try:
        return GeodeticPosition(_num(rec, "lat", lineno), _num(rec, "lon", lineno), _num(rec, "alt", lineno))
    except InvalidCoordinate as exc:
        raise MalformedTrace(str(exc), line=lineno, field="lat/lon/alt") from None


def _parse_record(rec, lineno):
    """Turn one JSON object into (t, kind, payload)."""
    if not isinstance(rec, dict):
        raise MalformedTrace("record is not an object", line=lineno)
    t = _num(rec, "t", lineno)
    kind = rec.get("kind")
    if kind == "motion":
        vals = [_num(rec, k, lineno) for k in _MOTION_FIELDS]
        try:
            payload = MotionSample(t, tuple(vals[0:3]), tuple(vals[3:6]), OrientationAngles(*vals[6:9]))
        except (ValueError, InvalidCoordinate) as exc:
            raise MalformedTrace(str(exc), line=lineno) from None
    elif kind == "gnss":
        sat = rec.get("sat")
        if not isinstance(sat, str):
            raise MalformedTrace("missing satellite id", line=lineno, field="sat")
        const = rec.get("const")
        try:
            const = normalize_constellation(const) if const is not None else None
            payload = RangingObservation(
                t, Infrastructure.GNSS, sat, _num(rec, "pr_m", lineno), const,
                (_num(rec, "sat_x", lineno), _num(rec, "sat_y", lineno), _num(rec, "sat_z", lineno)),
            )
        except ValueError as exc:
            if isinstance(exc, MalformedTrace):
                raise
            raise MalformedTrace(str(exc), line=lineno, field="pr_m") from None
    elif kind in ("wifi", "cell", "bt"):
        anchor = rec.get("anchor")
        if not isinstance(anchor, str):
            raise MalformedTrace("missing anchor id", line=lineno, field="anchor")
        try:
            payload = RangingObservation(t, KIND_TO_INFRA[kind], anchor, _num(rec, "rssi_dbm", lineno))
        except ValueError as exc:
            if isinstance(exc, MalformedTrace):
                raise
            raise MalformedTrace(str(exc), line=lineno, field="rssi_dbm") from None
    elif kind == "geoip":
        server = rec.get("server")
        if not isinstance(server, str):
            raise MalformedTrace("missing server id", line=lineno, field="server")
        try:
            payload = RangingObservation(t, Infrastructure.GEOIP, server, _num(rec, "rtt_ms", lineno))
        except ValueError as exc:
            if isinstance(exc, MalformedTrace):
                raise
            raise MalformedTrace(str(exc), line=lineno, field="rtt_ms") from None
        ip = rec.get("client_ip")
        if ip is not None:
            payload = (payload, str(ip))
    elif kind in ("lbs", "truth"):
        payload = _position(rec, lineno)
        if kind == "truth" and "attack" in rec:
            if not isinstance(rec["attack"], bool):
                raise MalformedTrace("expected a boolean", line=lineno, field="attack")
            payload = (payload, rec["attack"])
    else:
        raise MalformedTrace(f"unknown kind {kind!r}", line=lineno, field="kind")
    return t, kind, payload


def read_records(path):
    """Parse a trace file into a list of (t, kind, payload, lineno)."""
    out = []
    last_t = -math.inf
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedTrace(f"invalid JSON: {exc.msg}", line=lineno) from None
            t, kind, payload = _parse_record(rec, lineno)
            if t < last_t:
                raise NonMonotonicTimestamps(f"timestamp {t} precedes {last_t}", line=lineno, field="t")
            last_t = t
            out.append((t, kind, payload, lineno))
    return out


def _frames_from_groups(records):
    groups: dict[float, list] = defaultdict(list)
    for r in records:
        groups[r[0]].append(r)
    frames = []
    for t in sorted(groups):
        recs = groups[t]
        motion = [r for r in recs if r[1] == "motion"]
        lbs = [r for r in recs if r[1] == "lbs"]
        truth = [r for r in recs if r[1] == "truth"]
        if len(motion) != 1 or len(lbs) != 1 or len(truth) > 1:
            return None
        obs = []
        client_ip = None
        for r in recs:
            if r[1] in KIND_TO_INFRA:
                p = r[2]
                if isinstance(p, tuple):
                    p, client_ip = p
                obs.append(p)
        gt, label = None, None
        if truth:
            gt = truth[0][2]
            if isinstance(gt, tuple):
                gt, label = gt
        if not obs:
            raise MalformedTrace(f"frame at t={t} has no observations", line=recs[0][3])
        frames.append(TraceFrame(t, motion[0][2], tuple(obs), lbs[0][2], gt, label, client_ip))
    return frames


def load_trace(path) -> list[TraceFrame]:
    """Load a trace file.

    Files where every timestamp carries exactly one motion and one lbs
    record are read frame by frame; anything else is treated as raw
    sensor streams and passed through :func:`align_epochs`.
    """
    records = read_records(path)
    if not records:
        raise MalformedTrace("empty trace", line=1)
    frames = _frames_from_groups(records)
    if frames is not None:
        return frames
    motion, gnss, network, geoip, lbs, truth = [], [], [], [], [], []
    for t, kind, payload, _ in records:
        if kind == "motion":
            motion.append(payload)
        elif kind == "gnss":
            gnss.append(payload)
        elif kind in ("wifi", "cell", "bt"):
            network.append(payload)
        elif kind == "geoip":
            geoip.append(payload[0] if isinstance(payload, tuple) else payload)
        elif kind == "lbs":
            lbs.append((t, payload))
        elif kind == "truth":
            truth.append((t, payload[0] if isinstance(payload, tuple) else payload))
    return align_epochs(motion, gnss, network, geoip, lbs=lbs, truth=truth)


def _pos_fields(p: GeodeticPosition):
    return {"lat": p.latitude, "lon": p.longitude, "alt": p.altitude}


def frame_records(f: TraceFrame) -> list[dict]:
    t = f.timestamp
    m = f.motion
    recs = [{
        "t": t, "kind": "motion",
        "vx": m.velocity[0], "vy": m.velocity[1], "vz": m.velocity[2],
        "ax": m.acceleration[0], "ay": m.acceleration[1], "az": m.acceleration[2],
        "roll": m.orientation.roll, "pitch": m.orientation.pitch, "yaw": m.orientation.yaw,
    }]
    for o in f.observations:
        kind = INFRA_TO_KIND[o.infrastructure]
        if kind == "gnss":
            r = {"t": t, "kind": kind, "sat": o.anchor_id, "pr_m": o.value,
                 "sat_x": o.sat_ecef[0], "sat_y": o.sat_ecef[1], "sat_z": o.sat_ecef[2]}
            if o.constellation is not None:
                r["const"] = o.constellation
        elif kind == "geoip":
            r = {"t": t, "kind": kind, "server": o.anchor_id, "rtt_ms": o.value}
            if f.client_ip is not None:
                r["client_ip"] = f.client_ip
        else:
            r = {"t": t, "kind": kind, "anchor": o.anchor_id, "rssi_dbm": o.value}
        recs.append(r)
    recs.append({"t": t, "kind": "lbs", **_pos_fields(f.lbs_position)})
    if f.ground_truth is not None:
        r = {"t": t, "kind": "truth", **_pos_fields(f.ground_truth)}
        if f.attack_label is not None:
            r["attack"] = f.attack_label
        recs.append(r)
    return recs


def save_trace(frames: Iterable[TraceFrame], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            for r in frame_records(f):
                fh.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# temporal alignment

def _master_epochs(gnss_times, motion_times, period=1.0):
    """GNSS epoch times, with synthetic 1 Hz epochs filling GNSS outages."""
    epochs = sorted(set(gnss_times))
    if motion_times:
        lo, hi = motion_times[0], motion_times[-1]
    elif epochs:
        lo, hi = epochs[0], epochs[-1]
    else:
        raise EmptyMasterStream("no GNSS epochs and no motion samples")
    if not epochs:
        n = int(math.floor((hi - lo) / period + 1e-9))
        return [lo + k * period for k in range(n + 1)]
    filled = []
    # leading and trailing gaps, then interior gaps
    t = epochs[0] - period
    lead = []
    while t >= lo - 1e-9:
        lead.append(t)
        t -= period
    filled.extend(reversed(lead))
    for a, b in zip(epochs, epochs[1:]):
        filled.append(a)
        t = a + period
        while t < b - 0.5 * period:
            filled.append(t)
            t += period
    filled.append(epochs[-1])
    t = epochs[-1] + period
    while t <= hi + 1e-9:
        filled.append(t)
        t += period
    return filled


def _nearest_index(times, t):
    k = bisect.bisect_left(times, t)
    best = None
    for j in (k - 1, k):
        if 0 <= j < len(times):
            if best is None or abs(times[j] - t) < abs(times[best] - t):
                best = j
    return best


def align_epochs(
    motion: Sequence[MotionSample],
    gnss: Sequence[RangingObservation],
    network: Sequence[RangingObservation],
    geoip: Sequence[RangingObservation] = (),
    lbs: Sequence[tuple[float, GeodeticPosition]] = (),
    truth: Sequence[tuple[float, GeodeticPosition]] = (),
    tolerance: float = ALIGN_TOLERANCE_S,
    staleness: float = STALENESS_S,
) -> list[TraceFrame]:
    """Build 1 Hz frames on the GNSS epoch clock.

    Motion is reduced per epoch (accelerations averaged over the samples
    since the previous epoch, velocity and orientation taken at the epoch
    end). Network and GeoIP observations attach to the nearest epoch within
    ``tolerance`` and are carried forward per anchor while younger than
    ``staleness`` seconds. LBS fixes hold their last value. Frames without
    any observation, or before the first LBS fix, are dropped.
    """
    motion = list(motion)
    mtimes = [m.timestamp for m in motion]
    epochs = _master_epochs([o.timestamp for o in gnss], mtimes)
    if not epochs:
        raise EmptyMasterStream("no master epochs")

    gnss_by_epoch: dict[int, list] = defaultdict(list)
    for o in gnss:
        k = _nearest_index(epochs, o.timestamp)
        if abs(epochs[k] - o.timestamp) <= tolerance:
            gnss_by_epoch[k].append(o)

    def attach(stream):
        by_epoch: dict[int, list] = defaultdict(list)
        for o in stream:
            k = _nearest_index(epochs, o.timestamp)
            if abs(epochs[k] - o.timestamp) <= tolerance:
                by_epoch[k].append(o)
        return by_epoch

    net_by_epoch = attach(network)
    geo_by_epoch = attach(geoip)

    lbs = sorted(lbs, key=lambda x: x[0])
    truth = sorted(truth, key=lambda x: x[0])
    lbs_times = [x[0] for x in lbs]
    truth_times = [x[0] for x in truth]

    frames = []
    carried: dict[tuple, tuple[float, RangingObservation]] = {}
    prev_t = None
    for k, t in enumerate(epochs):
        for o in [*net_by_epoch.get(k, ()), *geo_by_epoch.get(k, ())]:
            carried[(o.infrastructure, o.anchor_id)] = (t, o)
        for key in [key for key, (t0, _) in carried.items() if t - t0 > staleness]:
            del carried[key]

        obs = [replace(o, timestamp=t) for o in gnss_by_epoch.get(k, ())]
        obs.extend(replace(o, timestamp=t) for _, o in carried.values())

        mot = _reduce_motion(motion, mtimes, prev_t, t)
        prev_t = t
        if mot is None or not obs:
            continue

        j = bisect.bisect_right(lbs_times, t + tolerance) - 1
        if j < 0:
            continue
        lbs_pos = lbs[j][1]

        gt = None
        if truth:
            i = _nearest_index(truth_times, t)
            if abs(truth_times[i] - t) <= tolerance:
                gt = truth[i][1]
        frames.append(TraceFrame(t, mot, tuple(obs), lbs_pos, gt))
    return frames


def _reduce_motion(motion, mtimes, t_prev, t):
    if not motion:
        return None
    hi = bisect.bisect_right(mtimes, t + 1e-9)
    lo = bisect.bisect_right(mtimes, t_prev + 1e-9) if t_prev is not None else max(hi - 1, 0)
    window = motion[lo:hi]
    if not window:
        i = _nearest_index(mtimes, t)
        if abs(mtimes[i] - t) > 1.0:
            return None
        window = [motion[i]]
    last = window[-1]
    acc = np.mean([m.acceleration for m in window], axis=0)
    return MotionSample(t, last.velocity, tuple(float(a) for a in acc), last.orientation)
