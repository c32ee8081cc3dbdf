"""Ranging-subset enumeration, random sampling and per-subset positioning.

Subsets of one infrastructure at one epoch form a :class:`CandidateGroup`:
the sorted anchor universe plus the enumerated member tuples. Sampling and
solving work on row indices into those groups, so an epoch with thousands
of subsets costs a handful of array operations. :class:`SubsetSpec` lists
are the object view of the same rows.
"""

from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientAnchors, NoConvergence, SingularGeometry
from .geo import LocalFrame
from .positioning import (
    PositionEstimate,
    RangingModelParams,
    geoip_batch,
    gnss_trilateration,
    geolocation_wls_batch,
    rssi_to_distance,
    rtt_to_distance,
)
from .trace import AnchorDatabase, Infrastructure, RangingObservation, TraceFrame

log = logging.getLogger(__name__)

MIN_NETWORK_MEMBERS = 3
MIN_GNSS_SATS = 4
DEFAULT_CAP = 12
GNSS_PRIOR_DOF = 4.0     # pseudo-observations of the nominal range error blended into GNSS sigma


@dataclass(frozen=True)
class SubsetSpec:
    """S_l^m(t): a set of anchor ids (network/GeoIP) or constellation tags (GNSS)."""

    infrastructure: Infrastructure
    members: tuple[str, ...]
    index: int = 0

    @property
    def key(self) -> tuple:
        return (self.infrastructure, self.members)


@dataclass(frozen=True)
class SamplingPolicy:
    rate: float = 0.5
    distribution: str = "uniform"
    rng_seed: int = 0
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"sampling rate {self.rate} outside [0, 1]")
        if self.distribution != "uniform":
            raise ValueError(f"unsupported sampling distribution {self.distribution!r}")
        if self.cap < MIN_NETWORK_MEMBERS:
            raise ValueError("cap must allow at least three anchors")


def subset_count(j: int) -> int:
    """Number of subsets of size >= 3 from j anchors."""
    return sum(math.comb(j, i) for i in range(MIN_NETWORK_MEMBERS, j + 1))


# ---------------------------------------------------------------------------
# enumeration

@functools.lru_cache(maxsize=1024)
def subset_table(ids: tuple) -> tuple[tuple, dict, np.ndarray]:
    """Member tuples of size >= 3 over sorted ``ids`` in lexicographic order, a
    member-tuple -> row lookup, and the (C, J) membership mask."""
    n = len(ids)
    combos = sorted(
        c for r in range(MIN_NETWORK_MEMBERS, n + 1) for c in itertools.combinations(range(n), r)
    )
    members = tuple(tuple(ids[i] for i in c) for c in combos)
    mask = np.zeros((len(combos), n), dtype=bool)
    for k, c in enumerate(combos):
        mask[k, list(c)] = True
    mask.setflags(write=False)
    return members, {m: k for k, m in enumerate(members)}, mask


@functools.lru_cache(maxsize=1024)
def _specs(infrastructure: Infrastructure, members: tuple) -> tuple:
    return tuple(SubsetSpec(infrastructure, m, i) for i, m in enumerate(members))


def enumerate_network_subsets(
    anchor_ids, infrastructure: Infrastructure = Infrastructure.WIFI, cap: int = DEFAULT_CAP
) -> list[SubsetSpec]:
    """All subsets of at least three anchors, in lexicographic order of sorted members.

    ``anchor_ids`` is taken in priority order (strongest first); ids beyond
    ``cap`` are dropped before enumeration.
    """
    ids = list(dict.fromkeys(anchor_ids))[:cap]
    if len(ids) < MIN_NETWORK_MEMBERS:
        return []
    members, _, _ = subset_table(tuple(sorted(ids)))
    return list(_specs(infrastructure, members))


def constellation_of(o: RangingObservation) -> str:
    return o.constellation or "UNK"


def _gnss_combos(observations) -> tuple:
    counts: dict[str, int] = {}
    for o in observations:
        c = constellation_of(o)
        counts[c] = counts.get(c, 0) + 1
    names = sorted(counts)
    out = [
        combo
        for r in range(1, len(names) + 1)
        for combo in itertools.combinations(names, r)
        if sum(counts[c] for c in combo) >= MIN_GNSS_SATS
    ]
    out.sort(key=lambda c: (len(c), c))
    return tuple(out)


def enumerate_gnss_subsets(observations) -> list[SubsetSpec]:
    """Every nonempty combination of constellations pooling at least four satellites."""
    return list(_specs(Infrastructure.GNSS, _gnss_combos(observations)))


@dataclass
class CandidateGroup:
    """All candidate subsets of one infrastructure at one epoch."""

    infrastructure: Infrastructure
    members: tuple                      # member tuple per row
    observations: list
    ids: tuple = ()                     # sorted anchor universe (network/GeoIP)

    def __len__(self):
        return len(self.members)

    @property
    def full_row(self) -> int:
        return max(range(len(self.members)), key=lambda r: (len(self.members[r]), self.members[r]))

    def specs(self, rows=None) -> list[SubsetSpec]:
        all_specs = _specs(self.infrastructure, self.members)
        return list(all_specs) if rows is None else [all_specs[r] for r in rows]


def rank_anchors(observations, infra: Infrastructure) -> list[RangingObservation]:
    """Network observations strongest RSSI first; GeoIP lowest RTT first."""
    if infra is Infrastructure.GEOIP:
        return sorted(observations, key=lambda o: (o.value, o.anchor_id))
    return sorted(observations, key=lambda o: (-o.value, o.anchor_id))


def candidate_groups(frame: TraceFrame, db: AnchorDatabase | None, policy: SamplingPolicy) -> list[CandidateGroup]:
    """One group per infrastructure present in ``frame``, ordered by infrastructure."""
    out = []
    for infra, obs in sorted(frame.by_infrastructure().items(), key=lambda kv: kv[0].value):
        if infra is Infrastructure.GNSS:
            combos = _gnss_combos(obs)
            if combos:
                out.append(CandidateGroup(infra, combos, obs))
            continue
        usable = [o for o in obs if db is None or db.position(infra, o.anchor_id) is not None]
        ranked = rank_anchors(usable, infra)
        ids = list(dict.fromkeys(o.anchor_id for o in ranked))[: policy.cap]
        if len(ids) < MIN_NETWORK_MEMBERS:
            continue
        ids = tuple(sorted(ids))
        members, _, _ = subset_table(ids)
        keep = set(ids)
        out.append(CandidateGroup(infra, members, [o for o in ranked if o.anchor_id in keep], ids))
    return out


def candidate_subsets(frame: TraceFrame, db: AnchorDatabase | None, policy: SamplingPolicy) -> list[SubsetSpec]:
    """Enumerate the full candidate list for every infrastructure present in ``frame``."""
    return [s for g in candidate_groups(frame, db, policy) for s in g.specs()]


# ---------------------------------------------------------------------------
# sampling

def _draw(n: int, policy: SamplingPolicy, stream) -> np.ndarray:
    if policy.rate >= 1.0:
        return np.ones(n, dtype=bool)
    rng = np.random.default_rng([policy.rng_seed, *stream])
    return rng.random(n) < policy.rate


def sample_subsets(subsets, policy: SamplingPolicy, stream=()) -> list[SubsetSpec]:
    """Keep each subset independently with probability ``policy.rate``.

    ``stream`` extends the seed (e.g. with the epoch index) so successive
    epochs draw independently yet reproducibly. An infrastructure whose
    draw came back empty keeps its largest subset.
    """
    subsets = list(subsets)
    if not subsets:
        return []
    keep = _draw(len(subsets), policy, stream)
    out = [s for s, k in zip(subsets, keep) if k]
    present = {s.infrastructure for s in out}
    for infra in dict.fromkeys(s.infrastructure for s in subsets):
        if infra not in present:
            out.append(max((s for s in subsets if s.infrastructure is infra),
                           key=lambda s: (len(s.members), s.members)))
    out.sort(key=lambda s: (s.infrastructure.value, s.index))
    return out


def sample_groups(groups: list[CandidateGroup], policy: SamplingPolicy, stream=()) -> list[np.ndarray]:
    """Selected rows per group; the same draw as :func:`sample_subsets` on the flattened candidates."""
    total = sum(len(g) for g in groups)
    keep = _draw(total, policy, stream) if total else np.zeros(0, dtype=bool)
    out = []
    start = 0
    for g in groups:
        rows = np.nonzero(keep[start:start + len(g)])[0]
        if len(rows) == 0:
            rows = np.array([g.full_row], dtype=np.int64)
        out.append(rows)
        start += len(g)
    return out


# ---------------------------------------------------------------------------
# positioning of subsets

@dataclass
class GroupSolution:
    """Solutions for the selected rows of one candidate group."""

    infrastructure: Infrastructure
    members: list
    enu: np.ndarray                     # (R, 3)
    sigma: np.ndarray                   # (R, 3)
    residual_rms: np.ndarray
    ok: np.ndarray
    method: str
    failure: list = field(default_factory=list)   # reason per failed row, None when solved
    extras: list = field(default_factory=list)    # per-row PositionEstimate (GNSS only)


def solve_group(group: CandidateGroup, rows, db: AnchorDatabase, params: RangingModelParams,
                local: LocalFrame, up: float = 0.0, gnss_x0=None) -> GroupSolution:
    rows = np.asarray(rows, dtype=np.int64)
    members = [group.members[r] for r in rows]
    if group.infrastructure is Infrastructure.GNSS:
        return _solve_gnss(group.observations, members, local, gnss_x0, params)
    _, _, table = subset_table(group.ids)
    return _solve_network(group.infrastructure, group.ids, group.observations, table[rows], members,
                          db, params, local, up)


def _solve_gnss(observations, members, local, x0, params):
    n = len(members)
    enu = np.full((n, 3), np.nan)
    sigma = np.full((n, 3), np.nan)
    rms = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    failure = [None] * n
    extras = [None] * n
    for i, combo in enumerate(members):
        chosen = [o for o in observations if constellation_of(o) in combo]
        try:
            sat = np.array([o.sat_ecef for o in chosen])
            pr = np.array([o.value for o in chosen])
            est = gnss_trilateration(sat, pr, local, x0_enu=x0, prior_sigma=params.pr_sigma_m,
                                     prior_dof=GNSS_PRIOR_DOF)
        except (InsufficientAnchors, SingularGeometry, NoConvergence, np.linalg.LinAlgError) as exc:
            failure[i] = type(exc).__name__
            continue
        enu[i], sigma[i], rms[i], ok[i] = est.enu, est.sigma, est.residual_rms, True
        extras[i] = est
    return GroupSolution(Infrastructure.GNSS, members, enu, sigma, rms, ok, "trilateration", failure, extras)


def _solve_network(infra, ids, observations, masks, members, db, params, local, up):
    value = {o.anchor_id: o.value for o in observations}
    pos = [db.position(infra, a) for a in ids]
    anchors = local.to_enu_many(
        np.array([p.latitude for p in pos]),
        np.array([p.longitude for p in pos]),
        np.array([p.altitude for p in pos]),
    )
    vals = np.array([value[a] for a in ids])
    if infra is Infrastructure.GEOIP:
        dist = rtt_to_distance(vals, params)
        sol = geoip_batch(anchors, dist, masks, up=up, prior_m=params.rtt_range_sigma)
        method = "geoip-delay"
    else:
        model = params.for_infra(infra)
        dist = rssi_to_distance(vals, model)
        sol = geolocation_wls_batch(anchors, dist, masks, up=up, prior_rel=model.rssi_relative_sigma)
        method = "geolocation"
    n = len(members)
    enu = np.column_stack([sol.en, np.full(n, float(up))])
    sigma = np.maximum(sol.sigma, 1e-6)
    failure = [None if k else "SingularGeometry" for k in sol.ok]
    return GroupSolution(infra, members, enu, sigma, sol.residual_rms, sol.ok.copy(), method, failure)


@dataclass
class SubsetResult:
    """Estimates for one epoch plus the subsets whose solver failed."""

    estimates: list[tuple[SubsetSpec, PositionEstimate]] = field(default_factory=list)
    failures: list[tuple[SubsetSpec, str]] = field(default_factory=list)
    solves: int = 0


def position_subsets(
    frame: TraceFrame,
    subsets,
    db: AnchorDatabase,
    params: RangingModelParams,
    local: LocalFrame,
    up: float = 0.0,
    gnss_x0=None,
) -> SubsetResult:
    """Solve every subset with the method matching its infrastructure.

    GNSS subsets go to trilateration, Wi-Fi/cellular/Bluetooth subsets to
    RSSI geolocation, GeoIP subsets to the circle-intersection solver.
    Subsets naming anchors absent from ``frame`` or ``db``, and subsets whose
    solver failed, are reported in ``failures``.
    """
    result = SubsetResult()
    obs_by = frame.by_infrastructure()
    wanted: dict[Infrastructure, list[SubsetSpec]] = {}
    for s in subsets:
        wanted.setdefault(s.infrastructure, []).append(s)
    for infra in sorted(wanted, key=lambda i: i.value):
        specs = wanted[infra]
        obs = obs_by.get(infra, [])
        if infra is Infrastructure.GNSS:
            sol = _solve_gnss(obs, [s.members for s in specs], local, gnss_x0, params)
        else:
            heard = {o.anchor_id for o in obs if db.position(infra, o.anchor_id) is not None}
            kept = [s for s in specs if heard.issuperset(s.members)]
            result.failures.extend((s, "MissingObservation") for s in specs if not heard.issuperset(s.members))
            specs = kept
            if not specs:
                continue
            ids = tuple(sorted(set().union(*(s.members for s in specs))))
            col = {a: i for i, a in enumerate(ids)}
            masks = np.zeros((len(specs), len(ids)), dtype=bool)
            for r, s in enumerate(specs):
                masks[r, [col[m] for m in s.members]] = True
            sol = _solve_network(infra, ids, obs, masks, [s.members for s in specs], db, params, local, up)
        result.solves += len(specs)
        for i, s in enumerate(specs):
            if not sol.ok[i]:
                result.failures.append((s, sol.failure[i] or "SolverFailure"))
                continue
            est = sol.extras[i] if sol.extras else None
            if est is None:
                est = PositionEstimate(
                    enu=sol.enu[i], sigma=sol.sigma[i], residual_rms=float(sol.residual_rms[i]),
                    method=sol.method, infrastructure=infra, frame=local,
                )
            est.subset = s.index
            result.estimates.append((s, est))
    return result
