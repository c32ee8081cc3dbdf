"""Positioning solvers: GNSS trilateration, RSSI geolocation, GeoIP, DOP and ranging models.

All solvers work in a local ENU frame (meters). Network and GeoIP solutions
are planar: east/north are estimated and the up coordinate is supplied by
the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import (
    DegenerateFit,
    InsufficientAnchors,
    NoConvergence,
    NoGeoipData,
    SingularGeometry,
)
from .geo import SPEED_OF_LIGHT, GeodeticPosition, LocalFrame
from .trace import Infrastructure

GN_STEP_TOL = 1e-4
GN_MAX_ITER = 25
COND_LIMIT = 1e12
GEOIP_FALLBACK_SIGMA = 25_000.0
RSSI_DISTANCE_CLAMP = (0.1, 1e5)


@dataclass(frozen=True)
class RangingModelParams:
    """Log-distance path loss and RTT-to-distance model constants.

    ``rtt_slope`` is in km/ms; with the default fiber factor 0.5 it equals
    c * 0.5 / 2 expressed per millisecond of round trip.
    """

    p0_dbm: float = -40.0
    d0_m: float = 1.0
    n_pl: float = 3.0
    n_pl_cellular: float = 3.5
    rtt_slope: float = SPEED_OF_LIGHT * 0.5 / 2.0 / 1e6
    rtt_intercept: float = 10.0
    fiber_factor: float = 0.5
    pr_sigma_m: float = 3.0
    rssi_sigma_db: float = 4.0
    rtt_sigma_ms: float = 5.0

    def __post_init__(self):
        for n in (self.n_pl, self.n_pl_cellular):
            if not 1.5 <= n <= 6.0:
                raise ValueError(f"path-loss exponent {n} outside [1.5, 6]")
        if self.rtt_slope <= 0:
            raise ValueError("rtt slope must be positive")
        if self.rssi_sigma_db < 0 or self.rtt_sigma_ms < 0:
            raise ValueError("ranging error sigmas must be >= 0")

    @property
    def rssi_relative_sigma(self) -> float:
        """Relative distance error implied by log-normal shadowing: sigma_dB ln10 / (10 n)."""
        return self.rssi_sigma_db * math.log(10.0) / (10.0 * self.n_pl)

    @property
    def rtt_range_sigma(self) -> float:
        """Distance error (m) implied by RTT jitter."""
        return self.rtt_sigma_ms * self.rtt_slope * 1e3

    def for_infra(self, infra: Infrastructure) -> "RangingModelParams":
        if infra is Infrastructure.CELLULAR:
            return replace(self, n_pl=self.n_pl_cellular)
        return self


@dataclass
class PositionEstimate:
    """A subset position solution p_l^m(t) in the local frame."""

    enu: np.ndarray
    sigma: np.ndarray
    residual_rms: float
    method: str
    infrastructure: Infrastructure | None = None
    subset: int | None = None
    clock_bias: float | None = None
    clock_sigma: float | None = None
    dop: float | None = None
    frame: LocalFrame | None = field(default=None, repr=False)

    @property
    def position(self) -> GeodeticPosition:
        if self.frame is None:
            raise ValueError("estimate has no reference frame")
        return self.frame.to_geodetic(self.enu)


# ---------------------------------------------------------------------------
# ranging models

def rssi_to_distance(rssi, params: RangingModelParams = RangingModelParams()):
    """Invert the log-distance path loss model; result clamped to [0.1, 1e5] m."""
    rssi = np.asarray(rssi, dtype=float)
    d = params.d0_m * 10.0 ** ((params.p0_dbm - rssi) / (10.0 * params.n_pl))
    d = np.clip(d, *RSSI_DISTANCE_CLAMP)
    return float(d) if d.ndim == 0 else d


def distance_to_rssi(d, params: RangingModelParams = RangingModelParams()):
    d = np.asarray(d, dtype=float)
    r = params.p0_dbm - 10.0 * params.n_pl * np.log10(np.maximum(d, 1e-9) / params.d0_m)
    return float(r) if r.ndim == 0 else r


def rtt_to_distance(rtt_ms, params: RangingModelParams = RangingModelParams()):
    """Linear RTT model, d = max(0, slope * (rtt - intercept)), in meters."""
    rtt = np.asarray(rtt_ms, dtype=float)
    d = np.maximum(0.0, params.rtt_slope * 1000.0 * (rtt - params.rtt_intercept))
    return float(d) if d.ndim == 0 else d


def fit_rtt_model(pairs, base: RangingModelParams = RangingModelParams()) -> RangingModelParams:
    """Ordinary least squares fit of distance (m) against RTT (ms).

    Returns ``base`` with the fitted slope (km/ms) and intercept (ms).
    """
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] != 2:
        raise DegenerateFit("need at least two (rtt, distance) pairs")
    rtt, dist = arr[:, 0], arr[:, 1]
    if np.ptp(rtt) == 0.0:
        raise DegenerateFit("all RTT values are equal")
    a = np.column_stack([rtt, np.ones_like(rtt)])
    (slope, offset), *_ = np.linalg.lstsq(a, dist, rcond=None)
    if slope <= 0:
        raise DegenerateFit(f"fitted slope {slope} is not positive")
    return replace(base, rtt_slope=slope / 1000.0, rtt_intercept=-offset / slope)


# ---------------------------------------------------------------------------
# DOP

@dataclass(frozen=True)
class DopResult:
    sigma_x: float
    sigma_y: float
    sigma_z: float
    sigma_t: float
    dop: float
    q: np.ndarray = field(repr=False)


def compute_dop(g) -> DopResult:
    """Per-axis and scalar DOP from a geometry matrix (unit line-of-sight rows + clock column)."""
    g = np.asarray(g, dtype=float)
    n = g.T @ g
    if np.linalg.matrix_rank(n) < n.shape[0] or np.linalg.cond(n) > COND_LIMIT:
        raise SingularGeometry("geometry matrix is rank deficient")
    q = np.linalg.inv(n)
    d = np.sqrt(np.diag(q))
    return DopResult(d[0], d[1], d[2], d[3], math.sqrt(np.trace(q)), q)


def dop_from_q(q) -> DopResult:
    d = np.sqrt(np.diag(q))
    return DopResult(d[0], d[1], d[2], d[3], math.sqrt(np.trace(q)), q)


# ---------------------------------------------------------------------------
# GNSS

@dataclass
class PseudorangeSolution:
    xyz: np.ndarray
    clock: float
    q: np.ndarray
    residuals: np.ndarray
    iterations: int


def solve_pseudoranges(sat_xyz, pr, x0=None) -> PseudorangeSolution:
    """Damped Gauss-Newton on (x, y, z, c*dt)."""
    sat_xyz = np.asarray(sat_xyz, dtype=float)
    pr = np.asarray(pr, dtype=float)
    n = len(pr)
    if n < 4:
        raise InsufficientAnchors(f"need at least 4 pseudoranges, got {n}")
    x = np.zeros(4)
    if x0 is not None:
        x[: len(x0)] = x0

    def resid(state):
        rng = np.linalg.norm(sat_xyz - state[:3], axis=1)
        return pr - (rng + state[3]), rng

    r, rng = resid(x)
    cost = r @ r
    converged = False
    it = 0
    for it in range(1, GN_MAX_ITER + 1):
        g = np.empty((n, 4))
        g[:, :3] = (x[:3] - sat_xyz) / rng[:, None]
        g[:, 3] = 1.0
        nm = g.T @ g
        if it == 1 and np.linalg.cond(nm) > COND_LIMIT:
            raise SingularGeometry("pseudorange normal matrix is ill-conditioned")
        dx = np.linalg.solve(nm, g.T @ r)
        step = 1.0
        while True:
            cand = x + step * dx
            r_c, rng_c = resid(cand)
            c_c = r_c @ r_c
            if c_c <= cost or step < 1e-6:
                break
            step *= 0.5
        x, r, rng, cost = cand, r_c, rng_c, c_c
        if np.linalg.norm(step * dx[:3]) < GN_STEP_TOL:
            converged = True
            break
    if not converged:
        raise NoConvergence(f"trilateration did not converge in {GN_MAX_ITER} iterations")
    g = np.empty((n, 4))
    g[:, :3] = (x[:3] - sat_xyz) / rng[:, None]
    g[:, 3] = 1.0
    nm = g.T @ g
    if np.linalg.cond(nm) > COND_LIMIT:
        raise SingularGeometry("pseudorange normal matrix is ill-conditioned")
    return PseudorangeSolution(x[:3].copy(), float(x[3]), np.linalg.inv(nm), r, it)


def gnss_trilateration(
    sat_xyz,
    pr,
    frame: LocalFrame,
    x0_enu=None,
    prior_sigma: float = 3.0,
    prior_dof: float = 0.0,
) -> PositionEstimate:
    """Single point position from pseudoranges and satellite ECEF positions.

    The start point is the frame origin or ``x0_enu``. Per-axis sigma is
    the ENU position DOP scaled by the a-posteriori range sigma; with
    exactly four satellites (no redundancy) ``prior_sigma`` is used. A
    positive ``prior_dof`` blends the prior into the a-posteriori value as
    that many pseudo-observations.
    """
    sat_xyz = np.asarray(sat_xyz, dtype=float)
    pr = np.asarray(pr, dtype=float)
    if len(pr) < 4:
        raise InsufficientAnchors(f"need at least 4 pseudoranges, got {len(pr)}")
    start = frame.origin_ecef if x0_enu is None else frame.enu_to_ecef(x0_enu)
    sol = solve_pseudoranges(sat_xyz, pr, start)
    dof = len(pr) - 4
    ssr = float(sol.residuals @ sol.residuals)
    if dof + prior_dof > 0:
        s = math.sqrt((ssr + prior_dof * prior_sigma**2) / (dof + prior_dof))
    else:
        s = prior_sigma
    s = max(s, 1e-6)
    rot4 = np.eye(4)
    rot4[:3, :3] = frame.rot
    q_enu = rot4 @ sol.q @ rot4.T
    dop = dop_from_q(q_enu)
    sigma = np.array([dop.sigma_x, dop.sigma_y, dop.sigma_z]) * s
    rms = math.sqrt(ssr / len(pr))
    return PositionEstimate(
        enu=frame.ecef_to_enu(sol.xyz),
        sigma=sigma,
        residual_rms=rms,
        method="trilateration",
        infrastructure=Infrastructure.GNSS,
        clock_bias=sol.clock,
        clock_sigma=dop.sigma_t * s,
        dop=dop.dop,
        frame=frame,
    )


# ---------------------------------------------------------------------------
# RSSI geolocation (weighted least squares, batched over subsets)

@dataclass
class BatchSolution:
    en: np.ndarray          # (S, 2)
    sigma: np.ndarray       # (S, 3)
    residual_rms: np.ndarray  # (S,)
    ok: np.ndarray          # (S,) bool
    objective: np.ndarray   # (S,)


def _csr(masks):
    masks = np.asarray(masks, dtype=bool)
    rows, cols = np.nonzero(masks)
    ptr = np.zeros(masks.shape[0] + 1, dtype=np.int64)
    np.cumsum(masks.sum(1), out=ptr[1:])
    return cols.astype(np.int64), ptr


def geolocation_wls_batch(anchors_enu, distances, masks, up=0.0, n_starts=5, prior_rel=0.0) -> BatchSolution:
    """Minimize sum_j ((|p - a_j| - d_j) / d_j)^2 over p = (east, north, up) for many subsets.

    ``masks`` is an (S, J) boolean matrix selecting anchors per subset.
    Each subset is started from its anchor centroid and ``n_starts - 1``
    perturbed copies (half the anchor spread along each axis); the best
    objective is kept. Sigma is sqrt(diag((J^T J)^-1) * s^2) with
    s^2 = sum e^2 / (n - 2), floored at ``prior_rel``^2 (the relative ranging
    error expected from the path-loss model); the up sigma repeats the larger
    horizontal one.
    """
    a = np.asarray(anchors_enu, dtype=float)
    dist = np.maximum(np.asarray(distances, dtype=float), 1e-3)
    members, ptr = _csr(masks)
    en, sigma, rms, ok, obj = _kernels.wls_subsets(
        np.ascontiguousarray(a[:, 0]), np.ascontiguousarray(a[:, 1]),
        np.ascontiguousarray(a[:, 2] - up), dist, members, ptr, int(n_starts), float(prior_rel))
    return BatchSolution(en, sigma, rms, ok, obj)


def geolocation_wls(anchors_enu, distances, up=0.0, infrastructure=None, frame=None) -> PositionEstimate:
    """Planar weighted least squares position from anchor ranges (weights 1/d^2)."""
    a = np.asarray(anchors_enu, dtype=float)
    if a.ndim != 2 or len(a) < 3:
        raise InsufficientAnchors(f"need at least 3 anchors, got {0 if a.ndim != 2 else len(a)}")
    if a.shape[1] == 2:
        a = np.column_stack([a, np.full(len(a), up)])
    d = np.asarray(distances, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    sol = geolocation_wls_batch(a, d, np.ones((1, len(a)), dtype=bool), up=up)
    if not sol.ok[0]:
        if not np.all(np.isfinite(sol.en[0])):
            raise NoConvergence("geolocation did not converge")
        raise SingularGeometry("anchor geometry is degenerate")
    return PositionEstimate(
        enu=np.array([sol.en[0, 0], sol.en[0, 1], up]),
        sigma=sol.sigma[0],
        residual_rms=float(sol.residual_rms[0]),
        method="geolocation",
        infrastructure=infrastructure,
        frame=frame,
    )


# ---------------------------------------------------------------------------
# GeoIP

GEOIP_GRID = 11


def geoip_batch(servers_enu, distances, masks, up=0.0, prior_m=0.0) -> BatchSolution:
    """Circle-intersection centroid for many subsets of RTT servers.

    Each subset's feasible region (inside every circle) is sampled on a grid
    spanning the intersection of the circles' bounding boxes. When grid points
    fall inside all circles their centroid is returned and sigma is their
    per-axis spread (at least one cell / sqrt(12)); otherwise the hinge
    objective sum_j max(0, |p - a_j| - d_j)^2 is minimized by Gauss-Newton
    from the best grid point. Sigma is the larger of that spread and the
    line-of-sight geometry term sqrt(diag((U^T U)^-1)) scaled by the range
    error (``prior_m``, or the hinge residual RMS when larger).
    """
    a = np.asarray(servers_enu, dtype=float)
    dist = np.maximum(np.asarray(distances, dtype=float), 1.0)
    members, ptr = _csr(masks)
    en, sigma, rms, ok, obj = _kernels.geoip_subsets(
        np.ascontiguousarray(a[:, 0]), np.ascontiguousarray(a[:, 1]),
        np.ascontiguousarray(a[:, 2] - up), dist, members, ptr, GEOIP_GRID, float(prior_m))
    return BatchSolution(en, sigma, rms, ok, obj)


def geoip_position(
    servers_enu=None,
    rtts=None,
    params: RangingModelParams = RangingModelParams(),
    table_position_enu=None,
    up=0.0,
    frame=None,
    fallback_sigma: float = GEOIP_FALLBACK_SIGMA,
) -> PositionEstimate:
    """GeoIP position from RTTs to known servers, or the lookup-table position."""
    n = 0 if rtts is None else len(rtts)
    if n >= 3:
        a = np.asarray(servers_enu, dtype=float)
        d = rtt_to_distance(np.asarray(rtts, dtype=float), params)
        sol = geoip_batch(a, d, np.ones((1, n), dtype=bool), up=up, prior_m=params.rtt_range_sigma)
        return PositionEstimate(
            enu=np.array([sol.en[0, 0], sol.en[0, 1], up]),
            sigma=sol.sigma[0],
            residual_rms=float(sol.residual_rms[0]),
            method="geoip-delay",
            infrastructure=Infrastructure.GEOIP,
            frame=frame,
        )
    if table_position_enu is not None:
        enu = np.asarray(table_position_enu, dtype=float)
        return PositionEstimate(
            enu=enu.copy(),
            sigma=np.full(3, fallback_sigma),
            residual_rms=0.0,
            method="geoip-table",
            infrastructure=Infrastructure.GEOIP,
            frame=frame,
        )
    raise NoGeoipData("fewer than 3 RTTs and no table position")
