"""Epoch labels, detection metrics, ROC sweeps and the comparison baselines."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGrid, InsufficientAnchors, LengthMismatch, MissingInput, NoConvergence, NoGroundTruth, SingularGeometry
from .fusion import motion_displacement
from .geo import LocalFrame, distance, rotation_matrix
from .positioning import (
    RangingModelParams,
    dop_from_q,
    geolocation_wls_batch,
    rssi_to_distance,
    solve_pseudoranges,
)
from .sim import LABEL_DISTANCE, NoiseModel
from .trace import AnchorDatabase, Infrastructure

NETWORK_INFRAS = (Infrastructure.WIFI, Infrastructure.CELLULAR, Infrastructure.BLUETOOTH)
FUSION_GATE = 13.82     # chi-square, 2 dof, 0.999


def label_epochs(frames) -> list:
    """True where the LBS fix is more than 30 m from truth; None for frames without truth."""
    frames = list(frames)
    if not any(f.ground_truth is not None for f in frames):
        raise NoGroundTruth("no frame carries ground truth")
    return [None if f.ground_truth is None else distance(f.lbs_position, f.ground_truth) > LABEL_DISTANCE
            for f in frames]


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    p_tp: float | None
    p_fp: float | None
    latency: float | None               # mean detection latency, seconds
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0
    episodes: int = 0
    detected_episodes: int = 0
    indeterminate: int = 0
    roc: list = field(default_factory=list)
    per_trace: list = field(default_factory=list)
    runtime_per_epoch: float | None = None
    latency_sum: float = 0.0

    def as_dict(self) -> dict:
        return {
            "p_tp": self.p_tp, "p_fp": self.p_fp, "latency_s": self.latency,
            "tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn,
            "episodes": self.episodes, "detected_episodes": self.detected_episodes,
            "indeterminate": self.indeterminate, "runtime_per_epoch_s": self.runtime_per_epoch,
        }


def _flag(v):
    return getattr(v, "attack", v)


def _episodes(labels):
    """(start, stop) index pairs of maximal runs of True labels."""
    out = []
    start = None
    for i, lab in enumerate(list(labels) + [False]):
        hit = lab is not None and bool(lab)
        if hit and start is None:
            start = i
        elif not hit and start is not None:
            out.append((start, i))
            start = None
    return out


def compute_metrics(verdicts, labels, timestamps=None, runtime_per_epoch=None) -> MetricsReport:
    """Confusion counts, P_tp, P_fp and censored mean latency of one trace.

    ``verdicts`` may be DetectionVerdicts or plain bool/None flags.
    Indeterminate verdicts and unlabeled epochs count in neither numerator
    nor denominator. An episode that is never flagged contributes its full
    duration to the latency.
    """
    verdicts = list(verdicts)
    labels = list(labels)
    if len(verdicts) != len(labels):
        raise LengthMismatch(f"{len(verdicts)} verdicts for {len(labels)} labels")
    if timestamps is None:
        timestamps = [getattr(v, "timestamp", i) for i, v in enumerate(verdicts)]
    ts = np.asarray(timestamps, dtype=float)
    if len(ts) != len(labels):
        raise LengthMismatch(f"{len(ts)} timestamps for {len(labels)} labels")
    flags = [_flag(v) for v in verdicts]
    tp = fn = fp = tn = ind = 0
    for a, lab in zip(flags, labels):
        if lab is None:
            continue
        if a is None:
            ind += 1
        elif lab:
            tp += a
            fn += not a
        else:
            fp += a
            tn += not a
    period = float(np.median(np.diff(ts))) if len(ts) > 1 else 1.0
    lat_sum = 0.0
    eps = _episodes(labels)
    detected = 0
    for s, e in eps:
        hit = next((i for i in range(s, e) if flags[i] is not None and bool(flags[i])), None)
        if hit is None:
            lat_sum += ts[e - 1] - ts[s] + period
        else:
            lat_sum += ts[hit] - ts[s]
            detected += 1
    return MetricsReport(
        p_tp=tp / (tp + fn) if tp + fn else None,
        p_fp=fp / (fp + tn) if fp + tn else None,
        latency=lat_sum / len(eps) if eps else None,
        tp=tp, fn=fn, fp=fp, tn=tn, episodes=len(eps), detected_episodes=detected,
        indeterminate=ind, runtime_per_epoch=runtime_per_epoch, latency_sum=lat_sum,
    )


def pool_metrics(reports) -> MetricsReport:
    """Sum confusion counts over traces; latency is averaged over all episodes."""
    reports = list(reports)
    tp, fn, fp, tn = (sum(getattr(r, k) for r in reports) for k in ("tp", "fn", "fp", "tn"))
    eps = sum(r.episodes for r in reports)
    lat = sum(r.latency_sum for r in reports)
    rt = [r.runtime_per_epoch for r in reports if r.runtime_per_epoch is not None]
    return MetricsReport(
        p_tp=tp / (tp + fn) if tp + fn else None,
        p_fp=fp / (fp + tn) if fp + tn else None,
        latency=lat / eps if eps else None,
        tp=tp, fn=fn, fp=fp, tn=tn, episodes=eps,
        detected_episodes=sum(r.detected_episodes for r in reports),
        indeterminate=sum(r.indeterminate for r in reports),
        per_trace=reports, runtime_per_epoch=float(np.mean(rt)) if rt else None, latency_sum=lat,
    )


# ---------------------------------------------------------------------------
# ROC

def _scored(scores, labels):
    scores = list(scores)
    labels = list(labels)
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores for {len(labels)} labels")
    keep = [(s, lab) for s, lab in zip(scores, labels)
            if s is not None and lab is not None and math.isfinite(s)]
    s = np.array([k[0] for k in keep], dtype=float)
    lab = np.array([k[1] for k in keep], dtype=bool)
    return s, lab


def roc_sweep(scores, labels, grid, bounded: bool = True) -> list[tuple[float, float | None, float | None]]:
    """(threshold, P_tp, P_fp) per grid value by re-thresholding stored scores with ``score > threshold``.

    ``bounded`` requires the grid inside (0, 1), as for likelihood scores;
    baseline scores in meters pass ``bounded=False``.
    """
    g = np.asarray(list(grid), dtype=float)
    if g.size == 0:
        raise EmptyGrid("threshold grid is empty")
    if np.any(np.diff(g) <= 0):
        raise ValueError("threshold grid must be strictly increasing")
    if bounded and (g[0] <= 0.0 or g[-1] >= 1.0):
        raise ValueError("threshold grid must lie in (0, 1)")
    s, lab = _scored(scores, labels)
    pos = np.sort(s[lab])
    neg = np.sort(s[~lab])
    out = []
    for lam in g:
        ptp = (len(pos) - np.searchsorted(pos, lam, side="right")) / len(pos) if len(pos) else None
        pfp = (len(neg) - np.searchsorted(neg, lam, side="right")) / len(neg) if len(neg) else None
        out.append((float(lam), None if ptp is None else float(ptp), None if pfp is None else float(pfp)))
    return out


def threshold_at_fp(scores, labels, target: float) -> float:
    """Smallest threshold whose benign exceedance fraction is at most ``target``."""
    s, lab = _scored(scores, labels)
    neg = np.sort(s[~lab])[::-1]
    if len(neg) == 0:
        raise MissingInput("no benign epochs to set a threshold on")
    k = int(math.floor(target * len(neg) + 1e-9))
    if k >= len(neg):
        return float(neg[-1] - 1.0)
    return float(neg[k])


def tp_at_fp(scores, labels, target: float = 0.1) -> tuple[float | None, float | None, float]:
    """(P_tp, P_fp, threshold) at the operating point of :func:`threshold_at_fp`."""
    lam = threshold_at_fp(scores, labels, target)
    s, lab = _scored(scores, labels)
    flags = s > lam
    ptp = float(flags[lab].mean()) if lab.any() else None
    pfp = float(flags[~lab].mean()) if (~lab).any() else None
    return ptp, pfp, lam


# ---------------------------------------------------------------------------
# baselines

class BaselineKind(enum.Enum):
    KALMAN_RESIDUAL = "kalman_residual"
    NETWORK_DISTANCE = "network_distance"
    SECURE_FUSION = "secure_fusion"


@dataclass
class BaselineVerdict:
    timestamp: float
    score: float | None
    attack: bool | None


@dataclass
class BaselineInputs:
    """Per-epoch inputs shared by the baselines, all in the trace's local frame."""

    t: np.ndarray
    gnss: np.ndarray            # (N, 3) all-constellation fix, NaN when unavailable
    gnss_sigma: np.ndarray      # nominal: pseudorange sigma times the per-axis DOP
    net: np.ndarray             # (N, 3) pooled full-anchor network fix, NaN when unavailable
    net_sigma: np.ndarray
    lbs: np.ndarray
    step: np.ndarray            # motion displacement from epoch k-1 to k
    velocity: np.ndarray        # world-frame velocity reported at epoch k
    accel: np.ndarray           # world-frame acceleration reported at epoch k


def _gnss_fix(frame, local, x0, params):
    obs = [o for o in frame.observations if o.infrastructure is Infrastructure.GNSS]
    if len(obs) < 4:
        return None
    start = local.origin_ecef if x0 is None else local.enu_to_ecef(x0)
    try:
        sol = solve_pseudoranges(np.array([o.sat_ecef for o in obs]), np.array([o.value for o in obs]), start)
    except (InsufficientAnchors, SingularGeometry, NoConvergence, np.linalg.LinAlgError):
        return None
    rot4 = np.eye(4)
    rot4[:3, :3] = local.rot
    dop = dop_from_q(rot4 @ sol.q @ rot4.T)
    sigma = np.array([dop.sigma_x, dop.sigma_y, dop.sigma_z]) * params.pr_sigma_m
    return local.ecef_to_enu(sol.xyz), sigma


def _network_fix(frame, db, local, up, params):
    pos, dist = [], []
    for o in frame.observations:
        if o.infrastructure not in NETWORK_INFRAS:
            continue
        p = db.position(o.infrastructure, o.anchor_id)
        if p is None:
            continue
        pos.append(p)
        dist.append(float(rssi_to_distance(o.value, params.for_infra(o.infrastructure))))
    if len(pos) < 3:
        return None
    a = local.to_enu_many(np.array([p.latitude for p in pos]), np.array([p.longitude for p in pos]),
                          np.array([p.altitude for p in pos]))
    sol = geolocation_wls_batch(a, np.array(dist), np.ones((1, len(pos)), dtype=bool), up=up,
                                prior_rel=params.rssi_relative_sigma)
    if not sol.ok[0]:
        return None
    return np.array([sol.en[0, 0], sol.en[0, 1], up]), np.maximum(sol.sigma[0], 1e-6)


def baseline_inputs(frames, db: AnchorDatabase, params: RangingModelParams = RangingModelParams(),
                    local: LocalFrame | None = None) -> BaselineInputs:
    from .detector import trace_origin

    frames = list(frames)
    local = local or trace_origin(frames)
    n = len(frames)
    nan = np.full((n, 3), np.nan)
    out = BaselineInputs(np.array([f.timestamp for f in frames], dtype=float), nan.copy(), nan.copy(),
                         nan.copy(), nan.copy(), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)),
                         np.zeros((n, 3)))
    x0 = None
    up = None
    for k, f in enumerate(frames):
        out.lbs[k] = local.to_enu(f.lbs_position)
        if k > 0:
            out.step[k] = motion_displacement(frames[k - 1].motion, f.timestamp - frames[k - 1].timestamp)
        rot = rotation_matrix(f.motion.orientation)
        out.velocity[k] = rot @ np.asarray(f.motion.velocity, dtype=float)
        out.accel[k] = rot @ np.asarray(f.motion.acceleration, dtype=float)
        up = out.lbs[0, 2] if up is None else up + out.step[k, 2]
        fix = _gnss_fix(f, local, x0, params)
        if fix is not None:
            out.gnss[k], out.gnss_sigma[k] = fix
            x0 = fix[0]
        net = _network_fix(f, db, local, up, params)
        if net is not None:
            out.net[k], out.net_sigma[k] = net
    return out


def _horizontal(a, b):
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


def _kalman_scores(inp: BaselineInputs, noise: NoiseModel):
    # constant-velocity filter per axis, state (p, v); the motion sensors' world-frame
    # acceleration drives the prediction as a control input
    n = len(inp.t)
    qa = max(noise.process_accel_sigma, 1e-6) ** 2
    scores = [None] * n
    x = None
    for k in range(n):
        z = inp.gnss[k]
        have = np.all(np.isfinite(z))
        if x is None:
            if not have:
                continue
            x = np.stack([z, inp.velocity[k]], axis=1)              # (3, 2)
            p = np.stack([np.diag([s * s, qa]) for s in inp.gnss_sigma[k]])
            scores[k] = 0.0
            continue
        dt = inp.t[k] - inp.t[k - 1]
        f = np.array([[1.0, dt], [0.0, 1.0]])
        q = qa * np.array([[dt**4 / 4, dt**3 / 2], [dt**3 / 2, dt * dt]])
        x = x @ f.T + inp.accel[k - 1][:, None] * np.array([0.5 * dt * dt, dt])[None, :]
        p = f @ p @ f.T + q
        if not have:
            continue
        r = np.maximum(inp.gnss_sigma[k], 1e-3) ** 2
        s = p[:, 0, 0] + r
        gain = p[:, :, 0] / s[:, None]
        x = x + gain * (z - x[:, 0])[:, None]
        p = p - gain[:, :, None] * p[:, 0, None, :]
        scores[k] = _horizontal(x[:, 0], z)
    return scores


def _network_scores(inp: BaselineInputs):
    return [None if not np.all(np.isfinite(inp.net[k])) else _horizontal(inp.net[k], inp.lbs[k])
            for k in range(len(inp.t))]


def _fusion_scores(inp: BaselineInputs, noise: NoiseModel):
    n = len(inp.t)
    qa = max(noise.process_accel_sigma, 1e-6)
    sv = max(noise.velocity_sigma, 1e-3)
    scores = [None] * n
    fused = None
    var = None
    for k in range(n):
        means, vars_ = [], []
        if fused is not None:
            dt = inp.t[k] - inp.t[k - 1]
            q = (0.5 * qa * dt * dt) ** 2 + (sv * dt) ** 2
            means.append(fused + inp.step[k])
            vars_.append(var + q)
        have_g = np.all(np.isfinite(inp.gnss[k]))
        if have_g:
            vg = np.maximum(inp.gnss_sigma[k], 1e-3) ** 2
            # consistency gate: a GNSS fix implausible against the propagated state stays out
            if fused is None or (((inp.gnss[k] - means[0]) ** 2 / (vars_[0] + vg))[:2].sum() <= FUSION_GATE):
                means.append(inp.gnss[k])
                vars_.append(vg)
        if np.all(np.isfinite(inp.net[k])):
            v = np.maximum(inp.net_sigma[k], 1e-3) ** 2
            v[2] = np.inf       # the network fix carries no altitude information
            means.append(inp.net[k])
            vars_.append(v)
        if not means:
            continue
        w = 1.0 / np.array(vars_)
        fused = (w * np.array(means)).sum(0) / w.sum(0)
        var = 1.0 / w.sum(0)
        if have_g:
            scores[k] = _horizontal(fused, inp.gnss[k])
    return scores


def baseline_scores(kind: BaselineKind, inputs: BaselineInputs, noise: NoiseModel = NoiseModel()) -> list:
    """One score per epoch (meters); None where the baseline lacks its inputs."""
    have_g = np.isfinite(inputs.gnss).all(1).any()
    have_n = np.isfinite(inputs.net).all(1).any()
    if kind is BaselineKind.KALMAN_RESIDUAL:
        if not have_g:
            raise MissingInput("KALMAN_RESIDUAL needs GNSS fixes")
        return _kalman_scores(inputs, noise)
    if kind is BaselineKind.NETWORK_DISTANCE:
        if not have_n:
            raise MissingInput("NETWORK_DISTANCE needs network fixes")
        return _network_scores(inputs)
    if kind is BaselineKind.SECURE_FUSION:
        if not have_g:
            raise MissingInput("SECURE_FUSION needs GNSS fixes")
        return _fusion_scores(inputs, noise)
    raise ValueError(f"unknown baseline {kind!r}")


def run_baseline(kind: BaselineKind, frames, threshold: float, db: AnchorDatabase,
                 noise: NoiseModel = NoiseModel(), params: RangingModelParams = RangingModelParams(),
                 local: LocalFrame | None = None, inputs: BaselineInputs | None = None) -> list[BaselineVerdict]:
    frames = list(frames)
    inputs = inputs or baseline_inputs(frames, db, params, local)
    scores = baseline_scores(kind, inputs, noise)
    return [BaselineVerdict(t, s, None if s is None else s > threshold) for t, s in zip(inputs.t, scores)]
