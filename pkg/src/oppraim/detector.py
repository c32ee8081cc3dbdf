"""Per-trace detection pipeline: subset positioning followed by motion-constrained fusion.

The pipeline is split in two stages so evaluation sweeps over detector
settings can reuse the expensive subset solutions:

* :class:`SubsetPositioner` turns each frame into subset estimates.
* :class:`FusionDetector` smooths them, scores the LBS position and decides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientHistory
from .fusion import (
    DetectionVerdict,
    DetectorConfig,
    decide,
    log_kernel,
    likelihood_from_log,
    motion_displacement,
    smooth_batch,
)
from .geo import LocalFrame
from .positioning import RangingModelParams
from .subsets import SamplingPolicy, candidate_groups, sample_groups, solve_group
from .trace import AnchorDatabase, Infrastructure, TraceFrame


@dataclass
class EpochEstimates:
    """All subset estimates of one epoch in array form."""

    timestamp: float
    infra: np.ndarray           # (S,) Infrastructure values
    members: list               # member tuple per row
    enu: np.ndarray             # (S, 3)
    sigma: np.ndarray           # (S, 3)
    solves: int = 0
    candidates: int = 0
    failures: int = 0

    def __len__(self):
        return len(self.members)

    @property
    def keys(self) -> list:
        return [(Infrastructure(int(c)), m) for c, m in zip(self.infra, self.members)]

    def select(self, infras) -> "EpochEstimates":
        codes = np.array([i.value for i in infras])
        idx = np.nonzero(np.isin(self.infra, codes))[0]
        return EpochEstimates(
            self.timestamp, self.infra[idx], [self.members[i] for i in idx], self.enu[idx],
            self.sigma[idx], self.solves, self.candidates, self.failures,
        )

    @classmethod
    def empty(cls, t: float) -> "EpochEstimates":
        return cls(t, np.zeros(0, dtype=int), [], np.zeros((0, 3)), np.zeros((0, 3)))


def trace_origin(frames) -> LocalFrame:
    """ENU frame anchored at the first ground-truth fix (first LBS fix if no truth)."""
    for f in frames:
        if f.ground_truth is not None:
            return LocalFrame(f.ground_truth)
    return LocalFrame(frames[0].lbs_position)


class SubsetPositioner:
    """Stage one: enumerate, sample and solve the ranging subsets of each frame."""

    def __init__(
        self,
        db: AnchorDatabase,
        local: LocalFrame,
        policy: SamplingPolicy = SamplingPolicy(),
        params: RangingModelParams = RangingModelParams(),
    ):
        self.db = db
        self.local = local
        self.policy = policy
        self.params = params
        self.epoch = 0
        self.up = None
        self.prev_motion = None
        self.prev_t = None
        self.gnss_x0 = None

    def step(self, frame: TraceFrame) -> EpochEstimates:
        if self.up is None:
            self.up = float(self.local.to_enu(frame.lbs_position)[2])
        elif self.prev_motion is not None:
            dt = frame.timestamp - self.prev_t
            self.up += float(motion_displacement(self.prev_motion, dt)[2])
        groups = candidate_groups(frame, self.db, self.policy)
        picks = sample_groups(groups, self.policy, stream=(self.epoch,))
        parts = []
        solves = 0
        failures = 0
        for g, rows in zip(groups, picks):
            sol = solve_group(g, rows, self.db, self.params, self.local, up=self.up, gnss_x0=self.gnss_x0)
            solves += len(rows)
            failures += int((~sol.ok).sum())
            parts.append(sol)
            if g.infrastructure is Infrastructure.GNSS and sol.ok.any():
                self.gnss_x0 = sol.enu[np.nonzero(sol.ok)[0][-1]]
        self.epoch += 1
        self.prev_motion = frame.motion
        self.prev_t = frame.timestamp
        if not parts:
            out = EpochEstimates.empty(frame.timestamp)
            out.candidates = 0
            return out
        infra = np.concatenate([np.full(int(p.ok.sum()), p.infrastructure.value) for p in parts])
        members = [m for p in parts for m, k in zip(p.members, p.ok) if k]
        enu = np.concatenate([p.enu[p.ok] for p in parts])
        sigma = np.concatenate([p.sigma[p.ok] for p in parts])
        return EpochEstimates(frame.timestamp, infra.astype(int), members, enu, sigma, solves,
                              sum(len(g) for g in groups), failures)


class _History:
    """Ring buffer of raw subset positions per stream key over the last w+1 epochs."""

    def __init__(self, window: int):
        self.size = window + 1
        self.rows: dict = {}
        self.count = 0
        self.pos = np.zeros((64, self.size, 3))
        self.ep = np.full((64, self.size), -1, dtype=np.int64)
        self.last_ep = np.full(64, -1, dtype=np.int64)
        self.last_pos = np.zeros((64, 3))

    def row_ids(self, infra, members) -> np.ndarray:
        out = np.empty(len(members), dtype=np.int64)
        start = 0
        # rows arrive grouped by infrastructure
        for code in dict.fromkeys(infra.tolist()):
            table = self.rows.setdefault(code, {})
            stop = start + int((infra == code).sum())
            for i in range(start, stop):
                m = members[i]
                r = table.get(m)
                if r is None:
                    r = self.count
                    table[m] = r
                    self.count += 1
                    if r >= len(self.pos):
                        self._grow()
                out[i] = r
            start = stop
        return out

    def _grow(self):
        n = len(self.pos)
        self.pos = np.concatenate([self.pos, np.zeros((n, self.size, 3))])
        self.ep = np.concatenate([self.ep, np.full((n, self.size), -1, dtype=np.int64)])
        self.last_ep = np.concatenate([self.last_ep, np.full(n, -1, dtype=np.int64)])
        self.last_pos = np.concatenate([self.last_pos, np.zeros((n, 3))])

    def store(self, rows, epoch, enu):
        slot = epoch % self.size
        self.pos[rows, slot] = enu
        self.ep[rows, slot] = epoch
        self.last_ep[rows] = epoch
        self.last_pos[rows] = enu

    def gather(self, rows, epochs, fill):
        """(S, N, 3) raw positions at ``epochs``; ``fill`` (N, 3) where a stream had none."""
        slots = (np.asarray(epochs) % self.size)[None, :]
        ep = self.ep[rows[:, None], slots]
        pos = self.pos[rows[:, None], slots]
        have = ep == np.asarray(epochs)[None, :]
        return np.where(have[..., None], pos, fill[None, :, :])


class FusionDetector:
    """Stage two: smoothing, uncertainty, composite likelihood and threshold decision.

    Keeps the per-stream history buffers, the fused position history used to
    fill gaps, and the cumulative motion displacement used to propagate a
    stream's last raw fix to the current epoch.
    """

    def __init__(self, local: LocalFrame, config: DetectorConfig = DetectorConfig()):
        self.local = local
        self.config = config
        self.hist = _History(config.window)
        self.epoch = 0
        self.fused: dict[int, np.ndarray] = {}
        self.disp: list[np.ndarray] = [np.zeros(3)]   # cumulative displacement at each epoch
        self.prev_motion = None
        self.prev_t = None

    def _advance_motion(self, frame: TraceFrame):
        if self.prev_motion is None:
            step = np.zeros(3)
        else:
            step = motion_displacement(self.prev_motion, frame.timestamp - self.prev_t)
        if self.epoch > 0:
            self.disp.append(self.disp[-1] + step)
        self.prev_motion = frame.motion
        self.prev_t = frame.timestamp
        return step

    def step(self, frame: TraceFrame, est: EpochEstimates) -> DetectionVerdict:
        k = self.epoch
        step = self._advance_motion(frame)
        cfg = self.config
        p_lbs = self.local.to_enu(frame.lbs_position)

        if len(est) == 0:
            if k - 1 in self.fused:
                self.fused[k] = self.fused[k - 1] + step
            self.epoch += 1
            self._prune()
            return DetectionVerdict(frame.timestamp, None, None)

        rows = self.hist.row_ids(est.infra, est.members)
        smoothed = self._smooth(k, rows, est.enu)
        self.hist.store(rows, k, est.enu)
        sigma = np.maximum(est.sigma, cfg.sigma_floor)

        lk = log_kernel(p_lbs, smoothed, sigma)
        infra_codes = est.infra
        present = np.unique(infra_codes)
        per_infra = {}
        weights = np.empty(len(lk))
        for code in present:
            sel = infra_codes == code
            per_infra[Infrastructure(int(code))] = lk[sel]
            weights[sel] = 1.0 / (sel.sum() * len(present))
        s = float(np.mean([v.mean() for v in per_infra.values()]))
        f = likelihood_from_log(s)

        iv = weights[:, None] / sigma**2
        self.fused[k] = (iv * smoothed).sum(0) / iv.sum(0)
        self.epoch += 1
        self._prune()
        kernels = {m.name: np.exp(v) for m, v in per_infra.items()}
        return DetectionVerdict(frame.timestamp, f, decide(f, cfg.lambda_f), s, kernels, len(lk))

    def _prune(self):
        old = self.epoch - self.config.window - 2
        if old in self.fused:
            del self.fused[old]

    def _smooth(self, k, rows, raw):
        cfg = self.config
        first = max(0, k - cfg.window)
        past = [e for e in range(first, k) if e in self.fused]
        epochs = np.array(past + [k], dtype=np.int64)
        if len(epochs) < cfg.poly_order + 1:
            return raw.copy()
        fill = np.array([self.fused[e] for e in past] + [np.zeros(3)])
        values = self.hist.gather(rows, epochs, fill)
        values[:, -1, :] = raw

        # constraint centers: own last raw fix (within the window) propagated by motion,
        # otherwise the previous fused position propagated one step
        disp = np.asarray(self.disp)
        last_ep = self.hist.last_ep[rows]
        own = (last_ep >= first) & (last_ep < k)
        center = np.full((len(rows), 3), np.nan)
        if own.any():
            le = last_ep[own]
            center[own] = self.hist.last_pos[rows[own]] + disp[k] - disp[le]
        if (~own).any() and (k - 1) in self.fused:
            center[~own] = self.fused[k - 1] + disp[k] - disp[k - 1]
        lags = (k - epochs).astype(float)
        try:
            fit = smooth_batch(lags, values, center, cfg, with_residuals=False)
        except InsufficientHistory:
            return raw.copy()
        return fit.position


@dataclass
class TraceRun:
    estimates: list
    verdicts: list


def estimate_trace(frames, db, policy=SamplingPolicy(), params=RangingModelParams(), local=None):
    local = local or trace_origin(frames)
    pos = SubsetPositioner(db, local, policy, params)
    return local, [pos.step(f) for f in frames]


def fuse_trace(frames, estimates, config=DetectorConfig(), local=None, infras=None):
    local = local or trace_origin(frames)
    det = FusionDetector(local, config)
    out = []
    for f, e in zip(frames, estimates):
        if infras is not None:
            e = e.select(infras)
        out.append(det.step(f, e))
    return out


def run_detector(frames, db, config=DetectorConfig(), policy=SamplingPolicy(), params=RangingModelParams()):
    """Run both stages over a trace and return one verdict per frame."""
    frames = list(frames)
    local, ests = estimate_trace(frames, db, policy, params)
    return fuse_trace(frames, ests, config, local)
