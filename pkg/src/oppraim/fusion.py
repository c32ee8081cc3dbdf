"""Motion-constrained smoothing of subset estimates, composite likelihood and the attack decision."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientHistory, InsufficientSamples, NoEstimates
from .geo import OrientationAngles, rotation_matrix
from .positioning import PositionEstimate
from .trace import Infrastructure, MotionSample


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 20
    kernel_coeff: float = 0.3
    poly_order: int = 2
    eps_t: tuple[float, float, float] = (5.0, 5.0, 10.0)
    lambda_f: float = 0.5
    sigma_floor: float = 1.0

    def __post_init__(self):
        if self.poly_order < 0:
            raise ValueError("polynomial order must be >= 0")
        if self.window < self.poly_order + 1:
            raise ValueError("window must be at least poly_order + 1")
        if len(self.eps_t) != 3 or min(self.eps_t) <= 0:
            raise ValueError("eps_t must be three positive tolerances")
        if not 0.0 < self.lambda_f < 1.0:
            raise ValueError("lambda_f must lie in (0, 1)")
        if self.sigma_floor <= 0:
            raise ValueError("sigma floor must be positive")


@dataclass
class PlatformState:
    position: np.ndarray
    velocity: np.ndarray


@dataclass
class SmoothedEstimate:
    position: np.ndarray
    sigma: np.ndarray
    infrastructure: Infrastructure
    subset: tuple | int | None = None


@dataclass
class DetectionVerdict:
    timestamp: float
    likelihood: float | None
    attack: bool | None
    log_agreement: float | None = None
    kernels: dict = field(default_factory=dict, repr=False)
    estimate_count: int = 0

    @property
    def indeterminate(self) -> bool:
        return self.attack is None


# ---------------------------------------------------------------------------
# motion propagation

def propagate_state(prev: PlatformState, motion: MotionSample, dt: float = 1.0):
    """Predicted position and velocity one step ahead.

    p' = p + R (v dt + a dt^2 / 2),  v' = v + a dt, with R the sensor-to-world
    rotation of ``motion``. Velocity stays in the sensor frame.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    r = rotation_matrix(motion.orientation)
    v = np.asarray(prev.velocity, dtype=float)
    a = np.asarray(motion.acceleration, dtype=float)
    p = np.asarray(prev.position, dtype=float) + r @ (v * dt + 0.5 * a * dt * dt)
    return p, v + a * dt


def motion_displacement(motion: MotionSample, dt: float = 1.0) -> np.ndarray:
    """World-frame displacement over ``dt`` implied by one motion sample."""
    r = rotation_matrix(motion.orientation)
    v = np.asarray(motion.velocity, dtype=float)
    a = np.asarray(motion.acceleration, dtype=float)
    return r @ (v * dt + 0.5 * a * dt * dt)


# ---------------------------------------------------------------------------
# constrained local polynomial regression

def regression_weights(lags, window: int, kernel_coeff: float) -> np.ndarray:
    lags = np.asarray(lags, dtype=float)
    return np.exp(-kernel_coeff * (lags / window) ** 2)


def design_matrix(lags, window: int, order: int) -> np.ndarray:
    """Vandermonde rows in rescaled time tau = 1 - lag / window (current epoch at 1)."""
    tau = 1.0 - np.asarray(lags, dtype=float) / window
    return tau[:, None] ** np.arange(order + 1)[None, :]


@dataclass
class RegressionFit:
    position: np.ndarray        # (3,) or (S, 3)
    coeffs: np.ndarray          # (n+1, 3) or (S, n+1, 3)
    residuals: np.ndarray       # (N, 3) or (S, N, 3)
    active: np.ndarray          # bool per axis: constraint binding


def smooth_batch(lags, values, center, config: DetectorConfig, with_residuals: bool = True) -> RegressionFit:
    """Solve the box-constrained weighted polynomial fit for many streams sharing one window.

    ``lags`` (N,) are epoch lags (0 = now), ``values`` is (S, N, 3) and
    ``center`` (S, 3) the motion-propagated constraint centers (NaN rows mean
    unconstrained). Per axis the unconstrained weighted least squares fit is
    computed; where its value at the current epoch leaves
    [center - eps, center + eps] the fit is re-solved with the nearest bound as
    an equality constraint (one active-set step, exact for this single-row QP).
    """
    lags = np.asarray(lags, dtype=float)
    values = np.asarray(values, dtype=float)
    n = config.poly_order
    if len(lags) < n + 1:
        raise InsufficientHistory(f"{len(lags)} points for a degree-{n} fit")
    v = design_matrix(lags, config.window, n)
    k = regression_weights(lags, config.window, config.kernel_coeff)
    m = v.T @ (k[:, None] * v)
    minv = np.linalg.inv(m)
    h = minv @ (v.T * k[None, :])                      # (n+1, N)
    coeffs = h @ values                                 # (S, n+1, 3)
    c = np.ones(n + 1)                                  # tau = 1 at the current epoch
    value = coeffs.sum(axis=1)
    eps = np.asarray(config.eps_t, dtype=float)
    center = np.asarray(center, dtype=float)
    has_c = np.isfinite(center)
    target = np.where(has_c, np.clip(value, center - eps, center + eps), value)
    active = has_c & (target != value)
    mc = minv @ c
    corr = (target - value) / (c @ mc)                  # (S, 3)
    coeffs = coeffs + mc[None, :, None] * corr[:, None, :]
    position = np.where(active, target, coeffs.sum(axis=1))
    resid = (v @ coeffs - values) if with_residuals else None
    return RegressionFit(position, coeffs, resid, active)


def smooth_position(history, center, config: DetectorConfig, lags=None) -> RegressionFit:
    """Smooth one stream's window of positions, oldest first, current epoch last.

    ``history`` is (N, 3); ``lags`` default to N-1, ..., 0. ``center`` may be
    None for an unconstrained fit.
    """
    history = np.asarray(history, dtype=float)
    if lags is None:
        lags = np.arange(len(history) - 1, -1, -1, dtype=float)
    c = np.full(3, np.nan) if center is None else np.asarray(center, dtype=float)
    fit = smooth_batch(lags, history[None], c[None], config)
    return RegressionFit(fit.position[0], fit.coeffs[0], fit.residuals[0], fit.active[0])


def regression_objective(coeffs, lags, values, config: DetectorConfig) -> float:
    v = design_matrix(lags, config.window, config.poly_order)
    k = regression_weights(lags, config.window, config.kernel_coeff)
    r = v @ coeffs - values
    return float(np.sum(k[:, None] * r * r))


# ---------------------------------------------------------------------------
# uncertainty, kernels and likelihood

def assemble_sigma(estimate: PositionEstimate | None, residuals=None, floor: float = 1.0) -> np.ndarray:
    """Per-axis sigma: solver sigma when the method provides one, else regression-residual RMS."""
    sigma = None
    if estimate is not None and estimate.sigma is not None:
        s = np.asarray(estimate.sigma, dtype=float)
        if s.shape == (3,) and np.all(np.isfinite(s)):
            sigma = s
    if sigma is None:
        if residuals is None:
            raise ValueError("no solver sigma and no regression residuals")
        r = np.asarray(residuals, dtype=float)
        sigma = np.sqrt(np.mean(r * r, axis=0))
    return np.maximum(sigma, floor)


def log_kernel(p, mean, sigma) -> np.ndarray:
    """Log of the peak-normalized Gaussian kernel, averaged over the three axes."""
    z = (np.asarray(p, dtype=float) - np.asarray(mean, dtype=float)) / np.asarray(sigma, dtype=float)
    return -0.5 * np.mean(z * z, axis=-1)


def position_kernel(p, est: SmoothedEstimate) -> float:
    """Geometric mean over axes of exp(-((p - p_hat) / sigma)^2 / 2); equals 1 iff p == p_hat."""
    return float(math.exp(log_kernel(p, est.position, est.sigma)))


def composite_log_agreement(log_kernels_by_infra: Mapping) -> float:
    """Mean over present infrastructures of the mean log-kernel within each."""
    means = [float(np.mean(v)) for v in log_kernels_by_infra.values() if len(v)]
    if not means:
        raise NoEstimates("no position estimates at this epoch")
    return float(np.mean(means))


_F_MAX = math.nextafter(1.0, 0.0)


def likelihood_from_log(s: float) -> float:
    # 1 - e^s rounds to 1.0 below s ~ -37; keep the value inside [0, 1)
    return min(float(-math.expm1(s)), _F_MAX)


def composite_likelihood(estimates: Sequence[SmoothedEstimate] | Mapping, p_lbs) -> float:
    """f_t = 1 - (prod_m (prod_l k_l^m)^(1/L^m))^(1/M) over infrastructures present at t."""
    if isinstance(estimates, Mapping):
        groups = estimates
    else:
        groups = {}
        for e in estimates:
            groups.setdefault(e.infrastructure, []).append(e)
    logs = {
        m: [float(log_kernel(p_lbs, e.position, e.sigma)) for e in ests]
        for m, ests in groups.items()
    }
    return likelihood_from_log(composite_log_agreement(logs))


def fused_position(means, sigmas, weights) -> np.ndarray:
    """Maximizer of the weighted product of Gaussian kernels (per-axis inverse-variance mean)."""
    means = np.asarray(means, dtype=float)
    iv = np.asarray(weights, dtype=float)[:, None] / np.asarray(sigmas, dtype=float) ** 2
    return (iv * means).sum(0) / iv.sum(0)


def decide(likelihood: float | None, lambda_f: float) -> bool | None:
    if likelihood is None:
        return None
    return likelihood > lambda_f


def detect(timestamp, estimates: Sequence[SmoothedEstimate], p_lbs, config: DetectorConfig) -> DetectionVerdict:
    """Threshold decision on the composite likelihood; no estimates gives an indeterminate verdict."""
    if not estimates:
        return DetectionVerdict(timestamp, None, None)
    groups: dict = {}
    for e in estimates:
        groups.setdefault(e.infrastructure, []).append(e)
    logs = {
        m: np.array([log_kernel(p_lbs, e.position, e.sigma) for e in ests])
        for m, ests in groups.items()
    }
    s = composite_log_agreement(logs)
    f = likelihood_from_log(s)
    kernels = {m.name: np.exp(v) for m, v in logs.items()}
    return DetectionVerdict(timestamp, f, decide(f, config.lambda_f), s, kernels, len(estimates))


def calibrate_threshold(samples, method: str = "zscore", k: float = 3.0, q: float = 0.99) -> float:
    """Threshold from benign likelihood samples: mean + k*std, or the empirical q-quantile."""
    x = np.asarray([s for s in samples if s is not None], dtype=float)
    if len(x) < 30:
        raise InsufficientSamples(f"need at least 30 benign samples, got {len(x)}")
    if method == "zscore":
        lam = float(np.mean(x) + k * np.std(x))
    elif method == "quantile":
        lam = float(np.quantile(x, q))
    else:
        raise ValueError(f"unknown calibration method {method!r}")
    return float(np.clip(lam, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)))
