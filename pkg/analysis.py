"""
Lyapunov analysis for SpinStab
Lyapunov functions, infinitesimal generators, exponent bounds and sample exponent fits
"""
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.stats import linregress

from dynamics import (
    EstParams, PhysParams, diffusion_actual, diffusion_estimate, drift_actual,
    drift_estimate, innovation_factor,
)
from error_handler import DomainError, EstimationError
from qstate import (
    ArrayOrFloat, BlochVector, CoupledState, TargetState, bloch_coupled_distance,
    pole_pair, sample_ball,
)

logger = logging.getLogger(__name__)

# Reference exponents printed alongside the published simulations for
# omega=0.3, eta=0.3, M=1.3, omega_hat=0.5, eta_hat=0.5, M_hat=1.5
PUBLISHED_NU_S = -0.5408
PUBLISHED_NU_AV = -0.3458

LOG_FLOOR = 1e-12
DEFAULT_WINDOW_FRACTION = 0.8
FD_STEP = 1e-4


def _scalar(value):
    return float(value) if np.ndim(value) == 0 else value


def lyapunov_V(s: CoupledState, target: TargetState = TargetState.EXCITED) -> ArrayOrFloat:
    """sqrt(1 - z) + sqrt(1 - z_hat) for the excited target, sqrt(1 + z) + sqrt(1 + z_hat) for ground"""
    sign = target.z
    value = (np.sqrt(np.maximum(1.0 - sign * s.actual[2], 0.0))
             + np.sqrt(np.maximum(1.0 - sign * s.estimate[2], 0.0)))
    return _scalar(value)


def _pole_gaps(s: CoupledState, target: TargetState):
    sign = target.z
    gap = 1.0 - sign * np.asarray(s.actual[2], dtype=float)
    gap_hat = 1.0 - sign * np.asarray(s.estimate[2], dtype=float)
    if np.any(gap <= 0) or np.any(gap_hat <= 0):
        raise DomainError("generator of V is singular at the target pole")
    return gap, gap_hat


def generator_terms(s: CoupledState, p: PhysParams, e: EstParams,
                    target: TargetState = TargetState.EXCITED) -> Tuple[ArrayOrFloat, ArrayOrFloat]:
    """
    (U1, U2) with LV = u U1 + U2

    Excited target:
      U1 = (x (1-z)^-1/2 + x_hat (1-z_hat)^-1/2) / 2
      U2 = -[eta M (1+z)^2 sqrt(1-z) + eta_hat M_hat (1+z_hat)^2 sqrt(1-z_hat)] / 8
           + (1+z_hat) E(z, z_hat) sqrt(1-z_hat) / 2
    The ground target mirrors z -> -z with an overall sign on the odd terms.
    """
    sign = target.z
    gap, gap_hat = _pole_gaps(s, target)
    x, z = s.actual[0], s.actual[2]
    x_hat, z_hat = s.estimate[0], s.estimate[2]
    root, root_hat = np.sqrt(gap), np.sqrt(gap_hat)

    u1 = 0.5 * sign * (x / root + x_hat / root_hat)
    u2 = (-0.125 * (p.eta * p.M * (1.0 + sign * z) ** 2 * root
                    + e.eta_hat * e.M_hat * (1.0 + sign * z_hat) ** 2 * root_hat)
          + 0.5 * sign * (1.0 + sign * z_hat) * innovation_factor(z, z_hat, p, e) * root_hat)
    return _scalar(u1), _scalar(u2)


def generator_V_closed(s: CoupledState, u: ArrayOrFloat, p: PhysParams, e: EstParams,
                       target: TargetState = TargetState.EXCITED) -> ArrayOrFloat:
    u1, u2 = generator_terms(s, p, e, target)
    return _scalar(u * u1 + u2)


def _stack_fields(s: CoupledState, u, p: PhysParams, e: EstParams):
    drift = tuple(drift_actual(s.actual, u, p)) + tuple(drift_estimate(s, u, p, e))
    noise = tuple(diffusion_actual(s.actual, p)) + tuple(diffusion_estimate(s.estimate, e))
    return np.stack(np.broadcast_arrays(*drift)).astype(float), np.stack(np.broadcast_arrays(*noise)).astype(float)


def _shifted(s: CoupledState, direction: np.ndarray, h: float) -> CoupledState:
    point = np.stack(np.broadcast_arrays(*s.actual, *s.estimate)).astype(float) + h * direction
    return CoupledState(BlochVector(*point[:3]), BlochVector(*point[3:]))


def generator_V_numeric(s: CoupledState, u: ArrayOrFloat, p: PhysParams, e: EstParams,
                        target: TargetState = TargetState.EXCITED, mode: str = "analytic") -> ArrayOrFloat:
    """
    Generic generator f . grad V + 1/2 g^T (Hess V) g of the six-dimensional
    Bloch SDE, with f and g taken from the dynamics module

    mode="analytic" uses exact partial derivatives of V, mode="finite_difference"
    uses central directional differences (accurate to about 1e-5).
    """
    gap, gap_hat = _pole_gaps(s, target)
    drift, noise = _stack_fields(s, u, p, e)

    if mode == "finite_difference":
        first = (lyapunov_V(_shifted(s, drift, FD_STEP), target)
                 - lyapunov_V(_shifted(s, drift, -FD_STEP), target)) / (2.0 * FD_STEP)
        second = (lyapunov_V(_shifted(s, noise, FD_STEP), target) - 2.0 * lyapunov_V(s, target)
                  + lyapunov_V(_shifted(s, noise, -FD_STEP), target)) / FD_STEP ** 2
        return _scalar(first + 0.5 * second)
    if mode != "analytic":
        raise ValueError(f"unknown generator mode {mode!r}")

    sign = target.z
    gradient = np.zeros_like(drift)
    hessian = np.zeros((6,) + drift.shape)
    gradient[2] = -0.5 * sign / np.sqrt(gap)
    gradient[5] = -0.5 * sign / np.sqrt(gap_hat)
    hessian[2, 2] = -0.25 * gap ** -1.5
    hessian[5, 5] = -0.25 * gap_hat ** -1.5

    value = (np.einsum('i...,i...->...', gradient, drift)
             + 0.5 * np.einsum('i...,ij...,j...->...', noise, hessian, noise))
    return _scalar(value)


def lyapunov_ratio(s: CoupledState, p: PhysParams, e: EstParams,
                   target: TargetState = TargetState.EXCITED) -> ArrayOrFloat:
    """U2 / V, whose limit at the target pair is growth_rate_limit"""
    _, u2 = generator_terms(s, p, e, target)
    return _scalar(u2 / lyapunov_V(s, target))


def growth_rate_limit(p: PhysParams, e: EstParams) -> float:
    """max{-eta M, -2 sqrt(eta_hat eta M_hat M) + eta_hat M_hat} / 2"""
    return 0.5 * max(-p.eta * p.M, -2.0 * np.sqrt(e.eta_hat * p.eta * e.M_hat * p.M) + e.eta_hat * e.M_hat)


def nu_av(p: PhysParams, e: EstParams) -> float:
    """Reference rate for the mean Lyapunov curve: -sqrt(eta_hat eta M_hat M) + eta_hat M_hat / 2"""
    return float(-np.sqrt(e.eta_hat * p.eta * e.M_hat * p.M) + 0.5 * e.eta_hat * e.M_hat)


def nu_s(p: PhysParams, e: EstParams) -> float:
    """Sample-path exponent bound: -sqrt(eta_hat eta M_hat M) - min{eta M - eta_hat M_hat, 0} / 2"""
    return float(-np.sqrt(e.eta_hat * p.eta * e.M_hat * p.M)
                 - 0.5 * min(p.eta * p.M - e.eta_hat * e.M_hat, 0.0))


def k_bound(p: PhysParams, e: EstParams) -> float:
    return float(min(p.eta * p.M, e.eta_hat * e.M_hat))


def reference_exponents(p: PhysParams, e: EstParams) -> dict:
    return {
        'nu_av': nu_av(p, e),
        'nu_s': nu_s(p, e),
        'K': k_bound(p, e),
        'growth_rate_limit': growth_rate_limit(p, e),
        'nu_av_published': PUBLISHED_NU_AV,
        'nu_s_published': PUBLISHED_NU_S,
    }


@dataclass
class ExponentReport:
    slope: float
    intercept: float
    window: Tuple[float, float]
    r_squared: float
    n_samples: int

    def to_dict(self) -> dict:
        report = asdict(self)
        report['window'] = list(self.window)
        return report


def default_window(times: np.ndarray) -> Tuple[float, float]:
    """Last 80% of the recorded span"""
    start, end = float(times[0]), float(times[-1])
    return start + (1.0 - DEFAULT_WINDOW_FRACTION) * (end - start), end


def estimate_sample_exponent(source, window: Optional[Tuple[float, float]] = None) -> ExponentReport:
    """
    Least-squares slope of log V(t) over a time window

    `source` is a Trajectory (anything with `times` and `lyapunov`) or a
    (times, values) pair such as an ensemble mean curve. The window stops
    at the first sample with V below 1e-12.
    """
    if hasattr(source, 'times') and hasattr(source, 'lyapunov'):
        times, values = source.times, source.lyapunov
    else:
        times, values = source
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(times) == 0:
        raise EstimationError("no samples to fit")

    window = tuple(window) if window is not None else default_window(times)
    if not window[0] < window[1]:
        raise EstimationError(f"window {window} is empty")

    inside = np.flatnonzero((times >= window[0]) & (times <= window[1]))
    usable = np.isfinite(values[inside]) & (values[inside] >= LOG_FLOOR)
    if not np.all(usable):
        inside = inside[:np.argmin(usable)]
    if len(inside) < 3:
        raise EstimationError(f"only {len(inside)} positive samples in window {window}, need 3")

    log_values = np.log(values[inside])
    fit = linregress(times[inside], log_values)
    r_squared = 1.0 if np.ptp(log_values) == 0 else float(fit.rvalue ** 2)
    return ExponentReport(float(fit.slope), float(fit.intercept), (float(window[0]), float(window[1])),
                          r_squared, int(len(inside)))


def norm_equivalence_envelope(n: int = 100_000, seed: int = 0,
                              target: TargetState = TargetState.EXCITED) -> Tuple[float, float]:
    """Observed bounds [c1, c2] of V / d_B((rho, rho_hat), (rho_target, rho_target))"""
    rng = np.random.Generator(np.random.Philox(seed))
    states = CoupledState(sample_ball(n, rng), sample_ball(n, rng))
    distance = bloch_coupled_distance(states, pole_pair(target, target))
    keep = distance > 1e-9
    ratio = np.asarray(lyapunov_V(states, target))[keep] / distance[keep]
    return float(np.min(ratio)), float(np.max(ratio))
