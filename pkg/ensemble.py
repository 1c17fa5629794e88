"""
Monte Carlo ensembles for SpinStab
Parallel trajectory batches, mean Lyapunov curves, exit-time and reachability studies
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from analysis import ExponentReport, estimate_sample_exponent, lyapunov_V
from controller import FeedbackLaw, equilibria, validate_hypothesis_H
from dynamics import EstParams, PhysParams
from error_handler import DomainError, EstimationError, IntegrationBlowupError
from integrator import (
    BatchRecord, SdeConfig, WienerIncrements, check_initial_state, integrate_batch,
)
from qstate import (
    BlochVector, CoupledState, bloch_coupled_distance, pole_pair, sample_ball,
)

logger = logging.getLogger(__name__)

# Trajectories integrated together; fixed so results never depend on the thread count
BATCH_SIZE = 128
QUANTILES = (0.1, 0.5, 0.9)
SUMMARY_COLUMNS = ['t', 'mean_V', 'q10', 'q50', 'q90']


@dataclass
class TrajectoryFailure:
    index: int
    step_index: int
    time: float


def _batches(n_traj: int) -> List[range]:
    return [range(start, min(start + BATCH_SIZE, n_traj)) for start in range(0, n_traj, BATCH_SIZE)]


def _run_batches(initial: Callable[[int], CoupledState], n_traj: int, p: PhysParams, e: EstParams,
                 law: FeedbackLaw, cfg: SdeConfig, reducer: Callable[[BatchRecord], dict],
                 threads: int = 1, refine: int = 1) -> Dict[str, np.ndarray]:
    """
    Integrate n_traj trajectories in fixed batches and reduce each batch

    Trajectory i uses the noise stream (cfg.seed, i). Reduced arrays are
    concatenated in index order along their last axis.
    """
    if n_traj < 1:
        raise DomainError("n_traj must be at least 1")

    def work(indices: range) -> dict:
        noises = [WienerIncrements(cfg.seed, i, cfg.dt, refine) for i in indices]
        batch = integrate_batch([initial(i) for i in indices], p, e, law, cfg, noises)
        reduced = reducer(batch)
        reduced['failed_step'] = batch.failed_step
        return reduced

    batches = _batches(n_traj)
    if threads <= 1 or len(batches) == 1:
        results = [work(indices) for indices in batches]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, batches))

    return {key: np.concatenate([r[key] for r in results], axis=-1) for key in results[0]}


def _record_states(batch: BatchRecord) -> CoupledState:
    """All recorded states with fields shaped (n_records, n_traj)"""
    a, h = batch.actual, batch.estimate
    return CoupledState(BlochVector(a[..., 0], a[..., 1], a[..., 2]), BlochVector(h[..., 0], h[..., 1], h[..., 2]))


def _failures(failed_step: np.ndarray, dt: float) -> List[TrajectoryFailure]:
    return [TrajectoryFailure(int(i), int(failed_step[i]), float(failed_step[i] * dt))
            for i in np.flatnonzero(failed_step >= 0)]


def _log_failures(failures: List[TrajectoryFailure], n_traj: int):
    if failures:
        logger.warning(f"{len(failures)} of {n_traj} trajectories blew up, first at "
                       f"index {failures[0].index} step {failures[0].step_index}")


@dataclass
class EnsembleSummary:
    n_traj: int
    times: np.ndarray
    mean_V: np.ndarray
    quantiles_V: np.ndarray
    per_traj_exponents: np.ndarray
    convergence_fraction: float
    lyapunov_fraction: float
    threshold: float
    mean_exponent: Optional[ExponentReport] = None
    failures: List[TrajectoryFailure] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            't': self.times,
            'mean_V': self.mean_V,
            'q10': self.quantiles_V[0],
            'q50': self.quantiles_V[1],
            'q90': self.quantiles_V[2],
        })[SUMMARY_COLUMNS]

    def to_dict(self) -> dict:
        finite = self.per_traj_exponents[np.isfinite(self.per_traj_exponents)]
        return {
            'n_traj': self.n_traj,
            'n_failed': len(self.failures),
            'failures': [vars(f) for f in self.failures],
            'threshold': self.threshold,
            'convergence_fraction': self.convergence_fraction,
            'lyapunov_fraction': self.lyapunov_fraction,
            'terminal_mean_V': float(self.mean_V[-1]),
            'per_traj_exponents': [None if not np.isfinite(v) else float(v) for v in self.per_traj_exponents],
            'median_per_traj_exponent': float(np.median(finite)) if len(finite) else None,
            'mean_curve_exponent': self.mean_exponent.to_dict() if self.mean_exponent else None,
        }


def _fit_or_nan(times, values, window) -> float:
    try:
        return estimate_sample_exponent((times, values), window).slope
    except EstimationError:
        return float("nan")


def run_ensemble(ic: CoupledState, p: PhysParams, e: EstParams, law: FeedbackLaw, cfg: SdeConfig,
                 n_traj: int, threads: int = 1, threshold: float = 0.05,
                 window: Optional[Tuple[float, float]] = None) -> EnsembleSummary:
    """
    n_traj trajectories from a common initial condition

    convergence_fraction counts terminal coupled Bures distance to the target
    pair below threshold, lyapunov_fraction counts terminal V below threshold.
    """
    ic = check_initial_state(ic)
    target_pair = pole_pair(law.target, law.target)

    def reducer(batch: BatchRecord) -> dict:
        states = _record_states(batch)
        terminal = batch.states(-1)
        return {
            'V': np.asarray(lyapunov_V(states, law.target)),
            'distance': np.asarray(bloch_coupled_distance(terminal, target_pair)),
        }

    logger.info(f"Running ensemble of {n_traj} trajectories with {law.label}")
    reduced = _run_batches(lambda i: ic, n_traj, p, e, law, cfg, reducer, threads)
    failures = _failures(reduced['failed_step'], cfg.dt)
    _log_failures(failures, n_traj)

    ok = reduced['failed_step'] < 0
    if not np.any(ok):
        first = failures[0]
        raise IntegrationBlowupError(first.step_index, first.time)

    times = cfg.times
    curves = reduced['V'][:, ok]
    mean_v = curves.mean(axis=1)
    quantiles = np.quantile(curves, QUANTILES, axis=1)
    exponents = np.full(n_traj, np.nan)
    if len(times) >= 3:
        for i in np.flatnonzero(ok):
            exponents[i] = _fit_or_nan(times, reduced['V'][:, i], window)

    mean_exponent = None
    if len(times) >= 3:
        try:
            mean_exponent = estimate_sample_exponent((times, mean_v), window)
        except EstimationError as e_fit:
            logger.warning(f"Mean curve exponent not available: {e_fit}")

    summary = EnsembleSummary(
        n_traj=n_traj,
        times=times,
        mean_V=mean_v,
        quantiles_V=quantiles,
        per_traj_exponents=exponents,
        convergence_fraction=float(np.mean(reduced['distance'][ok] < threshold)),
        lyapunov_fraction=float(np.mean(curves[-1] < threshold)),
        threshold=threshold,
        mean_exponent=mean_exponent,
        failures=failures,
    )
    logger.info(f"Ensemble finished: terminal mean V {mean_v[-1]:.4g}, "
                f"convergence fraction {summary.convergence_fraction:.3f}")
    return summary


def _cap_bounds(pole_z: float, radius: float) -> Tuple[float, float]:
    """Box (half width, lower bound of pole_z * z) containing the Bures ball around a pole"""
    if radius >= np.sqrt(2.0):
        return 1.0, -1.0
    floor = 2.0 * (1.0 - 0.5 * radius ** 2) ** 2 - 1.0
    half_width = np.sqrt(1.0 - floor ** 2) if floor > 0 else 1.0
    return half_width, floor


def _sample_cap(pole_z: float, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    half_width, floor = _cap_bounds(pole_z, radius)
    points = np.empty((0, 3))
    while len(points) < n:
        proposal = np.column_stack([
            rng.uniform(-half_width, half_width, 4 * n),
            rng.uniform(-half_width, half_width, 4 * n),
            pole_z * rng.uniform(floor, 1.0, 4 * n),
        ])
        inside = np.sum(proposal ** 2, axis=1) <= 1.0
        points = np.vstack([points, proposal[inside]])
    return points[:n]


def sample_coupled_ball(center: CoupledState, radius: float, n: int,
                        rng: np.random.Generator) -> List[CoupledState]:
    """
    n coupled states uniform in the Bures ball of given radius around a pair
    of poles, excluding the center itself

    Rejection sampling from boxes around each pole that contain the
    component balls, restricted to the Bloch ball.
    """
    if radius <= 0:
        raise DomainError("radius must be positive")
    for component in center:
        if component[0] != 0.0 or component[1] != 0.0 or abs(component[2]) != 1.0:
            raise DomainError("ball sampling needs both center components at poles")

    accepted: List[CoupledState] = []
    chunk = max(n, 256)
    while len(accepted) < n:
        actual = _sample_cap(center.actual[2], radius, chunk, rng)
        estimate = _sample_cap(center.estimate[2], radius, chunk, rng)
        states = CoupledState(BlochVector(*actual.T), BlochVector(*estimate.T))
        distance = bloch_coupled_distance(states, center)
        for i in np.flatnonzero((distance < radius) & (distance > 0)):
            accepted.append(CoupledState(BlochVector(*map(float, actual[i])), BlochVector(*map(float, estimate[i]))))
    return accepted[:n]


def uniform_initial_pairs(n: int, seed: int = 0) -> List[CoupledState]:
    """n independent draws uniform in ball x ball"""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2,))))
    actual, estimate = sample_ball(n, rng), sample_ball(n, rng)
    return [CoupledState(BlochVector(float(actual.x[i]), float(actual.y[i]), float(actual.z[i])),
                         BlochVector(float(estimate.x[i]), float(estimate.y[i]), float(estimate.z[i])))
            for i in range(n)]


def _first_hits(hit: np.ndarray, times: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column (hit anywhere, first hit time) for a (n_records, n_traj) mask"""
    any_hit = hit.any(axis=0)
    first = np.where(any_hit, times[np.argmax(hit, axis=0)], np.nan)
    return any_hit, first


@dataclass
class HittingStudy:
    """Exit or reach times detected at record stride"""
    radius: float
    n_traj: int
    fraction: float
    mean_time: float
    hit_times: np.ndarray
    record_interval: float
    failures: List[TrajectoryFailure] = field(default_factory=list)

    def to_dict(self, fraction_key: str, time_key: str) -> dict:
        return {
            'radius': self.radius,
            'n_traj': self.n_traj,
            fraction_key: self.fraction,
            time_key: None if np.isnan(self.mean_time) else self.mean_time,
            'record_interval': self.record_interval,
            'n_failed': len(self.failures),
        }


def _hitting_study(initial: Sequence[CoupledState], reference: CoupledState, radius: float, leaving: bool,
                   p, e, law, cfg, n_traj, threads) -> HittingStudy:
    times = cfg.times

    def reducer(batch: BatchRecord) -> dict:
        distance = bloch_coupled_distance(_record_states(batch), reference)
        hit = distance >= radius if leaving else distance < radius
        reached, first = _first_hits(hit, times)
        return {'reached': reached, 'first': first}

    reduced = _run_batches(lambda i: initial[i % len(initial)], n_traj, p, e, law, cfg, reducer, threads)
    failures = _failures(reduced['failed_step'], cfg.dt)
    _log_failures(failures, n_traj)
    reached = reduced['reached'] & (reduced['failed_step'] < 0)
    hit_times = np.where(reached, reduced['first'], np.nan)
    return HittingStudy(
        radius=radius,
        n_traj=n_traj,
        fraction=float(np.mean(reached)),
        mean_time=float(np.mean(hit_times[reached])) if np.any(reached) else float("nan"),
        hit_times=hit_times,
        record_interval=cfg.dt * cfg.record_stride,
        failures=failures,
    )


def exit_time_study(radius: float, p: PhysParams, e: EstParams, law: FeedbackLaw, cfg: SdeConfig,
                    n_traj: int, threads: int = 1,
                    initial_points: Optional[Sequence[CoupledState]] = None) -> HittingStudy:
    """
    Exit from the coupled ball around the unstable equilibrium (antipode, target)

    Initial points are sampled uniformly in the punctured ball unless given.
    """
    center = equilibria(law)[1]
    if not validate_hypothesis_H(law).ok:
        logger.warning("Exit study runs with a law violating hypothesis H")
    if initial_points is None:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(1,))))
        initial_points = sample_coupled_ball(center, radius, n_traj, rng)
    study = _hitting_study(list(initial_points), center, radius, True, p, e, law, cfg, n_traj, threads)
    logger.info(f"Exit study radius {radius}: exit fraction {study.fraction:.3f}, mean exit time {study.mean_time:.4g}")
    return study


def reach_time_study(initial_points: Sequence[CoupledState], radius: float, p: PhysParams, e: EstParams,
                     law: FeedbackLaw, cfg: SdeConfig, n_traj: int, threads: int = 1) -> HittingStudy:
    """
    Hitting time tau_r of the ball of given radius around (target, target);
    trajectory i starts from initial_points[i % len(initial_points)]
    """
    if radius <= 0:
        raise DomainError("radius must be positive")
    if isinstance(initial_points, CoupledState):
        initial_points = [initial_points]
    unstable = equilibria(law)[1]
    initial_points = [check_initial_state(s) for s in initial_points]
    for s in initial_points:
        if tuple(s.actual) == tuple(unstable.actual) and tuple(s.estimate) == tuple(unstable.estimate):
            raise DomainError("reachability is undefined from the unstable equilibrium")
    target_pair = pole_pair(law.target, law.target)
    study = _hitting_study(initial_points, target_pair, radius, False, p, e, law, cfg, n_traj, threads)
    logger.info(f"Reach study radius {radius}: reach fraction {study.fraction:.3f}, mean tau {study.mean_time:.4g}")
    return study


@dataclass
class MartingaleCheck:
    z0: float
    mean_z: float
    std_error: float
    passed: bool


def martingale_check(ic: CoupledState, p: PhysParams, e: EstParams, cfg: SdeConfig, n_traj: int,
                     threads: int = 1) -> MartingaleCheck:
    """Without control dz has no drift, so the ensemble mean of z_T stays at z_0"""
    ic = check_initial_state(ic)
    law = FeedbackLaw.zero()

    def reducer(batch: BatchRecord) -> dict:
        return {'z': batch.actual[-1, :, 2].copy()}

    reduced = _run_batches(lambda i: ic, n_traj, p, e, law, cfg, reducer, threads)
    z = reduced['z'][reduced['failed_step'] < 0]
    mean_z = float(np.mean(z))
    std_error = float(np.std(z, ddof=1) / np.sqrt(len(z))) if len(z) > 1 else float("inf")
    z0 = float(ic.actual[2])
    return MartingaleCheck(z0, mean_z, std_error, abs(mean_z - z0) <= 3.0 * std_error)


def exact_filter_mismatch(ic: BlochVector, p: PhysParams, law: FeedbackLaw, cfg: SdeConfig, n_traj: int,
                          threads: int = 1) -> float:
    """Largest recorded |actual - estimate| when the filter knows the parameters and the initial state"""
    start = check_initial_state(CoupledState(BlochVector(*ic), BlochVector(*ic)))

    def reducer(batch: BatchRecord) -> dict:
        gap = np.abs(batch.actual - batch.estimate)
        return {'gap': np.nanmax(gap, axis=(0, 2))}

    reduced = _run_batches(lambda i: start, n_traj, p, EstParams.exact(p), law, cfg, reducer, threads)
    return float(np.max(reduced['gap']))


@dataclass
class ConvergenceStudy:
    dts: List[float]
    mean_terminal_V: List[float]
    mean_terminal_gap: List[float]


def convergence_study(ic: CoupledState, p: PhysParams, e: EstParams, law: FeedbackLaw, cfg: SdeConfig,
                      n_traj: int, levels: int = 3, threads: int = 1) -> ConvergenceStudy:
    """
    Terminal V at dt, dt/2, ... on matched Brownian paths

    mean_terminal_gap[l] is the mean pathwise |V(dt_l) - V(dt_l+1)|; under
    strong order 1/2 it shrinks by about 1/sqrt(2) per halving.
    """
    ic = check_initial_state(ic)
    terminal = []
    dts = []
    for level in range(levels):
        dt = cfg.dt / 2 ** level
        n_steps = int(round(cfg.t_final / dt))
        level_cfg = replace(cfg, dt=dt, record_stride=max(n_steps, 1))

        def reducer(batch: BatchRecord) -> dict:
            return {'V': np.asarray(lyapunov_V(batch.states(-1), law.target))}

        reduced = _run_batches(lambda i: ic, n_traj, p, e, law, level_cfg, reducer, threads,
                               refine=2 ** (levels - 1 - level))
        terminal.append(reduced['V'])
        dts.append(dt)

    gaps = [float(np.nanmean(np.abs(terminal[l] - terminal[l + 1]))) for l in range(levels - 1)]
    return ConvergenceStudy(dts, [float(np.nanmean(v)) for v in terminal], gaps)
