"""
Time stepping of the coupled SDE for SpinStab
Euler-Maruyama with one shared Wiener increment per step, radial projection
onto the Bloch ball and counter-based per-trajectory noise streams
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from analysis import lyapunov_V
from controller import FeedbackLaw, feedback_u
from dynamics import (
    EstParams, PhysParams, diffusion_actual, diffusion_estimate, drift_actual,
    drift_estimate,
)
from error_handler import DomainError, IntegrationBlowupError, validate_sde_values
from qstate import (
    BlochVector, CoupledState, TargetState, bloch_bures_distance, check_bloch,
)

logger = logging.getLogger(__name__)

# Steps of noise drawn per block; fixed so results never depend on batching
NOISE_BLOCK = 1024
MAX_SEED = 2 ** 64

TRAJECTORY_COLUMNS = ['t', 'x', 'y', 'z', 'x_hat', 'y_hat', 'z_hat', 'u', 'V', 'dB_actual', 'dB_estimate']


class Scheme(Enum):
    EULER_MARUYAMA = "euler_maruyama"


class Projection(Enum):
    RADIAL_CLIP = "radial_clip"
    NONE = "none"


@dataclass(frozen=True)
class SdeConfig:
    dt: float = 1e-3
    t_final: float = 10.0
    record_stride: int = 10
    seed: int = 0
    scheme: Scheme = Scheme.EULER_MARUYAMA
    projection: Projection = Projection.RADIAL_CLIP

    def __post_init__(self):
        is_valid, errors, warnings = validate_sde_values(self.dt, self.t_final, self.record_stride)
        if not isinstance(self.seed, int) or not 0 <= self.seed < MAX_SEED:
            errors.append("seed must be an unsigned 64-bit integer")
            is_valid = False
        if not is_valid:
            raise DomainError("; ".join(errors))
        for warning in warnings:
            logger.warning(warning)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def record_steps(self) -> np.ndarray:
        return np.arange(0, self.n_steps + 1, self.record_stride)

    @property
    def times(self) -> np.ndarray:
        return self.record_steps * self.dt


class WienerIncrements:
    """
    Gaussian increments dW ~ N(0, dt) for one trajectory

    The Philox stream is keyed by (seed, index) so a trajectory's noise does
    not depend on which worker runs it. With refine > 1 each increment is
    the sum of `refine` finer increments, which matches Brownian paths
    across step sizes.
    """

    def __init__(self, seed: int, index: int, dt: float, refine: int = 1):
        sequence = np.random.SeedSequence(seed, spawn_key=(0, index))
        self._rng = np.random.Generator(np.random.Philox(sequence))
        self.refine = refine
        self.scale = np.sqrt(dt / refine)
        self.drawn = 0

    def take(self, n: int) -> np.ndarray:
        if self.refine == 1:
            increments = self._rng.standard_normal(n) * self.scale
        else:
            increments = (self._rng.standard_normal((n, self.refine)) * self.scale).sum(axis=1)
        self.drawn += n * self.refine
        return increments


def _radial_clip(b: BlochVector) -> BlochVector:
    norm_squared = b.x * b.x + b.y * b.y + b.z * b.z
    over = norm_squared > 1.0
    if not np.any(over):
        return b
    scale = np.where(over, 1.0 / np.sqrt(np.where(over, norm_squared, 1.0)), 1.0)
    return BlochVector(b.x * scale, b.y * scale, b.z * scale)


def project(b: BlochVector, projection: Projection = Projection.RADIAL_CLIP) -> BlochVector:
    """Rescale points outside the unit ball radially onto the sphere"""
    b = BlochVector(*b)
    if projection is Projection.NONE:
        return b
    clipped = _radial_clip(b)
    if np.ndim(b.x) == 0:
        return BlochVector(float(clipped.x), float(clipped.y), float(clipped.z))
    return clipped


def _advance(s: CoupledState, u, dW, dt: float, p: PhysParams, e: EstParams,
             projection: Projection) -> CoupledState:
    actual, estimate = s
    fa = drift_actual(actual, u, p)
    ga = diffusion_actual(actual, p)
    fe = drift_estimate(s, u, p, e)
    ge = diffusion_estimate(estimate, e)
    new_actual = BlochVector(*(c + f * dt + g * dW for c, f, g in zip(actual, fa, ga)))
    new_estimate = BlochVector(*(c + f * dt + g * dW for c, f, g in zip(estimate, fe, ge)))
    if projection is Projection.RADIAL_CLIP:
        new_actual = _radial_clip(new_actual)
        new_estimate = _radial_clip(new_estimate)
    return CoupledState(new_actual, new_estimate)


def step(s: CoupledState, u: float, dW: float, dt: float, p: PhysParams, e: EstParams,
         projection: Projection = Projection.RADIAL_CLIP, step_index: int = 0) -> CoupledState:
    """One Euler-Maruyama step; the same dW drives both components"""
    actual, estimate = _advance(s, u, dW, dt, p, e, projection)
    new_state = CoupledState(BlochVector(*(float(c) for c in actual)),
                             BlochVector(*(float(c) for c in estimate)))
    if not np.all(np.isfinite(np.concatenate([new_state.actual, new_state.estimate]))):
        raise IntegrationBlowupError(step_index)
    return new_state


@dataclass
class BatchRecord:
    """Recorded samples of a batch of trajectories, indexed [record, trajectory, coordinate]"""
    times: np.ndarray
    actual: np.ndarray
    estimate: np.ndarray
    controls: np.ndarray
    failed_step: np.ndarray

    @property
    def n_traj(self) -> int:
        return self.actual.shape[1]

    def states(self, record: int) -> CoupledState:
        a, h = self.actual[record], self.estimate[record]
        return CoupledState(BlochVector(a[:, 0], a[:, 1], a[:, 2]), BlochVector(h[:, 0], h[:, 1], h[:, 2]))


def integrate_batch(initial: Sequence[CoupledState], p: PhysParams, e: EstParams, law: FeedbackLaw,
                    cfg: SdeConfig, noises: Sequence[WienerIncrements]) -> BatchRecord:
    """
    Integrate several independent trajectories side by side

    Rows are independent: trajectory i only ever sees noises[i]. A row
    that becomes non-finite is flagged with its step index and left as NaN.
    """
    n = len(initial)
    if n != len(noises):
        raise ValueError("one noise stream is needed per initial condition")

    actual = BlochVector(*np.array([tuple(s.actual) for s in initial], dtype=float).T.copy())
    estimate = BlochVector(*np.array([tuple(s.estimate) for s in initial], dtype=float).T.copy())
    state = CoupledState(actual, estimate)

    n_steps, stride, dt = cfg.n_steps, cfg.record_stride, cfg.dt
    n_records = len(cfg.record_steps)
    actual_rec = np.empty((n_records, n, 3))
    estimate_rec = np.empty((n_records, n, 3))
    controls_rec = np.empty((n_records, n))
    failed_step = np.full(n, -1, dtype=np.int64)

    u = np.asarray(feedback_u(law, state.estimate), dtype=float) * np.ones(n)

    def record(slot, s, u):
        actual_rec[slot] = np.column_stack(s.actual)
        estimate_rec[slot] = np.column_stack(s.estimate)
        controls_rec[slot] = u

    record(0, state, u)
    slot = 1
    with np.errstate(invalid="ignore", over="ignore"):
        for block_start in range(0, n_steps, NOISE_BLOCK):
            count = min(NOISE_BLOCK, n_steps - block_start)
            increments = np.stack([noise.take(count) for noise in noises], axis=1)
            for j in range(count):
                k = block_start + j + 1
                state = _advance(state, u, increments[j], dt, p, e, cfg.projection)
                u = np.asarray(feedback_u(law, state.estimate), dtype=float) * np.ones(n)
                finite = np.isfinite(sum(state.actual) + sum(state.estimate) + u)
                if not np.all(finite):
                    newly = ~finite & (failed_step < 0)
                    failed_step[newly] = k
                if k % stride == 0:
                    record(slot, state, u)
                    slot += 1

    return BatchRecord(cfg.times, actual_rec, estimate_rec, controls_rec, failed_step)


@dataclass
class Trajectory:
    times: np.ndarray
    actual: np.ndarray
    estimate: np.ndarray
    controls: np.ndarray
    lyapunov: np.ndarray
    noise_seed: int
    target: TargetState = TargetState.EXCITED
    index: int = 0

    @classmethod
    def from_batch(cls, batch: BatchRecord, column: int, target: TargetState, seed: int, index: int) -> "Trajectory":
        actual = batch.actual[:, column, :].copy()
        estimate = batch.estimate[:, column, :].copy()
        states = CoupledState(BlochVector(*actual.T), BlochVector(*estimate.T))
        return cls(
            times=batch.times.copy(),
            actual=actual,
            estimate=estimate,
            controls=batch.controls[:, column].copy(),
            lyapunov=np.asarray(lyapunov_V(states, target), dtype=float),
            noise_seed=seed,
            target=target,
            index=index,
        )

    def __len__(self):
        return len(self.times)

    @property
    def states(self) -> List[CoupledState]:
        return [CoupledState(BlochVector(*map(float, a)), BlochVector(*map(float, h)))
                for a, h in zip(self.actual, self.estimate)]

    def bures_to_target(self) -> Tuple[np.ndarray, np.ndarray]:
        """Bures distances of each component to the target pole"""
        pole = self.target.bloch
        return (bloch_bures_distance(BlochVector(*self.actual.T), pole),
                bloch_bures_distance(BlochVector(*self.estimate.T), pole))

    def to_frame(self) -> pd.DataFrame:
        db_actual, db_estimate = self.bures_to_target()
        frame = pd.DataFrame({
            't': self.times,
            'x': self.actual[:, 0], 'y': self.actual[:, 1], 'z': self.actual[:, 2],
            'x_hat': self.estimate[:, 0], 'y_hat': self.estimate[:, 1], 'z_hat': self.estimate[:, 2],
            'u': self.controls,
            'V': self.lyapunov,
            'dB_actual': db_actual,
            'dB_estimate': db_estimate,
        })
        return frame[TRAJECTORY_COLUMNS]


def check_initial_state(ic: CoupledState) -> CoupledState:
    return CoupledState(check_bloch(ic.actual), check_bloch(ic.estimate))


def simulate(ic: CoupledState, p: PhysParams, e: EstParams, law: FeedbackLaw, cfg: SdeConfig,
             index: int = 0) -> Trajectory:
    """
    Single trajectory from `ic`, deterministic in (inputs, cfg.seed, index)
    """
    ic = check_initial_state(ic)
    noise = WienerIncrements(cfg.seed, index, cfg.dt)
    batch = integrate_batch([ic], p, e, law, cfg, [noise])
    failed = int(batch.failed_step[0])
    if failed >= 0:
        raise IntegrationBlowupError(failed, failed * cfg.dt)
    return Trajectory.from_batch(batch, 0, law.target, cfg.seed, index)
