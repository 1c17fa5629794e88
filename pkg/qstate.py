"""
Qubit state representations for SpinStab
Density matrices, Bloch vectors, fidelity and Bures distances
"""
from enum import Enum
from typing import NamedTuple, Union

import numpy as np

from error_handler import DomainError

BALL_SLACK = 1e-12
MATRIX_TOL = 1e-12

ArrayOrFloat = Union[float, np.ndarray]
DensityMatrix = np.ndarray

# Basis ordering puts the excited state first, so that Tr(sigma_z rho) = z
# and the excited projector sits at z = +1.
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
IDENTITY = np.eye(2, dtype=complex)


class BlochVector(NamedTuple):
    """Point (x, y, z) of the closed unit ball; fields may also be arrays of points"""
    x: ArrayOrFloat
    y: ArrayOrFloat
    z: ArrayOrFloat

    def norm_squared(self):
        return self.x * self.x + self.y * self.y + self.z * self.z

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


class CoupledState(NamedTuple):
    """Actual state and filter estimate driven by the same measurement record"""
    actual: BlochVector
    estimate: BlochVector


class TargetState(Enum):
    EXCITED = "excited"
    GROUND = "ground"

    @property
    def z(self) -> float:
        return 1.0 if self is TargetState.EXCITED else -1.0

    @property
    def antipode(self) -> "TargetState":
        return TargetState.GROUND if self is TargetState.EXCITED else TargetState.EXCITED

    @property
    def bloch(self) -> BlochVector:
        return BlochVector(0.0, 0.0, self.z)

    @property
    def projector(self) -> DensityMatrix:
        return bloch_to_density(self.bloch)


def pole_pair(actual: TargetState, estimate: TargetState) -> CoupledState:
    """Coupled state with both components at poles"""
    return CoupledState(actual.bloch, estimate.bloch)


def check_bloch(b: BlochVector) -> BlochVector:
    """Raise DomainError when b leaves the unit ball beyond the numeric slack"""
    b = BlochVector(*b)
    values = np.asarray(b.as_array())
    if not np.all(np.isfinite(values)):
        raise DomainError(f"Bloch vector {tuple(b)} has non-finite entries")
    if np.any(b.norm_squared() > 1.0 + BALL_SLACK):
        raise DomainError(f"Bloch vector {tuple(b)} lies outside the unit ball")
    return b


def check_density(rho: DensityMatrix) -> DensityMatrix:
    """Raise DomainError unless rho is a physical 2x2 density matrix"""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise DomainError(f"Density matrix must be 2x2, got shape {rho.shape}")
    if not np.all(np.isfinite(rho)):
        raise DomainError("Density matrix has non-finite entries")
    if abs(rho[1, 0] - np.conj(rho[0, 1])) > MATRIX_TOL or np.any(np.abs(np.diag(rho).imag) > MATRIX_TOL):
        raise DomainError("Density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > MATRIX_TOL:
        raise DomainError(f"Density matrix trace {np.trace(rho).real:.15g} differs from 1")
    if np.min(np.linalg.eigvalsh(rho)) < -MATRIX_TOL:
        raise DomainError("Density matrix has a negative eigenvalue")
    return rho


def pauli_coordinates(a: np.ndarray) -> BlochVector:
    """Coordinates (Tr(a sx), Tr(a sy), Tr(a sz)); also used for traceless rate matrices"""
    a = np.asarray(a, dtype=complex)
    return BlochVector(
        float(np.trace(a @ SIGMA_X).real),
        float(np.trace(a @ SIGMA_Y).real),
        float(np.trace(a @ SIGMA_Z).real),
    )


def bloch_to_density(b: BlochVector) -> DensityMatrix:
    """1/2 (I + x sx + y sy + z sz)"""
    x, y, z = check_bloch(b)
    return 0.5 * (IDENTITY + x * SIGMA_X + y * SIGMA_Y + z * SIGMA_Z)


def density_to_bloch(rho: DensityMatrix) -> BlochVector:
    return pauli_coordinates(check_density(rho))


def fidelity(a: DensityMatrix, b: DensityMatrix) -> float:
    """
    Qubit fidelity Tr(ab) + 2 sqrt(det a det b)

    Closed form valid for 2x2 density matrices only.
    """
    a = check_density(a)
    b = check_density(b)
    overlap = np.trace(a @ b).real
    dets = max(np.linalg.det(a).real, 0.0) * max(np.linalg.det(b).real, 0.0)
    return float(np.clip(overlap + 2.0 * np.sqrt(dets), 0.0, 1.0))


def bures_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    return float(np.sqrt(max(2.0 - 2.0 * np.sqrt(fidelity(a, b)), 0.0)))


def coupled_distance(s: CoupledState, t: CoupledState) -> float:
    """Sum of the component Bures distances"""
    return (bures_distance(bloch_to_density(s.actual), bloch_to_density(t.actual))
            + bures_distance(bloch_to_density(s.estimate), bloch_to_density(t.estimate)))


def bloch_fidelity(a: BlochVector, b: BlochVector) -> ArrayOrFloat:
    """
    Fidelity in Bloch coordinates, vectorised over array fields

    F = (1 + a.b)/2 + sqrt((1 - |a|^2)(1 - |b|^2))/2
    """
    a = BlochVector(*a)
    b = BlochVector(*b)
    dot = a.x * b.x + a.y * b.y + a.z * b.z
    mixed = np.maximum(1.0 - a.norm_squared(), 0.0) * np.maximum(1.0 - b.norm_squared(), 0.0)
    return np.clip(0.5 * (1.0 + dot) + 0.5 * np.sqrt(mixed), 0.0, 1.0)


def bloch_bures_distance(a: BlochVector, b: BlochVector) -> ArrayOrFloat:
    return np.sqrt(np.maximum(2.0 - 2.0 * np.sqrt(bloch_fidelity(a, b)), 0.0))


def bloch_coupled_distance(s: CoupledState, t: CoupledState) -> ArrayOrFloat:
    """coupled_distance on Bloch coordinates, vectorised over array fields"""
    return bloch_bures_distance(s.actual, t.actual) + bloch_bures_distance(s.estimate, t.estimate)


def sample_ball(n: int, rng: np.random.Generator) -> BlochVector:
    """n points uniform in the unit ball, as a BlochVector of arrays"""
    direction = rng.standard_normal((3, n))
    direction /= np.linalg.norm(direction, axis=0)
    radius = rng.random(n) ** (1.0 / 3.0)
    points = direction * radius
    return BlochVector(points[0], points[1], points[2])
