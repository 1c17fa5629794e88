"""
Drift and diffusion fields of the coupled stochastic master equations
Matrix (superoperator) and Bloch-coordinate forms
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from error_handler import DomainError, validate_parameter_values
from qstate import (
    SIGMA_Y, SIGMA_Z, ArrayOrFloat, BlochVector, CoupledState, DensityMatrix,
    check_density,
)


@dataclass(frozen=True)
class PhysParams:
    """Actual detuning omega, detector efficiency eta and measurement strength M"""
    omega: float
    eta: float
    M: float

    def __post_init__(self):
        is_valid, errors, _ = validate_parameter_values(self.omega, self.eta, self.M)
        if not is_valid:
            raise DomainError("; ".join(errors))

    @property
    def signal_rate(self) -> float:
        """sqrt(eta M), the coefficient of the measured sigma_z signal"""
        return float(np.sqrt(self.eta * self.M))


@dataclass(frozen=True)
class EstParams:
    """Parameters assumed by the filter"""
    omega_hat: float
    eta_hat: float
    M_hat: float

    def __post_init__(self):
        is_valid, errors, _ = validate_parameter_values(self.omega_hat, self.eta_hat, self.M_hat, label="_hat")
        if not is_valid:
            raise DomainError("; ".join(errors))

    @property
    def signal_rate(self) -> float:
        return float(np.sqrt(self.eta_hat * self.M_hat))

    def as_physical(self) -> PhysParams:
        return PhysParams(self.omega_hat, self.eta_hat, self.M_hat)

    @classmethod
    def exact(cls, p: PhysParams) -> "EstParams":
        """Filter that knows the true parameters"""
        return cls(p.omega, p.eta, p.M)


class VectorField3(NamedTuple):
    """Drift rate or noise coefficient per Bloch coordinate"""
    dx: ArrayOrFloat
    dy: ArrayOrFloat
    dz: ArrayOrFloat


def innovation_factor(z: ArrayOrFloat, z_hat: ArrayOrFloat, p: PhysParams, e: EstParams) -> ArrayOrFloat:
    """E(z, z_hat) = sqrt(eta_hat M_hat) (sqrt(eta_hat M_hat) z_hat - sqrt(eta M) z)"""
    k_hat = e.signal_rate
    return k_hat * (k_hat * z_hat - p.signal_rate * z)


def drift_actual(b: BlochVector, u: ArrayOrFloat, p: PhysParams) -> VectorField3:
    x, y, z = b
    half_m = 0.5 * p.M
    return VectorField3(
        -p.omega * y - half_m * x + u * z,
        p.omega * x - half_m * y,
        -u * x,
    )


def diffusion_actual(b: BlochVector, p: PhysParams) -> VectorField3:
    x, y, z = b
    k = p.signal_rate
    return VectorField3(-k * x * z, -k * y * z, k * (1.0 - z * z))


def drift_estimate(s: CoupledState, u: ArrayOrFloat, p: PhysParams, e: EstParams) -> VectorField3:
    """Filter drift; the actual state enters only through its z coordinate"""
    xh, yh, zh = s.estimate
    innovation = innovation_factor(s.actual[2], zh, p, e)
    half_m = 0.5 * e.M_hat
    return VectorField3(
        -e.omega_hat * yh - half_m * xh + u * zh + xh * zh * innovation,
        e.omega_hat * xh - half_m * yh + yh * zh * innovation,
        -u * xh - (1.0 - zh * zh) * innovation,
    )


def diffusion_estimate(b_hat: BlochVector, e: EstParams) -> VectorField3:
    xh, yh, zh = b_hat
    k = e.signal_rate
    return VectorField3(-k * xh * zh, -k * yh * zh, k * (1.0 - zh * zh))


def superoperator_L(rho: DensityMatrix, u: float, p: PhysParams) -> np.ndarray:
    """-i/2 [omega sz + u sy, rho] + M/4 (sz rho sz - rho)"""
    rho = check_density(rho)
    hamiltonian = p.omega * SIGMA_Z + u * SIGMA_Y
    commutator = hamiltonian @ rho - rho @ hamiltonian
    return -0.5j * commutator + 0.25 * p.M * (SIGMA_Z @ rho @ SIGMA_Z - rho)


def superoperator_G(rho: DensityMatrix, p: PhysParams) -> np.ndarray:
    """sqrt(eta M)/2 (sz rho + rho sz - 2 Tr(sz rho) rho)"""
    rho = check_density(rho)
    mean_z = np.trace(SIGMA_Z @ rho).real
    return 0.5 * p.signal_rate * (SIGMA_Z @ rho + rho @ SIGMA_Z - 2.0 * mean_z * rho)
