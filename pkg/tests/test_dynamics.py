import numpy as np
import pytest

from dynamics import (
    EstParams, PhysParams, diffusion_actual, diffusion_estimate, drift_actual, drift_estimate,
    innovation_factor, superoperator_G, superoperator_L,
)
from error_handler import DomainError
from qstate import BlochVector, CoupledState, TargetState, bloch_to_density, pauli_coordinates, sample_ball

P = PhysParams(omega=0.3, eta=0.3, M=1.3)
E = EstParams(omega_hat=0.5, eta_hat=0.5, M_hat=1.5)


@pytest.mark.parametrize("kwargs", [
    dict(omega=-0.1, eta=0.3, M=1.3),
    dict(omega=0.3, eta=0.0, M=1.3),
    dict(omega=0.3, eta=1.2, M=1.3),
    dict(omega=0.3, eta=0.3, M=0.0),
    dict(omega=float("nan"), eta=0.3, M=1.3),
])
def test_invalid_parameters_raise(kwargs):
    with pytest.raises(DomainError):
        PhysParams(**kwargs)


def test_exact_filter_parameters():
    e = EstParams.exact(P)
    assert e.as_physical() == P
    assert e.signal_rate == pytest.approx(P.signal_rate)


def test_innovation_factor_examples():
    assert innovation_factor(0.4, 0.4, P, EstParams.exact(P)) == pytest.approx(0.0, abs=1e-15)
    assert innovation_factor(-1.0, 1.0, P, E) == pytest.approx(1.290833, abs=1e-5)
    assert innovation_factor(0.0, 0.0, P, E) == 0.0


def test_drift_actual_examples():
    np.testing.assert_allclose(drift_actual(BlochVector(1, 0, 0), 0.0, P), (-0.65, 0.3, 0.0))
    np.testing.assert_allclose(drift_actual(BlochVector(0, 0, 1), 0.0, P), (0.0, 0.0, 0.0))
    np.testing.assert_allclose(drift_actual(BlochVector(0, 0, 1), 2.5, P), (2.5, 0.0, 0.0))


def test_diffusion_actual_examples():
    np.testing.assert_allclose(diffusion_actual(BlochVector(0, 0, 1), P), (0, 0, 0), atol=0)
    np.testing.assert_allclose(diffusion_actual(BlochVector(0, 0, -1), P), (0, 0, 0), atol=0)
    np.testing.assert_allclose(diffusion_actual(BlochVector(1, 0, 0), P), (0, 0, 0.6245), atol=1e-6)
    np.testing.assert_allclose(diffusion_actual(BlochVector(0.5, 0, 0.5), P), (-0.156125, 0, 0.468375), atol=1e-6)


def test_drift_estimate_examples():
    at_pole = CoupledState(BlochVector(0.2, 0.1, -0.7), BlochVector(0, 0, 1))
    np.testing.assert_allclose(drift_estimate(at_pole, 0.0, P, E), (0, 0, 0), atol=1e-15)

    b = BlochVector(0.2, -0.3, 0.5)
    np.testing.assert_allclose(drift_estimate(CoupledState(b, b), 1.7, P, EstParams.exact(P)),
                               drift_actual(b, 1.7, P), atol=1e-15)

    # the x entry is -omega_hat * y_hat
    s = CoupledState(BlochVector(0, 0, -1), BlochVector(0, 1, 0))
    np.testing.assert_allclose(drift_estimate(s, 0.0, P, E), (-0.5, -0.75, -0.540833), atol=1e-6)


def test_drift_estimate_ignores_actual_xy():
    a = CoupledState(BlochVector(0.5, 0.1, 0.2), BlochVector(0.1, 0.3, -0.2))
    b = CoupledState(BlochVector(-0.3, 0.6, 0.2), BlochVector(0.1, 0.3, -0.2))
    assert drift_estimate(a, 1.0, P, E) == drift_estimate(b, 1.0, P, E)


def test_diffusion_estimate_examples():
    np.testing.assert_allclose(diffusion_estimate(BlochVector(0, 0, 1), E), (0, 0, 0))
    np.testing.assert_allclose(diffusion_estimate(BlochVector(0, 1, 0), E), (0, 0, 0.866025), atol=1e-6)
    np.testing.assert_allclose(diffusion_estimate(BlochVector(1, 0, 0), E), (0, 0, 0.866025), atol=1e-6)


def test_superoperator_examples():
    np.testing.assert_allclose(superoperator_L(TargetState.EXCITED.projector, 0.0, P), np.zeros((2, 2)))
    np.testing.assert_allclose(pauli_coordinates(superoperator_L(0.5 * np.eye(2), 3.0, P)), (0, 0, 0))
    np.testing.assert_allclose(pauli_coordinates(superoperator_L(bloch_to_density(BlochVector(1, 0, 0)), 0.0, P)),
                               (-0.65, 0.3, 0.0), atol=1e-15)

    np.testing.assert_allclose(superoperator_G(TargetState.EXCITED.projector, P), np.zeros((2, 2)))
    np.testing.assert_allclose(pauli_coordinates(superoperator_G(0.5 * np.eye(2), P)), (0, 0, 0.6245), atol=1e-6)
    unit = PhysParams(0.0, 1.0, 1.0)
    np.testing.assert_allclose(pauli_coordinates(superoperator_G(bloch_to_density(BlochVector(0, 0, 0.5)), unit)),
                               (0, 0, 0.75), atol=1e-15)


def test_matrix_and_bloch_forms_agree():
    rng = np.random.default_rng(2024)
    points = sample_ball(2000, rng)
    for i in range(2000):
        b = BlochVector(points.x[i], points.y[i], points.z[i])
        u = rng.uniform(-10, 10)
        p = PhysParams(rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.1, 3))
        rho = bloch_to_density(b)
        rate_l, rate_g = superoperator_L(rho, u, p), superoperator_G(rho, p)
        np.testing.assert_allclose(pauli_coordinates(rate_l), drift_actual(b, u, p), atol=1e-12)
        np.testing.assert_allclose(pauli_coordinates(rate_g), diffusion_actual(b, p), atol=1e-12)
        assert abs(np.trace(rate_l)) < 1e-13
        assert abs(np.trace(rate_g)) < 1e-13


def test_fields_accept_arrays():
    b = sample_ball(5, np.random.default_rng(1))
    drift = drift_actual(b, np.linspace(0, 1, 5), P)
    assert np.shape(drift.dx) == (5,)
    noise = diffusion_estimate(b, E)
    assert np.shape(noise.dz) == (5,)
