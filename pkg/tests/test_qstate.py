import numpy as np
import pytest

from error_handler import DomainError
from qstate import (
    BlochVector, CoupledState, TargetState, bloch_bures_distance, bloch_coupled_distance,
    bloch_fidelity, bloch_to_density, bures_distance, check_density, coupled_distance,
    density_to_bloch, fidelity, pole_pair, sample_ball,
)

RHO_E = TargetState.EXCITED.projector
RHO_G = TargetState.GROUND.projector
MIXED = 0.5 * np.eye(2)


def test_bloch_to_density_examples():
    np.testing.assert_allclose(bloch_to_density(BlochVector(0, 0, 0)), MIXED)
    np.testing.assert_allclose(RHO_E, np.diag([1.0, 0.0]))
    np.testing.assert_allclose(bloch_to_density(BlochVector(1, 0, 0)), [[0.5, 0.5], [0.5, 0.5]])


def test_density_to_bloch_examples():
    assert density_to_bloch(MIXED) == (0.0, 0.0, 0.0)
    assert density_to_bloch(RHO_E) == (0.0, 0.0, 1.0)
    np.testing.assert_allclose(density_to_bloch(bloch_to_density(BlochVector(0.3, -0.4, 0.5))),
                               (0.3, -0.4, 0.5), atol=1e-14)


def test_round_trip_on_random_points():
    rng = np.random.default_rng(7)
    points = sample_ball(1000, rng)
    for i in range(1000):
        b = BlochVector(points.x[i], points.y[i], points.z[i])
        np.testing.assert_allclose(density_to_bloch(bloch_to_density(b)), b, atol=1e-14)


def test_out_of_ball_is_rejected():
    with pytest.raises(DomainError):
        bloch_to_density(BlochVector(1.0, 1.0, 0.0))


@pytest.mark.parametrize("rho", [
    np.array([[0.5, 0.5], [0.4, 0.5]]),
    np.array([[0.6, 0.0], [0.0, 0.6]]),
    np.array([[1.5, 0.0], [0.0, -0.5]]),
])
def test_non_physical_density_is_rejected(rho):
    with pytest.raises(DomainError):
        check_density(rho)


def test_fidelity_examples():
    assert fidelity(RHO_E, RHO_E) == pytest.approx(1.0)
    assert fidelity(RHO_G, RHO_E) == pytest.approx(0.0, abs=1e-15)
    assert fidelity(MIXED, RHO_E) == pytest.approx(0.5)


def test_bures_distance_examples():
    assert bures_distance(RHO_E, RHO_E) == pytest.approx(0.0, abs=1e-7)
    assert bures_distance(RHO_G, RHO_E) == pytest.approx(np.sqrt(2))
    assert bures_distance(MIXED, RHO_E) == pytest.approx(0.765367, abs=1e-6)


def test_bures_distance_pure_state_formula():
    rng = np.random.default_rng(3)
    points = sample_ball(200, rng)
    pure = bloch_to_density(BlochVector(1.0, 0.0, 0.0))
    for i in range(200):
        rho = bloch_to_density(BlochVector(points.x[i], points.y[i], points.z[i]))
        expected = 2.0 - 2.0 * np.sqrt(np.trace(rho @ pure).real)
        assert bures_distance(rho, pure) ** 2 == pytest.approx(expected, abs=1e-12)


def test_bures_triangle_inequality():
    rng = np.random.default_rng(11)
    a, b, c = (sample_ball(1000, rng) for _ in range(3))
    ab = bloch_bures_distance(a, b)
    bc = bloch_bures_distance(b, c)
    ac = bloch_bures_distance(a, c)
    assert np.all(ac <= ab + bc + 1e-10)


def test_coupled_distance_examples():
    s = CoupledState(BlochVector(0.1, 0.2, 0.3), BlochVector(0.0, -0.5, 0.1))
    assert coupled_distance(s, s) == pytest.approx(0.0, abs=1e-7)
    target = pole_pair(TargetState.EXCITED, TargetState.EXCITED)
    assert coupled_distance(pole_pair(TargetState.GROUND, TargetState.EXCITED), target) == pytest.approx(np.sqrt(2))
    assert coupled_distance(pole_pair(TargetState.GROUND, TargetState.GROUND), target) == pytest.approx(2 * np.sqrt(2))


def test_vectorised_fidelity_matches_matrix_form():
    rng = np.random.default_rng(5)
    a, b = sample_ball(100, rng), sample_ball(100, rng)
    vectorised = bloch_fidelity(a, b)
    for i in range(100):
        rho = bloch_to_density(BlochVector(a.x[i], a.y[i], a.z[i]))
        sigma = bloch_to_density(BlochVector(b.x[i], b.y[i], b.z[i]))
        assert vectorised[i] == pytest.approx(fidelity(rho, sigma), abs=1e-12)

    s = CoupledState(a, b)
    t = pole_pair(TargetState.EXCITED, TargetState.GROUND)
    assert bloch_coupled_distance(s, t).shape == (100,)


def test_sample_ball_stays_inside():
    points = sample_ball(10_000, np.random.default_rng(0))
    assert np.all(points.norm_squared() <= 1.0 + 1e-12)


def test_target_state_properties():
    assert TargetState.EXCITED.antipode is TargetState.GROUND
    assert TargetState.GROUND.bloch == (0.0, 0.0, -1.0)
    np.testing.assert_allclose(RHO_G, np.diag([0.0, 1.0]))
