import numpy as np
import pytest

from analysis import nu_av, nu_s
from controller import FeedbackLaw, equilibria
from dynamics import EstParams, PhysParams
from ensemble import (
    BATCH_SIZE, SUMMARY_COLUMNS, convergence_study, exact_filter_mismatch, exit_time_study,
    martingale_check, reach_time_study, run_ensemble, sample_coupled_ball, uniform_initial_pairs,
)
from error_handler import DomainError, IntegrationBlowupError
from integrator import SdeConfig, simulate
from qstate import BlochVector, CoupledState, TargetState, bloch_coupled_distance

P = PhysParams(omega=0.3, eta=0.3, M=1.3)
E = EstParams(omega_hat=0.5, eta_hat=0.5, M_hat=1.5)
LAW = FeedbackLaw(alpha=10, beta=2)
GROUND_LAW = FeedbackLaw(target=TargetState.GROUND, alpha=10, beta=2)
FIG1_IC = CoupledState(BlochVector(1.0, 0.0, 0.0), BlochVector(0.0, 1.0, 0.0))


def test_single_trajectory_ensemble_matches_simulate():
    cfg = SdeConfig(t_final=1.0, seed=5)
    summary = run_ensemble(FIG1_IC, P, E, LAW, cfg, n_traj=1)
    trajectory = simulate(FIG1_IC, P, E, LAW, cfg)
    np.testing.assert_allclose(summary.mean_V, trajectory.lyapunov, rtol=1e-12)


def test_ensemble_members_match_indexed_simulations():
    cfg = SdeConfig(t_final=0.5, seed=9)
    summary = run_ensemble(FIG1_IC, P, E, LAW, cfg, n_traj=3)
    curves = [simulate(FIG1_IC, P, E, LAW, cfg, index=i).lyapunov for i in range(3)]
    np.testing.assert_allclose(summary.mean_V, np.mean(curves, axis=0), rtol=1e-12)


def test_ensemble_independent_of_thread_count():
    cfg = SdeConfig(t_final=0.2, seed=1)
    n_traj = BATCH_SIZE + 5
    serial = run_ensemble(FIG1_IC, P, E, LAW, cfg, n_traj=n_traj, threads=1)
    parallel = run_ensemble(FIG1_IC, P, E, LAW, cfg, n_traj=n_traj, threads=4)
    np.testing.assert_array_equal(serial.mean_V, parallel.mean_V)
    np.testing.assert_array_equal(serial.quantiles_V, parallel.quantiles_V)
    np.testing.assert_array_equal(serial.per_traj_exponents, parallel.per_traj_exponents)


def test_ensemble_summary_shape():
    summary = run_ensemble(FIG1_IC, P, E, LAW, SdeConfig(t_final=1.0), n_traj=8)
    frame = summary.to_frame()
    assert list(frame.columns) == SUMMARY_COLUMNS
    assert len(frame) == 101
    assert np.all(frame['q10'] <= frame['q50']) and np.all(frame['q50'] <= frame['q90'])
    assert 0.0 <= summary.convergence_fraction <= 1.0
    document = summary.to_dict()
    assert document['n_traj'] == 8
    assert len(document['per_traj_exponents']) == 8


def test_ensemble_with_no_records_to_fit():
    summary = run_ensemble(FIG1_IC, P, E, LAW, SdeConfig(t_final=0.0), n_traj=2)
    assert summary.mean_exponent is None
    assert np.all(np.isnan(summary.per_traj_exponents))


def test_ensemble_needs_trajectories():
    with pytest.raises(DomainError):
        run_ensemble(FIG1_IC, P, E, LAW, SdeConfig(t_final=0.1), n_traj=0)


def test_ensemble_where_everything_blows_up():
    law = FeedbackLaw.from_callable(lambda b: np.full_like(np.asarray(b.z, dtype=float), np.nan))
    with pytest.raises(IntegrationBlowupError):
        run_ensemble(FIG1_IC, P, E, law, SdeConfig(t_final=0.1), n_traj=3)


def test_sample_coupled_ball():
    center = equilibria(LAW)[1]
    points = sample_coupled_ball(center, 0.1, 200, np.random.default_rng(0))
    assert len(points) == 200
    for s in points:
        assert 0 < bloch_coupled_distance(s, center) < 0.1
        assert s.actual.norm_squared() <= 1.0 + 1e-12 and s.estimate.norm_squared() <= 1.0 + 1e-12


def test_sample_coupled_ball_needs_poles():
    with pytest.raises(DomainError):
        sample_coupled_ball(FIG1_IC, 0.1, 5, np.random.default_rng(0))


def test_uniform_initial_pairs():
    pairs = uniform_initial_pairs(50, seed=4)
    assert pairs == uniform_initial_pairs(50, seed=4)
    assert len(pairs) == 50
    assert all(s.actual.norm_squared() <= 1.0 + 1e-12 for s in pairs)


def test_exit_study_zero_law_from_exact_center():
    law = FeedbackLaw.zero()
    center = equilibria(law)[1]
    study = exit_time_study(0.1, P, E, law, SdeConfig(t_final=1.0), n_traj=4, initial_points=[center])
    assert study.fraction == 0.0
    assert np.isnan(study.mean_time)
    assert study.to_dict('exit_fraction', 'mean_exit_time')['mean_exit_time'] is None


def test_reach_study_from_inside_ball():
    inside = CoupledState(BlochVector(0.0, 0.0, 0.999), BlochVector(0.0, 0.0, 0.999))
    study = reach_time_study([inside], 0.2, P, E, LAW, SdeConfig(t_final=0.5), n_traj=3)
    assert study.fraction == 1.0
    assert study.mean_time == 0.0


def test_reach_study_rejects_unstable_start():
    with pytest.raises(DomainError):
        reach_time_study([equilibria(LAW)[1]], 0.2, P, E, LAW, SdeConfig(t_final=0.5), n_traj=2)


def test_exact_filter_mismatch_vanishes():
    mismatch = exact_filter_mismatch(BlochVector(1.0, 0.0, 0.0), P, LAW, SdeConfig(t_final=2.0), n_traj=10)
    assert mismatch <= 1e-10


@pytest.mark.slow
def test_exact_filter_identity_over_hundred_seeds():
    mismatch = exact_filter_mismatch(BlochVector(1.0, 0.0, 0.0), P, LAW, SdeConfig(t_final=10.0), n_traj=100)
    assert mismatch <= 1e-10


@pytest.mark.slow
def test_martingale_without_control():
    cfg = SdeConfig(dt=1e-3, t_final=1.0, record_stride=1000)
    start = CoupledState(BlochVector(1.0, 0.0, 0.0), BlochVector(1.0, 0.0, 0.0))
    result = martingale_check(start, P, E, cfg, n_traj=10_000, threads=4)
    assert result.passed
    assert result.z0 == 0.0


@pytest.mark.slow
def test_fig1_ensemble_decays_at_the_sample_rate():
    cfg = SdeConfig(dt=1e-3, t_final=10.0, record_stride=10, seed=0)
    summary = run_ensemble(FIG1_IC, P, E, LAW, cfg, n_traj=200, threads=4)
    median_terminal = summary.quantiles_V[1][-1]
    assert median_terminal <= 2.0 * np.exp(10.0 * (nu_s(P, E) + 0.1))
    assert summary.mean_exponent.slope <= nu_av(P, E) + 0.1
    finite = summary.per_traj_exponents[np.isfinite(summary.per_traj_exponents)]
    assert np.median(finite) <= nu_s(P, E) + 0.1


@pytest.mark.slow
@pytest.mark.parametrize("law", [LAW, GROUND_LAW], ids=["excited", "ground"])
def test_ensemble_settles_by_forty(law):
    cfg = SdeConfig(dt=1e-3, t_final=40.0, record_stride=100, seed=0)
    summary = run_ensemble(FIG1_IC, P, E, law, cfg, n_traj=200, threads=4)
    assert summary.lyapunov_fraction >= 0.95
    assert summary.convergence_fraction >= 0.95


@pytest.mark.slow
def test_exit_study_leaves_unstable_equilibrium():
    cfg = SdeConfig(dt=1e-3, t_final=50.0, record_stride=10, seed=0)
    study = exit_time_study(0.1, P, E, LAW, cfg, n_traj=500, threads=4)
    assert study.fraction == 1.0


@pytest.mark.slow
def test_exit_time_does_not_grow_for_smaller_balls():
    # start gap and exit threshold both scale like radius**2
    cfg = SdeConfig(dt=1e-3, t_final=50.0, record_stride=10, seed=0)
    wide = exit_time_study(0.1, P, E, LAW, cfg, n_traj=100, threads=4)
    narrow = exit_time_study(0.01, P, E, LAW, cfg, n_traj=100, threads=4)
    assert wide.fraction == 1.0 and narrow.fraction == 1.0
    assert narrow.mean_time == pytest.approx(wide.mean_time, rel=0.5)


@pytest.mark.slow
def test_reach_study_from_random_starts():
    cfg = SdeConfig(dt=1e-3, t_final=30.0, record_stride=10, seed=0)
    starts = uniform_initial_pairs(50, seed=0)
    study = reach_time_study(starts, 0.2, P, E, LAW, cfg, n_traj=200, threads=4)
    assert study.fraction >= 0.99


@pytest.mark.slow
def test_convergence_study_on_matched_paths():
    cfg = SdeConfig(dt=4e-3, t_final=2.0, seed=0)
    study = convergence_study(FIG1_IC, P, E, LAW, cfg, n_traj=200, levels=3)
    assert study.dts == [4e-3, 2e-3, 1e-3]
    # strong order 1/2: each halving shrinks the gap by about 1/sqrt(2)
    ratio = study.mean_terminal_gap[1] / study.mean_terminal_gap[0]
    assert 0.4 <= ratio <= 0.9
