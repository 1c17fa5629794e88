"""
Command line front end for SpinStab
Scenario files, the simulate/ensemble/exponent/exit-time/reach-time/check
subcommands and CSV/JSON emission for external plotting
"""
import argparse
import json
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import database as db
from analysis import (
    estimate_sample_exponent, generator_V_closed, generator_V_numeric, growth_rate_limit,
    lyapunov_ratio, norm_equivalence_envelope, nu_av, reference_exponents,
)
from controller import (
    FeedbackLaw, LawKind, validate_hypothesis_H, validate_param_condition,
)
from dynamics import (
    EstParams, PhysParams, diffusion_actual, drift_actual, superoperator_G, superoperator_L,
)
from ensemble import (
    exact_filter_mismatch, exit_time_study, martingale_check, reach_time_study, run_ensemble,
    uniform_initial_pairs,
)
from error_handler import (
    ConfigError, DomainError, EstimationError, IntegrationBlowupError, configure_logging,
    log_run_action, safe_execute, validate_parameter_values, validate_sde_values,
)
from integrator import MAX_SEED, Projection, SdeConfig, simulate
from qstate import (
    BlochVector, CoupledState, TargetState, bloch_to_density, pauli_coordinates, sample_ball,
)

logger = logging.getLogger(__name__)

SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"
DEFAULT_SCENARIO = SCENARIO_DIR / "fig1.json"
FLOAT_FORMAT = '%.17g'

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_ESTIMATION = 4

REQUIRED_KEYS = ('omega', 'eta', 'M', 'omega_hat', 'eta_hat', 'M_hat', 'ic', 'ic_hat')
DEFAULTS = {
    'target': 'excited',
    'law': 'power',
    'alpha': 10.0,
    'beta': 2.0,
    'dt': 1e-3,
    't_final': 10.0,
    'record_stride': 10,
    'seed': 0,
    'n_traj': 10,
    'projection': 'radial_clip',
    'threshold': 0.05,
    'radius': 0.1,
    'reach_radius': 0.2,
    'reach_initial': 'scenario',
    'window': None,
    'check_martingale_traj': 10_000,
}


@dataclass(frozen=True)
class Scenario:
    phys: PhysParams
    est: EstParams
    law: FeedbackLaw
    ic: CoupledState
    sde: SdeConfig
    n_traj: int
    threshold: float
    radius: float
    reach_radius: float
    reach_initial: object
    window: Optional[Tuple[float, float]]
    check_martingale_traj: int
    resolved: Dict

    def to_dict(self) -> dict:
        return dict(self.resolved)


def _number(data, key, integer=False):
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer:
        if float(value) != int(value):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _vector(data, key) -> BlochVector:
    value = data[key]
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(key, "expected a list of three numbers")
    coords = []
    for i, c in enumerate(value):
        if isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c):
            raise ConfigError(key, f"entry {i} is not a finite number")
        coords.append(float(c))
    if sum(c * c for c in coords) > 1.0 + 1e-12:
        raise ConfigError(key, "Bloch vector lies outside the unit ball")
    return BlochVector(*coords)


def _choice(data, key, options):
    value = data[key]
    if value not in options:
        raise ConfigError(key, f"expected one of {sorted(options)}, got {value!r}")
    return value


def _check_param(data, key):
    value = _number(data, key)
    base = key[:-4] if key.endswith('_hat') else key
    label = '_hat' if key.endswith('_hat') else ''
    is_valid, errors, _ = validate_parameter_values(**{base: value}, label=label)
    if not is_valid:
        raise ConfigError(key, errors[0])
    return value


def scenario_from_dict(data: dict) -> Scenario:
    """Resolve a scenario document, filling defaults; ConfigError names the offending key"""
    if not isinstance(data, dict):
        raise ConfigError('scenario', "expected a JSON object")
    for key in REQUIRED_KEYS:
        if key not in data:
            raise ConfigError(key, "missing required key")
    unknown = sorted(set(data) - set(REQUIRED_KEYS) - set(DEFAULTS))
    if unknown:
        logger.warning(f"Ignoring unknown scenario keys: {unknown}")

    resolved = {key: data.get(key, default) for key, default in DEFAULTS.items()}
    resolved.update({key: data[key] for key in REQUIRED_KEYS})

    phys = PhysParams(*(_check_param(resolved, k) for k in ('omega', 'eta', 'M')))
    est = EstParams(*(_check_param(resolved, k) for k in ('omega_hat', 'eta_hat', 'M_hat')))
    ic = CoupledState(_vector(resolved, 'ic'), _vector(resolved, 'ic_hat'))

    target = TargetState(_choice(resolved, 'target', {'excited', 'ground'}))
    kind = LawKind(_choice(resolved, 'law', {'power', 'zero'}))
    alpha, beta = _number(resolved, 'alpha'), _number(resolved, 'beta')
    if kind is LawKind.POWER:
        if alpha <= 0:
            raise ConfigError('alpha', "must be positive")
        if beta < 1:
            raise ConfigError('beta', "must be at least 1")
    law = FeedbackLaw(target=target, alpha=alpha, beta=beta, kind=kind)

    dt, t_final = _number(resolved, 'dt'), _number(resolved, 't_final')
    stride, seed = _number(resolved, 'record_stride', integer=True), _number(resolved, 'seed', integer=True)
    is_valid, errors, _ = validate_sde_values(dt, t_final, stride)
    if not is_valid:
        raise ConfigError('dt/t_final/record_stride', "; ".join(errors))
    if not 0 <= seed < MAX_SEED:
        raise ConfigError('seed', "must be an unsigned 64-bit integer")
    projection = Projection(_choice(resolved, 'projection', {'radial_clip', 'none'}))
    sde = SdeConfig(dt=dt, t_final=t_final, record_stride=stride, seed=seed, projection=projection)

    n_traj = _number(resolved, 'n_traj', integer=True)
    if n_traj < 1:
        raise ConfigError('n_traj', "must be at least 1")
    window = resolved['window']
    if window is not None:
        if not isinstance(window, (list, tuple)) or len(window) != 2:
            raise ConfigError('window', "expected [t_start, t_end]")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in window):
            raise ConfigError('window', "bounds must be finite numbers")
        window = (float(window[0]), float(window[1]))
        if not window[0] < window[1]:
            raise ConfigError('window', "t_start must be smaller than t_end")
    reach_initial = resolved['reach_initial']
    if reach_initial != 'scenario':
        if reach_initial != 'uniform':
            reach_initial = _number(resolved, 'reach_initial', integer=True)
            if reach_initial < 1:
                raise ConfigError('reach_initial', "expected 'scenario', 'uniform' or a positive count")

    scenario = Scenario(
        phys=phys, est=est, law=law, ic=ic, sde=sde, n_traj=n_traj,
        threshold=_number(resolved, 'threshold'),
        radius=_number(resolved, 'radius'),
        reach_radius=_number(resolved, 'reach_radius'),
        reach_initial=reach_initial,
        window=window,
        check_martingale_traj=_number(resolved, 'check_martingale_traj', integer=True),
        resolved=resolved,
    )

    condition = validate_param_condition(phys, est)
    if not condition.ok:
        logger.warning(f"eta_hat M_hat >= 4 eta M (margin {condition.margin:.4g}); stabilization is not guaranteed")
    return scenario


def load_scenario(path, overrides: Optional[dict] = None) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError('config', f"file {path} not found")
    except json.JSONDecodeError as e:
        raise ConfigError('config', f"invalid JSON in {path}: {e}")
    if isinstance(data, dict) and overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    scenario = scenario_from_dict(data)
    logger.info(f"Loaded scenario {path.name} with {scenario.law.label}")
    return scenario


def _json_ready(value):
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_json_ready(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    return value


def write_csv(frame: pd.DataFrame, out=None):
    """Locale-independent CSV with 17 significant digits"""
    target = out if out is not None else sys.stdout
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')


def write_json(document: dict, out=None):
    text = json.dumps(_json_ready(document), indent=2, sort_keys=True)
    if out is None:
        sys.stdout.write(text + "\n")
    else:
        Path(out).write_text(text + "\n")


def _run_header(scenario: Scenario) -> dict:
    return {'scenario': scenario.to_dict(), 'seed': scenario.sde.seed}


def cmd_simulate(scenario: Scenario, out=None, threads: int = 1) -> Tuple[int, dict]:
    if not validate_hypothesis_H(scenario.law).ok:
        logger.warning("Simulating with a law that violates hypothesis H")
    trajectory = simulate(scenario.ic, scenario.phys, scenario.est, scenario.law, scenario.sde)
    write_csv(trajectory.to_frame(), out)
    return EXIT_OK, {'terminal_V': float(trajectory.lyapunov[-1]), 'n_records': len(trajectory)}


def _ensemble(scenario: Scenario, threads: int):
    return run_ensemble(scenario.ic, scenario.phys, scenario.est, scenario.law, scenario.sde,
                        scenario.n_traj, threads=threads, threshold=scenario.threshold,
                        window=scenario.window)


def cmd_ensemble(scenario: Scenario, out=None, threads: int = 1) -> Tuple[int, dict]:
    """Summary CSV at `out`, JSON next to it with a .json suffix

    An `out` ending in .json names the JSON; the CSV then takes a .csv suffix.
    """
    summary = _ensemble(scenario, threads)
    document = {
        **_run_header(scenario),
        'summary': summary.to_dict(),
        'exponents': reference_exponents(scenario.phys, scenario.est),
        'param_condition': vars(validate_param_condition(scenario.phys, scenario.est)),
    }
    if out is None:
        write_csv(summary.to_frame())
        write_json(document)
    else:
        out = Path(out)
        csv_out = out.with_suffix('.csv') if out.suffix == '.json' else out
        write_csv(summary.to_frame(), csv_out)
        write_json(document, out.with_suffix('.json'))
    return EXIT_OK, document['summary']


def cmd_exponent(scenario: Scenario, out=None, threads: int = 1,
                 window: Optional[Tuple[float, float]] = None,
                 synthetic_rate: Optional[float] = None) -> Tuple[int, dict]:
    """
    Exponent fits against nu_av and nu_s

    With synthetic_rate the ensemble is replaced by V(t) = exp(-rate t) on
    the scenario's record grid.
    """
    window = window or scenario.window
    exponents = reference_exponents(scenario.phys, scenario.est)
    if synthetic_rate is not None:
        times = scenario.sde.times
        mean_report = estimate_sample_exponent((times, np.exp(-synthetic_rate * times)), window)
        median_slope = mean_report.slope
    else:
        summary = _ensemble(scenario, threads)
        mean_report = estimate_sample_exponent((summary.times, summary.mean_V), window)
        finite = summary.per_traj_exponents[np.isfinite(summary.per_traj_exponents)]
        median_slope = float(np.median(finite)) if len(finite) else float("nan")

    document = {
        **_run_header(scenario),
        'synthetic_rate': synthetic_rate,
        'mean_curve': mean_report.to_dict(),
        'median_per_traj_slope': median_slope,
        'exponents': exponents,
        'mean_curve_within_nu_av': mean_report.slope <= exponents['nu_av'] + 0.1,
        'median_within_nu_s': bool(median_slope <= exponents['nu_s'] + 0.1),
    }
    write_json(document, out)
    return EXIT_OK, document['mean_curve']


def cmd_exit_time(scenario: Scenario, out=None, threads: int = 1,
                  radius: Optional[float] = None) -> Tuple[int, dict]:
    radius = radius if radius is not None else scenario.radius
    study = exit_time_study(radius, scenario.phys, scenario.est, scenario.law, scenario.sde,
                            scenario.n_traj, threads=threads)
    result = study.to_dict('exit_fraction', 'mean_exit_time')
    write_json({**_run_header(scenario), 'study': result}, out)
    return EXIT_OK, result


def _reach_initial_points(scenario: Scenario) -> List[CoupledState]:
    if scenario.reach_initial == 'scenario':
        return [scenario.ic]
    count = scenario.n_traj if scenario.reach_initial == 'uniform' else scenario.reach_initial
    return uniform_initial_pairs(count, scenario.sde.seed)


def cmd_reach_time(scenario: Scenario, out=None, threads: int = 1,
                   radius: Optional[float] = None) -> Tuple[int, dict]:
    radius = radius if radius is not None else scenario.reach_radius
    study = reach_time_study(_reach_initial_points(scenario), radius, scenario.phys, scenario.est,
                             scenario.law, scenario.sde, scenario.n_traj, threads=threads)
    result = study.to_dict('reach_fraction', 'mean_tau_r')
    write_json({**_run_header(scenario), 'study': result}, out)
    return EXIT_OK, result


def _random_admissible_params(rng: np.random.Generator, n: int) -> List[Tuple[PhysParams, EstParams]]:
    draws = []
    while len(draws) < n:
        p = PhysParams(rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.1, 3))
        e = EstParams(rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.1, 3))
        if validate_param_condition(p, e).ok:
            draws.append((p, e))
    return draws


def _interior_points(rng: np.random.Generator, n: int) -> CoupledState:
    return CoupledState(sample_ball(n, rng), sample_ball(n, rng))


def _check_failure(name, error):
    return {'passed': False, 'detail': f"error: {error}"}


@safe_execute(fallback_return=_check_failure)
def check_generator_equality(scenario: Scenario, seed: int = 0) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    params = [(scenario.phys, scenario.est)] + _random_admissible_params(rng, 9)
    worst = 0.0
    for p, e in params:
        states = _interior_points(rng, 1000)
        u = rng.uniform(-10, 10, 1000)
        closed = generator_V_closed(states, u, p, e, scenario.law.target)
        numeric = generator_V_numeric(states, u, p, e, scenario.law.target)
        worst = max(worst, float(np.max(np.abs(closed - numeric))))
    return {'passed': worst < 1e-9, 'detail': {'max_abs_difference': worst}}


@safe_execute(fallback_return=_check_failure)
def check_matrix_bloch(scenario: Scenario, seed: int = 1, n: int = 10_000) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    points = sample_ball(n, rng)
    worst_drift = worst_noise = worst_trace = 0.0
    for i in range(n):
        b = BlochVector(float(points.x[i]), float(points.y[i]), float(points.z[i]))
        u = rng.uniform(-10, 10)
        p = PhysParams(rng.uniform(0, 1), rng.uniform(0.05, 1), rng.uniform(0.1, 3))
        rho = bloch_to_density(b)
        rate_l, rate_g = superoperator_L(rho, u, p), superoperator_G(rho, p)
        worst_drift = max(worst_drift, float(np.max(np.abs(np.subtract(pauli_coordinates(rate_l), drift_actual(b, u, p))))))
        worst_noise = max(worst_noise, float(np.max(np.abs(np.subtract(pauli_coordinates(rate_g), diffusion_actual(b, p))))))
        worst_trace = max(worst_trace, abs(np.trace(rate_l)), abs(np.trace(rate_g)))
    passed = worst_drift < 1e-12 and worst_noise < 1e-12 and worst_trace < 1e-13
    return {'passed': passed, 'detail': {'drift': worst_drift, 'diffusion': worst_noise, 'trace': worst_trace}}


@safe_execute(fallback_return=_check_failure)
def check_martingale(scenario: Scenario, threads: int = 1) -> dict:
    cfg = replace(scenario.sde, t_final=1.0, dt=1e-3, record_stride=1000)
    start = CoupledState(BlochVector(1.0, 0.0, 0.0), BlochVector(1.0, 0.0, 0.0))
    result = martingale_check(start, scenario.phys, scenario.est, cfg, scenario.check_martingale_traj, threads)
    return {'passed': result.passed, 'detail': vars(result)}


@safe_execute(fallback_return=_check_failure)
def check_exact_filter(scenario: Scenario, threads: int = 1) -> dict:
    cfg = replace(scenario.sde, t_final=10.0)
    mismatch = exact_filter_mismatch(scenario.ic.actual, scenario.phys, scenario.law, cfg, 100, threads)
    return {'passed': mismatch <= 1e-10, 'detail': {'max_mismatch': mismatch}}


@safe_execute(fallback_return=_check_failure)
def check_hypothesis_H(scenario: Scenario) -> dict:
    report = validate_hypothesis_H(scenario.law)
    return {'passed': report.ok, 'detail': vars(report)}


@safe_execute(fallback_return=_check_failure)
def check_param_condition(scenario: Scenario) -> dict:
    report = validate_param_condition(scenario.phys, scenario.est)
    return {'passed': report.ok, 'detail': vars(report)}


@safe_execute(fallback_return=_check_failure)
def check_nu_av_negative(scenario: Scenario, seed: int = 2) -> dict:
    rng = np.random.Generator(np.random.Philox(seed))
    largest = max(nu_av(p, e) for p, e in _random_admissible_params(rng, 1000))
    return {'passed': largest < 0, 'detail': {'largest_nu_av': largest}}


@safe_execute(fallback_return=_check_failure)
def check_growth_rate_limit(scenario: Scenario, gap: float = 1e-6, ratio: float = 1e-8) -> dict:
    """U2 / V approaches its limsup along paths where one pole gap dominates"""
    p, e, target = scenario.phys, scenario.est, scenario.law.target
    sign = target.z
    ratios = []
    for gap_actual, gap_estimate in ((gap, gap * ratio), (gap * ratio, gap)):
        s = CoupledState(BlochVector(0.0, 0.0, sign * (1.0 - gap_actual)),
                         BlochVector(0.0, 0.0, sign * (1.0 - gap_estimate)))
        ratios.append(lyapunov_ratio(s, p, e, target))
    limit = growth_rate_limit(p, e)
    observed = max(ratios)
    return {'passed': abs(observed - limit) < 1e-3, 'detail': {'observed': observed, 'limit': limit}}


@safe_execute(fallback_return=_check_failure)
def check_norm_equivalence(scenario: Scenario) -> dict:
    c1, c2 = norm_equivalence_envelope(100_000, seed=3, target=scenario.law.target)
    return {'passed': 0 < c1 <= c2 < np.inf, 'detail': {'c1': c1, 'c2': c2}}


def run_checks(scenario: Scenario, threads: int = 1) -> Dict[str, dict]:
    return {
        'generator_equality': check_generator_equality(scenario),
        'matrix_bloch_consistency': check_matrix_bloch(scenario),
        'martingale': check_martingale(scenario, threads),
        'exact_filter': check_exact_filter(scenario, threads),
        'hypothesis_H': check_hypothesis_H(scenario),
        'param_condition': check_param_condition(scenario),
        'nu_av_negative': check_nu_av_negative(scenario),
        'growth_rate_limit': check_growth_rate_limit(scenario),
        'norm_equivalence': check_norm_equivalence(scenario),
    }


def cmd_check(scenario: Scenario, out=None, threads: int = 1) -> Tuple[int, dict]:
    results = run_checks(scenario, threads)
    failed = [name for name, result in results.items() if not result['passed']]
    if failed:
        logger.error(f"Failed checks: {failed}")
    write_json({**_run_header(scenario), 'checks': results, 'failed': failed}, out)
    return (EXIT_CHECK_FAILED if failed else EXIT_OK), {'failed': failed}


COMMANDS = {
    'simulate': cmd_simulate,
    'ensemble': cmd_ensemble,
    'exponent': cmd_exponent,
    'exit-time': cmd_exit_time,
    'reach-time': cmd_reach_time,
    'check': cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=str(DEFAULT_SCENARIO), help="scenario JSON file")
    common.add_argument('--out', default=None, help="output file (stdout when omitted)")
    common.add_argument('--seed', type=int, default=None, help="master seed, overrides the scenario")
    common.add_argument('--threads', type=int, default=1, help="worker threads for ensembles")
    common.add_argument('--n-traj', type=int, default=None, dest='n_traj')
    common.add_argument('--t-final', type=float, default=None, dest='t_final')
    common.add_argument('--log-level', default='INFO')
    common.add_argument('--log-file', default=None)
    common.add_argument('--archive', default=None, help="SQLite file recording every run")

    parser = argparse.ArgumentParser(prog='spinstab', description="Coupled qubit filter feedback simulator")
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('simulate', parents=[common], help="single trajectory CSV")
    commands.add_parser('ensemble', parents=[common], help="mean Lyapunov curve CSV + JSON summary")
    exponent = commands.add_parser('exponent', parents=[common], help="exponent fits against nu_av and nu_s")
    exponent.add_argument('--window', type=float, nargs=2, default=None, metavar=('T_START', 'T_END'))
    exponent.add_argument('--synthetic-rate', type=float, default=None, dest='synthetic_rate')
    exit_time = commands.add_parser('exit-time', parents=[common], help="exit study around (antipode, target)")
    exit_time.add_argument('--radius', type=float, default=None)
    reach_time = commands.add_parser('reach-time', parents=[common], help="hitting study of the target ball")
    reach_time.add_argument('--radius', type=float, default=None)
    commands.add_parser('check', parents=[common], help="invariant battery, exit 1 on failure")
    return parser


def _archive(args, scenario, status, summary):
    if not args.archive or scenario is None:
        return
    run_id = db.record_run(args.archive, args.command, scenario.to_dict(), scenario.sde.seed,
                           status=status, summary=_json_ready(summary), n_traj=scenario.n_traj)
    if run_id is not None:
        logger.info(f"Archived run {run_id} in {args.archive}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_file)
    log_run_action(args.command, {'config': args.config, 'seed': args.seed, 'threads': args.threads})

    scenario = None
    try:
        overrides = {'seed': args.seed, 'n_traj': args.n_traj, 't_final': args.t_final}
        scenario = load_scenario(args.config, overrides)
        extra = {}
        if args.command == 'exponent':
            extra = {'window': tuple(args.window) if args.window else None, 'synthetic_rate': args.synthetic_rate}
        elif args.command in ('exit-time', 'reach-time'):
            extra = {'radius': args.radius}
        code, summary = COMMANDS[args.command](scenario, args.out, args.threads, **extra)
        _archive(args, scenario, 'ok' if code == EXIT_OK else 'failed', summary)
        return code
    except (ConfigError, DomainError) as e:
        logger.error(f"Invalid configuration: {e}")
        _archive(args, scenario, 'config_error', {'error': str(e)})
        return EXIT_CONFIG
    except IntegrationBlowupError as e:
        logger.error(str(e))
        _archive(args, scenario, 'blowup', {'error': str(e)})
        return EXIT_BLOWUP
    except EstimationError as e:
        logger.error(f"Exponent estimation failed: {e}")
        _archive(args, scenario, 'estimation_error', {'error': str(e)})
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
