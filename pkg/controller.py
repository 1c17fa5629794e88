"""
Feedback laws for SpinStab
Controller evaluation, hypothesis H validation and the admissible parameter domain
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np

from dynamics import EstParams, PhysParams
from error_handler import DomainError
from qstate import ArrayOrFloat, BlochVector, CoupledState, TargetState, pole_pair

logger = logging.getLogger(__name__)

GROWTH_SAMPLES = 10_000
# Distances (1 -/+ z_hat)/2 to the target probed by the growth-bound fit
GROWTH_DISTANCE_RANGE = (1e-8, 1e-2)


class LawKind(Enum):
    POWER = "power"
    ZERO = "zero"
    CUSTOM = "custom"


@dataclass(frozen=True)
class FeedbackLaw:
    """
    Controller u(rho_hat) evaluated on the filter estimate

    POWER laws are alpha (1 - Tr(rho_hat rho_target))^beta. CUSTOM laws
    call `custom` with a BlochVector whose fields may be arrays and must
    return a value of the same shape.
    """
    target: TargetState = TargetState.EXCITED
    alpha: float = 10.0
    beta: float = 2.0
    kind: LawKind = LawKind.POWER
    tag: str = ""
    custom: Optional[Callable[[BlochVector], ArrayOrFloat]] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind is LawKind.POWER:
            if not self.alpha > 0:
                raise DomainError(f"alpha must be positive, got {self.alpha}")
            if not self.beta >= 1:
                raise DomainError(f"beta must be at least 1, got {self.beta}")
        if self.kind is LawKind.CUSTOM and self.custom is None:
            raise DomainError("custom feedback law needs a callable")

    @classmethod
    def zero(cls, target: TargetState = TargetState.EXCITED) -> "FeedbackLaw":
        return cls(target=target, kind=LawKind.ZERO)

    @classmethod
    def from_callable(cls, func, target: TargetState = TargetState.EXCITED, tag="custom") -> "FeedbackLaw":
        return cls(target=target, kind=LawKind.CUSTOM, tag=tag, custom=func)

    @property
    def label(self) -> str:
        if self.kind is LawKind.POWER:
            return f"power(alpha={self.alpha:g}, beta={self.beta:g}, target={self.target.value})"
        if self.kind is LawKind.CUSTOM:
            return f"custom({self.tag})"
        return "zero"


def target_distance(z_hat: ArrayOrFloat, target: TargetState) -> ArrayOrFloat:
    """1 - Tr(rho_hat rho_target) in Bloch form: (1 - z_hat)/2 or (1 + z_hat)/2"""
    return 0.5 * (1.0 - target.z * z_hat)


def feedback_u(law: FeedbackLaw, b_hat: BlochVector) -> ArrayOrFloat:
    if law.kind is LawKind.ZERO:
        return np.zeros_like(b_hat[2], dtype=float) if isinstance(b_hat[2], np.ndarray) else 0.0
    if law.kind is LawKind.CUSTOM:
        return law.custom(BlochVector(*b_hat))
    distance = np.maximum(target_distance(b_hat[2], law.target), 0.0)
    return law.alpha * distance ** law.beta


def equilibria(law: FeedbackLaw) -> Tuple[CoupledState, CoupledState]:
    """Stable (target, target) and unstable (antipode, target) equilibria under H"""
    return (pole_pair(law.target, law.target), pole_pair(law.target.antipode, law.target))


@dataclass
class HypothesisReport:
    ok: bool
    c: float
    alpha_exp: float
    violations: List[str] = field(default_factory=list)


def _near_target_points(target: TargetState, rng: np.random.Generator, n: int) -> Tuple[BlochVector, np.ndarray]:
    low, high = np.log(GROWTH_DISTANCE_RANGE[0]), np.log(GROWTH_DISTANCE_RANGE[1])
    distance = np.exp(rng.uniform(low, high, n))
    z_hat = target.z * (1.0 - 2.0 * distance)
    radius = np.sqrt(np.maximum(1.0 - z_hat * z_hat, 0.0)) * np.sqrt(rng.random(n))
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    return BlochVector(radius * np.cos(phase), radius * np.sin(phase), z_hat), distance


def _fit_growth_exponent(distance: np.ndarray, magnitude: np.ndarray) -> Tuple[float, float]:
    """Exponent and constant of the upper envelope |u| <= c d^a over log-spaced bins"""
    edges = np.logspace(np.log10(GROWTH_DISTANCE_RANGE[0]), np.log10(GROWTH_DISTANCE_RANGE[1]), 13)
    centers, envelope = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (distance >= lo) & (distance < hi)
        if np.any(in_bin) and np.max(magnitude[in_bin]) > 0:
            centers.append(hi)
            envelope.append(np.max(magnitude[in_bin]))
    if len(centers) < 2:
        # identically zero near the target
        return float("inf"), 0.0
    exponent = float(np.polyfit(np.log(centers), np.log(envelope), 1)[0])
    c = float(np.max(magnitude / distance ** exponent))
    return exponent, c


def validate_hypothesis_H(law: FeedbackLaw, seed: int = 0) -> HypothesisReport:
    """
    Check u(target) = 0, u(antipode) != 0 and the growth bound
    |u| <= c (1 - Tr(rho_hat rho_target))^a with a > 1/2
    """
    violations = []
    at_target = float(feedback_u(law, law.target.bloch))
    at_antipode = float(feedback_u(law, law.target.antipode.bloch))
    if at_target != 0.0:
        violations.append(f"u(target) = {at_target:g} must vanish")
    if not np.isfinite(at_antipode):
        violations.append(f"u(antipode) = {at_antipode:g} is not finite")
    elif at_antipode == 0.0:
        violations.append("u(antipode) = 0 leaves both poles as equilibria")

    if law.kind is LawKind.POWER:
        c, exponent = law.alpha, law.beta
    elif law.kind is LawKind.ZERO:
        c, exponent = 0.0, float("inf")
    else:
        rng = np.random.Generator(np.random.Philox(seed))
        points, distance = _near_target_points(law.target, rng, GROWTH_SAMPLES)
        magnitude = np.abs(np.asarray(feedback_u(law, points), dtype=float))
        if not np.all(np.isfinite(magnitude)):
            violations.append("u is not finite near the target")
            return HypothesisReport(False, float("nan"), float("nan"), violations)
        exponent, c = _fit_growth_exponent(distance, magnitude)

    if not exponent > 0.5:
        violations.append(f"growth exponent {exponent:.4g} does not exceed 1/2")

    report = HypothesisReport(ok=not violations, c=c, alpha_exp=exponent, violations=violations)
    if not report.ok:
        logger.warning(f"Hypothesis H fails for {law.label}: {violations}")
    return report


@dataclass
class ParamConditionReport:
    ok: bool
    margin: float


def validate_param_condition(p: PhysParams, e: EstParams) -> ParamConditionReport:
    """eta_hat M_hat < 4 eta M; margin = 4 eta M - eta_hat M_hat"""
    margin = 4.0 * p.eta * p.M - e.eta_hat * e.M_hat
    return ParamConditionReport(ok=margin > 0, margin=margin)
