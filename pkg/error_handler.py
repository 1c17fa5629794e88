"""
Error handling and logging system for SpinStab
Exception hierarchy, logging setup and graceful recovery for simulation runs
"""

import logging
import math
import traceback
from functools import wraps
from datetime import datetime
from typing import List, Optional, Tuple

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(level="INFO", log_file: Optional[str] = None):
    """
    Configure root logging for a CLI run
    Always logs to stderr, additionally to log_file when given
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )


class SpinStabError(Exception):
    """Base class for all SpinStab errors"""


class DomainError(SpinStabError, ValueError):
    """Input outside the mathematical domain of an operation"""


class ConfigError(SpinStabError):
    """Invalid scenario or command line configuration"""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class IntegrationBlowupError(SpinStabError):
    """Non-finite state produced by the stepping kernel"""

    def __init__(self, step_index, time=None):
        self.step_index = step_index
        self.time = time
        where = f"step {step_index}"
        if time is not None:
            where += f" (t={time:.6g})"
        super().__init__(f"Integration blew up at {where}")


class EstimationError(SpinStabError):
    """Not enough usable samples for a least-squares fit"""


def safe_execute(fallback_return=None, log_errors=True):
    """
    Decorator for safe function execution with error handling
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except Exception as e:
                if log_errors:
                    logger.error(f"Error in {func.__name__}: {str(e)}")
                    logger.debug(f"Traceback: {traceback.format_exc()}")
                if callable(fallback_return):
                    return fallback_return(func.__name__, e)
                return fallback_return
        return wrapper
    return decorator


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def validate_parameter_values(omega=None, eta=None, M=None, label="") -> Tuple[bool, List[str], List[str]]:
    """
    Validate a (omega, eta, M) parameter triple
    Returns: (is_valid, errors, warnings)
    """
    errors = []
    warnings = []

    for name, value in (('omega', omega), ('eta', eta), ('M', M)):
        if value is not None and not _is_number(value):
            errors.append(f"{name}{label} must be a finite number")

    if errors:
        return False, errors, warnings

    if omega is not None and omega < 0:
        errors.append(f"omega{label} cannot be negative")
    if eta is not None and not 0 < eta <= 1:
        errors.append(f"eta{label} must lie in (0, 1]")
    if M is not None and M <= 0:
        errors.append(f"M{label} must be positive")

    if M is not None and M > 100:
        warnings.append(f"M{label} is very large, consider reducing dt")

    return len(errors) == 0, errors, warnings


def validate_sde_values(dt=None, t_final=None, record_stride=None) -> Tuple[bool, List[str], List[str]]:
    """
    Validate stepping parameters
    Returns: (is_valid, errors, warnings)
    """
    errors = []
    warnings = []

    if dt is not None and (not _is_number(dt) or dt <= 0):
        errors.append("dt must be a positive number")
    if t_final is not None and (not _is_number(t_final) or t_final < 0):
        errors.append("t_final cannot be negative")
    if record_stride is not None and (not isinstance(record_stride, int) or isinstance(record_stride, bool)
                                      or record_stride < 1):
        errors.append("record_stride must be an integer >= 1")

    if not errors and dt is not None and t_final is not None and t_final > 0 and dt > t_final:
        errors.append("dt cannot exceed t_final")
    if not errors and dt is not None and dt > 1e-2:
        warnings.append(f"dt={dt} is coarse, values up to 1e-2 are recommended")

    return len(errors) == 0, errors, warnings


def log_run_action(action, details=None):
    """Log CLI actions for debugging and reproducibility"""
    log_entry = {
        'timestamp': datetime.now().isoformat(),
        'action': action,
        'details': details
    }
    logger.info(f"Run Action: {log_entry}")
