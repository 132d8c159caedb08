"""
Error handling and logging configuration for the counterfactual bounds toolkit.
"""
import logging
import traceback
from typing import Any, Dict, List, Optional


class CounterfactualBoundsError(Exception):
    """Base class for all toolkit errors."""
    pass


class ValidationError(CounterfactualBoundsError):
    """Custom exception for validation errors."""
    pass


class UsageError(ValidationError):
    """Command-line misuse."""
    pass


class PreconditionError(ValidationError):
    """An operation was called outside its documented preconditions."""
    pass


class UnknownArmError(ValidationError):
    """Treatment arm outside {0, 1}."""
    pass


class DomainError(ValidationError):
    """Point outside the open unit square."""
    pass


class NumericalError(CounterfactualBoundsError):
    """Base class for numerical failures."""
    pass


class EmptyLevelSetError(NumericalError):
    """No level-set crossing was found on the tracing grid."""
    pass


class RootNotFoundError(NumericalError):
    """A bracketing root solve had no sign change."""
    pass


class NoConvergenceError(NumericalError):
    """Fixed-point inversion did not converge."""

    def __init__(self, message: str, residual: float = float('nan')):
        super().__init__(message)
        self.residual = residual


class EvidenceOutsideModelError(NumericalError):
    """No augmentation draw of a record could be inverted by the flow."""
    pass


class DegenerateGradientError(NumericalError):
    """Gradient too small for a level-set curvature."""
    pass


class UnsupportedPrimitiveError(NumericalError):
    """Operation not known to the autodiff engine."""
    pass


class TrainingAbortedError(NumericalError):
    """Too many failed inversions inside a monitoring window."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataFormatError(CounterfactualBoundsError):
    """Malformed dataset file."""

    def __init__(self, message: str, line_number: int = 0):
        super().__init__(f"line {line_number}: {message}" if line_number else message)
        self.line_number = line_number


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ErrorHandler:
    """Centralized logging setup and error-to-exit-code mapping."""

    _configured = False

    @staticmethod
    def init_logging(level: str = 'INFO', log_file: Optional[str] = None, force: bool = False):
        """Configure the root logger once per process."""
        if ErrorHandler._configured and not force:
            return
        handlers: List[logging.Handler] = [logging.StreamHandler()]
        if log_file:
            handlers.append(logging.FileHandler(log_file))
        logging.basicConfig(
            level=getattr(logging, str(level).upper(), logging.INFO),
            format='%(asctime)s %(levelname)s %(name)s: %(message)s',
            handlers=handlers,
            force=force,
        )
        ErrorHandler._configured = True

    @staticmethod
    def exit_code_for(error: BaseException) -> int:
        """Map an exception to the CLI exit code."""
        if isinstance(error, ValidationError):
            return EXIT_USAGE
        if isinstance(error, NumericalError):
            return EXIT_NUMERICAL
        if isinstance(error, (DataFormatError, OSError)):
            return EXIT_IO
        return 1

    @staticmethod
    def handle(error: BaseException, context: str) -> int:
        """Log an error with its context and return the exit code."""
        code = ErrorHandler.exit_code_for(error)
        logger = logging.getLogger(__name__)
        if code == 1:
            logger.error(f"Unexpected error in {context}: {error}")
            logger.error(traceback.format_exc())
        else:
            logger.error(f"{context} failed ({type(error).__name__}): {error}")
            diagnostics = getattr(error, 'diagnostics', None)
            if diagnostics:
                logger.error(f"Diagnostics: {diagnostics}")
        return code


def log_performance_metric(metric_name: str, value: float, unit: str = 'ms'):
    """Log performance metrics."""
    logging.getLogger(__name__).info(f"Performance metric: {metric_name} = {value:.3f}{unit}", extra={
        'metric_name': metric_name,
        'metric_value': value,
        'metric_unit': unit,
    })
