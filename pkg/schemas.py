"""
Validation of command-line argument strings and of the JSON documents the commands write.
"""
import math
import re
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from error_handling import UsageError

GRID_PATTERN = re.compile(r'^\s*(-?[\d.eE+-]+)\s*:\s*(-?[\d.eE+-]+)\s*:\s*(\d+)\s*$')
MAX_GRID_POINTS = 100_000


class FormatValidator:
    """Field-level checks shared by the document validators."""

    @staticmethod
    def validate_number(value: Any) -> bool:
        """Finite real number (bools excluded)."""
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        return math.isfinite(value)

    @staticmethod
    def validate_arm(value: Any) -> bool:
        return not isinstance(value, bool) and value in (0, 1)

    @staticmethod
    def validate_number_list(values: Any, min_length: int = 1) -> bool:
        if not isinstance(values, list) or len(values) < min_length:
            return False
        return all(FormatValidator.validate_number(v) for v in values)

    @staticmethod
    def validate_interval(values: Any) -> bool:
        return (FormatValidator.validate_number_list(values, 2) and len(values) == 2
                and values[0] <= values[1])


def parse_grid(text: str) -> np.ndarray:
    """Parse 'lo:hi:n' into n evenly spaced values."""
    match = GRID_PATTERN.match(str(text))
    if not match:
        raise UsageError(f"grid must look like 'lo:hi:n', got '{text}'")
    try:
        lo, hi, n = float(match.group(1)), float(match.group(2)), int(match.group(3))
    except ValueError:
        raise UsageError(f"grid '{text}' has non-numeric bounds")
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise UsageError(f"grid bounds must be finite, got '{text}'")
    if n < 1 or n > MAX_GRID_POINTS:
        raise UsageError(f"grid size must be between 1 and {MAX_GRID_POINTS}, got {n}")
    if n > 1 and not lo < hi:
        raise UsageError(f"grid needs lo < hi, got '{text}'")
    return np.linspace(lo, hi, n)


class OutputValidator:
    """Schema checks for written documents; each returns (ok, errors)."""

    @staticmethod
    def validate_query(data: Dict[str, Any], errors: List[str]) -> None:
        for key in ('a_prime', 'a'):
            if not FormatValidator.validate_arm(data.get(key)):
                errors.append(f"'{key}' must be 0 or 1")
        if not FormatValidator.validate_number(data.get('y_prime')):
            errors.append("'y_prime' must be a finite number")
        if data.get('a_prime') is not None and data.get('a_prime') == data.get('a'):
            errors.append("'a_prime' and 'a' must differ")

    @staticmethod
    def validate_bounds_data(data: Dict[str, Any]) -> Tuple[bool, List[str]]:
        """Validate a bounds result document."""
        errors: List[str] = []
        query = data.get('query')
        if not isinstance(query, dict):
            errors.append("'query' object is required")
        else:
            OutputValidator.validate_query(query, errors)

        for key in ('lower', 'upper', 'q_upper', 'q_lower'):
            if not FormatValidator.validate_number(data.get(key)):
                errors.append(f"'{key}' must be a finite number")
        if not errors and data['lower'] > data['upper']:
            errors.append("'lower' must not exceed 'upper'")
        if not isinstance(data.get('crossed'), bool):
            errors.append("'crossed' must be a boolean")
        if not FormatValidator.validate_interval(data.get('support_estimate')):
            errors.append("'support_estimate' must be [low, high] with low <= high")

        trajectories = data.get('trajectories', {})
        if not isinstance(trajectories, dict):
            errors.append("'trajectories' must be an object")
        else:
            for name, values in trajectories.items():
                if not isinstance(values, list) or not all(v is None or FormatValidator.validate_number(v) for v in values):
                    errors.append(f"trajectory '{name}' must be a list of numbers or nulls")

        return len(errors) == 0, errors

    @staticmethod
    def validate_oracle_data(data: Dict[str, Any]) -> Tuple[bool, List[str]]:
        """Validate an oracle result: a single query with density curve, or a y' sweep."""
        errors: List[str] = []
        if not isinstance(data.get('scm'), str) or not data.get('scm'):
            errors.append("'scm' name is required")
        for key in ('a_prime', 'a'):
            if not FormatValidator.validate_arm(data.get(key)):
                errors.append(f"'{key}' must be 0 or 1")

        if 'curve' in data:
            curve = data['curve']
            if not isinstance(curve, dict):
                errors.append("'curve' must be an object")
            else:
                ys, qs = curve.get('y_prime'), curve.get('q')
                if not FormatValidator.validate_number_list(ys) or not FormatValidator.validate_number_list(qs):
                    errors.append("'curve' needs numeric 'y_prime' and 'q' lists")
                elif len(ys) != len(qs):
                    errors.append("'curve' lists must have equal length")
        else:
            if not FormatValidator.validate_number(data.get('y_prime')):
                errors.append("'y_prime' must be a finite number")
            if not FormatValidator.validate_number(data.get('q')):
                errors.append("'q' must be a finite number")
            density = data.get('density_curve')
            if not isinstance(density, dict):
                errors.append("'density_curve' object is required")
            else:
                ys, values = density.get('y'), density.get('density')
                if not FormatValidator.validate_number_list(ys, 2) or not FormatValidator.validate_number_list(values, 2):
                    errors.append("'density_curve' needs numeric 'y' and 'density' lists")
                elif len(ys) != len(values):
                    errors.append("'density_curve' lists must have equal length")
                elif any(v < 0 for v in values):
                    errors.append("densities must be nonnegative")

        return len(errors) == 0, errors

    @staticmethod
    def validate_manifest_data(data: Dict[str, Any]) -> Tuple[bool, List[str]]:
        """Validate a run manifest."""
        errors: List[str] = []
        if not isinstance(data.get('command'), str) or not data.get('command'):
            errors.append("'command' is required")
        if not isinstance(data.get('config'), dict):
            errors.append("'config' must be an object")
        if not isinstance(data.get('version'), str):
            errors.append("'version' must be a string")
        seed = data.get('seed')
        if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
            errors.append("'seed' must be an integer or null")
        outputs = data.get('outputs')
        if not isinstance(outputs, dict) or not all(isinstance(v, str) for v in outputs.values()):
            errors.append("'outputs' must map names to paths")
        return len(errors) == 0, errors


def validate_or_raise(validator, data: Dict[str, Any], what: str, error_cls=UsageError) -> Dict[str, Any]:
    ok, errors = validator(data)
    if not ok:
        raise error_cls(f"invalid {what}: " + "; ".join(errors))
    return data


def document_kind(data: Dict[str, Any]) -> Optional[str]:
    """Guess which document a loaded JSON object is."""
    if 'upper' in data and 'lower' in data:
        return 'bounds'
    if 'scm' in data:
        return 'oracle'
    if 'command' in data and 'outputs' in data:
        return 'manifest'
    return None
