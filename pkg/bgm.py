"""
Closed-form counterfactuals under bijective generation mechanisms (the zero-curvature case).
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence, Tuple, Union

import numpy as np

from data import EmpiricalDist, ecdf, quantile
from error_handling import PreconditionError, ValidationError
from scm_core import Arm, as_arm

logger = logging.getLogger(__name__)


class MonotoneSign(Enum):
    INCREASING = 'increasing'
    DECREASING = 'decreasing'


def _latent_level(level, s: MonotoneSign):
    level = np.asarray(level, dtype=float)
    return level if s is MonotoneSign.INCREASING else 1.0 - level


def counterfactual_map(cdf_factual: Callable, quantile_counterfactual: Callable, y_prime, s: MonotoneSign):
    """Q = F_a^{-1}(F_a'(y')) for increasing mechanisms, F_a^{-1}(1 - F_a'(y')) for decreasing ones."""
    return quantile_counterfactual(_latent_level(cdf_factual(y_prime), s))


def bgm_function(d_a: EmpiricalDist, u, s: MonotoneSign):
    """Identified BGM mechanism f(a, u) from the arm-a sample."""
    return quantile(d_a, _latent_level(u, s))


def bgm_ecou(d_a: EmpiricalDist, d_ap: EmpiricalDist, y_prime, s: MonotoneSign):
    """BGM point estimate of the expected counterfactual outcome."""
    if not np.all(np.isfinite(y_prime)):
        raise PreconditionError(f"y' must be finite, got {y_prime}")
    return counterfactual_map(lambda y: ecdf(d_ap, y), lambda q: quantile(d_a, q), y_prime, s)


@dataclass(frozen=True, eq=False)
class BgmCurves:
    y_grid: np.ndarray
    increasing: np.ndarray
    decreasing: np.ndarray
    direction: Tuple[Arm, Arm]

    def rows(self):
        return zip(self.y_grid.tolist(), self.increasing.tolist(), self.decreasing.tolist())


def parse_direction(text: str) -> Tuple[Arm, Arm]:
    """Parse '0to1' style directions into (factual arm, counterfactual arm)."""
    parts = str(text).lower().split('to')
    if len(parts) != 2:
        raise ValidationError(f"Direction must look like '0to1', got '{text}'")
    a_prime, a = as_arm(parts[0]), as_arm(parts[1])
    if a_prime == a:
        raise PreconditionError("Counterfactual arm must differ from the factual arm")
    return a_prime, a


def bgm_curve(d0: EmpiricalDist, d1: EmpiricalDist, y_grid: Sequence[float],
              direction: Union[str, Tuple[Arm, Arm]]) -> BgmCurves:
    """Both BGM curves over a y' grid in the given direction."""
    a_prime, a = parse_direction(direction) if isinstance(direction, str) else direction
    dists = {Arm.UNTREATED: d0, Arm.TREATED: d1}
    grid = np.asarray(y_grid, dtype=float)
    d_a, d_ap = dists[Arm(a)], dists[Arm(a_prime)]
    low, high = d_ap.support_estimate
    if np.any((grid < low) | (grid > high)):
        logger.warning(f"y' grid [{grid.min():.3f}, {grid.max():.3f}] leaves the factual sample range [{low:.3f}, {high:.3f}]")
    return BgmCurves(
        y_grid=grid,
        increasing=np.asarray(bgm_ecou(d_a, d_ap, grid, MonotoneSign.INCREASING), dtype=float),
        decreasing=np.asarray(bgm_ecou(d_a, d_ap, grid, MonotoneSign.DECREASING), dtype=float),
        direction=(Arm(a_prime), Arm(a)),
    )
