"""
Bivariate Markovian SCMs with binary treatment and the analytic fixture mechanisms.

A mechanism is stored as a vectorized callable f(arm, u) over arrays of latent
points with trailing dimension 2. Fixtures are immutable and safe to share.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from error_handling import PreconditionError, RootNotFoundError, UnknownArmError

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
M2_ROOT_TOL = 1e-10

# Smallest u₁ fed to the Box-Müller logarithm
_TINY = np.finfo(float).tiny


class Arm(IntEnum):
    UNTREATED = 0
    TREATED = 1

    @property
    def other(self) -> 'Arm':
        return Arm(1 - int(self))


def as_arm(value: Union[int, str, 'Arm']) -> Arm:
    """Parse a treatment arm, rejecting anything but 0 and 1."""
    try:
        number = int(value)
    except (TypeError, ValueError):
        raise UnknownArmError(f"Unknown arm {value!r}")
    if number not in (0, 1) or (isinstance(value, float) and value != number):
        raise UnknownArmError(f"Unknown arm {value!r}")
    return Arm(number)


Mechanism = Callable[[Arm, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Scm2D:
    """SCM with latent noise uniform on [0,1]² and one mechanism per arm."""
    name: str
    f: Mechanism
    support: Tuple[Tuple[float, float], Tuple[float, float]]
    grad: Optional[Mechanism] = None
    description: str = ''

    def __post_init__(self):
        for a, (low, high) in enumerate(self.support):
            if not low < high:
                raise PreconditionError(f"{self.name}: support of arm {a} is empty ({low}, {high})")

    def support_of(self, a: Arm) -> Tuple[float, float]:
        return self.support[int(a)]

    def values(self, a: Arm, u: np.ndarray) -> np.ndarray:
        """Vectorized mechanism without domain checks."""
        return np.asarray(self.f(Arm(a), np.asarray(u, dtype=float)), dtype=float)

    def gradients(self, a: Arm, u: np.ndarray) -> np.ndarray:
        """Vectorized gradient; central differences when no analytic form is registered."""
        u = np.asarray(u, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(Arm(a), u), dtype=float)
        return finite_difference_gradient(lambda p: self.values(a, p), u)


@dataclass(frozen=True)
class Scm1D:
    """Scalar-noise SCM (U uniform on [0,1]) with closed-form distribution functions."""
    name: str
    f: Callable[[Arm, np.ndarray], np.ndarray]
    inverse: Callable[[Arm, np.ndarray], np.ndarray]
    cdf: Callable[[Arm, np.ndarray], np.ndarray]
    quantile: Callable[[Arm, np.ndarray], np.ndarray]
    support: Tuple[Tuple[float, float], Tuple[float, float]]
    increasing: Tuple[bool, bool] = field(default=(True, True))

    def support_of(self, a: Arm) -> Tuple[float, float]:
        return self.support[int(a)]


def finite_difference_gradient(fn: Callable[[np.ndarray], np.ndarray], u: np.ndarray,
                               step: float = FD_STEP) -> np.ndarray:
    """Central differences, one-sided where a step would leave the unit square."""
    u = np.asarray(u, dtype=float)
    out = np.empty(u.shape)
    for k in range(2):
        h_minus = np.minimum(step, u[..., k])
        h_plus = np.minimum(step, 1.0 - u[..., k])
        upper = u.copy()
        lower = u.copy()
        upper[..., k] += h_plus
        lower[..., k] -= h_minus
        out[..., k] = (fn(upper) - fn(lower)) / (h_plus + h_minus)
    return out


def _check_point(u) -> np.ndarray:
    point = np.asarray(u, dtype=float)
    if point.shape != (2,):
        raise PreconditionError(f"Expected a point in the unit square, got shape {point.shape}")
    if not np.all((point >= 0.0) & (point <= 1.0)):
        raise PreconditionError(f"Point {point.tolist()} outside [0,1]²")
    return point


def eval_f(scm: Scm2D, a: Union[Arm, int], u) -> float:
    """Evaluate f_Y(a, u) at one point of the closed unit square."""
    point = _check_point(u)
    return float(scm.values(as_arm(a), point[None, :])[0])


def grad_f(scm: Scm2D, a: Union[Arm, int], u) -> np.ndarray:
    """Gradient of f_Y(a, ·) with respect to the latent point."""
    point = _check_point(u)
    return scm.gradients(as_arm(a), point[None, :])[0]


def sample_observational(scm: Scm2D, a: Union[Arm, int], n: int, seed: int) -> np.ndarray:
    """Draw n outcomes f(a, U) with U uniform on the unit square."""
    if n < 1:
        raise PreconditionError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    u = rng.random((n, 2))
    # keep u₁ away from 0 for mechanisms with a logarithm there
    u[:, 0] = 1.0 - u[:, 0]
    return scm.values(as_arm(a), u)


# ---------------------------------------------------------------------------
# M1 and M2
# ---------------------------------------------------------------------------

def _m1_f(a: Arm, u: np.ndarray) -> np.ndarray:
    u1, u2 = u[..., 0], u[..., 1]
    if a == Arm.TREATED:
        return u1 - u2 + 1.0
    return u1 + u2 - 1.0


def _m1_grad(a: Arm, u: np.ndarray) -> np.ndarray:
    out = np.ones(u.shape)
    if a == Arm.TREATED:
        out[..., 1] = -1.0
    return out


def _m2_residual(y: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Implicit equation F(Y, u) whose root in [1, 2] is the treated outcome off the diagonal region.

    In the rotated coordinates s = 1 - u1 - u2, d = u1 - u2 the level set of Y = 1 + t is the
    bent line d = 8 t^2 |s| + 1 - (1 - t) sqrt(8 t^2 + 1). The slope 8 t^2 makes the area of the
    triangle d in [0, 1 - |s|] below the line equal to 2t - t^2, so the arm stays triangular.
    """
    w = np.abs(1.0 - u1 - u2)
    return u1 - u2 - 8.0 * (y - 1.0) ** 2 * w - 1.0 + np.sqrt((y - 2.0) ** 2 * (8.0 * (y - 1.0) ** 2 + 1.0))


def _m2_solve(u1: np.ndarray, u2: np.ndarray, tol: float = M2_ROOT_TOL) -> np.ndarray:
    lo = np.ones_like(u1)
    hi = np.full_like(u1, 2.0)
    f_lo = _m2_residual(lo, u1, u2)
    f_hi = _m2_residual(hi, u1, u2)
    if np.any(f_lo < -1e-12) or np.any(f_hi > 1e-12):
        raise RootNotFoundError("M2 implicit equation has no sign change on [1, 2]")
    # F is nonnegative at Y=1 and nonpositive at Y=2
    while np.max(hi - lo, initial=0.0) > tol:
        mid = 0.5 * (lo + hi)
        positive = _m2_residual(mid, u1, u2) > 0.0
        lo = np.where(positive, mid, lo)
        hi = np.where(positive, hi, mid)
    return 0.5 * (lo + hi)


def _m2_f(a: Arm, u: np.ndarray) -> np.ndarray:
    if a == Arm.UNTREATED:
        return _m1_f(a, u)
    u1, u2 = u[..., 0], u[..., 1]
    out = u1 - u2 + 1.0
    implicit = u1 > u2
    if np.any(implicit):
        out = np.array(out, dtype=float)
        out[implicit] = _m2_solve(u1[implicit], u2[implicit])
    return out


def _m2_grad(a: Arm, u: np.ndarray) -> np.ndarray:
    if a == Arm.UNTREATED:
        return _m1_grad(a, u)
    u1, u2 = u[..., 0], u[..., 1]
    out = _m1_grad(a, u)
    implicit = u1 > u2
    if not np.any(implicit):
        return out
    v1, v2 = u1[implicit], u2[implicit]
    y = _m2_solve(v1, v2)
    sgn = np.sign(1.0 - v1 - v2)
    r = np.sqrt(8.0 * (y - 1.0) ** 2 + 1.0)
    slope = 8.0 * (y - 1.0) ** 2
    d_y = -16.0 * (y - 1.0) * np.abs(1.0 - v1 - v2) - r + (2.0 - y) * 8.0 * (y - 1.0) / r
    d_u1 = 1.0 + slope * sgn
    d_u2 = -1.0 + slope * sgn
    grads = np.stack([-d_u1 / d_y, -d_u2 / d_y], axis=-1)
    flat = np.abs(d_y) < 1e-10
    if np.any(flat):
        points = np.stack([v1[flat], v2[flat]], axis=-1)
        grads[flat] = finite_difference_gradient(lambda p: _m2_f(a, p), points)
    out[implicit] = grads
    return out


def m1() -> Scm2D:
    return Scm2D(
        name='m1',
        f=_m1_f,
        grad=_m1_grad,
        support=((-1.0, 1.0), (0.0, 2.0)),
        description='linear mechanisms, triangular observational distributions',
    )


def m2() -> Scm2D:
    return Scm2D(
        name='m2',
        f=_m2_f,
        grad=_m2_grad,
        support=((-1.0, 1.0), (0.0, 2.0)),
        description='observationally equivalent to m1 with a bent treated mechanism',
    )


# ---------------------------------------------------------------------------
# Box-Müller
# ---------------------------------------------------------------------------

def _radius(u1: np.ndarray) -> np.ndarray:
    return np.sqrt(-2.0 * np.log(np.clip(u1, _TINY, 1.0)))


def _box_muller_f(a: Arm, u: np.ndarray) -> np.ndarray:
    return _radius(u[..., 0]) * np.cos(np.pi * u[..., 1])


def _box_muller_grad(a: Arm, u: np.ndarray) -> np.ndarray:
    u1, u2 = np.clip(u[..., 0], _TINY, 1.0), u[..., 1]
    r = _radius(u1)
    with np.errstate(divide='ignore', invalid='ignore'):
        d1 = -np.cos(np.pi * u2) / (u1 * r)
    d2 = -np.pi * r * np.sin(np.pi * u2)
    return np.stack([d1, d2], axis=-1)


_BOX_MULLER_BOUND = float(np.sqrt(-2.0 * np.log(_TINY)))


def box_muller() -> Scm2D:
    return Scm2D(
        name='boxmuller',
        f=_box_muller_f,
        grad=_box_muller_grad,
        support=((-_BOX_MULLER_BOUND, _BOX_MULLER_BOUND), (-_BOX_MULLER_BOUND, _BOX_MULLER_BOUND)),
        description='standard normal outcomes in both arms',
    )


def _oscillating_f(a: Arm, u: np.ndarray) -> np.ndarray:
    u2 = np.clip(u[..., 1], _TINY, 1.0)
    frequency = 2.0 ** (-np.ceil(np.log2(u2)))
    return _radius(u[..., 0]) * np.cos(frequency * np.pi * u2)


def oscillating_box_muller() -> Scm2D:
    """Stress fixture whose level sets have unboundedly many components; no accuracy guarantees."""
    return Scm2D(
        name='oscillating_boxmuller',
        f=_oscillating_f,
        support=((-_BOX_MULLER_BOUND, _BOX_MULLER_BOUND), (-_BOX_MULLER_BOUND, _BOX_MULLER_BOUND)),
        description='Box-Müller with a frequency doubling towards u2 = 0',
    )


# ---------------------------------------------------------------------------
# M_perp
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonotoneMap:
    """Monotone C∞ map on [0,1] with its derivative."""
    fn: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    label: str = ''


QUADRATIC = MonotoneMap(fn=lambda t: t * t + t, derivative=lambda t: 2.0 * t + 1.0, label='u^2+u')
EXPONENTIAL = MonotoneMap(fn=lambda t: np.exp(t) - 1.0, derivative=np.exp, label='exp(u)-1')


def m_perp(g1: MonotoneMap = QUADRATIC, g2: MonotoneMap = EXPONENTIAL) -> Scm2D:
    """Arm 1 reads only u₁ through g1, arm 0 only u₂ through -g2."""

    def f(a: Arm, u: np.ndarray) -> np.ndarray:
        if a == Arm.TREATED:
            return g1.fn(u[..., 0])
        return -g2.fn(u[..., 1])

    def grad(a: Arm, u: np.ndarray) -> np.ndarray:
        out = np.zeros(u.shape)
        if a == Arm.TREATED:
            out[..., 0] = g1.derivative(u[..., 0])
        else:
            out[..., 1] = -g2.derivative(u[..., 1])
        return out

    ends1 = np.sort([float(g1.fn(np.float64(0.0))), float(g1.fn(np.float64(1.0)))])
    ends2 = np.sort([-float(g2.fn(np.float64(0.0))), -float(g2.fn(np.float64(1.0)))])
    return Scm2D(
        name='mperp',
        f=f,
        grad=grad,
        support=((float(ends2[0]), float(ends2[1])), (float(ends1[0]), float(ends1[1]))),
        description=f'perpendicular mechanisms g1={g1.label}, g2={g2.label}',
    )


# ---------------------------------------------------------------------------
# M_tri (scalar noise)
# ---------------------------------------------------------------------------

def _tri_treated_quantile(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.where(q <= 0.5, np.sqrt(2.0 * q), 2.0 - np.sqrt(2.0 * np.clip(1.0 - q, 0.0, None)))


def _tri_treated_cdf(y: np.ndarray) -> np.ndarray:
    y = np.clip(np.asarray(y, dtype=float), 0.0, 2.0)
    return np.where(y <= 1.0, y * y / 2.0, 1.0 - (2.0 - y) ** 2 / 2.0)


def _tri_f(a: Arm, u: np.ndarray) -> np.ndarray:
    if a == Arm.TREATED:
        return _tri_treated_quantile(u)
    # untreated arm runs the same shape downwards on [-1, 1]
    return _tri_treated_quantile(u) * -1.0 + 1.0


def _tri_inverse(a: Arm, y: np.ndarray) -> np.ndarray:
    if a == Arm.TREATED:
        return _tri_treated_cdf(y)
    return _tri_treated_cdf(1.0 - np.asarray(y, dtype=float))


def _tri_cdf(a: Arm, y: np.ndarray) -> np.ndarray:
    if a == Arm.TREATED:
        return _tri_treated_cdf(y)
    return _tri_treated_cdf(np.asarray(y, dtype=float) + 1.0)


def _tri_quantile(a: Arm, q: np.ndarray) -> np.ndarray:
    if a == Arm.TREATED:
        return _tri_treated_quantile(q)
    return _tri_treated_quantile(q) - 1.0


def m_tri() -> Scm1D:
    return Scm1D(
        name='mtri',
        f=_tri_f,
        inverse=_tri_inverse,
        cdf=_tri_cdf,
        quantile=_tri_quantile,
        support=((-1.0, 1.0), (0.0, 2.0)),
        increasing=(False, True),
    )


class AnalyticScmId(str, Enum):
    M1 = 'm1'
    M2 = 'm2'
    BOX_MULLER = 'boxmuller'
    M_PERP = 'mperp'
    M_TRI = 'mtri'
    OSCILLATING_BOX_MULLER = 'oscillating_boxmuller'


_BUILDERS: Dict[AnalyticScmId, Callable[..., Union[Scm2D, Scm1D]]] = {
    AnalyticScmId.M1: m1,
    AnalyticScmId.M2: m2,
    AnalyticScmId.BOX_MULLER: box_muller,
    AnalyticScmId.M_PERP: m_perp,
    AnalyticScmId.M_TRI: m_tri,
    AnalyticScmId.OSCILLATING_BOX_MULLER: oscillating_box_muller,
}


def build_scm(tag: Union[AnalyticScmId, str], **kwargs) -> Union[Scm2D, Scm1D]:
    """Construct a fixture by tag."""
    try:
        key = AnalyticScmId(tag)
    except ValueError:
        raise PreconditionError(f"Unknown SCM '{tag}'. Available: {[t.value for t in AnalyticScmId]}")
    logger.debug(f"Building SCM fixture {key.value}")
    return _BUILDERS[key](**kwargs)
