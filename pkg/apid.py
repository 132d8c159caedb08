"""
Augmented pseudo-invertible decoder.

One residual flow per arm maps the latent unit square to (y_aug, y); a small
network g_a and variance eps2 define the variational augmentation
y_aug ~ N(g_a(y), eps2). The outcome mechanism f_Y(a, u) is the second output
coordinate of flow_a.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logit

import config
from autodiff import (Dual2, MlpParams, absolute, detach, hessian2, init_mlp, mlp_forward, named_parameters,
                      stack, value, with_parameters)
from error_handling import (DataFormatError, DegenerateGradientError, EvidenceOutsideModelError,
                            NoConvergenceError, PreconditionError, ValidationError)
from resflow import (DEFAULT_MAX_ITER, DEFAULT_TOL, Flow, ResidualBlock, forward_logits, init_flow,
                     inverse_logits, log_prob, outcome_from_logits)
from scm_core import Arm, as_arm

logger = logging.getLogger(__name__)

GRADIENT_FLOOR = 1e-12
FD_STEP = 1e-3
LOGISTIC_STD = np.pi / np.sqrt(3.0)
_U_MAX = np.nextafter(1.0, 0.0)
_U_MIN = np.finfo(float).tiny


class CurvatureMode:
    TAPED = 'taped'
    FINITE_DIFFERENCE = 'finite_difference'
    ALL = (TAPED, FINITE_DIFFERENCE)


@dataclass
class ApidModel:
    """Per-arm flows and augmentation networks with a shared augmentation variance."""
    flow0: Flow
    flow1: Flow
    g0: MlpParams
    g1: MlpParams
    eps2: float = field(default=0.25, metadata={'static': True})

    def __post_init__(self):
        if not self.eps2 > 0.0:
            raise ValidationError(f"eps2 must be positive, got {self.eps2}")
        for name in ('g0', 'g1'):
            arch = getattr(self, name).architecture
            if arch[0] != 1 or arch[-1] != 1:
                raise PreconditionError(f"{name} must map 1 -> 1, got {arch}")

    @property
    def eps(self) -> float:
        return float(np.sqrt(self.eps2))

    def flow(self, a) -> Flow:
        return self.flow1 if as_arm(a) == Arm.TREATED else self.flow0

    def aug_net(self, a) -> MlpParams:
        return self.g1 if as_arm(a) == Arm.TREATED else self.g0

    def with_arm(self, a, flow: Optional[Flow] = None, net: Optional[MlpParams] = None) -> 'ApidModel':
        """Copy with the arm-a flow and/or augmentation network replaced."""
        suffix = int(as_arm(a))
        changes = {}
        if flow is not None:
            changes[f'flow{suffix}'] = flow
        if net is not None:
            changes[f'g{suffix}'] = net
        return replace(self, **changes)


@dataclass
class QueryResult:
    q_hat: Any
    latent_points: np.ndarray
    pushed_outcomes: Any

    @property
    def b(self) -> int:
        return int(np.shape(value(self.pushed_outcomes))[0])


def init_model(rng: np.random.Generator, loc: Tuple[float, float], std: Tuple[float, float], eps2: float = 0.25,
               n_blocks: int = 15, hidden: int = 5, aug_hidden: int = 5, lipschitz_target: float = 0.97,
               power_iters: int = 20) -> ApidModel:
    """Random model whose flows start at the per-arm outcome location and scale.

    loc and std are indexed by arm. The outcome scale matches a logistic with
    the sample standard deviation; the augmentation coordinate starts at eps.
    """
    eps = float(np.sqrt(eps2))
    flows = []
    for a in (0, 1):
        flows.append(init_flow(
            rng, n_blocks=n_blocks, hidden=hidden, lipschitz_target=lipschitz_target,
            loc=(0.0, float(loc[a])), scale=(eps / LOGISTIC_STD, max(float(std[a]), 1e-3) / LOGISTIC_STD),
            power_iters=power_iters,
        ))
    nets = [init_mlp((1, aug_hidden, 1), rng, scale=0.5) for _ in (0, 1)]
    return ApidModel(flow0=flows[0], flow1=flows[1], g0=nets[0], g1=nets[1], eps2=eps2)


def standard_draws(seed, shape) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def augmentation_mean(net: MlpParams, ys):
    """g_a evaluated at a vector of outcomes."""
    ys = np.asarray(ys, dtype=float).reshape(-1, 1)
    return mlp_forward(net, ys)[:, 0]


def _augmented_targets(model: ApidModel, a, ys, zeta):
    """Flow-space targets (y_aug, y) for n outcomes and (n, b) draws, flattened to (n*b, 2)."""
    ys = np.asarray(ys, dtype=float).reshape(-1)
    zeta = np.asarray(zeta, dtype=float).reshape(ys.size, -1)
    mean = augmentation_mean(model.aug_net(a), ys)
    y_aug = mean.reshape(-1, 1) + model.eps * zeta
    outcome = np.repeat(ys, zeta.shape[1])
    return stack([y_aug.reshape(-1), outcome], axis=1)


def augment(model: ApidModel, a, y: float, b: int, seed) -> np.ndarray:
    """b pairs (y, y_aug) with y_aug = g_a(y) + eps * zeta."""
    if b < 1:
        raise PreconditionError(f"b must be >= 1, got {b}")
    x = value(_augmented_targets(model, a, [y], standard_draws(seed, b)))
    return x[:, ::-1].copy()


def likelihood_terms(model: ApidModel, a, ys, zeta, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Per-draw log p(y_aug, y) - log N(y_aug; g_a(y), eps2) and the convergence mask, shape (n*b,)."""
    x = _augmented_targets(model, a, ys, zeta)
    logp, inversion = log_prob(model.flow(a), x, tol, max_iter)
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    log_q = -0.5 * np.log(2.0 * np.pi * model.eps2) - 0.5 * zeta * zeta
    return logp - log_q, inversion.converged


def masked_record_mean(terms, converged: np.ndarray, n_records: int):
    """Mean over records of the mean over each record's converged draws.

    Records without a converged draw are left out; returns the estimate and the
    number of records kept.
    """
    ok = np.asarray(converged, dtype=bool).reshape(n_records, -1)
    counts = ok.sum(axis=1)
    kept = int(np.sum(counts > 0))
    if kept == 0:
        raise EvidenceOutsideModelError(f"none of {n_records} records has an invertible augmentation draw")
    weights = np.where(ok, 1.0 / np.maximum(counts, 1)[:, None], 0.0).reshape(-1) / kept
    index = np.flatnonzero(weights)
    return (terms[index] * weights[index]).sum(), kept


def log_likelihood(model: ApidModel, a, y: float, b: int, seed, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Monte-Carlo estimate of log P(Y = y | a) from b augmentation draws."""
    if b < 1:
        raise PreconditionError(f"b must be >= 1, got {b}")
    zeta = standard_draws(seed, b)
    terms, converged = likelihood_terms(model, a, [y], zeta, tol, max_iter)
    if not converged.any():
        raise EvidenceOutsideModelError(f"no augmentation draw for y={y} inverts under flow {int(as_arm(a))}")
    if not converged.all():
        logger.debug(f"log_likelihood dropped {int(np.sum(~converged))} of {b} draws")
    return float(np.mean(value(terms)[converged]))


def _abduct_logits(model: ApidModel, a_prime, y_prime: float, b: int, seed, tol: float, max_iter: int) -> np.ndarray:
    """Fixed-point inversion of flow_{a'} at (augmentation draw, y').

    The solve runs on a detached copy of the model, so the returned logits are constants
    and a query built on them carries gradients into flow_a alone. Training only
    differentiates queries after the factual flow is frozen.
    """
    if b < 1:
        raise PreconditionError(f"b must be >= 1, got {b}")
    factual = detach(model.flow(a_prime))
    x = value(_augmented_targets(detach(model), a_prime, [y_prime], standard_draws(seed, b)))
    inversion = inverse_logits(factual, x, tol, max_iter)
    if not inversion.converged.all():
        raise NoConvergenceError(
            f"abduction at y'={y_prime} failed for {inversion.n_failed} of {b} draws",
            residual=float(np.max(inversion.residual[~inversion.converged])),
        )
    return inversion.z


def abduct(model: ApidModel, a_prime, y_prime: float, b: int, seed, tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Latent points on the estimated factual level set of y', one per augmentation draw."""
    return np.clip(expit(_abduct_logits(model, a_prime, y_prime, b, seed, tol, max_iter)), _U_MIN, _U_MAX)


def ecou_estimate(model: ApidModel, a_prime, y_prime: float, a, b: int, seed, tol: float = DEFAULT_TOL,
                  max_iter: int = DEFAULT_MAX_ITER) -> QueryResult:
    """Abduction on flow_{a'}, action by swapping to flow_a, prediction by averaging outcomes."""
    if as_arm(a) == as_arm(a_prime):
        raise PreconditionError("counterfactual arm must differ from the factual arm")
    z = _abduct_logits(model, a_prime, y_prime, b, seed, tol, max_iter)
    pushed = outcome_from_logits(model.flow(a), z)
    return QueryResult(q_hat=pushed.mean(), latent_points=np.clip(expit(z), _U_MIN, _U_MAX), pushed_outcomes=pushed)


# --- curvature ---------------------------------------------------------------

def curvature_from_derivatives(fx, fy, fxx, fxy, fyy):
    """Signed level-set curvature from first and second partials; circles give -1/r."""
    norm2 = fx * fx + fy * fy
    return -(fy * fy * fxx - 2.0 * (fx * fy * fxy) + fx * fx * fyy) / norm2 ** 1.5


def _check_gradient(fx, fy) -> np.ndarray:
    norm = np.hypot(value(fx), value(fy))
    return norm > GRADIENT_FLOOR


def level_set_curvature(fn: Callable[[Dual2], Dual2], u):
    """Curvature of the level sets of a scalar function of u in R² at each row of u."""
    _, g, h = hessian2(fn, u)
    if not np.all(_check_gradient(g[..., 0], g[..., 1])):
        raise DegenerateGradientError(f"gradient norm at or below {GRADIENT_FLOOR}")
    kappa = curvature_from_derivatives(g[..., 0], g[..., 1], h[..., 0, 0], h[..., 0, 1], h[..., 1, 1])
    return float(kappa) if np.ndim(kappa) == 0 else kappa


def logit_dual(z: np.ndarray) -> Dual2:
    """Second-order dual of z = logit(u) with respect to u, built from z so it never saturates."""
    z = np.asarray(z, dtype=float)
    p = expit(z) * expit(-z)
    first = 1.0 / p
    second = np.tanh(0.5 * z) / (p * p)
    d1 = np.zeros_like(z)
    d2 = np.zeros_like(z)
    d1[:, 0] = first[:, 0]
    d2[:, 1] = first[:, 1]
    h11 = np.zeros_like(z)
    h22 = np.zeros_like(z)
    h11[:, 0] = second[:, 0]
    h22[:, 1] = second[:, 1]
    return Dual2(z, (d1, d2), (h11, np.zeros_like(z), h22))


def _outcome_derivatives_taped(flow: Flow, z: np.ndarray):
    x, _ = forward_logits(flow, logit_dual(z), with_logdet=False)
    f = x[:, 1]
    (fx, fy), (fxx, fxy, fyy) = f.first, f.second
    return fx, fy, fxx, fxy, fyy


def _outcome_derivatives_fd(flow: Flow, z: np.ndarray, h: float = FD_STEP):
    """Nine-point stencil in logit space, chained back to the unit square."""
    n = len(z)
    offsets = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    points = np.concatenate([z + h * np.array(o, dtype=float) for o in offsets])
    f = outcome_from_logits(flow, points)
    at = {o: f[k * n:(k + 1) * n] for k, o in enumerate(offsets)}
    fz1 = (at[(1, 0)] - at[(-1, 0)]) * (0.5 / h)
    fz2 = (at[(0, 1)] - at[(0, -1)]) * (0.5 / h)
    fz11 = (at[(1, 0)] - 2.0 * at[(0, 0)] + at[(-1, 0)]) * (1.0 / h ** 2)
    fz22 = (at[(0, 1)] - 2.0 * at[(0, 0)] + at[(0, -1)]) * (1.0 / h ** 2)
    fz12 = (at[(1, 1)] - at[(1, -1)] - at[(-1, 1)] + at[(-1, -1)]) * (0.25 / h ** 2)
    p = expit(z) * expit(-z)
    s = 1.0 / p
    t = np.tanh(0.5 * z) / (p * p)
    return (fz1 * s[:, 0], fz2 * s[:, 1], fz11 * s[:, 0] ** 2 + fz1 * t[:, 0],
            fz12 * (s[:, 0] * s[:, 1]), fz22 * s[:, 1] ** 2 + fz2 * t[:, 1])


def outcome_curvature_logits(flow: Flow, z: np.ndarray, mode: str = CurvatureMode.TAPED):
    """Curvature of f_Y(a, .) at u = expit(z) and the mask of nondegenerate points."""
    if mode not in CurvatureMode.ALL:
        raise ValidationError(f"curvature mode must be one of {CurvatureMode.ALL}, got '{mode}'")
    derive = _outcome_derivatives_taped if mode == CurvatureMode.TAPED else _outcome_derivatives_fd
    fx, fy, fxx, fxy, fyy = derive(flow, np.atleast_2d(np.asarray(z, dtype=float)))
    ok = _check_gradient(fx, fy)
    return curvature_from_derivatives(fx, fy, fxx, fxy, fyy), ok


def curvature_at(model: ApidModel, a, u, mode: str = CurvatureMode.TAPED):
    """Level-set curvature of the estimated outcome mechanism of arm a at interior point(s) u."""
    points = np.asarray(u, dtype=float)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    if not np.all((points > 0.0) & (points < 1.0)):
        raise PreconditionError("curvature_at needs points strictly inside (0,1)²")
    kappa, ok = outcome_curvature_logits(detach(model.flow(a)), logit(points), mode)
    if not ok.all():
        raise DegenerateGradientError(f"gradient of f_Y({int(as_arm(a))}, u) vanishes at {int(np.sum(~ok))} points")
    kappa = value(kappa)
    return float(kappa[0]) if single else kappa


def level_set_points(model: ApidModel, a, q_hat: float, b: int, seed, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER):
    """Logit-space points on the estimated level set of q_hat under flow_a and their convergence mask."""
    if b < 1:
        raise PreconditionError(f"b must be >= 1, got {b}")
    numeric = detach(model)
    x = value(_augmented_targets(numeric, a, [float(value(q_hat))], standard_draws(seed, b)))
    inversion = inverse_logits(numeric.flow(a), x, tol, max_iter)
    return inversion.z, inversion.converged


def penalty_from_points(flow: Flow, z: np.ndarray, mode: str = CurvatureMode.TAPED, use_abs: bool = True):
    """Mean (absolute) curvature over level-set points; returns the penalty and the skipped count."""
    if len(z) == 0:
        return 0.0, 0
    kappa, ok = outcome_curvature_logits(flow, z, mode)
    skipped = int(np.sum(~ok))
    if skipped:
        logger.info(f"curvature penalty skipped {skipped} degenerate-gradient points of {len(z)}")
    if not ok.any():
        return 0.0, skipped
    kept = kappa[np.flatnonzero(ok)]
    return (absolute(kept) if use_abs else kept).mean(), skipped


def curvature_penalty(model: ApidModel, a, q_hat: float, b: int, seed, mode: str = CurvatureMode.TAPED,
                      use_abs: bool = True, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Mean |curvature| of f_Y(a, .) on b points of its level set at q_hat."""
    z, converged = level_set_points(model, a, q_hat, b, seed, tol, max_iter)
    if not converged.all():
        raise NoConvergenceError(f"level-set inversion at q={float(value(q_hat)):.4f} failed for "
                                 f"{int(np.sum(~converged))} of {b} draws")
    penalty, _ = penalty_from_points(detach(model.flow(a)), z, mode, use_abs)
    return float(value(penalty))


def sample_outcomes(flow: Flow, n: int, seed):
    """Outcome coordinate of the flow pushforward of n uniform latent points."""
    u = np.clip(np.random.default_rng(seed).random((n, 2)), _U_MIN, _U_MAX)
    return outcome_from_logits(flow, logit(u))


# --- checkpoints -------------------------------------------------------------

def _blank_flow(n_blocks: int, hidden: int, lipschitz_target: float) -> Flow:
    blocks = [ResidualBlock(net=MlpParams(weights=[np.zeros((hidden, 2)), np.zeros((2, hidden))],
                                          biases=[np.zeros(hidden), np.zeros(2)]),
                            lipschitz_target=lipschitz_target) for _ in range(n_blocks)]
    return Flow(blocks=blocks, scale=np.ones(2), shift=np.zeros(2))


def save_checkpoint(model: ApidModel, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write both flows, both augmentation networks and eps2 to a versioned .npz archive."""
    path = Path(path)
    arrays = {name: np.asarray(value(leaf)) for name, leaf in named_parameters(model).items()}
    meta = {
        'meta.format_version': np.array(config.CHECKPOINT_FORMAT_VERSION),
        'meta.eps2': np.array(model.eps2),
        'meta.aug_hidden': np.array(model.g0.architecture[1]),
    }
    for a in (0, 1):
        flow = model.flow(a)
        meta[f'meta.flow{a}.n_blocks'] = np.array(flow.n_blocks)
        meta[f'meta.flow{a}.hidden'] = np.array(flow.hidden_width)
        meta[f'meta.flow{a}.lipschitz_target'] = np.array(flow.blocks[0].lipschitz_target if flow.blocks else 0.97)
    for key, item in (extra or {}).items():
        meta[f'extra.{key}'] = np.asarray(item)
    with open(path, 'wb') as fh:
        np.savez(fh, **arrays, **meta)
    logger.info(f"Saved checkpoint with {len(arrays)} arrays to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> ApidModel:
    """Rebuild a model saved by save_checkpoint."""
    with np.load(path) as archive:
        data = {key: archive[key] for key in archive.files}
    try:
        version = int(data['meta.format_version'])
    except KeyError:
        raise DataFormatError(f"{path} is not a model checkpoint")
    if version != config.CHECKPOINT_FORMAT_VERSION:
        raise DataFormatError(f"checkpoint format {version} is not supported (expected {config.CHECKPOINT_FORMAT_VERSION})")
    aug_hidden = int(data['meta.aug_hidden'])
    flows = [_blank_flow(int(data[f'meta.flow{a}.n_blocks']), int(data[f'meta.flow{a}.hidden']),
                         float(data[f'meta.flow{a}.lipschitz_target'])) for a in (0, 1)]
    nets = [MlpParams(weights=[np.zeros((aug_hidden, 1)), np.zeros((1, aug_hidden))],
                      biases=[np.zeros(aug_hidden), np.zeros(1)]) for _ in (0, 1)]
    template = ApidModel(flow0=flows[0], flow1=flows[1], g0=nets[0], g1=nets[1], eps2=float(data['meta.eps2']))
    expected = set(named_parameters(template))
    missing = expected - set(data)
    if missing:
        raise DataFormatError(f"checkpoint is missing {sorted(missing)[:3]}")
    return with_parameters(template, {name: data[name] for name in expected})
