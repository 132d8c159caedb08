"""
Invertible residual flow F: (0,1)² -> R² with exact log-determinant.

F = affine_out ∘ block_t ∘ ... ∘ block_1 ∘ logit_head, each block z -> z + g(z)
with a contractive g. Evaluation is generic: parameters and inputs may be numpy
arrays, taped Vars or second-order duals. Inversion runs on plain arrays.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Any, List, Tuple

import numpy as np
from scipy.special import expit, logit

from autodiff import (MlpParams, absolute, detach, init_mlp, log, softplus, spectral_norm, stack, tanh,
                      value)
from error_handling import DomainError, NoConvergenceError, PreconditionError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 200
_U_MAX = np.nextafter(1.0, 0.0)
_U_MIN = np.finfo(float).tiny


@dataclass
class ResidualBlock:
    """Residual map z -> z + g(z) with a 2 -> h -> 2 tanh network g."""
    net: MlpParams
    lipschitz_target: float = field(default=0.97, metadata={'static': True})
    spectral_norms: Tuple[float, ...] = field(default=(), metadata={'static': True})

    def __post_init__(self):
        if not 0.0 < self.lipschitz_target < 1.0:
            raise PreconditionError(f"lipschitz_target must be in (0, 1), got {self.lipschitz_target}")
        arch = self.net.architecture
        if len(arch) != 3 or arch[0] != 2 or arch[-1] != 2:
            raise PreconditionError(f"residual networks must be 2 -> h -> 2, got {arch}")


@dataclass
class Flow:
    blocks: List[ResidualBlock]
    scale: Any
    shift: Any

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def hidden_width(self) -> int:
        return self.blocks[0].net.architecture[1] if self.blocks else 0


@dataclass
class InversionResult:
    z: np.ndarray
    converged: np.ndarray
    residual: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return np.clip(expit(self.z), _U_MIN, _U_MAX)

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.converged))


def init_flow(rng: np.random.Generator, n_blocks: int = 15, hidden: int = 5, lipschitz_target: float = 0.97,
              loc=(0.0, 0.0), scale=(1.0, 1.0), weight_scale: float = 0.5, power_iters: int = 20) -> Flow:
    """Random flow with normalized blocks and the given output location and scale."""
    blocks = []
    for _ in range(n_blocks):
        block = ResidualBlock(net=init_mlp((2, hidden, 2), rng, scale=weight_scale), lipschitz_target=lipschitz_target)
        blocks.append(normalize_lipschitz(block, power_iters))
    return Flow(blocks=blocks, scale=np.array(scale, dtype=float), shift=np.array(loc, dtype=float))


def normalize_lipschitz(block: ResidualBlock, power_iters: int = 5, exact: bool = True) -> ResidualBlock:
    """Rescale each weight matrix whose spectral norm exceeds the per-layer budget sqrt(c).

    With exact=True the norm is the largest singular value from an SVD; power iteration
    only bounds it from below, so exact=False can leave a layer slightly over budget.
    """
    if power_iters < 1:
        raise PreconditionError(f"power_iters must be >= 1, got {power_iters}")
    budget = float(np.sqrt(block.lipschitz_target))
    weights, norms = [], []
    for w in block.net.weights:
        w = np.asarray(value(w), dtype=float)
        sigma = float(np.linalg.norm(w, 2)) if exact else spectral_norm(w, power_iters)
        if sigma > budget:
            w = w * (budget / sigma)
            sigma = budget
        weights.append(w)
        norms.append(sigma)
    net = MlpParams(weights=weights, biases=[np.asarray(value(b), dtype=float) for b in block.net.biases])
    return replace(block, net=net, spectral_norms=tuple(norms))


def _block_forward(net: MlpParams, z, with_logdet: bool):
    w1, b1 = net.weights[0], net.biases[0]
    w2, b2 = net.weights[1], net.biases[1]
    h = tanh(z @ w1.T + b1)
    out = z + (h @ w2.T + b2)
    if not with_logdet:
        return out, None
    # J = I + W2 diag(1 - h²) W1
    s = 1.0 - h * h
    m = [[(s * (w2[i] * w1[:, j])).sum(axis=1) for j in range(2)] for i in range(2)]
    det = (1.0 + m[0][0]) * (1.0 + m[1][1]) - m[0][1] * m[1][0]
    return out, log(det)


def head_logdet_from_logits(z):
    """log|det| of the logit head expressed through its output, -log(u(1-u)) summed."""
    return (softplus(z) + softplus(-z)).sum(axis=1)


def forward_logits(flow: Flow, z, with_logdet: bool = True):
    """Blocks and affine output applied to logit-space points."""
    logdet = np.zeros(np.shape(value(z))[0]) if with_logdet else None
    for block in flow.blocks:
        z, block_logdet = _block_forward(block.net, z, with_logdet)
        if with_logdet:
            logdet = logdet + block_logdet
    x = z * flow.scale + flow.shift
    if with_logdet:
        logdet = logdet + log(absolute(flow.scale)).sum()
    return x, logdet


def forward(flow: Flow, u) -> Tuple[np.ndarray, np.ndarray]:
    """F(u) and log|det J_F(u)| for points strictly inside the unit square."""
    points = np.asarray(u, dtype=float)
    single = points.ndim == 1
    points = np.atleast_2d(points)
    if points.shape[-1] != 2:
        raise PreconditionError(f"expected points with 2 coordinates, got shape {points.shape}")
    if not np.all((points > 0.0) & (points < 1.0)):
        raise DomainError("forward needs points strictly inside (0,1)²")
    z = logit(points)
    head = -(np.log(points) + np.log1p(-points)).sum(axis=1)
    x, logdet = forward_logits(flow, z)
    logdet = logdet + head
    if single:
        return x[0], logdet[0]
    return x, logdet


def jacobian_logits(flow: Flow, z: np.ndarray) -> np.ndarray:
    """Jacobian of forward_logits at each row of z, shape (n, 2, 2)."""
    flow = detach(flow)
    z = np.asarray(z, dtype=float)
    jac = np.broadcast_to(np.eye(2), (len(z), 2, 2)).copy()
    for block in flow.blocks:
        w1, b1 = block.net.weights[0], block.net.biases[0]
        w2, b2 = block.net.weights[1], block.net.biases[1]
        h = np.tanh(z @ w1.T + b1)
        block_jac = np.eye(2) + np.einsum('ak,nk,kb->nab', w2, 1.0 - h * h, w1)
        jac = block_jac @ jac
        z = z + h @ w2.T + b2
    return flow.scale[None, :, None] * jac


def _residual_map(net: MlpParams, w: np.ndarray) -> np.ndarray:
    return np.tanh(w @ net.weights[0].T + net.biases[0]) @ net.weights[1].T + net.biases[1]


def inverse_logits(flow: Flow, x, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                   polish_steps: int = 2) -> InversionResult:
    """Logit-space preimage of x by block-wise fixed-point iteration and a short Newton polish."""
    flow = detach(flow)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = (x - flow.shift) / flow.scale
    converged = np.ones(len(x), dtype=bool)
    for block in reversed(flow.blocks):
        target = z
        w = target.copy()
        done = np.zeros(len(x), dtype=bool)
        for _ in range(max_iter):
            w_next = target - _residual_map(block.net, w)
            step = np.max(np.abs(w_next - w), axis=1)
            w = w_next
            done = step <= tol * (1.0 + np.max(np.abs(w), axis=1))
            if done.all():
                break
        converged &= done
        z = w

    def residual_of(points):
        mapped, _ = forward_logits(flow, points, with_logdet=False)
        return np.max(np.abs(mapped - x), axis=1)

    residual = residual_of(z)
    for _ in range(polish_steps):
        rows = converged & np.isfinite(residual) & (residual > 0.0)
        if not rows.any():
            break
        mapped, _ = forward_logits(flow, z[rows], with_logdet=False)
        step = np.linalg.solve(jacobian_logits(flow, z[rows]), (mapped - x[rows])[..., None])[..., 0]
        candidate = z.copy()
        candidate[rows] = z[rows] - step
        new_residual = residual_of(candidate)
        better = rows & (new_residual < residual)
        z = np.where(better[:, None], candidate, z)
        residual = np.where(better, new_residual, residual)
    return InversionResult(z=z, converged=converged, residual=residual)


def inverse(flow: Flow, x, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """Latent point u in (0,1)² with forward(u) = x."""
    points = np.asarray(x, dtype=float)
    single = points.ndim == 1
    result = inverse_logits(flow, points, tol, max_iter)
    if not result.converged.all():
        worst = float(np.nanmax(np.where(result.converged, 0.0, result.residual), initial=np.inf))
        raise NoConvergenceError(
            f"fixed-point inversion failed for {result.n_failed} of {len(result.converged)} points after {max_iter} iterations",
            residual=worst,
        )
    limit = 10.0 * tol * (1.0 + np.max(np.abs(np.atleast_2d(points)), axis=1))
    if np.any(result.residual > limit):
        logger.warning(f"inversion residual {float(result.residual.max()):.3e} above {float(limit.max()):.3e}")
    u = result.u
    return u[0] if single else u


def log_prob(flow: Flow, x, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """log p(x) under the flow with uniform base, differentiable in the flow parameters and x.

    The preimage is found numerically; one implicit Newton correction with a
    constant Jacobian carries the first-order dependence of the preimage on the
    parameters into the taped expression.
    """
    numeric = detach(flow)
    inversion = inverse_logits(numeric, value(x), tol, max_iter)
    z_star = np.where(inversion.converged[:, None], inversion.z, 0.0)
    jac_inv = np.linalg.inv(jacobian_logits(numeric, z_star))
    mapped, _ = forward_logits(flow, z_star, with_logdet=False)
    r = mapped - x
    dz0 = r[:, 0] * jac_inv[:, 0, 0] + r[:, 1] * jac_inv[:, 0, 1]
    dz1 = r[:, 0] * jac_inv[:, 1, 0] + r[:, 1] * jac_inv[:, 1, 1]
    z = z_star - stack([dz0, dz1], axis=1)
    _, logdet = forward_logits(flow, z)
    return -(logdet + head_logdet_from_logits(z)), inversion


def outcome_from_logits(flow: Flow, z):
    """Outcome coordinate of the flow for logit-space points."""
    x, _ = forward_logits(flow, z, with_logdet=False)
    return x[:, 1]
