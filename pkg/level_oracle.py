"""
Level-set oracle: traces {u : f(a,u) = y} in the unit square and integrates along it.

Observational density, counterfactual density and the expected counterfactual
outcome are all line integrals over the traced polylines weighted by the
inverse gradient norm of the factual mechanism.
"""
import logging
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from error_handling import EmptyLevelSetError, PreconditionError, ValidationError, log_performance_metric
from scm_core import Arm, Scm2D, as_arm

logger = logging.getLogger(__name__)

_MAX_BISECTIONS = 60
_MIN_GRADIENT = 1e-300


@dataclass(frozen=True)
class OracleConfig:
    grid_resolution: int = 512
    refine_tol: float = 1e-8
    min_component_length: float = 1e-6
    n_bins: int = 201

    def __post_init__(self):
        if self.grid_resolution < 16:
            raise ValidationError(f"grid_resolution must be >= 16, got {self.grid_resolution}")
        if self.refine_tol <= 0 or self.min_component_length <= 0:
            raise ValidationError("Oracle tolerances must be positive")
        if self.n_bins < 2:
            raise ValidationError(f"n_bins must be >= 2, got {self.n_bins}")


@dataclass(eq=False)
class LevelSetPolyline:
    """Connected components of a traced level set, each an (m, 2) array of ordered vertices."""
    segments: List[np.ndarray]
    level: float
    arm: Arm
    closed: List[bool] = field(default_factory=list)

    @property
    def total_length(self) -> float:
        return float(sum(_lengths(p).sum() for p in self.segments))

    def pieces(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """All straight pieces as (start, end, midpoint, length) arrays."""
        starts = np.concatenate([p[:-1] for p in self.segments])
        ends = np.concatenate([p[1:] for p in self.segments])
        return starts, ends, 0.5 * (starts + ends), np.linalg.norm(ends - starts, axis=1)


def _lengths(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points, axis=0), axis=1)


def _refine_on_edges(scm: Scm2D, a: Arm, y: float, p0: np.ndarray, p1: np.ndarray,
                     positive0: np.ndarray, tol: float) -> np.ndarray:
    """Bisection along each edge p0 -> p1 for the level crossing."""
    lo = np.zeros(len(p0))
    hi = np.ones(len(p0))
    span = p1 - p0
    for _ in range(_MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        residual = scm.values(a, p0 + mid[:, None] * span) - y
        if np.all(np.abs(residual) <= tol):
            break
        same_side = (residual >= 0.0) == positive0
        lo = np.where(same_side, mid, lo)
        hi = np.where(same_side, hi, mid)
    return p0 + (0.5 * (lo + hi))[:, None] * span


def trace_level_set(scm: Scm2D, a: Union[Arm, int], y: float, cfg: Optional[OracleConfig] = None) -> LevelSetPolyline:
    """Marching squares on the grid with per-edge bisection refinement."""
    cfg = cfg or OracleConfig()
    a = as_arm(a)
    low, high = scm.support_of(a)
    if not low < y < high:
        raise PreconditionError(f"level {y} outside the open support ({low}, {high}) of arm {int(a)}")

    n = cfg.grid_resolution
    t = np.linspace(0.0, 1.0, n + 1)
    nodes = np.stack(np.meshgrid(t, t, indexing='ij'), axis=-1)
    positive = (scm.values(a, nodes) - y) >= 0.0

    # edge ids: along-u1 edges (i, j) then along-u2 edges (i, j)
    n_h = n * (n + 1)
    cross_h = positive[:-1, :] != positive[1:, :]
    cross_v = positive[:, :-1] != positive[:, 1:]
    if not cross_h.any() and not cross_v.any():
        raise EmptyLevelSetError(f"No crossing of level {y} for arm {int(a)} on a {n}x{n} grid")

    points = np.full((2 * n * (n + 1), 2), np.nan)
    hi_idx, hj_idx = np.nonzero(cross_h)
    if hi_idx.size:
        p0 = np.stack([t[hi_idx], t[hj_idx]], axis=-1)
        p1 = np.stack([t[hi_idx + 1], t[hj_idx]], axis=-1)
        points[hi_idx * (n + 1) + hj_idx] = _refine_on_edges(scm, a, y, p0, p1, positive[hi_idx, hj_idx], cfg.refine_tol)
    vi_idx, vj_idx = np.nonzero(cross_v)
    if vi_idx.size:
        p0 = np.stack([t[vi_idx], t[vj_idx]], axis=-1)
        p1 = np.stack([t[vi_idx], t[vj_idx + 1]], axis=-1)
        points[n_h + vi_idx * n + vj_idx] = _refine_on_edges(scm, a, y, p0, p1, positive[vi_idx, vj_idx], cfg.refine_tol)

    segments = _cell_segments(scm, a, y, t, positive, cross_h, cross_v)
    chains = _link_segments(segments)

    polylines: List[np.ndarray] = []
    closed: List[bool] = []
    for chain, is_closed in chains:
        pts = points[chain]
        if _lengths(pts).sum() < cfg.min_component_length:
            continue
        polylines.append(pts)
        closed.append(is_closed)
    if not polylines:
        raise EmptyLevelSetError(f"Level {y} of arm {int(a)} has no component longer than {cfg.min_component_length}")
    logger.debug(f"Traced level {y} of {scm.name} arm {int(a)}: {len(polylines)} component(s)")
    return LevelSetPolyline(segments=polylines, level=float(y), arm=a, closed=closed)


def _cell_segments(scm: Scm2D, a: Arm, y: float, t: np.ndarray, positive: np.ndarray,
                   cross_h: np.ndarray, cross_v: np.ndarray) -> np.ndarray:
    """Pairs of crossed edge ids per grid cell; saddles resolved by the cell-center sign."""
    n = len(t) - 1
    n_h = n * (n + 1)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing='ij')
    # bottom, right, top, left
    edge_ids = np.stack([
        ii * (n + 1) + jj,
        n_h + (ii + 1) * n + jj,
        ii * (n + 1) + jj + 1,
        n_h + ii * n + jj,
    ], axis=-1)
    flags = np.stack([cross_h[:, :-1], cross_v[1:, :], cross_h[:, 1:], cross_v[:-1, :]], axis=-1)
    count = flags.sum(axis=-1)

    pairs = [edge_ids[count == 2][flags[count == 2]].reshape(-1, 2)]

    saddle_i, saddle_j = np.nonzero(count == 4)
    if saddle_i.size:
        centers = np.stack([0.5 * (t[saddle_i] + t[saddle_i + 1]), 0.5 * (t[saddle_j] + t[saddle_j + 1])], axis=-1)
        center_positive = (scm.values(a, centers) - y) >= 0.0
        ids = edge_ids[saddle_i, saddle_j]
        joins_diagonal = center_positive == positive[saddle_i, saddle_j]
        bottom, right, top, left = ids[:, 0], ids[:, 1], ids[:, 2], ids[:, 3]
        # center agrees with the (0,0) corner: cut off the (1,0) and (0,1) corners
        first = np.where(joins_diagonal[:, None], np.stack([bottom, right], axis=-1), np.stack([bottom, left], axis=-1))
        second = np.where(joins_diagonal[:, None], np.stack([left, top], axis=-1), np.stack([right, top], axis=-1))
        pairs.extend([first, second])
    return np.concatenate(pairs, axis=0)


def _link_segments(segments: np.ndarray) -> List[Tuple[List[int], bool]]:
    """Join edge-pair segments into ordered chains of edge ids."""
    incident: Dict[int, List[int]] = defaultdict(list)
    for k, (e1, e2) in enumerate(segments.tolist()):
        incident[e1].append(k)
        incident[e2].append(k)
    used = np.zeros(len(segments), dtype=bool)

    def walk(start: int) -> List[int]:
        chain = [start]
        current = start
        while True:
            nxt = next((k for k in incident[current] if not used[k]), None)
            if nxt is None:
                return chain
            used[nxt] = True
            e1, e2 = segments[nxt]
            current = int(e2) if int(e1) == current else int(e1)
            chain.append(current)

    chains: List[Tuple[List[int], bool]] = []
    ends = sorted(e for e, ks in incident.items() if len(ks) == 1)
    for e in ends:
        if any(not used[k] for k in incident[e]):
            chains.append((walk(e), False))
    for e in sorted(incident):
        if any(not used[k] for k in incident[e]):
            chain = walk(e)
            chains.append((chain, chain[0] == chain[-1]))
    return chains


def _inverse_norms(grads: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(grads, axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        inv = np.where(norms > _MIN_GRADIENT, 1.0 / np.maximum(norms, _MIN_GRADIENT), np.nan)
    return inv


def _weighted_pieces(scm: Scm2D, a_factual: Arm, polyline: LevelSetPolyline):
    """Trapezoidal weights of 1/|grad f| per piece, split between its two endpoints.

    A piece of length L between vertices p and q carries L/2 * 1/|grad f(p)| at p and
    L/2 * 1/|grad f(q)| at q. Where either endpoint gradient vanishes or is not finite
    the piece falls back to the midpoint rule.
    """
    starts, ends, mids, lengths = polyline.pieces()
    inv_start, inv_end = [], []
    for points in polyline.segments:
        inv = _inverse_norms(scm.gradients(a_factual, points))
        inv_start.append(inv[:-1])
        inv_end.append(inv[1:])
    inv_start = np.concatenate(inv_start)
    inv_end = np.concatenate(inv_end)
    w_start = 0.5 * lengths * inv_start
    w_end = 0.5 * lengths * inv_end
    bad = ~(np.isfinite(w_start) & np.isfinite(w_end))
    if np.any(bad):
        inv_mid = _inverse_norms(scm.gradients(a_factual, mids[bad]))
        half = np.where(np.isfinite(inv_mid), 0.5 * lengths[bad] * inv_mid, 0.0)
        w_start[bad] = half
        w_end[bad] = half
    return starts, ends, w_start, w_end


def observational_density(scm: Scm2D, a: Union[Arm, int], y: float, cfg: Optional[OracleConfig] = None) -> float:
    """Density of Y | a at y as the line integral of 1/|grad f| over the level set."""
    a = as_arm(a)
    polyline = trace_level_set(scm, a, y, cfg)
    _, _, w_start, w_end = _weighted_pieces(scm, a, polyline)
    return float(w_start.sum() + w_end.sum())


def _check_direction(a_prime: Arm, a: Arm) -> None:
    if a_prime == a:
        raise PreconditionError("Counterfactual arm must differ from the factual arm")


def ecou_oracle(scm: Scm2D, a_prime: Union[Arm, int], y_prime: float, a: Union[Arm, int],
                cfg: Optional[OracleConfig] = None) -> float:
    """Expected counterfactual outcome E[Y_a | a', y'] by integration along the factual level set."""
    a_prime, a = as_arm(a_prime), as_arm(a)
    _check_direction(a_prime, a)
    started = time.perf_counter()
    polyline = trace_level_set(scm, a_prime, y_prime, cfg)
    starts, ends, w_start, w_end = _weighted_pieces(scm, a_prime, polyline)
    density = w_start.sum() + w_end.sum()
    if density <= 0:
        raise EmptyLevelSetError(f"Factual level set of {y_prime} carries no mass")
    q = float((np.dot(w_start, scm.values(a, starts)) + np.dot(w_end, scm.values(a, ends))) / density)
    log_performance_metric(f'ecou_oracle.{scm.name}', (time.perf_counter() - started) * 1000)
    return q


def counterfactual_density(scm: Scm2D, a_prime: Union[Arm, int], y_prime: float, a: Union[Arm, int],
                           grid: Sequence[float], cfg: Optional[OracleConfig] = None) -> np.ndarray:
    """Counterfactual density of Y_a | a', y' on a grid of outcome values.

    Each level-set piece carries mass proportional to its length over |grad f(a', .)|
    and spreads it uniformly over the interval of counterfactual outcomes it covers.
    """
    a_prime, a = as_arm(a_prime), as_arm(a)
    _check_direction(a_prime, a)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise PreconditionError("grid must be an increasing list of at least two outcome values")
    polyline = trace_level_set(scm, a_prime, y_prime, cfg)
    starts, ends, w_start, w_end = _weighted_pieces(scm, a_prime, polyline)
    weights = w_start + w_end
    mass = weights / weights.sum()

    v0 = scm.values(a, starts)
    v1 = scm.values(a, ends)
    lo = np.minimum(v0, v1)[:, None]
    hi = np.maximum(v0, v1)[:, None]

    # half cells at both ends of the grid
    edges = np.concatenate([[grid[0]], 0.5 * (grid[:-1] + grid[1:]), [grid[-1]]])
    width = hi - lo
    flat = width[:, 0] <= 1e-14
    with np.errstate(divide='ignore', invalid='ignore'):
        share = np.clip((edges[None, :] - lo) / width, 0.0, 1.0)
    share[flat] = (edges[None, :] >= lo[flat]).astype(float)
    binned = (np.diff(share, axis=1) * mass[:, None]).sum(axis=0)
    density = binned / np.diff(edges)
    total = trapezoid(density, grid)
    if total <= 0:
        raise EmptyLevelSetError(f"Counterfactual mass of y'={y_prime} falls outside the grid")
    return density / total


def cdf_oracle(scm: Scm2D, a: Union[Arm, int], y: float, n_mc: int, seed: int) -> float:
    """Monte-Carlo estimate of P(Y <= y | a)."""
    if n_mc < 1:
        raise PreconditionError(f"n_mc must be >= 1, got {n_mc}")
    rng = np.random.default_rng(seed)
    u = rng.random((n_mc, 2))
    return float(np.mean(scm.values(as_arm(a), u) <= y))


def ecou_curve(scm: Scm2D, a_prime: Union[Arm, int], y_grid: Sequence[float], a: Union[Arm, int],
               cfg: Optional[OracleConfig] = None, max_workers: int = 1) -> np.ndarray:
    """ecou_oracle over a y' grid; worker results are assembled in grid order."""
    values = [float(v) for v in y_grid]
    if max_workers <= 1 or len(values) <= 1:
        return np.array([ecou_oracle(scm, a_prime, v, a, cfg) for v in values])
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return np.array(list(pool.map(lambda v: ecou_oracle(scm, a_prime, v, a, cfg), values)))
