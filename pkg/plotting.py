"""
SVG figures: bound curves against the BGM curves, oracle curves and curvature heatmaps.
"""
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.special import logit  # noqa: E402

from apid import ApidModel, outcome_curvature_logits  # noqa: E402
from autodiff import detach  # noqa: E402
from error_handling import UsageError  # noqa: E402
from resflow import outcome_from_logits  # noqa: E402
from scm_core import as_arm  # noqa: E402

logger = logging.getLogger(__name__)

FIGSIZE = (6.0, 4.0)


def _save(fig, out_path: Union[str, Path]) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, format='svg', bbox_inches='tight')
    plt.close(fig)
    logger.info(f"Wrote figure {out_path}")
    return out_path


def plot_bound_curves(bounds_docs: Sequence[Dict], out_path: Union[str, Path],
                      bgm_rows: Optional[Sequence[Tuple[float, float, float]]] = None,
                      oracle_curves: Sequence[Dict] = ()) -> Path:
    """Bound intervals per curvature weight over y', with the BGM curves and ground truth when given."""
    if not bounds_docs and not bgm_rows and not oracle_curves:
        raise UsageError("nothing to plot")
    fig, ax = plt.subplots(figsize=FIGSIZE)

    by_lambda: Dict[float, List[Tuple[float, float, float]]] = defaultdict(list)
    for doc in bounds_docs:
        key = float(doc.get('config', {}).get('lambda_kappa', float('nan')))
        by_lambda[key].append((doc['query']['y_prime'], doc['lower'], doc['upper']))
    colors = plt.cm.viridis(np.linspace(0.15, 0.85, max(len(by_lambda), 1)))
    for color, (lam, rows) in zip(colors, sorted(by_lambda.items())):
        rows = sorted(rows)
        ys = np.array([r[0] for r in rows])
        lower = np.array([r[1] for r in rows])
        upper = np.array([r[2] for r in rows])
        label = f"bounds, λκ={lam:g}"
        if len(rows) > 1:
            ax.fill_between(ys, lower, upper, color=color, alpha=0.3, label=label)
            ax.plot(ys, lower, color=color, lw=1)
            ax.plot(ys, upper, color=color, lw=1)
        else:
            ax.vlines(ys, lower, upper, color=color, lw=4, label=label)

    if bgm_rows:
        rows = np.asarray(bgm_rows, dtype=float)
        ax.plot(rows[:, 0], rows[:, 1], 'k--', lw=1, label='BGM (increasing)')
        ax.plot(rows[:, 0], rows[:, 2], 'k:', lw=1, label='BGM (decreasing)')
    for doc in oracle_curves:
        curve = doc['curve']
        ax.plot(curve['y_prime'], curve['q'], lw=1.5, label=f"oracle {doc['scm']}")

    ax.set_xlabel("factual outcome y'")
    ax.set_ylabel('expected counterfactual outcome')
    ax.legend(loc='best', fontsize='small')
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_density(doc: Dict, out_path: Union[str, Path]) -> Path:
    """Counterfactual density of a single oracle query."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    curve = doc['density_curve']
    ax.plot(curve['y'], curve['density'], lw=1.5)
    ax.axvline(doc['q'], color='k', ls='--', lw=1, label=f"ECOU = {doc['q']:.4f}")
    ax.set_xlabel('counterfactual outcome')
    ax.set_ylabel('density')
    ax.set_title(f"{doc['scm']}: {doc['a_prime']}→{doc['a']} at y'={doc['y_prime']:g}")
    ax.legend(loc='best', fontsize='small')
    return _save(fig, out_path)


def curvature_grid(model: ApidModel, a, resolution: int = 60) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Unit-square grid, |curvature| (nan where the gradient vanishes) and outcome values of f_Y(a, .)."""
    if resolution < 4:
        raise UsageError(f"resolution must be >= 4, got {resolution}")
    flow = detach(model.flow(a))
    ticks = (np.arange(resolution) + 0.5) / resolution
    u1, u2 = np.meshgrid(ticks, ticks, indexing='xy')
    z = logit(np.column_stack([u1.ravel(), u2.ravel()]))
    kappa, ok = outcome_curvature_logits(flow, z)
    kappa = np.where(ok, np.abs(kappa), np.nan).reshape(u1.shape)
    outcomes = outcome_from_logits(flow, z).reshape(u1.shape)
    return u1, u2, kappa, outcomes


def plot_curvature_map(model: ApidModel, a, out_path: Union[str, Path], resolution: int = 60,
                       a_prime=None, y_prime: Optional[float] = None, levels: int = 12) -> Path:
    """Heatmap of level-set |curvature| of f_Y(a, .) with its level sets; optionally the factual level set of y'."""
    a = as_arm(a)
    u1, u2, kappa, outcomes = curvature_grid(model, a, resolution)
    fig, ax = plt.subplots(figsize=(5.0, 4.5))
    mesh = ax.pcolormesh(u1, u2, np.log10(kappa + 1e-12), shading='auto', cmap='magma')
    fig.colorbar(mesh, ax=ax, label='log10 |curvature|')
    ax.contour(u1, u2, outcomes, levels=levels, colors='white', linewidths=0.6)
    if a_prime is not None and y_prime is not None:
        _, _, _, factual = curvature_grid(model, a_prime, resolution)
        if factual.min() < y_prime < factual.max():
            ax.contour(u1, u2, factual, levels=[y_prime], colors='cyan', linewidths=1.5)
        else:
            logger.warning(f"y'={y_prime} not reached by f_Y({int(as_arm(a_prime))}, .) on the plotting grid")
    ax.set_xlabel('u1')
    ax.set_ylabel('u2')
    ax.set_aspect('equal')
    ax.set_title(f'level-set curvature of arm {int(a)}')
    return _save(fig, out_path)
