"""
Losses, Adam/EMA updates and the three-stage training of upper and lower counterfactual bounds.

Stage 1 (burn-in) fits both arms to the observational data. Stage 2 copies the
counterfactual arm into an upper and a lower model, freezes the factual arm and
pushes the counterfactual query up or down. Stage 3 adds the level-set
curvature penalty.
"""
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from apid import (ApidModel, CurvatureMode, QueryResult, curvature_penalty, ecou_estimate, init_model,
                  level_set_points, likelihood_terms, masked_record_mean, penalty_from_points, sample_outcomes)
from autodiff import Tape, Var, detach, map_parameters, named_parameters, softplus, value, with_parameters
from config import get_preset
from data import Dataset, wasserstein1_sorted
from error_handling import NumericalError, PreconditionError, ValidationError
from monitoring import InversionMonitor, IterationRecord, StageTimer, TrainingLog
from resflow import normalize_lipschitz
from scm_core import Arm, as_arm

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
FIDELITY_SAMPLES = 10_000


class Bound(str, Enum):
    UPPER = 'upper'
    LOWER = 'lower'


@dataclass
class TrainConfig:
    """Hyperparameters of one bound-training run."""
    lr: float = 0.01
    batch_size: int = 32
    n_burnin: int = 500
    n_query: int = 100
    n_curv_query: int = 500
    eps2: float = 0.25
    sigma2_noise: float = 1e-6
    ema_gamma: float = 0.99
    lambda_q: float = 2.0
    lambda_kappa: float = 1.0
    seed: int = 0
    fp_tol: float = 1e-4
    fp_max_iter: int = 200
    n_blocks: int = 15
    hidden_width: int = 5
    aug_hidden_width: int = 5
    lipschitz_target: float = 0.97
    power_iters: int = 5
    exact_spectral_norm: bool = True
    n_aug: int = 1
    curvature_mode: str = CurvatureMode.TAPED
    curvature_abs: bool = True
    n_eval: int = 256
    support_slack: float = 0.05
    abort_window: int = 50
    abort_fraction: float = 0.5
    log_every: int = 50

    def __post_init__(self):
        counts = ('batch_size', 'n_burnin', 'n_query', 'n_curv_query', 'fp_max_iter', 'n_blocks', 'hidden_width',
                  'aug_hidden_width', 'power_iters', 'n_aug', 'n_eval', 'abort_window', 'log_every')
        errors = [f"{name} must be positive, got {getattr(self, name)}" for name in counts if getattr(self, name) < 1]
        for name in ('lambda_q', 'lambda_kappa', 'sigma2_noise', 'support_slack'):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.lr > 0:
            errors.append(f"lr must be positive, got {self.lr}")
        if not self.eps2 > 0:
            errors.append(f"eps2 must be positive, got {self.eps2}")
        if not 0.0 <= self.ema_gamma <= 1.0:
            errors.append(f"ema_gamma must be in [0, 1], got {self.ema_gamma}")
        if not 0.0 < self.lipschitz_target < 1.0:
            errors.append(f"lipschitz_target must be in (0, 1), got {self.lipschitz_target}")
        if not self.fp_tol > 0:
            errors.append(f"fp_tol must be positive, got {self.fp_tol}")
        if not 0.0 < self.abort_fraction <= 1.0:
            errors.append(f"abort_fraction must be in (0, 1], got {self.abort_fraction}")
        if self.curvature_mode not in CurvatureMode.ALL:
            errors.append(f"curvature_mode must be one of {CurvatureMode.ALL}, got '{self.curvature_mode}'")
        if errors:
            raise ValidationError("; ".join(errors))

    @classmethod
    def from_preset(cls, name: str, **overrides) -> 'TrainConfig':
        """Defaults, then the named preset, then explicit overrides (None values ignored)."""
        known = {f.name for f in fields(cls)}
        values = get_preset(name)
        values.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"Unknown training settings: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> 'AdamState':
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; parameters without a gradient are left alone."""
    t = state.t + 1
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        g = np.asarray(g, dtype=float)
        if g.shape != np.shape(params[name]):
            raise PreconditionError(f"gradient for {name} has shape {g.shape}, parameter {np.shape(params[name])}")
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


def ema_update(ema_params: Dict[str, np.ndarray], params: Dict[str, np.ndarray], gamma: float) -> Dict[str, np.ndarray]:
    """e <- gamma e + (1 - gamma) p for every entry of ema_params."""
    return {k: gamma * e + (1.0 - gamma) * np.asarray(params[k]) for k, e in ema_params.items()}


# --- losses --------------------------------------------------------------------

@dataclass
class StepStats:
    n_inversions: int = 0
    n_failed: int = 0
    q_hat: Optional[float] = None
    curvature: Optional[float] = None
    query_skipped: bool = False
    parts: Dict[str, float] = field(default_factory=dict)

    def add_inversions(self, attempted: int, failed: int) -> None:
        self.n_inversions += int(attempted)
        self.n_failed += int(failed)


def _check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=float).reshape(-1)
    if batch.size == 0:
        raise PreconditionError("batch must be nonempty")
    return batch


def nll_term(model: ApidModel, a, batch, sigma2: float, seed, n_aug: int = 1, tol: float = 1e-4,
             max_iter: int = 200, stats: Optional[StepStats] = None):
    """Negative mean augmented log-likelihood of noise-perturbed outcomes."""
    batch = _check_batch(batch)
    rng = np.random.default_rng(seed)
    noisy = batch + np.sqrt(sigma2) * rng.standard_normal(batch.size)
    zeta = rng.standard_normal((batch.size, n_aug))
    terms, converged = likelihood_terms(model, a, noisy, zeta, tol, max_iter)
    if stats is not None:
        stats.add_inversions(converged.size, np.sum(~converged))
    mean, _ = masked_record_mean(terms, converged, batch.size)
    return -mean


def wasserstein_term(model: ApidModel, a, batch, b: int, seed):
    """W1 between b model outcome samples and the batch."""
    batch = np.sort(_check_batch(batch))
    samples = sample_outcomes(model.flow(a), b, seed)
    order = np.argsort(value(samples), kind='stable')
    return wasserstein1_sorted(samples[order], batch)


def query_term(result: QueryResult, direction: Bound):
    """Softplus(-Q) pushes the query up, Softplus(Q) pushes it down."""
    q = result.q_hat
    return softplus(-q) if Bound(direction) is Bound.UPPER else softplus(q)


def kappa_term(model: ApidModel, a, q_hat: float, b: int, seed, mode: str = CurvatureMode.TAPED,
               use_abs: bool = True, tol: float = 1e-4, max_iter: int = 200, stats: Optional[StepStats] = None):
    """Curvature penalty at level-set points found on the numeric model; differentiable in model parameters."""
    z, converged = level_set_points(model, a, q_hat, b, seed, tol, max_iter)
    if stats is not None:
        stats.add_inversions(converged.size, np.sum(~converged))
    penalty, _ = penalty_from_points(model.flow(a), z[converged], mode, use_abs)
    return penalty


def loss_nll(model: ApidModel, a, batch, sigma2: float, seed, n_aug: int = 1, tol: float = 1e-4,
             max_iter: int = 200) -> float:
    return float(value(nll_term(detach(model), a, batch, sigma2, seed, n_aug, tol, max_iter)))


def loss_w(model: ApidModel, a, batch, b: int, seed) -> float:
    return float(value(wasserstein_term(detach(model), a, batch, b, seed)))


def loss_q(model: ApidModel, a_prime, y_prime: float, a, direction, b: int, seed, tol: float = 1e-4,
           max_iter: int = 200) -> float:
    result = ecou_estimate(detach(model), a_prime, y_prime, a, b, seed, tol, max_iter)
    return float(value(query_term(result, direction)))


def loss_kappa(model: ApidModel, a, q_hat: float, b: int, seed, mode: str = CurvatureMode.TAPED,
               use_abs: bool = True, tol: float = 1e-4, max_iter: int = 200) -> float:
    return curvature_penalty(model, a, q_hat, b, seed, mode, use_abs, tol, max_iter)


# --- parameter plumbing ------------------------------------------------------

def trainable_names(model: ApidModel, arms: Sequence) -> List[str]:
    prefixes = tuple(p for a in arms for p in (f'flow{int(as_arm(a))}.', f'g{int(as_arm(a))}.'))
    return [name for name in named_parameters(model) if name.startswith(prefixes)]


def value_and_gradients(model: ApidModel, names: Sequence[str],
                        objective: Callable[[ApidModel], Any]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Evaluate objective on a copy whose named leaves are taped; other leaves stay constant."""
    tape = Tape()
    wanted = set(names)
    leaves: Dict[str, Var] = {}

    def lift(name, leaf):
        if name in wanted:
            leaves[name] = tape.variable(value(leaf))
            return leaves[name]
        return np.asarray(value(leaf), dtype=float)

    loss = objective(map_parameters(model, lift))
    if not isinstance(loss, Var):
        return float(value(loss)), {name: np.zeros_like(value(leaves[name])) for name in names}
    grads = tape.gradient(loss, [leaves[name] for name in names])
    return float(loss.value), dict(zip(names, grads))


def _renormalize(model: ApidModel, arms: Sequence, power_iters: int, exact: bool = True) -> ApidModel:
    for a in arms:
        flow = model.flow(a)
        blocks = [normalize_lipschitz(b, power_iters, exact) for b in flow.blocks]
        model = model.with_arm(a, flow=replace(flow, blocks=blocks))
    return model


def _numeric_params(model: ApidModel) -> Dict[str, np.ndarray]:
    return {k: np.asarray(value(v), dtype=float) for k, v in named_parameters(model).items()}


# --- training ----------------------------------------------------------------

@dataclass
class BoundsResult:
    lower: float
    upper: float
    support_estimate: Tuple[float, float]
    query: Tuple[int, float, int]
    q_upper: float
    q_lower: float
    crossed: bool
    trajectories: Dict[str, List[float]]
    burnin_nll: Dict[int, float]
    burnin_wasserstein: Dict[int, float]
    final_wasserstein: Dict[str, float]
    upper_model: ApidModel = field(repr=False)
    lower_model: ApidModel = field(repr=False)
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def within_support(self, slack: float = 0.05) -> bool:
        low, high = self.support_estimate
        return low - slack <= self.lower and self.upper <= high + slack

    def to_dict(self) -> Dict[str, Any]:
        a_prime, y_prime, a = self.query
        return {
            'query': {'a_prime': int(a_prime), 'y_prime': float(y_prime), 'a': int(a)},
            'lower': float(self.lower),
            'upper': float(self.upper),
            'q_upper': float(self.q_upper),
            'q_lower': float(self.q_lower),
            'crossed': bool(self.crossed),
            'support_estimate': [float(self.support_estimate[0]), float(self.support_estimate[1])],
            'burnin_nll': {str(k): float(v) for k, v in self.burnin_nll.items()},
            'burnin_wasserstein': {str(k): float(v) for k, v in self.burnin_wasserstein.items()},
            'final_wasserstein': {k: float(v) for k, v in self.final_wasserstein.items()},
            'trajectories': {k: [float(x) for x in v] for k, v in self.trajectories.items()},
            'config': dict(self.config),
        }


class BoundTrainer:
    """Runs burn-in, query and curvature-query stages for one (a', y', a) query."""

    def __init__(self, dataset: Dataset, query: Tuple, cfg: TrainConfig, log: Optional[TrainingLog] = None):
        a_prime, y_prime, a = query
        self.a_prime, self.a = as_arm(a_prime), as_arm(a)
        self.y_prime = float(y_prime)
        if self.a == self.a_prime:
            raise PreconditionError("counterfactual arm must differ from the factual arm")
        if dataset.n0 < 2 or dataset.n1 < 2:
            raise PreconditionError(f"both arms need at least 2 records, got {dataset.n0} and {dataset.n1}")
        self.cfg = cfg
        self.outcomes = {arm: dataset.outcomes_for(arm) for arm in Arm}
        low, high = float(self.outcomes[self.a_prime].min()), float(self.outcomes[self.a_prime].max())
        if not low <= self.y_prime <= high:
            raise PreconditionError(f"y'={self.y_prime} outside the arm-{int(self.a_prime)} sample range [{low:.4f}, {high:.4f}]")
        target = self.outcomes[self.a]
        self.support = (float(target.min()), float(target.max()))
        self.log = log or TrainingLog()
        self.monitor = InversionMonitor(cfg.abort_window, cfg.abort_fraction)
        seeds = np.random.SeedSequence(cfg.seed).spawn(5)
        self.init_seed, self.burnin_seed, upper_seed, lower_seed, eval_seed = seeds
        self.copy_seeds = {Bound.UPPER: upper_seed, Bound.LOWER: lower_seed}
        self.eval_seed = int(eval_seed.generate_state(1)[0])
        self.trajectories: Dict[str, List[float]] = {'loss_burnin': []}
        for bound in Bound:
            for key in ('q', 'loss', 'curvature'):
                self.trajectories[f'{key}_{bound.value}'] = []

    # -- objectives

    def _batch(self, rng: np.random.Generator, arm: Arm) -> np.ndarray:
        outcomes = self.outcomes[arm]
        return rng.choice(outcomes, size=min(self.cfg.batch_size, outcomes.size), replace=False)

    def _fit_terms(self, m: ApidModel, arm: Arm, batch: np.ndarray, seeds, stats: StepStats):
        cfg = self.cfg
        nll = nll_term(m, arm, batch, cfg.sigma2_noise, seeds[0], cfg.n_aug, cfg.fp_tol, cfg.fp_max_iter, stats)
        w = wasserstein_term(m, arm, batch, batch.size, seeds[1])
        stats.parts[f'nll{int(arm)}'] = float(value(nll))
        stats.parts[f'w{int(arm)}'] = float(value(w))
        return nll + w

    def _burnin_objective(self, batches, seeds, stats: StepStats):
        def objective(m):
            return sum((self._fit_terms(m, arm, batches[arm], seeds[int(arm)], stats) for arm in Arm), 0.0)
        return objective

    def _copy_objective(self, bound: Bound, batch, seeds, with_curvature: bool, stats: StepStats):
        cfg = self.cfg

        def objective(m):
            loss = self._fit_terms(m, self.a, batch, seeds[:2], stats)
            try:
                result = ecou_estimate(m, self.a_prime, self.y_prime, self.a, cfg.batch_size, seeds[2],
                                       cfg.fp_tol, cfg.fp_max_iter)
            except NumericalError as exc:
                logger.debug(f"{bound.value}: abduction failed ({exc})")
                stats.add_inversions(cfg.batch_size, cfg.batch_size)
                stats.query_skipped = True
                return loss
            stats.add_inversions(cfg.batch_size, 0)
            q_hat = float(value(result.q_hat))
            stats.q_hat = q_hat
            low, high = self.support
            if not low <= q_hat <= high:
                # non-informative region, fit terms only
                stats.query_skipped = True
            elif cfg.lambda_q > 0:
                q_loss = query_term(result, bound)
                stats.parts['q'] = float(value(q_loss))
                loss = loss + cfg.lambda_q * q_loss
            if with_curvature and cfg.lambda_kappa > 0:
                kappa = kappa_term(m, self.a, q_hat, cfg.batch_size, seeds[3], cfg.curvature_mode,
                                   cfg.curvature_abs, cfg.fp_tol, cfg.fp_max_iter, stats)
                stats.curvature = float(value(kappa))
                stats.parts['kappa'] = stats.curvature
                loss = loss + cfg.lambda_kappa * kappa
            return loss
        return objective

    # -- loop

    def _step(self, model: ApidModel, names: List[str], state: AdamState, objective, arms) -> Tuple[ApidModel, AdamState, float]:
        loss, grads = value_and_gradients(model, names, objective)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            logger.warning(f"non-finite loss or gradient ({loss}); step skipped")
            return model, state, loss
        params = _numeric_params(model)
        trained, state = adam_step({n: params[n] for n in names}, grads, state, self.cfg.lr)
        model = _renormalize(with_parameters(model, trained), arms, self.cfg.power_iters,
                             self.cfg.exact_spectral_norm)
        return model, state, loss

    def _record(self, iteration: int, stage: str, bound: str, loss: float, stats: StepStats) -> None:
        self.monitor.record(iteration, stats.n_inversions, stats.n_failed)
        record = IterationRecord(iteration=iteration, stage=stage, bound=bound, losses=dict(stats.parts, total=loss),
                                 q_hat=stats.q_hat, curvature=stats.curvature, query_skipped=stats.query_skipped,
                                 n_inversions=stats.n_inversions, n_failed=stats.n_failed)
        self.log.write(record)
        if (iteration + 1) % self.cfg.log_every == 0:
            q_text = f", q={stats.q_hat:.4f}" if stats.q_hat is not None else ''
            logger.info(f"[{stage}/{bound}] iteration {iteration + 1}: loss={loss:.4f}{q_text}")
        self.monitor.raise_if_unhealthy(f"{stage}/{bound} iteration {iteration}")

    def burn_in(self, model: ApidModel) -> ApidModel:
        cfg = self.cfg
        rng = np.random.default_rng(self.burnin_seed)
        names = trainable_names(model, list(Arm))
        state = AdamState.zeros_like({n: value(v) for n, v in named_parameters(model).items() if n in names})
        with StageTimer('training.burnin'):
            for it in range(cfg.n_burnin):
                batches = {arm: self._batch(rng, arm) for arm in Arm}
                seeds = rng.integers(0, 2 ** 32, size=(2, 2))
                stats = StepStats()
                model, state, loss = self._step(model, names, state, self._burnin_objective(batches, seeds, stats),
                                                list(Arm))
                self.trajectories['loss_burnin'].append(loss)
                self._record(it, 'burnin', 'both', loss, stats)
        return model

    def train_copy(self, model: ApidModel, bound: Bound) -> ApidModel:
        """Query and curvature-query stages for one copy; returns the EMA model."""
        cfg = self.cfg
        rng = np.random.default_rng(self.copy_seeds[bound])
        names = trainable_names(model, [self.a])
        params = _numeric_params(model)
        state = AdamState.zeros_like({n: params[n] for n in names})
        ema = {n: params[n].copy() for n in names}
        schedule = [('query', cfg.n_query, False), ('curvature', cfg.n_curv_query, True)]
        iteration = cfg.n_burnin
        for stage, n_iter, with_curvature in schedule:
            with StageTimer(f'training.{stage}.{bound.value}'):
                for _ in range(n_iter):
                    batch = self._batch(rng, self.a)
                    seeds = rng.integers(0, 2 ** 32, size=4)
                    stats = StepStats()
                    objective = self._copy_objective(bound, batch, seeds, with_curvature, stats)
                    model, state, loss = self._step(model, names, state, objective, [self.a])
                    ema = ema_update(ema, _numeric_params(model), cfg.ema_gamma)
                    self.trajectories[f'loss_{bound.value}'].append(loss)
                    self.trajectories[f'q_{bound.value}'].append(stats.q_hat if stats.q_hat is not None else float('nan'))
                    if with_curvature:
                        self.trajectories[f'curvature_{bound.value}'].append(
                            stats.curvature if stats.curvature is not None else float('nan'))
                    self._record(iteration, stage, bound.value, loss, stats)
                    iteration += 1
        return with_parameters(model, ema)

    def _fidelity(self, model: ApidModel, arm: Arm) -> float:
        data = np.sort(self.outcomes[arm])
        samples = np.sort(value(sample_outcomes(detach(model).flow(arm), FIDELITY_SAMPLES, self.eval_seed)))
        return float(wasserstein1_sorted(samples, data))

    def run(self) -> BoundsResult:
        cfg = self.cfg
        a_prime, a = self.a_prime, self.a
        init_rng = np.random.default_rng(self.init_seed)
        loc = tuple(float(np.mean(self.outcomes[arm])) for arm in Arm)
        std = tuple(float(np.std(self.outcomes[arm])) for arm in Arm)
        model = init_model(init_rng, loc, std, eps2=cfg.eps2, n_blocks=cfg.n_blocks, hidden=cfg.hidden_width,
                           aug_hidden=cfg.aug_hidden_width, lipschitz_target=cfg.lipschitz_target)
        logger.info(f"Training bounds for query {int(a_prime)}->{int(a)} at y'={self.y_prime} "
                    f"(lambda_q={cfg.lambda_q}, lambda_kappa={cfg.lambda_kappa}, seed={cfg.seed})")

        model = self.burn_in(model)
        burnin_nll = {int(arm): loss_nll(model, arm, self.outcomes[arm], 0.0, self.eval_seed,
                                         tol=cfg.fp_tol, max_iter=cfg.fp_max_iter) for arm in Arm}
        burnin_w = {int(arm): self._fidelity(model, arm) for arm in Arm}
        logger.info(f"Burn-in finished: NLL {burnin_nll}, W1 {burnin_w}")

        factual_before = {k: v.copy() for k, v in _numeric_params(model).items()
                          if k not in trainable_names(model, [a])}
        models = {bound: self.train_copy(model, bound) for bound in Bound}
        for bound, trained in models.items():
            after = _numeric_params(trained)
            if any(not np.array_equal(after[k], v) for k, v in factual_before.items()):
                raise NumericalError(f"factual parameters changed while training the {bound.value} copy")

        q = {}
        for bound, trained in models.items():
            q[bound] = float(value(ecou_estimate(trained, a_prime, self.y_prime, a, cfg.n_eval, self.eval_seed,
                                                 cfg.fp_tol, cfg.fp_max_iter).q_hat))
        crossed = q[Bound.UPPER] < q[Bound.LOWER]
        if crossed:
            logger.warning(f"upper copy ({q[Bound.UPPER]:.4f}) ended below lower copy ({q[Bound.LOWER]:.4f}); reporting min/max")
        result = BoundsResult(
            lower=min(q.values()),
            upper=max(q.values()),
            support_estimate=self.support,
            query=(int(a_prime), self.y_prime, int(a)),
            q_upper=q[Bound.UPPER],
            q_lower=q[Bound.LOWER],
            crossed=crossed,
            trajectories=self.trajectories,
            burnin_nll=burnin_nll,
            burnin_wasserstein=burnin_w,
            final_wasserstein={bound.value: self._fidelity(trained, a) for bound, trained in models.items()},
            upper_model=models[Bound.UPPER],
            lower_model=models[Bound.LOWER],
            config=cfg.to_dict(),
        )
        if not result.within_support(cfg.support_slack):
            logger.warning(f"bounds [{result.lower:.4f}, {result.upper:.4f}] leave the support estimate "
                           f"[{self.support[0]:.4f}, {self.support[1]:.4f}] by more than {cfg.support_slack}")
        logger.info(f"Bounds for {int(a_prime)}->{int(a)} at y'={self.y_prime}: [{result.lower:.4f}, {result.upper:.4f}]")
        return result


def train_bounds(dataset: Dataset, query: Tuple, cfg: TrainConfig, log: Optional[TrainingLog] = None) -> BoundsResult:
    """Upper and lower counterfactual-query bounds under the curvature-penalized model."""
    return BoundTrainer(dataset, query, cfg, log).run()
