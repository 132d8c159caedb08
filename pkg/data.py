"""
Observational datasets, empirical distributions and the synthetic generators.
"""
import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from error_handling import DataFormatError, PreconditionError, UnknownArmError, ValidationError
from scm_core import Arm, as_arm, box_muller, sample_observational

logger = logging.getLogger(__name__)

CSV_HEADER = ('a', 'y')


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observational records D = {(A_i, Y_i)}."""
    arms: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        arms = np.asarray(self.arms)
        outcomes = np.asarray(self.outcomes, dtype=float)
        if arms.shape != outcomes.shape or arms.ndim != 1:
            raise ValidationError(f"arms {arms.shape} and outcomes {outcomes.shape} must be matching vectors")
        if arms.size and not np.all((arms == 0) | (arms == 1)):
            raise UnknownArmError(f"Unknown arm values {sorted(set(arms.tolist()) - {0, 1})}")
        if not np.all(np.isfinite(outcomes)):
            raise ValidationError("Outcomes must be finite")
        object.__setattr__(self, 'arms', arms.astype(np.int8))
        object.__setattr__(self, 'outcomes', outcomes)

    @classmethod
    def from_arms(cls, outcomes0: Sequence[float], outcomes1: Sequence[float]) -> 'Dataset':
        y0 = np.asarray(outcomes0, dtype=float)
        y1 = np.asarray(outcomes1, dtype=float)
        arms = np.concatenate([np.zeros(y0.size, dtype=np.int8), np.ones(y1.size, dtype=np.int8)])
        return cls(arms=arms, outcomes=np.concatenate([y0, y1]))

    @property
    def n0(self) -> int:
        return int(np.sum(self.arms == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.arms == 1))

    @property
    def records(self) -> List[Tuple[Arm, float]]:
        return [(Arm(int(a)), float(y)) for a, y in zip(self.arms, self.outcomes)]

    def outcomes_for(self, a: Union[Arm, int]) -> np.ndarray:
        return self.outcomes[self.arms == int(as_arm(a))]

    def empirical(self, a: Union[Arm, int]) -> 'EmpiricalDist':
        return EmpiricalDist.from_sample(self.outcomes_for(a))

    def __len__(self) -> int:
        return int(self.arms.size)


@dataclass(frozen=True, eq=False)
class EmpiricalDist:
    """Sorted sample with ECDF, quantile and support estimate."""
    sorted_values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.sorted_values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise PreconditionError("EmpiricalDist needs a nonempty 1-D sample")
        if np.any(np.diff(values) < 0):
            raise ValidationError("sorted_values must be nondecreasing")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, 'sorted_values', values)

    @classmethod
    def from_sample(cls, values: Sequence[float]) -> 'EmpiricalDist':
        return cls(np.sort(np.asarray(values, dtype=float)))

    @property
    def n(self) -> int:
        return int(self.sorted_values.size)

    @property
    def support_estimate(self) -> Tuple[float, float]:
        return float(self.sorted_values[0]), float(self.sorted_values[-1])


def ecdf(d: EmpiricalDist, y):
    """Right-continuous step ECDF, (#values <= y) / n."""
    counts = np.searchsorted(d.sorted_values, y, side='right')
    result = counts / d.n
    return float(result) if np.ndim(result) == 0 else result


def quantile(d: EmpiricalDist, q):
    """Left-continuous inverse of the ECDF: the ceil(q n)-th order statistic, q=0 gives the minimum."""
    q_arr = np.asarray(q, dtype=float)
    if np.any((q_arr < 0.0) | (q_arr > 1.0)):
        raise PreconditionError(f"quantile level outside [0, 1]: {q}")
    # rounding guards ceil against q*n landing a hair above an integer
    rank = np.ceil(np.round(q_arr * d.n, 9)).astype(int)
    index = np.clip(rank - 1, 0, d.n - 1)
    result = d.sorted_values[index]
    return float(result) if np.ndim(result) == 0 else result


def _merged_quantile_plan(n: int, m: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index pairs and weights of the piecewise-constant quantile-function difference."""
    breaks = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    widths = np.diff(breaks)
    mids = 0.5 * (breaks[:-1] + breaks[1:])
    keep = widths > 0
    i = np.clip(np.ceil(mids[keep] * n).astype(int) - 1, 0, n - 1)
    j = np.clip(np.ceil(mids[keep] * m).astype(int) - 1, 0, m - 1)
    return i, j, widths[keep]


def wasserstein1_sorted(xs, ys):
    """W1 between sorted samples; works on plain arrays and on taped variables for xs."""
    n = int(xs.shape[0])
    m = int(ys.shape[0])
    if n == m:
        return abs(xs - ys).mean()
    i, j, w = _merged_quantile_plan(n, m)
    return (abs(xs[i] - ys[j]) * w).sum()


def wasserstein1(d1: EmpiricalDist, d2: EmpiricalDist) -> float:
    """Wasserstein-1 distance between two empirical distributions."""
    return float(wasserstein1_sorted(d1.sorted_values, d2.sorted_values))


class DatasetTag(str, Enum):
    DATASET1 = '1'
    DATASET2 = '2'


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: float
    std: float


# Synthetic outcome mixtures per arm
DATASET_COMPONENTS = {
    DatasetTag.DATASET1: (
        (MixtureComponent(1.0, 0.0, 1.0),),
        (MixtureComponent(1.0, 0.0, 1.0),),
    ),
    DatasetTag.DATASET2: (
        (MixtureComponent(0.7, -0.5, 1.5), MixtureComponent(0.3, 1.5, 0.5)),
        (MixtureComponent(0.3, -2.5, 0.35), MixtureComponent(0.4, 0.5, 0.75), MixtureComponent(0.3, 2.0, 0.5)),
    ),
}


@dataclass(frozen=True)
class DatasetSpec:
    tag: DatasetTag
    n_per_arm: int
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, 'tag', DatasetTag(str(self.tag)))
        except ValueError:
            raise ValidationError(f"Unknown dataset tag '{self.tag}'")
        if self.n_per_arm < 2:
            raise ValidationError(f"n_per_arm must be >= 2, got {self.n_per_arm}")


def _sample_mixture(components: Sequence[MixtureComponent], n: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    choice_seed, normal_seed = seed_seq.spawn(2)
    rng = np.random.default_rng(choice_seed)
    weights = np.array([c.weight for c in components])
    labels = rng.choice(len(components), size=n, p=weights / weights.sum())
    means = np.array([c.mean for c in components])[labels]
    stds = np.array([c.std for c in components])[labels]
    normals = sample_observational(box_muller(), Arm.UNTREATED, n, int(normal_seed.generate_state(1)[0]))
    return means + stds * normals


def generate(request: DatasetSpec) -> Dataset:
    """Draw n_per_arm outcomes per arm from the tagged synthetic distribution."""
    arm_seeds = np.random.SeedSequence(request.seed).spawn(2)
    outcomes = [
        _sample_mixture(DATASET_COMPONENTS[request.tag][a], request.n_per_arm, arm_seeds[a])
        for a in (0, 1)
    ]
    logger.info(f"Generated dataset {request.tag.value} with {request.n_per_arm} records per arm (seed {request.seed})")
    return Dataset.from_arms(outcomes[0], outcomes[1])


def read_csv(path: Union[str, Path]) -> Dataset:
    """Read an 'a,y' dataset file."""
    arms: List[int] = []
    outcomes: List[float] = []
    with open(path, newline='') as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(f"expected header 'a,y', got {header}", line_number=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise DataFormatError(f"expected 2 fields, got {len(row)}", line_number=line)
            try:
                arm_value = int(row[0].strip())
            except ValueError:
                raise DataFormatError(f"arm '{row[0]}' is not an integer", line_number=line)
            if arm_value not in (0, 1):
                raise UnknownArmError(f"line {line}: unknown arm {arm_value}")
            try:
                outcome = float(row[1].strip())
            except ValueError:
                raise DataFormatError(f"outcome '{row[1]}' is not a number", line_number=line)
            if not math.isfinite(outcome):
                raise DataFormatError(f"outcome '{row[1]}' is not finite", line_number=line)
            arms.append(arm_value)
            outcomes.append(outcome)
    return Dataset(arms=np.array(arms, dtype=np.int8), outcomes=np.array(outcomes, dtype=float))


def write_csv(dataset: Dataset, path: Union[str, Path]) -> None:
    """Write a dataset with 17 significant digits per outcome."""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for a, y in zip(dataset.arms, dataset.outcomes):
            writer.writerow((int(a), f"{float(y):.17g}"))
    logger.info(f"Wrote {len(dataset)} records to {path}")
