"""
Run monitoring: per-iteration records, inversion health, JSON-lines training log and run manifests.
"""
import json
import logging
import platform
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Tuple, Union

import numpy as np

from config import __version__ as CODE_VERSION
from error_handling import TrainingAbortedError, ValidationError, log_performance_metric

logger = logging.getLogger(__name__)

HEALTHY = 'healthy'
DEGRADED = 'degraded'
UNHEALTHY = 'unhealthy'


def to_jsonable(obj):
    """Convert numpy scalars/arrays and paths inside nested containers to JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@dataclass
class IterationRecord:
    """One optimizer step of one model copy."""
    iteration: int
    stage: str  # 'burnin', 'query', 'curvature'
    bound: str  # 'both', 'upper', 'lower'
    losses: Dict[str, float]
    q_hat: Optional[float] = None
    curvature: Optional[float] = None
    query_skipped: bool = False
    n_inversions: int = 0
    n_failed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable(asdict(self))


@dataclass
class InversionHealthResult:
    """Inversion health over the current window."""
    status: str
    message: str
    failure_rate: float
    details: Optional[Dict[str, Any]] = None
    timestamp: datetime = None

    def __post_init__(self):
        if self.timestamp is None:
            self.timestamp = datetime.now(timezone.utc)


class InversionMonitor:
    """Tracks fixed-point inversion failures over a sliding window of iterations."""

    def __init__(self, window: int = 50, abort_fraction: float = 0.5, degraded_fraction: float = 0.1):
        if window < 1:
            raise ValidationError(f"window must be >= 1, got {window}")
        self.window = window
        self.abort_fraction = abort_fraction
        self.degraded_fraction = degraded_fraction
        self._entries: Deque[Tuple[int, int, int]] = deque(maxlen=window)
        self.total_attempted = 0
        self.total_failed = 0

    def record(self, iteration: int, n_attempted: int, n_failed: int) -> None:
        self._entries.append((iteration, int(n_attempted), int(n_failed)))
        self.total_attempted += int(n_attempted)
        self.total_failed += int(n_failed)

    @property
    def failure_rate(self) -> float:
        attempted = sum(entry[1] for entry in self._entries)
        failed = sum(entry[2] for entry in self._entries)
        return failed / attempted if attempted else 0.0

    def check(self) -> InversionHealthResult:
        rate = self.failure_rate
        details = {
            'window': self.window,
            'iterations_in_window': len(self._entries),
            'total_attempted': self.total_attempted,
            'total_failed': self.total_failed,
        }
        if len(self._entries) == self.window and rate > self.abort_fraction:
            return InversionHealthResult(UNHEALTHY, f"{rate:.1%} of inversions failed over the last {self.window} iterations",
                                         rate, details)
        if rate > self.degraded_fraction:
            return InversionHealthResult(DEGRADED, f"{rate:.1%} of recent inversions failed", rate, details)
        return InversionHealthResult(HEALTHY, "Inversions converging normally", rate, details)

    def raise_if_unhealthy(self, context: str = '') -> InversionHealthResult:
        result = self.check()
        if result.status == UNHEALTHY:
            diagnostics = dict(result.details, failure_rate=result.failure_rate, context=context,
                               last_iteration=self._entries[-1][0])
            raise TrainingAbortedError(f"Training aborted: {result.message}", diagnostics=diagnostics)
        if result.status == DEGRADED:
            logger.warning(f"Inversion health degraded{' (' + context + ')' if context else ''}: {result.message}")
        return result


def get_overall_status(results: List[InversionHealthResult]) -> str:
    """Worst status across several monitors."""
    if not results:
        return "unknown"
    if any(r.status == UNHEALTHY for r in results):
        return UNHEALTHY
    if any(r.status == DEGRADED for r in results):
        return DEGRADED
    return HEALTHY


class TrainingLog:
    """Append-only JSON-lines log; a path of None keeps records in memory only."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.records: List[Dict[str, Any]] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, 'w')

    def write(self, record: Union[IterationRecord, Dict[str, Any]]) -> None:
        row = record.to_dict() if isinstance(record, IterationRecord) else to_jsonable(record)
        self.records.append(row)
        if self._fh is not None:
            self._fh.write(json.dumps(row, sort_keys=True) + '\n')

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> 'TrainingLog':
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class RunManifest:
    """Command, configuration echo, seed, code version and output paths of one run."""
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    version: str = CODE_VERSION
    outputs: Dict[str, str] = field(default_factory=dict)
    created_at: str = None
    python: str = field(default_factory=platform.python_version)

    def __post_init__(self):
        if self.created_at is None:
            self.created_at = datetime.now(timezone.utc).isoformat()

    def add_output(self, name: str, path: Union[str, Path]) -> None:
        self.outputs[name] = str(path)

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable(asdict(self))

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        logger.info(f"Wrote run manifest for '{self.command}' to {path}")
        return path


class StageTimer:
    """Context manager logging a stage's wall time as a performance metric."""

    def __init__(self, name: str):
        self.name = name
        self.elapsed_ms = 0.0

    def __enter__(self) -> 'StageTimer':
        self._start = time.time()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed_ms = (time.time() - self._start) * 1000
        log_performance_metric(self.name, self.elapsed_ms)
