import json
import logging
from datetime import datetime, timedelta

import numpy as np
import pytest

from error_handling import TrainingAbortedError, ValidationError
from monitoring import (DEGRADED, HEALTHY, UNHEALTHY, InversionMonitor, IterationRecord, RunManifest, StageTimer,
                        TrainingLog, get_overall_status, read_jsonl, to_jsonable)
from schemas import OutputValidator


class TestInversionMonitor:
    def test_healthy_when_nothing_fails(self):
        monitor = InversionMonitor(window=3)
        for it in range(5):
            monitor.record(it, 10, 0)
        assert monitor.check().status == HEALTHY
        assert monitor.failure_rate == 0.0

    def test_degraded_warns_but_continues(self, caplog):
        monitor = InversionMonitor(window=10, abort_fraction=0.5)
        monitor.record(0, 10, 3)
        with caplog.at_level(logging.WARNING):
            assert monitor.raise_if_unhealthy('query/upper').status == DEGRADED
        assert 'degraded' in caplog.text

    def test_abort_needs_a_full_window(self):
        monitor = InversionMonitor(window=4, abort_fraction=0.5)
        for it in range(3):
            monitor.record(it, 10, 10)
        assert monitor.check().status == DEGRADED
        monitor.record(3, 10, 10)
        with pytest.raises(TrainingAbortedError) as info:
            monitor.raise_if_unhealthy('burnin/both')
        assert info.value.diagnostics['last_iteration'] == 3
        assert info.value.diagnostics['failure_rate'] == 1.0

    def test_window_forgets_old_failures(self):
        monitor = InversionMonitor(window=2, abort_fraction=0.5)
        monitor.record(0, 10, 10)
        monitor.record(1, 10, 0)
        monitor.record(2, 10, 0)
        assert monitor.check().status == HEALTHY
        assert monitor.total_failed == 10

    def test_timestamps_are_timezone_aware(self):
        monitor = InversionMonitor(window=3)
        monitor.record(0, 10, 0)
        assert monitor.check().timestamp.utcoffset() == timedelta(0)

    def test_rejects_empty_window(self):
        with pytest.raises(ValidationError):
            InversionMonitor(window=0)

    def test_overall_status(self):
        healthy = InversionMonitor().check()
        bad = InversionMonitor(window=1)
        bad.record(0, 1, 1)
        assert get_overall_status([]) == 'unknown'
        assert get_overall_status([healthy]) == HEALTHY
        assert get_overall_status([healthy, bad.check()]) == UNHEALTHY


def test_to_jsonable_converts_numpy_and_nan(tmp_path):
    converted = to_jsonable({'a': np.float64(1.5), 'b': np.array([1, 2]), 'c': float('nan'), 'd': tmp_path, 2: (1,)})
    assert converted == {'a': 1.5, 'b': [1, 2], 'c': None, 'd': str(tmp_path), '2': [1]}
    json.dumps(converted)


class TestTrainingLog:
    def test_file_roundtrip(self, tmp_path):
        path = tmp_path / 'logs' / 'training.jsonl'
        with TrainingLog(path) as log:
            log.write(IterationRecord(iteration=0, stage='burnin', bound='both', losses={'total': np.float64(2.0)}))
            log.write({'iteration': 1, 'q_hat': float('nan')})
        rows = read_jsonl(path)
        assert rows[0]['losses'] == {'total': 2.0}
        assert rows[1]['q_hat'] is None
        assert rows == log.records

    def test_memory_only(self):
        log = TrainingLog()
        log.write({'iteration': 0})
        log.close()
        assert log.records == [{'iteration': 0}]


class TestRunManifest:
    def test_written_manifest_validates(self, tmp_path):
        manifest = RunManifest(command='oracle', config={'scm': 'm1', 'grid': np.int64(512)}, seed=3)
        manifest.add_output('result', tmp_path / 'out.json')
        path = manifest.write(tmp_path / 'run' / 'manifest.json')
        with open(path) as fh:
            data = json.load(fh)
        ok, errors = OutputValidator.validate_manifest_data(data)
        assert ok, errors
        assert data['outputs'] == {'result': str(tmp_path / 'out.json')}
        assert data['config']['grid'] == 512

    def test_missing_command_fails_validation(self):
        ok, errors = OutputValidator.validate_manifest_data(RunManifest(command='', config={}).to_dict())
        assert not ok
        assert "'command' is required" in errors

    def test_created_at_carries_utc_offset(self):
        created = datetime.fromisoformat(RunManifest(command='oracle', config={}).created_at)
        assert created.utcoffset() == timedelta(0)


def test_stage_timer_logs_metric(caplog):
    with caplog.at_level(logging.INFO):
        with StageTimer('training.burnin') as timer:
            pass
    assert timer.elapsed_ms >= 0.0
    assert 'training.burnin' in caplog.text
