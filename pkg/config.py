#!/usr/bin/env python3
"""
Configuration settings - environment, presets and worker limits
"""
import os
from pathlib import Path as _P
from typing import Any, Dict

from dotenv import load_dotenv

from error_handling import ValidationError

# Load .env placed next to this file, regardless of CWD
load_dotenv(dotenv_path=_P(__file__).with_name('.env'))
# Also load from CWD if present (won't override existing)
load_dotenv(override=False)

__version__ = '1.0.0'

# Checkpoint archives carry this number; bump on layout changes
CHECKPOINT_FORMAT_VERSION = 1

LOG_LEVEL = os.environ.get('CF_BOUNDS_LOG_LEVEL', 'INFO')
LOG_FILE = os.environ.get('CF_BOUNDS_LOG_FILE') or None
OUTPUT_DIR = os.environ.get('CF_BOUNDS_OUTPUT_DIR', 'runs')

# Training presets (overrides on top of TrainConfig defaults)
PRESETS: Dict[str, Dict[str, Any]] = {
    'paper': {
        'lr': 0.01,
        'batch_size': 32,
        'n_burnin': 500,
        'n_query': 100,
        'n_curv_query': 500,
        'eps2': 0.25,
        'sigma2_noise': 1e-6,
        'ema_gamma': 0.99,
        'n_eval': 256,
    },
    'desk': {
        'batch_size': 16,
        'n_curv_query': 100,
        'n_eval': 128,
    },
    # same schedule with the smaller query weight
    'paper_lq1': {
        'lambda_q': 1.0,
    },
}

# Oracle sweep defaults
ORACLE_GRID_RESOLUTION = 512
ORACLE_DENSITY_BINS = 201


def get_preset(name: str) -> Dict[str, Any]:
    """Get a copy of the overrides of a named preset"""
    if name not in PRESETS:
        raise ValidationError(f"Unknown preset '{name}'. Available: {sorted(PRESETS)}")
    return dict(PRESETS[name])


def max_workers() -> int:
    """Worker cap for grid sweeps (CF_BOUNDS_THREADS, default CPU count)"""
    raw = os.environ.get('CF_BOUNDS_THREADS')
    if raw is None or raw.strip() == '':
        return max(1, os.cpu_count() or 1)
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"CF_BOUNDS_THREADS must be an integer, got '{raw}'")
    return max(1, value)


def get_runtime_settings() -> Dict[str, Any]:
    """Get current runtime settings"""
    return {
        'version': __version__,
        'log_level': LOG_LEVEL,
        'log_file': LOG_FILE,
        'output_dir': OUTPUT_DIR,
        'max_workers': max_workers(),
        'checkpoint_format_version': CHECKPOINT_FORMAT_VERSION,
    }
