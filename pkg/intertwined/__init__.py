"""
Intertwined EEG

A small deep-learning framework and command-line tool for motor-imagery
EEG classification with intertwined time-distributed dense and
space-distributed temporal-convolution modules, plus the cascade and
parallel baselines, hyperparameter sweeps and nonparametric model
comparison.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Pick up a local .env before reading the environment
load_dotenv()

# Configuration
config = {
    'DATA_DIR': Path(os.environ.get('INTERTWINED_DATA_DIR', os.path.join(os.getcwd(), 'data'))),
    'PRECISION': os.environ.get('INTERTWINED_PRECISION', 'float64'),
    'JOBS': int(os.environ.get('INTERTWINED_JOBS', 1)),
    'LOG_LEVEL': os.environ.get('INTERTWINED_LOG_LEVEL', 'INFO').upper(),
    'PROGRESS': os.environ.get('INTERTWINED_PROGRESS', 'True').lower() == 'true',
}

if config['PRECISION'] not in ('float64', 'float32'):
    raise ValueError(f"INTERTWINED_PRECISION must be float64 or float32, got {config['PRECISION']!r}")

__version__ = '0.1.0'
__author__ = 'Intertwined EEG Team'
