"""
settings.py

Thresholds shared by the samplers and the verification harness.

Values are read once at import from selfsim.json in the current working
directory (or the file named by SELFSIM_CONFIG). Missing keys fall back to the
defaults below and any key can be overridden with an environment variable
named SELFSIM_<KEY>.
"""
import json
import logging
import os
from typing import Any, Dict

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    'SIGNIFICANCE_LEVEL': 1e-3,
    'ATTEMPT_CAP': 10_000_000,
    'MIN_EXPECTED': 5.0,
    'CHUNK_SIZE': 2000,
    'N_JOBS': 1,
    'TAIL_TOLERANCE': 1e-10,
    'TV_THRESHOLD': 0.1,
    'NULL_ALPHA': 0.05,
}


def get_config_path() -> str:
    return os.environ.get('SELFSIM_CONFIG', os.path.join(os.getcwd(), 'selfsim.json'))


def load_settings(path: str = None) -> Dict[str, Any]:
    """
    Read the settings file and apply environment overrides.

    A missing or unreadable file is not an error; the defaults are used.
    """
    path = path or get_config_path()
    config = dict(DEFAULTS)
    if os.path.exists(path):
        try:
            with open(path, 'r') as f:
                loaded = json.load(f)
            config.update({k: v for k, v in loaded.items() if k in DEFAULTS})
        except (OSError, ValueError) as exc:
            logger.warning("Ignoring unreadable settings file %s: %s", path, exc)
    for key, default in DEFAULTS.items():
        raw = os.environ.get(f'SELFSIM_{key}')
        if raw is None:
            continue
        try:
            config[key] = int(float(raw)) if isinstance(default, int) else float(raw)
        except ValueError:
            logger.warning("Ignoring SELFSIM_%s=%r (not a number)", key, raw)
    return config


_config = load_settings()
SIGNIFICANCE_LEVEL: float = _config['SIGNIFICANCE_LEVEL']
ATTEMPT_CAP: int = int(_config['ATTEMPT_CAP'])
MIN_EXPECTED: float = _config['MIN_EXPECTED']
CHUNK_SIZE: int = int(_config['CHUNK_SIZE'])
N_JOBS: int = int(_config['N_JOBS'])
TAIL_TOLERANCE: float = _config['TAIL_TOLERANCE']
TV_THRESHOLD: float = _config['TV_THRESHOLD']
NULL_ALPHA: float = _config['NULL_ALPHA']
