"""
Access to the ``TSPT`` settings block with built-in defaults.
"""

import logging
import os

import torch
from django.conf import settings

logger = logging.getLogger(__name__)

DEFAULTS = {
    'THREADS': None,
    'STORAGE_DTYPE': 'f32',
    'DEFAULT_D': 768,
    'DEFAULT_LAYERS': 12,
    'DEFAULT_HEADS': 12,
    'TUBAL_RANK_TOL': 1e-9,
    'ORACLE_LIMIT': 4096,
    'POSTPROCESS_MM3': 1000.0,
    'SWEEP_RANKS': [1, 2, 4, 8, 16, 32],
}


def get_setting(name):
    """Return ``settings.TSPT[name]``, falling back to the package default."""
    if name not in DEFAULTS:
        raise KeyError(f"Unknown TSPT setting: {name}")
    overrides = getattr(settings, 'TSPT', {}) or {}
    return overrides.get(name, DEFAULTS[name])


def configure_threads():
    """Apply the thread cap (``TSPT_THREADS``) to torch, if one is set."""
    threads = get_setting('THREADS')
    if threads is None:
        env_value = os.environ.get('TSPT_THREADS')
        threads = int(env_value) if env_value else None
    if threads:
        torch.set_num_threads(int(threads))
        logger.debug(f"torch intra-op threads capped at {threads}")
    return threads
