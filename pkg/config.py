"""Centralized configuration with validation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

from dotenv import load_dotenv

# Load .env but don't override variables already exported by the shell.
load_dotenv(override=False)

_TRUTHY = ('1', 'true', 'yes')


def _env_flag(name: str) -> bool:
    return (os.getenv(name) or '').strip().lower() in _TRUTHY


@dataclass(frozen=True)
class Config:
    """Runtime configuration. Environment only affects diagnostics, never artifacts."""

    # Diagnostics
    debug: bool = field(default_factory=lambda: _env_flag('DEBUG'))
    log_level_name: str | None = field(
        default_factory=lambda: (os.getenv('CTXCRF_LOG_LEVEL') or '').strip().upper() or None
    )
    check_invariants: bool = field(
        default_factory=lambda: os.getenv('TESTING') == '1' or _env_flag('CTXCRF_CHECK_INVARIANTS')
    )

    # Pairwise statistics
    alpha: float = 1.0

    # Scene prior trainer
    scene_lambda: float = 1e-3
    scene_epochs: int = 500
    scene_learning_rate: float = 0.1
    scene_seed: int = 0

    # Mean-field inference
    max_iterations: int = 20
    tolerance: float = 1e-4
    damping: float = 0.5
    score_clamp: float = 1e-6
    max_proposals: int = 300
    update_rule: str = 'all'
    update_schedule: str = 'parallel'

    # Evaluation
    iou_threshold: float = 0.5
    detection_threshold: float = 0.01
    interpolation: str = '11pt'

    @property
    def log_level(self) -> int:
        if self.log_level_name:
            level = logging.getLevelName(self.log_level_name)
            if isinstance(level, int):
                return level
        return logging.DEBUG if self.debug else logging.INFO


def resolve_threads(requested: int | None) -> int:
    """Resolve a --threads value; None means available parallelism."""
    if requested is None:
        return max(1, os.cpu_count() or 1)
    if requested < 1:
        raise ValueError(f'threads must be >= 1, got {requested}')
    return requested


def get_config() -> Config:
    """Return runtime config. Call after load_dotenv()."""
    return Config()
