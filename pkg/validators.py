"""Input validation shared by ingest, models and the CLI."""

from __future__ import annotations

import math
import re
from collections.abc import Sequence
from typing import Any

import numpy as np

# Row sums within this distance of 1 are renormalized on ingest; beyond it the row is rejected.
SIMPLEX_TOLERANCE = 1e-3
GRID_TOLERANCE = 1e-12
GRID_MAX_POINTS = 10_000
CATEGORY_NAME_MAX_LEN = 64
CATEGORY_NAME_RE = re.compile(r'^[A-Za-z0-9][A-Za-z0-9 _.\-]*$')


class IngestError(ValueError):
    """Rejected input with its location (file, line/record, field)."""

    def __init__(
        self,
        message: str,
        *,
        path: str | None = None,
        line: int | None = None,
        field: str | None = None,
    ) -> None:
        self.path = path
        self.line = line
        self.field = field
        self.reason = message
        super().__init__(self._render())

    def _render(self) -> str:
        where: list[str] = []
        if self.path:
            where.append(str(self.path))
        if self.line is not None:
            where.append(f'line {self.line}')
        if self.field:
            where.append(f'field {self.field!r}')
        return f"{': '.join(where)}: {self.reason}" if where else self.reason


class UnsupportedVersionError(IngestError):
    """Schema version not understood by this build."""


def validate_finite(value: Any, name: str) -> float:
    """Coerce to float and require finiteness. Raises ValueError."""
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ValueError(f'{name} must be a number, got {value!r}')
    if not math.isfinite(x):
        raise ValueError(f'{name} must be finite, got {value!r}')
    return x


def validate_positive(value: Any, name: str) -> float:
    x = validate_finite(value, name)
    if x <= 0:
        raise ValueError(f'{name} must be > 0, got {x}')
    return x


def validate_non_negative(value: Any, name: str) -> float:
    x = validate_finite(value, name)
    if x < 0:
        raise ValueError(f'{name} must be >= 0, got {x}')
    return x


def validate_positive_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValueError(f'{name} must be an integer, got {value!r}')
    if value < 1:
        raise ValueError(f'{name} must be >= 1, got {value}')
    return int(value)


def validate_unit_interval(value: Any, name: str) -> float:
    x = validate_finite(value, name)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f'{name} must lie in [0, 1], got {x}')
    return x


def validate_damping(value: Any) -> float:
    x = validate_finite(value, 'damping')
    if not 0.0 <= x < 1.0:
        raise ValueError(f'damping must lie in [0, 1), got {x}')
    return x


def validate_category_names(names: Sequence[Any]) -> tuple[str, ...]:
    """Strip and check category names: nonempty, unique, at least one. Raises ValueError."""
    if isinstance(names, (str, bytes)) or not isinstance(names, Sequence):
        raise ValueError('categories must be a list of names')
    cleaned: list[str] = []
    for raw in names:
        if not isinstance(raw, str):
            raise ValueError(f'Category name must be a string: {raw!r}')
        name = raw.strip()[:CATEGORY_NAME_MAX_LEN]
        if not name:
            raise ValueError('Category name is empty.')
        if not CATEGORY_NAME_RE.match(name):
            raise ValueError(f'Invalid category name: {raw!r}')
        if name == 'background':
            raise ValueError("'background' is reserved for label 0")
        if name in cleaned:
            raise ValueError(f'Duplicate category name: {name!r}')
        cleaned.append(name)
    if not cleaned:
        raise ValueError('At least one category is required.')
    return tuple(cleaned)


def normalize_score_row(row: Sequence[float], tolerance: float = SIMPLEX_TOLERANCE) -> np.ndarray:
    """
    Validate one score row and project it back onto the simplex.
    Rows must be finite and non-negative with a sum within `tolerance` of 1.
    """
    values = np.asarray(row, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError('score row must be a nonempty list of numbers')
    if not np.all(np.isfinite(values)):
        raise ValueError('score row contains non-finite values')
    if np.any(values < 0):
        raise ValueError('score row contains negative values')
    total = float(values.sum())
    if abs(total - 1.0) > tolerance:
        raise ValueError(f'score row sums to {total:.6g}, outside 1 +/- {tolerance:g}')
    return values / total


def parse_grid(value: str, name: str = 'grid') -> list[float]:
    """
    Parse a weight grid: 'a:b:step' (inclusive ends within 1e-12), a single value,
    or a comma-separated list. Values must be finite and >= 0.
    """
    text = (value or '').strip()
    if not text:
        raise ValueError(f'{name} is empty')
    if ':' in text:
        parts = text.split(':')
        if len(parts) != 3:
            raise ValueError(f'{name} must look like a:b:step, got {value!r}')
        start = validate_non_negative(parts[0], f'{name} start')
        stop = validate_non_negative(parts[1], f'{name} stop')
        step = validate_positive(parts[2], f'{name} step')
        if stop < start:
            raise ValueError(f'{name} stop {stop} is below start {start}')
        count = int(math.floor((stop - start) / step + GRID_TOLERANCE)) + 1
        if count > GRID_MAX_POINTS:
            raise ValueError(f'{name} has {count} points (max {GRID_MAX_POINTS})')
        values = [round(start + i * step, 12) for i in range(count)]
        if values[-1] > stop + GRID_TOLERANCE:
            values.pop()
        return values
    values = [validate_non_negative(p, name) for p in text.split(',') if p.strip()]
    if not values:
        raise ValueError(f'{name} is empty')
    return values
