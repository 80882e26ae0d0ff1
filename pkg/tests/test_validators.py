"""Tests for shared validators and runtime config."""

import logging
import math

import numpy as np
import pytest

from config import Config, resolve_threads
from validators import (
    IngestError,
    UnsupportedVersionError,
    normalize_score_row,
    parse_grid,
    validate_category_names,
    validate_damping,
    validate_positive_int,
)


def test_parse_grid_range_is_inclusive():
    grid = parse_grid("0:1:0.1")
    assert len(grid) == 11
    assert grid[0] == 0.0 and grid[-1] == 1.0
    assert grid[3] == 0.3
    assert parse_grid("0:0.5:0.2") == [0.0, 0.2, 0.4]
    assert parse_grid("2:2:1") == [2.0]


def test_parse_grid_single_value_and_list():
    assert parse_grid("0.5") == [0.5]
    assert parse_grid("0, 0.25,1") == [0.0, 0.25, 1.0]


@pytest.mark.parametrize("value", ["", "  ", "1:0:0.1", "0:1:0", "0:1", "-1", "a", "0,nan", "0:1e9:1e-3"])
def test_parse_grid_rejects(value):
    with pytest.raises(ValueError):
        parse_grid(value, "--omega-p-grid")


def test_parse_grid_error_names_option():
    with pytest.raises(ValueError, match="--omega-g-grid"):
        parse_grid("-0.5", "--omega-g-grid")


def test_normalize_score_row():
    row = normalize_score_row([0.2, 0.3, 0.5005])
    assert row.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.all(row > 0)
    with pytest.raises(ValueError, match="sums to 1.1"):
        normalize_score_row([0.5, 0.6])
    with pytest.raises(ValueError, match="non-finite"):
        normalize_score_row([math.nan, 1.0])
    with pytest.raises(ValueError, match="negative"):
        normalize_score_row([1.0005, -0.001])
    with pytest.raises(ValueError):
        normalize_score_row([])


def test_ingest_error_renders_location():
    err = IngestError("bad row", path="det.jsonl", line=3, field="scores")
    assert str(err) == "det.jsonl: line 3: field 'scores': bad row"
    assert err.reason == "bad row"
    assert isinstance(err, ValueError)
    assert str(IngestError("plain")) == "plain"
    assert issubclass(UnsupportedVersionError, IngestError)


def test_category_names():
    assert validate_category_names([" boat ", "water"]) == ("boat", "water")
    for bad in (["boat", "boat"], ["background"], [], [""], ["a/b"], [3], "boat"):
        with pytest.raises(ValueError):
            validate_category_names(bad)


def test_numeric_validators():
    assert validate_positive_int(3, "epochs") == 3
    for bad in (0, True, 1.5):
        with pytest.raises(ValueError, match="epochs"):
            validate_positive_int(bad, "epochs")
    assert validate_damping(0.0) == 0.0
    with pytest.raises(ValueError):
        validate_damping(1.0)


def test_resolve_threads():
    assert resolve_threads(None) >= 1
    assert resolve_threads(3) == 3
    with pytest.raises(ValueError):
        resolve_threads(0)


def test_log_level_from_environment(monkeypatch):
    monkeypatch.delenv("DEBUG", raising=False)
    monkeypatch.setenv("CTXCRF_LOG_LEVEL", "warning")
    assert Config().log_level == logging.WARNING
    monkeypatch.setenv("CTXCRF_LOG_LEVEL", "chatty")
    assert Config().log_level == logging.INFO
    monkeypatch.delenv("CTXCRF_LOG_LEVEL")
    monkeypatch.setenv("DEBUG", "1")
    assert Config().log_level == logging.DEBUG


def test_invariant_checks_follow_testing_flag(monkeypatch):
    assert Config().check_invariants
    monkeypatch.setenv("TESTING", "0")
    monkeypatch.delenv("CTXCRF_CHECK_INVARIANTS", raising=False)
    assert not Config().check_invariants
    monkeypatch.setenv("CTXCRF_CHECK_INVARIANTS", "yes")
    assert Config().check_invariants
