"""Test `carnot_coupling.utils` module."""

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from carnot_coupling.utils import (
    chunks,
    clopper_pearson_lower,
    clopper_pearson_upper,
    json_ready,
    mean_upper_confidence,
    write_csv,
    write_json,
)


def test_chunks() -> None:
    """Yields `n` sized chunks, the last one possibly shorter."""
    assert list(chunks([1, 2, 3, 4, 5], 2)) == [[1, 2], [3, 4], [5]]
    assert list(chunks(range(4), 4)) == [range(0, 4)]


def test_clopper_pearson_no_successes() -> None:
    """`k = 0` has the closed form `1 - (1 - c)^(1/n)`."""
    assert math.isclose(clopper_pearson_upper(0, 100), 1 - 0.01 ** (1 / 100))


def test_clopper_pearson_all_successes() -> None:
    """`k = n` gives 1."""
    assert clopper_pearson_upper(10, 10) == 1.0


def test_clopper_pearson_covers_estimate() -> None:
    """The limit lies above the point estimate."""
    assert 0.3 < clopper_pearson_upper(30, 100) < 0.5


def test_clopper_pearson_lower() -> None:
    """`k = n` has the closed form `(1 - c)^(1/n)`, `k = 0` gives 0."""
    assert math.isclose(clopper_pearson_lower(100, 100), 0.01 ** (1 / 100))
    assert clopper_pearson_lower(0, 10) == 0.0
    assert 0.3 < clopper_pearson_lower(50, 100) < 0.5 < clopper_pearson_upper(50, 100)


@pytest.mark.parametrize(("k", "n"), [(-1, 10), (11, 10), (0, 0)])
def test_clopper_pearson_invalid(k: int, n: int) -> None:
    """Invalid samples are rejected."""
    with pytest.raises(ValueError, match="Invalid binomial sample"):
        clopper_pearson_upper(k, n)
    with pytest.raises(ValueError, match="Invalid binomial sample"):
        clopper_pearson_lower(k, n)


def test_mean_upper_confidence() -> None:
    """Constant samples have a degenerate interval."""
    assert mean_upper_confidence(np.full(10, 0.5)) == (0.5, 0.5)

    mean, upper = mean_upper_confidence(np.array([0.0, 1.0, 0.0, 1.0]))
    assert mean == 0.5
    assert upper > mean


def test_mean_upper_confidence_too_small() -> None:
    """A single sample has no interval."""
    with pytest.raises(ValueError, match="two samples"):
        mean_upper_confidence(np.array([1.0]))


def test_json_ready() -> None:
    """Numpy values become builtins and non finite floats `null`."""
    value = {
        "array": np.array([1.0, np.inf]),
        "int": np.int64(3),
        "bool": np.bool_(True),
        "nested": ({"nan": float("nan")},),
        1: "key",
    }

    assert json_ready(value) == {
        "array": [1.0, None],
        "int": 3,
        "bool": True,
        "nested": [{"nan": None}],
        "1": "key",
    }


def test_write_json(tmp_path: Path) -> None:
    """Writes indented JSON with a trailing newline."""
    path = tmp_path / "report.json"
    write_json({"tau": math.inf, "values": np.arange(2)}, path)

    text = path.read_text()
    assert text.endswith("\n")
    assert json.loads(text) == {"tau": None, "values": [0, 1]}


def test_write_csv(tmp_path: Path) -> None:
    """Floats are written in shortest round-trip form."""
    path = tmp_path / "rate.csv"
    write_csv(["t", "survival"], np.array([[0.1, 1 / 3]]), path)

    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows == [["t", "survival"], ["0.1", repr(1 / 3)]]
    assert float(rows[1][1]) == 1 / 3
