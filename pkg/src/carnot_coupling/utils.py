"""carnot_coupling utils."""

import csv
import json
import math
from collections.abc import Generator, Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import scipy.stats

CONFIDENCE_LEVEL = 0.99
"""Level of every one-sided confidence bound reported by the experiments."""


def chunks(seq: Sequence, n: int) -> Generator[Sequence]:
    """Yield successive `n` sized chunks from `seq`.

    Arguments:
        seq: Sequence to chunk.
        n: Chunk size.

    Returns:
        Generator that yields `n` sized chunks from passed `seq`.
    """
    for i in range(0, len(seq), n):
        yield seq[i : i + n]


def format_float(value: float) -> str:
    """Shortest round-trip decimal representation, independent of the locale."""
    return repr(float(value))


def clopper_pearson_upper(k: int, n: int, confidence: float = CONFIDENCE_LEVEL) -> float:
    """One-sided Clopper-Pearson upper confidence limit of a binomial proportion.

    Arguments:
        k: Number of successes.
        n: Number of trials.
        confidence: Confidence level.

    Returns:
        Upper limit in `[0, 1]`.
    """
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"Invalid binomial sample: k={k}, n={n}.")
    if k == n:
        return 1.0
    return float(scipy.stats.beta.ppf(confidence, k + 1, n - k))


def clopper_pearson_lower(k: int, n: int, confidence: float = CONFIDENCE_LEVEL) -> float:
    """One-sided Clopper-Pearson lower confidence limit of a binomial proportion."""
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"Invalid binomial sample: k={k}, n={n}.")
    if k == 0:
        return 0.0
    return float(scipy.stats.beta.ppf(1 - confidence, k, n - k + 1))


def mean_upper_confidence(
    samples: np.ndarray, confidence: float = CONFIDENCE_LEVEL
) -> tuple[float, float]:
    """Sample mean and its one-sided normal upper confidence limit.

    Arguments:
        samples: One-dimensional sample.
        confidence: Confidence level.

    Returns:
        Tuple of the mean and the upper limit.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        raise ValueError("Need at least two samples for a confidence limit.")
    mean = float(samples.mean())
    stderr = float(samples.std(ddof=1)) / math.sqrt(samples.size)
    return mean, mean + float(scipy.stats.norm.ppf(confidence)) * stderr


def json_ready(value: Any) -> Any:
    """Recursively convert numpy values to builtins and non finite floats to `None`."""
    if isinstance(value, Mapping):
        return {str(k): json_ready(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return json_ready(value.tolist())
    if isinstance(value, list | tuple):
        return [json_ready(v) for v in value]
    if isinstance(value, np.bool_ | bool):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, float | np.floating):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(data: Mapping[str, Any], path: Path) -> None:
    """Write a JSON document with a trailing newline.

    Arguments:
        data: Document to write.
        path: Destination file.
    """
    text = json.dumps(json_ready(data), indent=2, allow_nan=False)
    path.write_text(text + "\n")


def write_csv(header: Sequence[str], rows: Iterable[Sequence[float]], path: Path) -> None:
    """Write a CSV file of floats in shortest round-trip format.

    Arguments:
        header: Column names.
        rows: Numeric rows.
        path: Destination file.
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) for v in row])
