"""Test `carnot_coupling.config` module."""

import json
from pathlib import Path

import pytest

from carnot_coupling.config import (
    ConfigError,
    ExperimentConfig,
    HomogeneousConfig,
    PointConfig,
)

HEISENBERG = {
    "C": [[[0.0, -1.0], [1.0, 0.0]]],
    "start": {"x": [0.0, 0.0], "z": [0.0]},
    "start_tilde": {"x": [1.0, 0.0], "z": [0.5]},
}


def test_load_default() -> None:
    """Shipped config is the on-fiber `G_2` rate experiment."""
    config = ExperimentConfig.load_default()

    assert config.n == 2
    assert config.mode == "event"
    assert config.effective_m == 4
    assert config.effective_horizon == max(config.t_grid)
    g, g_tilde = config.start_elements()
    assert g.x.tolist() == g_tilde.x.tolist()


def test_save_and_load(tmp_path: Path) -> None:
    """Saved configs load back unchanged."""
    config = ExperimentConfig(
        n=3,
        seed=42,
        start=PointConfig([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        start_tilde=PointConfig([0.0, 0.0, 0.0], [0.6, 0.8, 0.0]),
        horizon=100.0,
    )
    path = tmp_path / "config.json"
    config.save_to_disk(path)

    assert ExperimentConfig.load_from_disk(path) == config


def test_load_missing_file(tmp_path: Path) -> None:
    """Unreadable files are config errors."""
    with pytest.raises(ConfigError, match="Can't read"):
        ExperimentConfig.load_from_disk(tmp_path / "missing.json")


def test_load_malformed_json(tmp_path: Path) -> None:
    """Malformed JSON is a config error."""
    path = tmp_path / "config.json"
    path.write_text("{not json")

    with pytest.raises(ConfigError, match="Malformed JSON"):
        ExperimentConfig.load_from_disk(path)


def test_unknown_keys() -> None:
    """Unknown keys are rejected, also in nested sections."""
    with pytest.raises(ConfigError, match="Unknown keys in `config`: colour"):
        ExperimentConfig.from_dict({"colour": "blue"})
    with pytest.raises(ConfigError, match="Unknown keys in `start`"):
        ExperimentConfig.from_dict({"start": {"x": [0.0, 0.0], "z": [0.0], "y": 1}})


@pytest.mark.parametrize(
    ("changes", "message"),
    [
        ({"n": 1}, "`n`"),
        ({"n": True}, "`n`"),
        ({"m": 2}, "`m`"),
        ({"seed": -1}, "`seed`"),
        ({"replicas": 0}, "`replicas`"),
        ({"h": 0}, "`h`"),
        ({"t_grid": [2.0, 1.0]}, "`t_grid`"),
        ({"t_grid": []}, "`t_grid`"),
        ({"start": {"x": [0.0], "z": [0.0]}}, "`start`"),
        ({"mode": "exact"}, "`mode`"),
        ({"alpha": -1}, "Radii"),
        ({"test_function": "sin"}, "`test_function`"),
        ({"schema_version": 2}, "schema version"),
        ({"h": "small"}, "`h` must be a number"),
    ],
)
def test_invalid_values(changes: dict, message: str) -> None:
    """Every schema invariant is checked."""
    data = {**ExperimentConfig().to_dict(), **changes}

    with pytest.raises(ConfigError, match=message):
        ExperimentConfig.from_dict(data)


def test_homogeneous_section() -> None:
    """Homogeneous sections are parsed into a group spec and start points."""
    config = ExperimentConfig.from_dict({"homogeneous": HEISENBERG})

    assert isinstance(config.homogeneous, HomogeneousConfig)
    assert config.homogeneous.spec().m == 1
    assert config.homogeneous.start_tilde.to_homogeneous_element().z.tolist() == [0.5]


def test_homogeneous_section_invalid() -> None:
    """Start points must match the homogeneous group."""
    section = {**HEISENBERG, "start": {"x": [0.0, 0.0], "z": [0.0, 0.0]}}

    with pytest.raises(ConfigError, match="homogeneous.start"):
        ExperimentConfig.from_dict({"homogeneous": section})


def test_homogeneous_section_rank() -> None:
    """The homogeneous group must have the config rank."""
    with pytest.raises(ConfigError, match="rank"):
        ExperimentConfig.from_dict(
            {
                "n": 3,
                "start": {"x": [0.0] * 3, "z": [0.0] * 3},
                "start_tilde": {"x": [0.0] * 3, "z": [0.0] * 3},
                "homogeneous": HEISENBERG,
            }
        )


def test_with_overrides() -> None:
    """Values are parsed as JSON, falling back to strings; dots address sections."""
    config = ExperimentConfig().with_overrides(
        [
            "n=3",
            "start.x=[0, 0, 0]",
            "start.z=[0, 0, 0]",
            "start_tilde.x=[0, 0, 0]",
            "start_tilde.z=[1, 0, 0]",
            "mode=path",
            "horizon=50",
        ]
    )

    assert config.n == 3
    assert config.mode == "path"
    assert config.horizon == 50.0
    assert config.start_tilde.z == [1.0, 0.0, 0.0]


@pytest.mark.parametrize(
    ("override", "message"),
    [
        ("n", "key=value"),
        ("=3", "key=value"),
        ("colour.red=1", "doesn't address a section"),
        ("colour=1", "Unknown keys"),
        ("n=3", "`start` must have 3"),
    ],
)
def test_with_overrides_invalid(override: str, message: str) -> None:
    """Malformed overrides and overrides breaking the schema are config errors."""
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig().with_overrides([override])


def test_to_dict_is_json() -> None:
    """Serialized configs are plain JSON."""
    data = ExperimentConfig().to_dict()

    assert json.loads(json.dumps(data)) == data
    assert data["horizon"] is None
    assert data["start"] == {"x": [0.0, 0.0], "z": [0.0]}
