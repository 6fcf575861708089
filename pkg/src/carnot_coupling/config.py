"""Config related code."""

import dataclasses
import importlib.resources
import json
import math
import sys
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np

from carnot_coupling.group_algebra import (
    GroupElement,
    HomogeneousElement,
    HomogeneousGroupSpec,
    InvalidGroupSpecError,
    skew_dim,
)
from carnot_coupling.utils import json_ready, write_json

if sys.version_info < (3, 11):
    from typing_extensions import Self
else:
    from typing import Self

SCHEMA_VERSION = 1
"""Current `ExperimentConfig` schema version."""

DEFAULT_CONFIG_RESOURCE = "default_config.json"
"""Name of the shipped default config inside `carnot_coupling.data`."""

MODES = ("event", "path")
"""Accepted values of `mode`."""

TEST_FUNCTIONS = ("cos_x1", "cos_z12", "constant")
"""Accepted values of `test_function`."""


class ConfigError(ValueError):
    """Config file or override doesn't match the schema."""


@dataclasses.dataclass
class PointConfig:
    """Point of `G_n` (or of a homogeneous group) in plain coordinates.

    Attributes:
        x: Horizontal coordinates.
        z: Vertical coordinates, in pair order for `G_n`.
    """

    x: list[float]
    z: list[float]

    @classmethod
    def from_dict(cls, data: Any, name: str) -> Self:
        """Validate and load a `{"x": [...], "z": [...]}` mapping."""
        _check_keys(data, {"x", "z"}, name)
        return cls(
            x=_float_list(data.get("x"), f"{name}.x"),
            z=_float_list(data.get("z"), f"{name}.z"),
        )

    def to_group_element(self) -> GroupElement:
        """Point of `G_n`."""
        return GroupElement(np.asarray(self.x), np.asarray(self.z))

    def to_homogeneous_element(self) -> HomogeneousElement:
        """Point of a homogeneous group."""
        return HomogeneousElement(np.asarray(self.x), np.asarray(self.z))


@dataclasses.dataclass
class HomogeneousConfig:
    """Homogeneous group and the two start points of a lifted run.

    Attributes:
        C: Structure matrices `C^{(k)}`, shape `(m, n, n)`.
        start: Start of the first copy.
        start_tilde: Start of the second copy.
    """

    C: list[list[list[float]]]
    start: PointConfig
    start_tilde: PointConfig

    @classmethod
    def from_dict(cls, data: Any) -> Self:
        """Validate and load the `homogeneous` section."""
        _check_keys(data, {"C", "start", "start_tilde"}, "homogeneous")
        try:
            C = np.asarray(data.get("C"), dtype=float)
        except (TypeError, ValueError) as e:
            raise ConfigError("`homogeneous.C` must be a numeric array.") from e
        return cls(
            C=C.tolist(),
            start=PointConfig.from_dict(data.get("start"), "homogeneous.start"),
            start_tilde=PointConfig.from_dict(data.get("start_tilde"), "homogeneous.start_tilde"),
        )

    def spec(self) -> HomogeneousGroupSpec:
        """Homogeneous group spec."""
        return HomogeneousGroupSpec(np.asarray(self.C))


@dataclasses.dataclass
class ExperimentConfig:
    """Config schema for `carnot_coupling` experiments.

    Attributes:
        schema_version: Config schema version.
        n: Group rank.
        m: KL truncation order (`2n` when `None`).
        seed: Experiment seed.
        replicas: Number of independent replicas `N`.
        h: Path step.
        t_grid: Increasing times at which survival is estimated.
        start: Start `g` of the first copy.
        start_tilde: Start `g̃` of the second copy.
        homogeneous: Optional homogeneous group with its own start points.
        mode: Fidelity of the line phases, `"event"` or `"path"`.
        block_diagonalize: Whether to reduce the fiber defect first.
        max_blocks: Block guard per line.
        horizon: Censoring horizon (`max(t_grid)` when `None`).
        alpha: Horizontal radius of the exit pseudo-cube.
        gamma: Vertical scale of the exit pseudo-cube.
        refinements: Number of dyadic refinements of the start separation.
        area_levels: Truncation levels of the area expectations.
        test_function: Bounded test function of the gradient experiment.
        gradient_times: Times of the gradient experiment.
        epsilon: Displacement of the gradient difference quotients.
        tv_time: Time of the total variation experiment.
        path_time: Horizon of simulated paths.
        dump_paths: Number of simulated paths written as CSV.
    """

    schema_version: int = SCHEMA_VERSION
    n: int = 2
    m: int | None = None
    seed: int = 0
    replicas: int = 10_000
    h: float = 1e-3
    t_grid: list[float] = dataclasses.field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    start: PointConfig = dataclasses.field(default_factory=lambda: PointConfig([0.0, 0.0], [0.0]))
    start_tilde: PointConfig = dataclasses.field(
        default_factory=lambda: PointConfig([0.0, 0.0], [1.0])
    )
    homogeneous: HomogeneousConfig | None = None
    mode: str = "event"
    block_diagonalize: bool = True
    max_blocks: int = 64
    horizon: float | None = None
    alpha: float = 1.0
    gamma: float = 1.0
    refinements: int = 2
    area_levels: list[float] = dataclasses.field(default_factory=lambda: [1.0, 2.0])
    test_function: str = "cos_x1"
    gradient_times: list[float] = dataclasses.field(default_factory=lambda: [1.0, 4.0])
    epsilon: float = 0.05
    tv_time: float = 1.0
    path_time: float = 1.0
    dump_paths: int = 0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def effective_m(self) -> int:
        """KL truncation order actually used."""
        return 2 * self.n if self.m is None else self.m

    @property
    def effective_horizon(self) -> float:
        """Censoring horizon actually used."""
        return max(self.t_grid) if self.horizon is None else self.horizon

    def start_elements(self) -> tuple[GroupElement, GroupElement]:
        """Start points `g` and `g̃` as group elements."""
        return self.start.to_group_element(), self.start_tilde.to_group_element()

    def validate(self) -> None:
        """Check every invariant of the schema.

        Raises:
            ConfigError: On the first violated invariant.
        """
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"Unsupported schema version {self.schema_version}, expected {SCHEMA_VERSION}."
            )
        _require(_is_int(self.n) and self.n >= 2, "`n` must be an integer >= 2.")
        _require(
            self.m is None or (_is_int(self.m) and self.m >= self.n + 1),
            f"`m` must be null or an integer >= n + 1 = {self.n + 1}.",
        )
        _require(_is_int(self.seed) and 0 <= self.seed < 2**64, "`seed` must be a uint64.")
        _require(_is_int(self.replicas) and self.replicas >= 1, "`replicas` must be >= 1.")
        _require(_is_positive(self.h), "`h` must be positive.")
        _require(
            len(self.t_grid) >= 1
            and all(_is_positive(t) for t in self.t_grid)
            and all(a < b for a, b in zip(self.t_grid, self.t_grid[1:])),
            "`t_grid` must be a non-empty, strictly increasing list of positive times.",
        )
        for name in ("start", "start_tilde"):
            point = getattr(self, name)
            _require(
                len(point.x) == self.n and len(point.z) == skew_dim(self.n),
                f"`{name}` must have {self.n} horizontal and {skew_dim(self.n)} "
                "vertical coordinates.",
            )
        if self.homogeneous is not None:
            self._validate_homogeneous(self.homogeneous)
        _require(self.mode in MODES, f"`mode` must be one of {', '.join(MODES)}.")
        _require(isinstance(self.block_diagonalize, bool), "`block_diagonalize` must be a bool.")
        _require(_is_int(self.max_blocks) and self.max_blocks >= 1, "`max_blocks` must be >= 1.")
        _require(self.horizon is None or _is_positive(self.horizon), "`horizon` must be positive.")
        _require(_is_positive(self.alpha) and _is_positive(self.gamma), "Radii must be positive.")
        _require(_is_int(self.refinements) and self.refinements >= 1, "`refinements` must be >= 1.")
        _require(
            len(self.area_levels) >= 1 and all(_is_positive(v) for v in self.area_levels),
            "`area_levels` must be a non-empty list of positive levels.",
        )
        _require(
            self.test_function in TEST_FUNCTIONS,
            f"`test_function` must be one of {', '.join(TEST_FUNCTIONS)}.",
        )
        _require(
            len(self.gradient_times) >= 1 and all(_is_positive(t) for t in self.gradient_times),
            "`gradient_times` must be a non-empty list of positive times.",
        )
        _require(_is_positive(self.epsilon), "`epsilon` must be positive.")
        _require(_is_positive(self.tv_time), "`tv_time` must be positive.")
        _require(_is_positive(self.path_time), "`path_time` must be positive.")
        _require(_is_int(self.dump_paths) and self.dump_paths >= 0, "`dump_paths` must be >= 0.")

    def _validate_homogeneous(self, section: HomogeneousConfig) -> None:
        try:
            spec = section.spec()
        except InvalidGroupSpecError as e:
            raise ConfigError(f"Invalid homogeneous group: {e}") from e
        _require(spec.n == self.n, f"Homogeneous group must have rank n = {self.n}.")
        for name in ("start", "start_tilde"):
            point = getattr(section, name)
            _require(
                len(point.x) == spec.n and len(point.z) == spec.m,
                f"`homogeneous.{name}` must have {spec.n} horizontal and {spec.m} "
                "vertical coordinates.",
            )

    @classmethod
    def from_dict(cls, data: Any) -> Self:
        """Validate and load a config mapping.

        Arguments:
            data: Parsed JSON document.

        Returns:
            Validated config.

        Raises:
            ConfigError: On unknown keys or violated invariants.
        """
        fields = {f.name for f in dataclasses.fields(cls)}
        _check_keys(data, fields, "config")

        values = dict(data)
        for name in ("start", "start_tilde"):
            if name in values:
                values[name] = PointConfig.from_dict(values[name], name)
        if values.get("homogeneous") is not None:
            values["homogeneous"] = HomogeneousConfig.from_dict(values["homogeneous"])
        for name in ("t_grid", "area_levels", "gradient_times"):
            if name in values:
                values[name] = _float_list(values[name], name)
        for name in ("h", "horizon", "alpha", "gamma", "epsilon", "tv_time", "path_time"):
            if values.get(name) is not None:
                values[name] = _float(values[name], name)

        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        """Serialize to a JSON compatible mapping."""
        return json_ready(dataclasses.asdict(self))

    @classmethod
    def load_from_disk(cls, config_path: Path | str) -> Self:
        """Load `carnot_coupling` config from disk.

        Arguments:
            config_path: Config file path.

        Returns:
            Loaded and validated config.

        Raises:
            ConfigError: If the file can't be read, parsed or validated.
        """
        try:
            with open(config_path) as f:
                config = json.load(f)
        except OSError as e:
            raise ConfigError(f"Can't read config file {config_path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Malformed JSON in {config_path}: {e}") from e

        return cls.from_dict(config)

    @classmethod
    def load_default(cls) -> Self:
        """Load the config shipped with the package."""
        resource = importlib.resources.files("carnot_coupling.data") / DEFAULT_CONFIG_RESOURCE
        return cls.from_dict(json.loads(resource.read_text()))

    def save_to_disk(self, config_path: Path | str) -> None:
        """Save `carnot_coupling` config to disk.

        Arguments:
            config_path: Config file path.
        """
        write_json(self.to_dict(), Path(config_path))

    def with_overrides(self, overrides: Iterable[str]) -> Self:
        """Return a copy with `key=value` overrides applied.

        Values are parsed as JSON and fall back to plain strings. Dotted keys address
        nested sections, e.g. `start_tilde.z=[2.0]`.

        Arguments:
            overrides: Override expressions.

        Returns:
            Validated config.

        Raises:
            ConfigError: On malformed expressions or violated invariants.
        """
        data = self.to_dict()
        for override in overrides:
            key, sep, raw = override.partition("=")
            if not sep or not key:
                raise ConfigError(f"Override {override!r} is not of the form key=value.")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw

            *parents, leaf = key.split(".")
            target = data
            for parent in parents:
                if not isinstance(target.get(parent), dict):
                    raise ConfigError(f"Override key {key!r} doesn't address a section.")
                target = target[parent]
            target[leaf] = value

        return self.from_dict(data)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_positive(value: Any) -> bool:
    return (
        isinstance(value, int | float)
        and not isinstance(value, bool)
        and math.isfinite(value)
        and value > 0
    )


def _check_keys(data: Any, allowed: set[str], name: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"`{name}` must be a JSON object.")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"Unknown keys in `{name}`: {', '.join(unknown)}.")


def _float(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise ConfigError(f"`{name}` must be a number.")
    return float(value)


def _float_list(value: Any, name: str) -> list[float]:
    if not isinstance(value, list):
        raise ConfigError(f"`{name}` must be a list of numbers.")
    return [_float(v, name) for v in value]
