"""Discretized subelliptic Brownian motion on `G_n` and homogeneous groups."""

import dataclasses
import enum
import math
from pathlib import Path

import numpy as np

from carnot_coupling.group_algebra import (
    DimensionMismatchError,
    GroupElement,
    HomogeneousGroupSpec,
    SkewMatrix,
    pair_indices,
    skew_dim,
    symplectic_entries,
)
from carnot_coupling.stochastic_kernels import KLBlock
from carnot_coupling.utils import write_csv

ENDPOINT_CHUNK = 4096
"""Time steps advanced per vectorized chunk in `simulate_endpoints`."""


def n_steps(T: float, h: float) -> int:
    """Number of uniform steps of size at most `h` covering `[0, T]`."""
    return max(1, math.ceil(T / h - 1e-9))


@dataclasses.dataclass(frozen=True, eq=False)
class PathSample:
    """Brownian path sampled on a time grid.

    Attributes:
        grid: Strictly increasing, non-negative times.
        x: Horizontal coordinates, shape `(len(grid), n)`.
        z: Vertical coordinates in pair order, shape `(len(grid), n(n-1)/2)`.
    """

    grid: np.ndarray
    x: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        grid = np.array(self.grid, dtype=float)
        x = np.array(self.x, dtype=float)
        z = np.array(self.z, dtype=float)
        if grid.ndim != 1 or grid.size < 1 or grid[0] < 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("Path grid must be non-negative and strictly increasing.")
        if x.shape[0] != grid.size or z.shape != (grid.size, skew_dim(x.shape[1])):
            raise DimensionMismatchError(
                f"Grid of {grid.size} points can't hold x {x.shape} and z {z.shape}."
            )
        for name, value in (("grid", grid), ("x", x), ("z", z)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        """Group rank."""
        return self.x.shape[1]

    def at(self, k: int) -> GroupElement:
        """Path value at grid index `k`."""
        return GroupElement(self.x[k], SkewMatrix(self.z[k]))

    @property
    def end(self) -> GroupElement:
        """Terminal value."""
        return self.at(-1)

    def rotate(self, basis: np.ndarray) -> "PathSample":
        """Apply `(x, z) ↦ (P x, P z Pᵗ)` at every grid point."""
        rows, cols = pair_indices(self.n)
        dense = np.zeros((self.grid.size, self.n, self.n))
        dense[:, rows, cols] = self.z
        dense[:, cols, rows] = -self.z
        rotated = basis @ dense @ basis.T
        return PathSample(self.grid, self.x @ basis.T, rotated[:, rows, cols])


def step_brownian(state: GroupElement, dW: np.ndarray, h: float) -> GroupElement:
    """Advance a path by one Stratonovich (midpoint) step.

    `z += ½ (x + dW/2) ⊙ dW = ½ x ⊙ dW`, i.e. right multiplication by `(dW, 0)`.

    Arguments:
        state: Current value.
        dW: Horizontal increment, drawn `N(0, h I)` by the caller.
        h: Step length.

    Returns:
        Next value.

    Raises:
        ValueError: If `h <= 0`.
    """
    if not h > 0:
        raise ValueError(f"Step must be positive, got {h}.")
    dW = np.asarray(dW, dtype=float)
    if dW.shape != state.x.shape:
        raise DimensionMismatchError(f"Increment {dW.shape} doesn't fit G_{state.n}.")
    midpoint = state.x + dW / 2
    return GroupElement(
        state.x + dW,
        SkewMatrix(state.z.entries + 0.5 * symplectic_entries(midpoint, dW)),
    )


def path_from_increments(
    start: GroupElement, increments: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate horizontal increments into a path with exact chord areas.

    Arguments:
        start: Initial value.
        increments: Array of shape `(..., K, n)`.

    Returns:
        Tuple of `x` with shape `(..., K + 1, n)` and `z` with shape
        `(..., K + 1, n(n-1)/2)`.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.shape[-1] != start.n:
        raise DimensionMismatchError(f"Increments don't fit G_{start.n}.")

    lead = increments.shape[:-2]
    offsets = np.cumsum(increments, axis=-2)
    zero = np.zeros((*lead, 1, start.n))
    x = start.x + np.concatenate([zero, offsets], axis=-2)

    areas = 0.5 * symplectic_entries(x[..., :-1, :], increments)
    zero_area = np.zeros((*lead, 1, skew_dim(start.n)))
    z = start.z.entries + np.concatenate([zero_area, np.cumsum(areas, axis=-2)], axis=-2)
    return x, z


def simulate_path(
    start: GroupElement, T: float, h: float, rng: np.random.Generator
) -> PathSample:
    """Simulate a Brownian path on `[0, T]` with steps of size at most `h`.

    Arguments:
        start: Initial value.
        T: Time horizon.
        h: Maximal step.
        rng: Random generator.

    Returns:
        Path on the uniform grid of `⌈T/h⌉ + 1` points.
    """
    if not T > 0:
        raise ValueError(f"Horizon must be positive, got {T}.")
    if not 0 < h <= T:
        raise ValueError(f"Step must satisfy 0 < h <= T, got h={h}.")

    steps = n_steps(T, h)
    grid = np.linspace(0.0, T, steps + 1)
    increments = rng.standard_normal((steps, start.n)) * math.sqrt(T / steps)
    x, z = path_from_increments(start, increments)
    return PathSample(grid, x, z)


def simulate_endpoints(
    start: GroupElement, T: float, h: float, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Terminal values of `size` independent paths.

    Arguments:
        start: Common initial value.
        T: Time horizon.
        h: Maximal step.
        size: Number of paths.
        rng: Random generator.

    Returns:
        Tuple of `x` with shape `(size, n)` and `z` with shape `(size, n(n-1)/2)`.
    """
    if not T > 0:
        raise ValueError(f"Horizon must be positive, got {T}.")

    steps = n_steps(T, h)
    scale = math.sqrt(T / steps)
    x = np.broadcast_to(start.x, (size, start.n)).copy()
    z = np.broadcast_to(start.z.entries, (size, skew_dim(start.n))).copy()
    done = 0
    while done < steps:
        chunk = min(ENDPOINT_CHUNK, steps - done)
        increments = rng.standard_normal((size, chunk, start.n)) * scale
        offsets = np.cumsum(increments, axis=1) - increments
        left = x[:, np.newaxis, :] + offsets
        z += 0.5 * symplectic_entries(left, increments).sum(axis=1)
        x += increments.sum(axis=1)
        done += chunk
    return x, z


@dataclasses.dataclass(frozen=True, eq=False)
class HomogeneousPath:
    """Path in a homogeneous group.

    Attributes:
        grid: Times.
        x: Horizontal coordinates, shape `(len(grid), n)`.
        z: Vertical coordinates, shape `(len(grid), m)`.
    """

    grid: np.ndarray
    x: np.ndarray
    z: np.ndarray


def homogeneous_path(spec: HomogeneousGroupSpec, path: PathSample) -> HomogeneousPath:
    """Project a `G_n` Brownian path through the lift morphism.

    Arguments:
        spec: Target homogeneous group.
        path: Path in the free group of the same rank.

    Returns:
        Brownian path of the homogeneous group.
    """
    if path.n != spec.n:
        raise DimensionMismatchError(f"Can't map G_{path.n} onto a rank {spec.n} group.")
    vertical = path.z @ spec.lift_matrix.T
    vertical += 0.25 * np.einsum("kij,ti,tj->tk", spec.S, path.x, path.x)
    return HomogeneousPath(path.grid, path.x.copy(), vertical)


def reconstruct_block_paths(
    block: KLBlock, x_start: float, grid: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the bridge coupled coordinate of both paths from a KL block.

    `X_t = x_start + B^br_t + (t/√T) ξ_0`, where both paths share `ξ_0` and the
    residual and differ only through the modified coefficients.

    Arguments:
        block: KL coefficients of the block.
        x_start: Common starting value of the coordinate.
        grid: Times in `[0, T]` (defaults to the block grid).

    Returns:
        Tuple of the coordinate path of each copy.
    """
    if grid is None:
        if block.grid is None:
            raise ValueError("Block carries no grid, pass one explicitly.")
        grid = block.grid
    grid = np.asarray(grid, dtype=float)

    drift = x_start + (grid / math.sqrt(block.T)) * block.xi[0]
    return drift + block.bridge(grid), drift + block.bridge(grid, tilde=True)


class ExitReason(enum.Enum):
    """Which pseudo-cube constraint failed first."""

    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


@dataclasses.dataclass(frozen=True)
class ExitEvent:
    """First grid exit from a domain.

    Attributes:
        time: First grid time outside the domain (`inf` when never crossed).
        reason: Constraint that failed, `None` when never crossed.
        crossed: Whether the path left the domain within its grid.
    """

    time: float
    reason: ExitReason | None
    crossed: bool


@dataclasses.dataclass(frozen=True, eq=False)
class PseudoCube:
    """Pseudo-cube `Q(α, γ)` around `(x̂, ẑ)`.

    Attributes:
        center: Center `(x̂, ẑ)`.
        alpha: Horizontal radius.
        gamma: Vertical scale; the vertical constraint is `||U|| < γ²`.
    """

    center: GroupElement
    alpha: float
    gamma: float

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.gamma > 0):
            raise ValueError("Pseudo-cube radii must be positive.")

    @classmethod
    def around_pair(
        cls, g: GroupElement, g_tilde: GroupElement, alpha: float, gamma: float
    ) -> "PseudoCube":
        """Pseudo-cube centered at the midpoint configuration of two elements."""
        center = GroupElement((g.x + g_tilde.x) / 2, (g.z + g_tilde.z) * 0.5)
        return cls(center=center, alpha=alpha, gamma=gamma)

    def exit_event(self, path: PathSample) -> ExitEvent:
        """First exit of `path` from the cube."""
        return detect_exit_cube(path, self.center, self.alpha, self.gamma)


def detect_exit_cube(
    path: PathSample, center: GroupElement, alpha: float, gamma: float
) -> ExitEvent:
    """Find the first grid time outside `Q(α, γ)`.

    The vertical coordinate is `U_t = z_t - ẑ - ½ x̂ ⊙ X_t`.

    Arguments:
        path: Sampled path.
        center: Cube center `(x̂, ẑ)`.
        alpha: Horizontal radius.
        gamma: Vertical scale.

    Returns:
        Exit event.
    """
    if not (alpha > 0 and gamma > 0):
        raise ValueError("Pseudo-cube radii must be positive.")

    horizontal = np.linalg.norm(path.x - center.x, axis=1) >= alpha
    u = path.z - center.z.entries - 0.5 * symplectic_entries(center.x, path.x)
    vertical = np.linalg.norm(u, axis=1) >= gamma**2

    outside = horizontal | vertical
    if not outside.any():
        return ExitEvent(time=math.inf, reason=None, crossed=False)

    k = int(np.argmax(outside))
    reason = ExitReason.HORIZONTAL if horizontal[k] else ExitReason.VERTICAL
    return ExitEvent(time=float(path.grid[k]), reason=reason, crossed=True)


def path_csv_header(n: int) -> list[str]:
    """CSV header `t, x_1..x_n, z_(1,2)..z_(n-1,n)`."""
    rows, cols = pair_indices(n)
    return (
        ["t"]
        + [f"x_{i + 1}" for i in range(n)]
        + [f"z_({i + 1},{j + 1})" for i, j in zip(rows, cols, strict=True)]
    )


def write_path_csv(path: PathSample, destination: Path) -> None:
    """Dump a path as CSV with a header row.

    Arguments:
        path: Sampled path.
        destination: Output file.
    """
    rows = np.column_stack([path.grid, path.x, path.z])
    write_csv(path_csv_header(path.n), rows, destination)
