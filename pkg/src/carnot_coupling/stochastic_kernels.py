"""Exact samplers for the probabilistic primitives of the coupling."""

import dataclasses
import logging
import math
from typing import NamedTuple

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

WISHART_RESIDUAL_TOLERANCE = 1e-10
"""Maximal `||R w - v||` accepted from the pseudo-inverse solve."""


class SingularWishartError(RuntimeError):
    """`R Rᵗ` is numerically singular."""


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Reproducible random stream owned by one replica.

    Attributes:
        seed: Experiment seed.
        stream_id: Replica (or replica batch) index.
        arm: Experiment arm, so that independent arms of one run never share draws.
    """

    seed: int
    stream_id: int
    arm: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream_id", "arm"):
            value = getattr(self, name)
            if not 0 <= value < 2**64:
                raise ValueError(f"`{name}` must be an unsigned 64-bit integer.")

    def generator(self) -> np.random.Generator:
        """Fresh PCG64 generator seeded from `(seed, arm, stream_id)`."""
        sequence = np.random.SeedSequence([self.seed, self.arm, self.stream_id])
        return np.random.default_rng(sequence)


def as_generator(rng: np.random.Generator | RngStream) -> np.random.Generator:
    """Accept either a ready generator or a stream description."""
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def default_truncation(n: int) -> int:
    """Default KL truncation order / Wishart dimension `m = 2n`."""
    return 2 * n


def gaussian_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Matrix of i.i.d. standard Gaussian entries.

    Arguments:
        rows: Number of rows.
        cols: Number of columns.
        rng: Random generator.

    Returns:
        Array of shape `(rows, cols)`.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"Matrix shape must be positive, got ({rows}, {cols}).")
    return rng.standard_normal((rows, cols))


def sample_first_passage(
    a: float, rng: np.random.Generator, size: int | None = None
) -> float | np.ndarray:
    """First passage time of a standard Brownian motion at level `a`.

    Uses the exact law `D_a = a² / Z²` with `Z` standard Gaussian.

    Arguments:
        a: Positive level.
        rng: Random generator.
        size: Number of independent draws (scalar draw when `None`).

    Returns:
        Passage time(s).

    Raises:
        ValueError: If `a <= 0`.
    """
    if not a > 0:
        raise ValueError(f"Passage level must be positive, got {a}.")

    z = rng.standard_normal(size)
    with np.errstate(divide="ignore"):
        times = a**2 / np.square(z)
    return float(times) if size is None else times


class EndpointHit(NamedTuple):
    """Joint outcome of `(1{max W ≥ L}, W_{σ ∧ 1})` on `[0, 1]`.

    Attributes:
        hit: Whether the level was reached before time 1.
        endpoint: `L` on a hit, otherwise `W_1`.
        free_endpoint: `W_1` of the unstopped motion.
    """

    hit: bool | np.ndarray
    endpoint: float | np.ndarray
    free_endpoint: float | np.ndarray


def sample_endpoint_and_hit(
    level: float, rng: np.random.Generator, size: int | None = None
) -> EndpointHit:
    """Draw whether a Brownian motion reaches `level` on `[0, 1]` and where it stops.

    `W_1` is drawn first. Given `W_1 = y < L`, the bridge maximum exceeds `L` with
    probability `exp(-2L(L - y))`, which makes the unhit endpoints follow the
    reflected density `φ(y) - φ(2L - y)` on `y < L`.

    Arguments:
        level: Positive level `L`.
        rng: Random generator.
        size: Number of independent draws (scalar draw when `None`).

    Returns:
        Hit flag, stopped endpoint and free endpoint.

    Raises:
        ValueError: If `level <= 0`.
    """
    if not level > 0:
        raise ValueError(f"Hitting level must be positive, got {level}.")

    y = rng.standard_normal(size)
    u = rng.random(size)
    with np.errstate(over="ignore"):
        bridge_hit = u < np.exp(-2 * level * np.maximum(level - y, 0.0))
    hit = (y >= level) | bridge_hit
    endpoint = np.where(hit, level, y)

    if size is None:
        return EndpointHit(bool(hit), float(endpoint), float(y))
    return EndpointHit(hit, endpoint, y)


def sine_table(grid: np.ndarray, T: float, m: int) -> np.ndarray:
    """Values `sin(jπt/T)`, `j = 1..m`, with exact zeros at `t = 0` and `t = T`.

    Arguments:
        grid: Times in `[0, T]`.
        T: Bridge length.
        m: Number of modes.

    Returns:
        Array of shape `(len(grid), m)`.
    """
    grid = np.asarray(grid, dtype=float)
    modes = np.arange(1, m + 1)
    table = np.sin(np.pi * np.outer(grid / T, modes))
    table[(grid == 0.0) | (grid == T)] = 0.0
    return table


def kl_basis(grid: np.ndarray, T: float, m: int) -> np.ndarray:
    """Bridge basis `√T (√2 / (jπ)) sin(jπt/T)` of the KL expansion."""
    modes = np.arange(1, m + 1)
    return sine_table(grid, T, m) * (math.sqrt(2 * T) / (np.pi * modes))


def kl_projection(bridge: np.ndarray, grid: np.ndarray, T: float, m: int) -> np.ndarray:
    """First `m` KL coefficients of sampled bridges, by trapezoidal quadrature.

    Arguments:
        bridge: Bridge values of shape `(..., len(grid))`.
        grid: Times in `[0, T]`.
        T: Bridge length.
        m: Number of modes.

    Returns:
        Coefficients of shape `(..., m)`.
    """
    table = sine_table(grid, T, m)
    weights = np.zeros_like(grid, dtype=float)
    steps = np.diff(grid)
    weights[:-1] += steps / 2
    weights[1:] += steps / 2
    modes = np.arange(1, m + 1)
    return (bridge * weights) @ table * (modes * np.pi * math.sqrt(2) / T**1.5)


@dataclasses.dataclass(frozen=True, eq=False)
class KLBlock:
    """Karhunen-Loève coefficients of one coupling block.

    Attributes:
        T: Block length.
        m: Truncation order; coefficients `1..m` are modified by the coupling.
        xi: Coefficients `ξ_0..ξ_m` of the first path.
        xi_tilde: Coefficients `ξ̃_0..ξ̃_m` of the second path.
        grid: Times where the shared residual is known, or `None`.
        residual: Shared bridge remainder (modes above `m`) on `grid`, or `None`.
    """

    T: float
    m: int
    xi: np.ndarray
    xi_tilde: np.ndarray
    grid: np.ndarray | None = None
    residual: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise ValueError(f"Block length must be positive, got {self.T}.")
        for name in ("xi", "xi_tilde"):
            value = np.array(getattr(self, name), dtype=float)
            if value.shape != (self.m + 1,):
                raise ValueError(f"`{name}` must have {self.m + 1} coefficients.")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.xi[0] != self.xi_tilde[0]:
            raise ValueError("Both paths must share ξ_0.")
        if (self.grid is None) != (self.residual is None):
            raise ValueError("`grid` and `residual` go together.")

    def with_tilde(self, xi_tilde: np.ndarray) -> "KLBlock":
        """Copy with the second path's coefficients replaced."""
        return dataclasses.replace(self, xi_tilde=xi_tilde)

    def bridge(self, grid: np.ndarray, tilde: bool = False) -> np.ndarray:
        """Bridge values of one path: truncated series plus the shared residual.

        Arguments:
            grid: Evaluation times in `[0, T]`; must be the block grid when the block
                carries a residual.
            tilde: Whether to use the second path's coefficients.

        Returns:
            Bridge values on `grid`.
        """
        grid = np.asarray(grid, dtype=float)
        if grid.size and (grid.min() < 0 or grid.max() > self.T):
            raise ValueError(f"Grid leaves the block interval [0, {self.T}].")

        coefficients = self.xi_tilde if tilde else self.xi
        values = kl_basis(grid, self.T, self.m) @ coefficients[1:]
        if self.residual is not None:
            if self.grid is None or not np.array_equal(grid, self.grid):
                raise ValueError("The shared residual is only known on the block grid.")
            values = values + self.residual
        return values


def sample_bridge_residual(
    grid: np.ndarray, T: float, m: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a Brownian bridge on `grid` and split off its first `m` KL modes.

    Arguments:
        grid: Increasing times from `0` to `T`.
        T: Bridge length.
        m: Number of modes to split off.
        rng: Random generator.

    Returns:
        Tuple of the projected coefficients `ξ_1..ξ_m` and the residual bridge.
    """
    steps = np.diff(grid)
    walk = np.concatenate([[0.0], np.cumsum(rng.standard_normal(steps.size) * np.sqrt(steps))])
    bridge = walk - (grid / T) * walk[-1]
    bridge[-1] = 0.0
    coefficients = kl_projection(bridge, grid, T, m)
    residual = bridge - kl_basis(grid, T, m) @ coefficients
    return coefficients, residual


def sample_kl_block(
    T: float, m: int, rng: np.random.Generator, grid: np.ndarray | None = None
) -> KLBlock:
    """Draw the KL coefficients of a block, both paths initially identical.

    Arguments:
        T: Block length.
        m: Truncation order (`m >= 2`).
        rng: Random generator.
        grid: Optional times in `[0, T]` (including both ends) on which a shared
            residual bridge is sampled.

    Returns:
        KL block with `ξ = ξ̃`.
    """
    if not T > 0:
        raise ValueError(f"Block length must be positive, got {T}.")
    if m < 2:
        raise ValueError(f"Truncation order must be at least 2, got {m}.")

    xi = rng.standard_normal(m + 1)
    if grid is None:
        return KLBlock(T=T, m=m, xi=xi, xi_tilde=xi.copy())

    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0 or grid[-1] != T or np.any(np.diff(grid) <= 0):
        raise ValueError("Residual grid must increase from 0 to T.")
    _, residual = sample_bridge_residual(grid, T, m, rng)
    residual.setflags(write=False)
    return KLBlock(T=T, m=m, xi=xi, xi_tilde=xi.copy(), grid=grid, residual=residual)


def sigma_inv_sqrt_norm(w: np.ndarray) -> float:
    """`||Σ^{-1/2} w||` with `Σ = diag(1, 1/4, ..., 1/m²)`."""
    return float(np.linalg.norm(np.arange(1, w.size + 1) * w))


@dataclasses.dataclass(frozen=True, eq=False)
class WishartDraw:
    """Gaussian coefficient matrix and the minimal norm solution of `R w = v`.

    Attributes:
        R: Array of shape `(n-1, m)`.
        w: Solution vector of length `m`.
        sigma_inv_w_norm: `||Σ^{-1/2} w||`.
    """

    R: np.ndarray
    w: np.ndarray
    sigma_inv_w_norm: float


def wishart_vector(R: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Minimal norm solution `w = Rᵗ (R Rᵗ)⁻¹ v` through a QR factorization of `Rᵗ`.

    Arguments:
        R: Full row rank matrix of shape `(p, m)`, `p <= m`.
        v: Right hand side of length `p`.

    Returns:
        Vector `w` of length `m`.

    Raises:
        SingularWishartError: If `R` is numerically rank deficient.
    """
    q, r = scipy.linalg.qr(R.T, mode="economic")
    diagonal = np.abs(np.diag(r))
    if diagonal.min() <= 1e-12 * max(diagonal.max(), 1.0):
        raise SingularWishartError("Coefficient matrix is numerically rank deficient.")

    # R = rᵗ qᵗ, so R q y = rᵗ y = v
    w = q @ scipy.linalg.solve_triangular(r, v, trans="T")
    residual = float(np.linalg.norm(R @ w - v))
    if residual > WISHART_RESIDUAL_TOLERANCE:
        raise SingularWishartError(f"Residual {residual:.3g} of R w = v is too large.")
    return w


def sample_wishart_vector(
    n: int, m: int, v: np.ndarray, rng: np.random.Generator
) -> WishartDraw:
    """Draw `R` with i.i.d. Gaussian entries and solve `R w = v`.

    Arguments:
        n: Group rank.
        m: Number of modified KL coefficients (`m >= n + 1`).
        v: Unit vector of length `n - 1`.
        rng: Random generator.

    Returns:
        Matrix, solution and its `Σ^{-1/2}` norm.

    Raises:
        ValueError: On violated preconditions.
        SingularWishartError: If two consecutive draws are singular.
    """
    v = np.asarray(v, dtype=float)
    if m < n + 1:
        raise ValueError(f"Need m >= n + 1 = {n + 1}, got m={m}.")
    if v.shape != (n - 1,):
        raise ValueError(f"Target vector must have {n - 1} coordinates.")
    if abs(np.linalg.norm(v) - 1.0) > 1e-10:
        raise ValueError("Target vector must have unit norm.")

    for attempt in range(2):
        R = gaussian_matrix(n - 1, m, rng)
        try:
            w = wishart_vector(R, v)
        except SingularWishartError:
            logger.debug("Singular Wishart draw (attempt %d), resampling", attempt + 1)
            continue
        return WishartDraw(R=R, w=w, sigma_inv_w_norm=sigma_inv_sqrt_norm(w))

    raise SingularWishartError("Coefficient matrix was singular twice in a row.")
