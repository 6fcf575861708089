"""Non co-adapted coupling of two Brownian motions on `G_n`.

A run goes through three kinds of phases:

1. `Reflection`: mirror coupling of the horizontal parts until they meet.
2. `Line(i)`: Brownian bridge surgery on coordinate `i` that cancels row `i` of the
   fiber defect over blocks of geometrically growing length.
3. `Coupled`: both copies move together.

Event mode samples the block outcomes from their exact laws. Path mode simulates
both copies on a time grid and checks the resulting areas against the same
bookkeeping.
"""

import dataclasses
import enum
import logging
import math
from typing import Any

import numpy as np
import scipy.linalg

from carnot_coupling.group_algebra import (
    GroupElement,
    HomogeneousElement,
    HomogeneousGroupSpec,
    SkewMatrix,
    block_diagonalize,
    fiber_defect,
    group_mul,
    lift_morphism,
    minimal_lift,
    orthonormal_completion,
    symplectic_entries,
)
from carnot_coupling.path_sim import (
    PathSample,
    PseudoCube,
    n_steps,
    path_from_increments,
    reconstruct_block_paths,
)
from carnot_coupling.stochastic_kernels import (
    KLBlock,
    RngStream,
    SingularWishartError,
    as_generator,
    default_truncation,
    sample_bridge_residual,
    sample_endpoint_and_hit,
    sample_first_passage,
    sample_wishart_vector,
    sigma_inv_sqrt_norm,
    sine_table,
    wishart_vector,
)

logger = logging.getLogger(__name__)

REFLECTION_CHUNK = 4096
"""Time steps simulated at once while waiting for the reflection to meet."""

CONSISTENCY_TOLERANCE = 1e-7
"""Relative tolerance between simulated block areas and the block bookkeeping."""

ZERO_ROW_TOLERANCE = 1e-12
"""Fiber defect rows below this relative norm are treated as already coupled."""

PROJECTION_TOLERANCE = 1e-9
"""Relative norm below which a projected fiber defect counts as zero."""


class CouplingDiagnosticError(RuntimeError):
    """A coupling run violated a phase precondition or tripped the block guard."""


@dataclasses.dataclass(frozen=True)
class CouplingConstants:
    """Dimensional constants of the coupling rate bounds.

    Attributes:
        n: Group rank.
        b_n: Line constant.
        beta_n: Fiber constant `(n-1)^{3/2} b_n`.
        C1: Horizontal constant of the global bound.
        C2: Vertical constant of the global bound.
    """

    n: int
    b_n: float
    beta_n: float
    C1: float
    C2: float

    def reflection_bound(self, dx_norm: float, t: float) -> float:
        """Bound `||x - x̃|| / √(2πt) ∧ 1` on `P(τ₀ > t)`."""
        if dx_norm == 0.0:
            return 0.0
        if t <= 0.0:
            return 1.0
        return min(1.0, dx_norm / math.sqrt(2 * math.pi * t))

    def line_bound(self, v_norm: float, t: float) -> float:
        """Bound `b_n ||v₀|| / t ∧ 1` on the survival of one line."""
        return _capped(self.b_n * v_norm, t)

    def fiber_bound(self, zeta_norm: float, t: float) -> float:
        """Bound `β_n ||ζ|| / t ∧ 1` on the survival of an on-fiber coupling."""
        return _capped(self.beta_n * zeta_norm, t)

    def global_bound(self, dx_norm: float, zeta_norm: float, t: float) -> float:
        """Bound `C₁ ||x - x̃|| / √t + C₂ ||ζ|| / t ∧ 1` on the survival of a coupling."""
        if dx_norm == 0.0 and zeta_norm == 0.0:
            return 0.0
        if t <= 0.0:
            return 1.0
        return min(1.0, self.C1 * dx_norm / math.sqrt(t) + self.C2 * zeta_norm / t)

    def line_regime(self, v_norm: float, t: float) -> bool:
        """Whether `t` lies where the line bound is asserted."""
        return t >= v_norm

    def fiber_regime(self, zeta_norm: float, t: float) -> bool:
        """Whether `t` lies where the on-fiber bound is asserted."""
        return t >= (self.n - 1) * zeta_norm

    def global_regime(self, dx_norm: float, t: float) -> bool:
        """Whether `t` lies where the global bound is asserted."""
        return t >= self.beta_n * dx_norm**2

    def wishart_norm_bound(self, m: int) -> float:
        """Bound `1 / √(m - n)` on `E||w||`."""
        self._check_truncation(m)
        return 1 / math.sqrt(m - self.n)

    def sigma_norm_bound(self, m: int) -> float:
        """Bound `m / √(m - n)` on `E||Σ^{-1/2} w||`."""
        self._check_truncation(m)
        return m / math.sqrt(m - self.n)

    def general_line_constant(self, m: int) -> float:
        """Line constant `√(2π) m / √(m - n)` guaranteed at block boundaries."""
        return math.sqrt(2 * math.pi) * self.sigma_norm_bound(m)

    def lines_executed(self, block_diagonalize: bool = True) -> int:
        """Number of line phases run for a generic fiber defect."""
        return self.n // 2 if block_diagonalize else self.n - 1

    @property
    def reduced_beta(self) -> float:
        """Fiber constant `⌊n/2⌋^{3/2} b_n` after block diagonalization."""
        return (self.n // 2) ** 1.5 * self.b_n

    def _check_truncation(self, m: int) -> None:
        if m <= self.n:
            raise ValueError(f"Need m > n = {self.n}, got m={m}.")

    def to_dict(self) -> dict[str, float]:
        """Serialize as a flat mapping."""
        return dataclasses.asdict(self)


def _capped(numerator: float, t: float) -> float:
    if numerator == 0.0:
        return 0.0
    if t <= 0.0:
        return 1.0
    return min(1.0, numerator / t)


def constants(n: int) -> CouplingConstants:
    """Evaluate the coupling constants of `G_n`.

    Arguments:
        n: Group rank.

    Returns:
        Constants of the rate bounds.

    Raises:
        ValueError: If `n < 2`.
    """
    if n < 2:
        raise ValueError(f"Coupling needs n >= 2, got {n}.")

    b_n = 2 * math.pi if n == 2 else 2 * math.sqrt(2 * math.pi * n)
    beta_n = (n - 1) ** 1.5 * b_n
    return CouplingConstants(
        n=n,
        b_n=b_n,
        beta_n=beta_n,
        C1=4 * math.sqrt(beta_n) * (n - 1) + 1 / math.sqrt(math.pi),
        C2=2 * beta_n,
    )


def block_length(v_norm: float, k: int) -> float:
    """Length `T_k = ||v₀|| 2^k / 3` of block `k`."""
    return v_norm / 3 * 2**k


def block_boundary(v_norm: float, k: int) -> float:
    """End `t_k = ||v₀|| (2^k - 1) / 3` of the first `k` blocks."""
    return v_norm * (2**k - 1) / 3


class Mode(enum.Enum):
    """Fidelity of a coupling run."""

    EVENT = "event"
    PATH = "path"


@dataclasses.dataclass(frozen=True)
class CouplingSettings:
    """Parameters of a coupling run.

    Attributes:
        mode: Fidelity of the line phases (the reflection always runs on a grid).
        h: Maximal time step on grids.
        m: KL truncation order, `2n` when `None`.
        block_diagonalize: Whether to reduce the fiber defect to its canonical form.
        max_blocks: Blocks allowed per line before the run is declared broken.
        horizon: Runs not coupled by this time are censored.
        exit_domain: Pseudo-cube whose first exit stops the run (path mode only).
    """

    mode: Mode = Mode.EVENT
    h: float = 1e-3
    m: int | None = None
    block_diagonalize: bool = True
    max_blocks: int = 64
    horizon: float = math.inf
    exit_domain: PseudoCube | None = None

    def __post_init__(self) -> None:
        if not self.h > 0:
            raise ValueError(f"Time step must be positive, got {self.h}.")
        if self.max_blocks < 1:
            raise ValueError("At least one block per line is needed.")
        if not self.horizon > 0:
            raise ValueError(f"Horizon must be positive, got {self.horizon}.")
        if self.exit_domain is not None and self.mode is not Mode.PATH:
            raise ValueError("Exit detection needs path mode.")

    def truncation(self, n: int) -> int:
        """KL truncation order used for `G_n`."""
        m = default_truncation(n) if self.m is None else self.m
        if m < n + 1:
            raise ValueError(f"Need m >= n + 1 = {n + 1}, got m={m}.")
        return m


class PhaseKind(enum.Enum):
    """Kind of coupling phase."""

    REFLECTION = "reflection"
    LINE = "line"
    COUPLED = "coupled"


@dataclasses.dataclass(frozen=True)
class Phase:
    """Coupling phase; `line` is set for line phases only."""

    kind: PhaseKind
    line: int | None = None

    def __str__(self) -> str:
        if self.kind is PhaseKind.LINE:
            return f"Line({self.line})"
        return self.kind.value.capitalize()


COUPLED = Phase(PhaseKind.COUPLED)


@dataclasses.dataclass(frozen=True, eq=False)
class CoupledPair:
    """Current values of both copies."""

    b: GroupElement
    b_tilde: GroupElement


@dataclasses.dataclass(frozen=True, eq=False)
class Checkpoint:
    """Values recorded at the start, at `τ₀` and at the end of every line block.

    Attributes:
        time: Time since the start of the run.
        zeta: Fiber defect in the original coordinates, `None` while the horizontal
            parts differ.
        pair: Values of both copies, `None` when they are not simulated.
    """

    time: float
    zeta: SkewMatrix | None
    pair: CoupledPair | None


@dataclasses.dataclass(frozen=True)
class LineRecord:
    """Summary of one finished line phase.

    Attributes:
        line: Working coordinate index.
        blocks: Number of executed blocks.
        tau_line: Duration of the phase.
        v_norm: Norm of the row at the start of the phase.
    """

    line: int
    blocks: int
    tau_line: float
    v_norm: float

    def to_dict(self) -> dict[str, Any]:
        """Serialize as `{"line", "blocks", "tau_line", "v_norm"}`."""
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class CouplingState:
    """Snapshot of a coupling run.

    Attributes:
        phase: Current phase.
        elapsed: Time since the start of the run.
        zeta: Fiber defect in the working frame, `None` while unknown.
        frame: Orthogonal matrix mapping working coordinates to the original ones.
        pair: Values of both copies, `None` when they are not simulated.
        v_norm: Row norm `||v₀||` at the start of the current line.
        direction: Fixed unit row direction `v₀ / ||v₀||` of the current line.
        M: Current row norm; the row equals `M` times `direction`.
        block_index: Index of the next block of the current line.
        line_start: Time at which the current line started.
        history: Finished line phases.
        censored: Whether the run hit the horizon uncoupled.
        exit_time: First exit time from the exit domain, `inf` when none.
        checkpoints: Values recorded so far.
    """

    phase: Phase
    elapsed: float
    zeta: SkewMatrix | None
    frame: np.ndarray
    pair: CoupledPair | None
    v_norm: float = 0.0
    direction: np.ndarray | None = None
    M: float = 0.0
    block_index: int = 0
    line_start: float = 0.0
    history: tuple[LineRecord, ...] = ()
    censored: bool = False
    exit_time: float = math.inf
    checkpoints: tuple[Checkpoint, ...] = ()

    @classmethod
    def start(cls, g: GroupElement, g_tilde: GroupElement) -> "CouplingState":
        """Initial state of a run started from `g` and `g̃`."""
        dx, zeta = fiber_defect(g, g_tilde)
        pair = CoupledPair(g, g_tilde)
        frame = np.eye(g.n)
        if np.any(dx != 0):
            return cls(Phase(PhaseKind.REFLECTION), 0.0, None, frame, pair).recorded()
        phase = COUPLED if zeta.norm() == 0.0 else Phase(PhaseKind.LINE, 0)
        return cls(phase, 0.0, zeta, frame, pair).recorded()

    @property
    def n(self) -> int:
        """Group rank."""
        return self.frame.shape[0]

    @property
    def stopped(self) -> bool:
        """Whether the run ended without coupling (censored or exited)."""
        return self.censored or math.isfinite(self.exit_time)

    def zeta_original(self) -> SkewMatrix:
        """Fiber defect in the original coordinates."""
        if self.zeta is None:
            raise CouplingDiagnosticError("Fiber defect is unknown in this state.")
        return self.zeta.rotate(self.frame)

    def recorded(self) -> "CouplingState":
        """Copy of the state with its current values appended to `checkpoints`."""
        zeta = None if self.zeta is None else self.zeta_original()
        checkpoint = Checkpoint(self.elapsed, zeta, self.pair)
        return dataclasses.replace(self, checkpoints=(*self.checkpoints, checkpoint))


@dataclasses.dataclass(frozen=True)
class BlockOutcome:
    """Result of one line block.

    Attributes:
        T_k: Block length.
        success: Whether the mirrored component reached its level.
        M_next: Row norm after the block, exactly `0` on success.
        sigma_inv_w_norm: `||Σ^{-1/2} w||` of the block's Wishart draw.
        endpoint: Stopped value of the mirrored component.
    """

    T_k: float
    success: bool
    M_next: float
    sigma_inv_w_norm: float
    endpoint: float


@dataclasses.dataclass(frozen=True)
class CouplingTrace:
    """Per-phase record of a coupling run.

    Attributes:
        tau0: Reflection meeting time (`inf` when censored before meeting).
        per_line: Finished line phases.
        tau: Coupling time (`inf` when censored or stopped by an exit).
        mode: Fidelity of the line phases.
        seed: Experiment seed, when the run owned an `RngStream`.
        stream_id: Replica stream, when the run owned an `RngStream`.
        censored: Whether the run hit the horizon uncoupled.
        exit_time: First exit time from the exit domain, `inf` when none.
        dx_norm: Initial horizontal distance.
        zeta_norm: Norm of the initial fiber defect.
        checkpoints: Values recorded during the run.
        projected_tau: Coupling time of the projected pair, for lifted runs only.
    """

    tau0: float
    per_line: tuple[LineRecord, ...]
    tau: float
    mode: Mode
    seed: int | None = None
    stream_id: int | None = None
    censored: bool = False
    exit_time: float = math.inf
    dx_norm: float = 0.0
    zeta_norm: float = 0.0
    checkpoints: tuple[Checkpoint, ...] = ()
    projected_tau: float | None = None

    def to_dict(self) -> dict[str, Any]:
        """Serialize for JSON reports; infinite times are kept as floats."""
        data: dict[str, Any] = {
            "tau0": self.tau0,
            "per_line": [
                {"line": r.line, "blocks": r.blocks, "tau_line": r.tau_line}
                for r in self.per_line
            ],
            "tau": self.tau,
            "mode": self.mode.value,
            "seed": self.seed,
            "stream_id": self.stream_id,
            "censored": self.censored,
            "exit_time": self.exit_time,
        }
        if self.projected_tau is not None:
            data["projected_tau"] = self.projected_tau
        return data


def _dense_row(zeta: SkewMatrix, i0: int) -> np.ndarray:
    """Row `i0` of the dense matrix without its diagonal entry."""
    return np.delete(zeta.dense()[i0], i0)


def _with_row(zeta: SkewMatrix, i0: int, values: np.ndarray) -> SkewMatrix:
    """Copy of `zeta` with row (and column) `i0` replaced."""
    dense = zeta.dense()
    row = np.insert(np.asarray(values, dtype=float), i0, 0.0)
    dense[i0, :] = row
    dense[:, i0] = -row
    return SkewMatrix.from_dense(dense)


def _first_exit(
    domain: PseudoCube, grid: np.ndarray, paths: tuple[tuple[np.ndarray, np.ndarray], ...]
) -> float:
    return min(domain.exit_event(PathSample(grid, x, z)).time for x, z in paths)


def reflection_phase(
    g: GroupElement,
    g_tilde: GroupElement,
    rng: np.random.Generator,
    settings: CouplingSettings,
) -> tuple[float, CouplingState]:
    """Mirror the horizontal difference until both horizontal parts meet.

    In the frame `P_h` whose first axis is `(x̃ - x) / ||x̃ - x||`, the first
    coordinate of `B̃` moves against the one of `B` and the others are shared.

    Arguments:
        g: Start of the first copy.
        g_tilde: Start of the second copy.
        rng: Random generator.
        settings: Run parameters; event mode draws `τ₀` exactly without areas.

    Returns:
        Tuple of `τ₀` (`inf` when censored or stopped) and the state at `τ₀`.
    """
    state = CouplingState.start(g, g_tilde)
    if state.phase.kind is not PhaseKind.REFLECTION:
        return 0.0, state

    dx, _ = fiber_defect(g, g_tilde)
    distance = float(np.linalg.norm(dx))

    if settings.mode is Mode.EVENT:
        tau0 = sample_first_passage(distance / 2, rng)
        if tau0 > settings.horizon:
            return math.inf, dataclasses.replace(
                state, elapsed=settings.horizon, pair=None, censored=True
            )
        return tau0, dataclasses.replace(
            state, phase=Phase(PhaseKind.LINE, 0), elapsed=tau0, pair=None
        ).recorded()

    return _reflect_on_grid(state, dx / distance, distance, rng, settings)


def _reflect_on_grid(
    state: CouplingState,
    direction: np.ndarray,
    distance: float,
    rng: np.random.Generator,
    settings: CouplingSettings,
) -> tuple[float, CouplingState]:
    assert state.pair is not None
    n = state.n
    frame = orthonormal_completion(direction)
    b, b_tilde = state.pair.b, state.pair.b_tilde
    h = settings.h
    budget = n_steps(settings.horizon, h) if math.isfinite(settings.horizon) else math.inf

    # Difference of the first working coordinates, `D = ||Δx|| - 2 W`
    gap = distance
    t = 0.0
    taken = 0
    met = False
    while taken < budget and not met:
        size = int(min(REFLECTION_CHUNK, budget - taken))
        steps = rng.standard_normal((size, n)) * math.sqrt(h)
        gaps = gap - 2 * np.cumsum(steps[:, 0])
        durations = np.full(size, h)

        crossing = np.flatnonzero(gaps <= 0)
        if crossing.size:
            k = int(crossing[0])
            before = gap if k == 0 else float(gaps[k - 1])
            theta = before / (before - float(gaps[k]))
            steps = steps[: k + 1].copy()
            steps[k] *= theta
            durations = durations[: k + 1]
            durations[k] *= theta
            met = True

        mirrored = steps.copy()
        mirrored[:, 0] *= -1
        x, z = path_from_increments(b, steps @ frame.T)
        x_tilde, z_tilde = path_from_increments(b_tilde, mirrored @ frame.T)
        grid = t + np.concatenate([[0.0], np.cumsum(durations)])

        if settings.exit_domain is not None:
            exit_time = _first_exit(
                settings.exit_domain, grid, ((x, z), (x_tilde, z_tilde))
            )
            if exit_time < grid[-1]:
                logger.debug("Exit at %.6g during the reflection", exit_time)
                return math.inf, dataclasses.replace(
                    state, elapsed=exit_time, exit_time=exit_time, pair=None
                )

        b = GroupElement(x[-1], SkewMatrix(z[-1]))
        b_tilde = GroupElement(x_tilde[-1], SkewMatrix(z_tilde[-1]))
        t = float(grid[-1])
        taken += steps.shape[0]
        gap = float(gaps[-1])

    if not met:
        logger.debug("Reflection censored at %.6g after %d steps", t, taken)
        return math.inf, dataclasses.replace(
            state, elapsed=t, pair=CoupledPair(b, b_tilde), censored=True
        )

    _, zeta = fiber_defect(b, b_tilde)
    b_tilde = group_mul(b, GroupElement(np.zeros(n), zeta))
    logger.debug("Reflection met at %.6g after %d steps, ||ζ|| = %.6g", t, taken, zeta.norm())

    phase = COUPLED if zeta.norm() == 0.0 else Phase(PhaseKind.LINE, 0)
    return t, dataclasses.replace(
        state, phase=phase, elapsed=t, zeta=zeta, pair=CoupledPair(b, b_tilde)
    ).recorded()


def _mirror(
    M: float, T: float, s: float, rng: np.random.Generator
) -> tuple[bool, float, float, float]:
    """Draw the mirrored component of a block: hit, endpoint, free endpoint, `M_next`."""
    level = math.pi * s * M / (2 * T)
    hit, endpoint, free = sample_endpoint_and_hit(level, rng)
    M_next = 0.0 if hit else M - (2 * T / math.pi) * endpoint / s
    return bool(hit), float(endpoint), float(free), M_next


def line_block(
    state: CouplingState,
    i0: int,
    k: int,
    settings: CouplingSettings,
    rng: np.random.Generator,
) -> tuple[BlockOutcome, CouplingState]:
    """Run block `k` of line `i0`.

    Arguments:
        state: State at the block start, in phase `Line(i0)` with `k` blocks done.
        i0: Working coordinate whose row is being cancelled.
        k: Block index.
        settings: Run parameters.
        rng: Random generator.

    Returns:
        Tuple of the block outcome and the state at the block end.

    Raises:
        CouplingDiagnosticError: If the state is not at block `k` of line `i0`, or the
            simulated areas disagree with the bookkeeping.
    """
    if (
        state.phase != Phase(PhaseKind.LINE, i0)
        or state.block_index != k
        or state.direction is None
        or state.zeta is None
    ):
        raise CouplingDiagnosticError(
            f"Can't run block {k} of line {i0} from phase {state.phase} "
            f"at block {state.block_index}."
        )

    n = state.n
    m = settings.truncation(n)
    T = block_length(state.v_norm, k)

    if settings.mode is Mode.EVENT:
        draw = sample_wishart_vector(n, m, state.direction, rng)
        s = draw.sigma_inv_w_norm
        success, endpoint, _, M_next = _mirror(state.M, T, s, rng)
        pair = None
        exit_time = math.inf
    else:
        success, endpoint, M_next, s, pair, exit_time = _path_block(state, i0, T, m, settings, rng)

    outcome = BlockOutcome(
        T_k=T, success=success, M_next=M_next, sigma_inv_w_norm=s, endpoint=endpoint
    )
    if math.isfinite(exit_time):
        logger.debug("Exit at %.6g during block %d of line %d", exit_time, k, i0)
        return outcome, dataclasses.replace(
            state, elapsed=exit_time, exit_time=exit_time, pair=None
        )

    row = np.zeros(n - 1) if success else M_next * state.direction
    return outcome, dataclasses.replace(
        state,
        elapsed=state.elapsed + T,
        zeta=_with_row(state.zeta, i0, row),
        M=M_next,
        block_index=k + 1,
        pair=pair,
    ).recorded()


def _path_block(
    state: CouplingState,
    i0: int,
    T: float,
    m: int,
    settings: CouplingSettings,
    rng: np.random.Generator,
) -> tuple[bool, float, float, float, CoupledPair, float]:
    """Simulate a block on a grid: success, endpoint, `M_next`, `s`, pair, exit time."""
    if state.pair is None or state.direction is None or state.zeta is None:
        raise CouplingDiagnosticError("Path mode needs the values of both copies.")

    n = state.n
    steps_count = max(n_steps(T, settings.h), 4 * (m + 1))
    grid = np.linspace(0.0, T, steps_count + 1)
    table = sine_table(grid, T, m)
    midpoints = (table[:-1] + table[1:]) / 2
    others = np.delete(np.arange(n), i0)

    # Discrete coefficients `R_lj = √(2/T) Σ_k s̄_jk ΔX^l_k` of the shared coordinates
    for attempt in range(2):
        shared = rng.standard_normal((steps_count, n)) * math.sqrt(T / steps_count)
        R = math.sqrt(2 / T) * shared[:, others].T @ midpoints
        try:
            w = wishart_vector(R, state.direction)
        except SingularWishartError:
            logger.debug("Singular block coefficients (attempt %d), resampling", attempt + 1)
            continue
        break
    else:
        raise SingularWishartError("Block coefficient matrix was singular twice in a row.")

    s = sigma_inv_sqrt_norm(w)
    success, endpoint, free, M_next = _mirror(state.M, T, s, rng)

    direction = np.arange(1, m + 1) * w / s
    gaussian = rng.standard_normal(m)
    xi = gaussian + (free - gaussian @ direction) * direction
    xi_tilde = xi - 2 * endpoint * direction
    xi0 = rng.standard_normal()
    _, residual = sample_bridge_residual(grid, T, m, rng)
    block = KLBlock(
        T=T,
        m=m,
        xi=np.concatenate([[xi0], xi]),
        xi_tilde=np.concatenate([[xi0], xi_tilde]),
        grid=grid,
        residual=residual,
    )
    y, y_tilde = reconstruct_block_paths(block, 0.0)

    steps = shared.copy()
    steps[:, i0] = np.diff(y)
    steps_tilde = shared.copy()
    steps_tilde[:, i0] = np.diff(y_tilde)

    identity = GroupElement.identity(n)
    _, z_rel = path_from_increments(identity, steps)
    _, z_rel_tilde = path_from_increments(identity, steps_tilde)
    change = SkewMatrix(z_rel_tilde[-1] - z_rel[-1])
    expected = _with_row(SkewMatrix.zeros(n), i0, (M_next - state.M) * state.direction)
    mismatch = (change - expected).norm()
    if mismatch > CONSISTENCY_TOLERANCE * (1 + state.M + T):
        raise CouplingDiagnosticError(
            f"Block areas drift {mismatch:.3g} away from the line bookkeeping."
        )

    frame = state.frame
    x, z = path_from_increments(state.pair.b, steps @ frame.T)
    x_tilde, z_tilde = path_from_increments(state.pair.b_tilde, steps_tilde @ frame.T)

    exit_time = math.inf
    if settings.exit_domain is not None:
        times = state.elapsed + grid
        first = _first_exit(settings.exit_domain, times, ((x, z), (x_tilde, z_tilde)))
        if first < times[-1]:
            exit_time = first

    b = GroupElement(x[-1], SkewMatrix(z[-1]))
    row = np.zeros(n - 1) if success else M_next * state.direction
    zeta = _with_row(state.zeta, i0, row).rotate(frame)
    b_tilde = group_mul(b, GroupElement(np.zeros(n), zeta))
    return success, endpoint, M_next, s, CoupledPair(b, b_tilde), exit_time


def _finish_line(state: CouplingState, i0: int, record: LineRecord) -> CouplingState:
    assert state.zeta is not None
    history = (*state.history, record)
    if i0 + 1 < state.n - 1:
        return dataclasses.replace(
            state, phase=Phase(PhaseKind.LINE, i0 + 1), history=history, block_index=0
        )

    pair = state.pair
    if pair is not None:
        pair = CoupledPair(pair.b, pair.b)
    return dataclasses.replace(
        state,
        phase=COUPLED,
        history=history,
        zeta=SkewMatrix.zeros(state.n),
        pair=pair,
        block_index=0,
    )


def line_coupling(
    state: CouplingState,
    i0: int,
    settings: CouplingSettings,
    rng: np.random.Generator,
) -> tuple[float, CouplingState]:
    """Cancel row `i0` of the fiber defect, leaving the other entries untouched.

    The row direction `v = v₀ / ||v₀||` stays fixed for the whole line; only its
    coefficient `M` changes from block to block.

    Arguments:
        state: State in phase `Line(i0)` with equal horizontal parts.
        i0: Working coordinate.
        settings: Run parameters.
        rng: Random generator.

    Returns:
        Tuple of the line duration `τ̄` (`inf` when censored or stopped) and the
        state at its end.

    Raises:
        CouplingDiagnosticError: If the state is not in `Line(i0)` or the line did
            not couple within `settings.max_blocks` blocks.
    """
    if state.zeta is None:
        raise CouplingDiagnosticError("Fiber defect is unknown, run the reflection in path mode.")
    if state.phase != Phase(PhaseKind.LINE, i0):
        raise CouplingDiagnosticError(f"Can't run line {i0} from phase {state.phase}.")

    v = _dense_row(state.zeta, i0)
    v_norm = float(np.linalg.norm(v))
    start = state.elapsed

    if v_norm <= ZERO_ROW_TOLERANCE * max(1.0, state.zeta.norm()):
        state = dataclasses.replace(state, zeta=_with_row(state.zeta, i0, np.zeros_like(v)))
        record = LineRecord(i0, 0, 0.0, v_norm)
        return 0.0, _finish_line(state, i0, record).recorded()

    state = dataclasses.replace(
        state, v_norm=v_norm, direction=v / v_norm, M=v_norm, block_index=0, line_start=start
    )
    for k in range(settings.max_blocks):
        end = start + block_boundary(v_norm, k + 1)
        if end > settings.horizon * (1 + 1e-12):
            logger.debug("Line %d censored before block %d", i0, k)
            return math.inf, dataclasses.replace(state, censored=True)

        outcome, state = line_block(state, i0, k, settings, rng)
        if state.stopped:
            return math.inf, state
        if outcome.success:
            tau_line = block_boundary(v_norm, k + 1)
            logger.debug("Line %d coupled after %d blocks (%.6g)", i0, k + 1, tau_line)
            state = dataclasses.replace(state, elapsed=end)
            return tau_line, _finish_line(state, i0, LineRecord(i0, k + 1, tau_line, v_norm))

    raise CouplingDiagnosticError(
        f"Line {i0} did not couple within {settings.max_blocks} blocks."
    )


def fiber_coupling(
    state: CouplingState, settings: CouplingSettings, rng: np.random.Generator
) -> tuple[float, CouplingState]:
    """Couple two copies on the same fiber, one line at a time.

    Arguments:
        state: State with equal horizontal parts and a known fiber defect, in phase
            `Line(0)` or `Coupled`.
        settings: Run parameters.
        rng: Random generator.

    Returns:
        Tuple of the duration of the fiber phase (`inf` when censored or stopped)
        and the final state.

    Raises:
        CouplingDiagnosticError: On an invalid starting phase.
    """
    if state.phase.kind is PhaseKind.COUPLED:
        return 0.0, state
    if state.zeta is None or state.phase != Phase(PhaseKind.LINE, 0):
        raise CouplingDiagnosticError(f"Can't start the fiber coupling from {state.phase}.")

    n = state.n
    start = state.elapsed
    original = state.zeta_original()
    if settings.block_diagonalize:
        frame, zeta = block_diagonalize(original)
    else:
        frame, zeta = np.eye(n), original
    state = dataclasses.replace(state, frame=frame, zeta=zeta)

    for i0 in range(n - 1):
        _, state = line_coupling(state, i0, settings, rng)
        if state.stopped:
            return math.inf, state
    return state.elapsed - start, state


def _stream_identity(rng: np.random.Generator | RngStream) -> tuple[int | None, int | None]:
    if isinstance(rng, RngStream):
        return rng.seed, rng.stream_id
    return None, None


def global_coupling(
    g: GroupElement,
    g_tilde: GroupElement,
    settings: CouplingSettings,
    rng: np.random.Generator | RngStream,
) -> tuple[float, CouplingTrace]:
    """Couple two Brownian motions started at arbitrary points of `G_n`.

    The reflection always runs on the `settings.h` grid, since the fiber defect at
    the meeting time has no closed-form law. The line phases follow `settings.mode`.

    Arguments:
        g: Start of the first copy.
        g_tilde: Start of the second copy.
        settings: Run parameters.
        rng: Random generator or the replica stream to draw it from.

    Returns:
        Tuple of the coupling time (`inf` when censored or stopped) and the trace.
    """
    generator = as_generator(rng)
    seed, stream_id = _stream_identity(rng)
    dx, zeta0 = fiber_defect(g, g_tilde)

    reflection_settings = dataclasses.replace(settings, mode=Mode.PATH)
    tau0, state = reflection_phase(g, g_tilde, generator, reflection_settings)
    tau = tau0
    if not state.stopped:
        tau_fiber, state = fiber_coupling(state, settings, generator)
        tau = tau0 + tau_fiber

    trace = CouplingTrace(
        tau0=tau0,
        per_line=state.history,
        tau=tau,
        mode=settings.mode,
        seed=seed,
        stream_id=stream_id,
        censored=state.censored,
        exit_time=state.exit_time,
        dx_norm=float(np.linalg.norm(dx)),
        zeta_norm=zeta0.norm(),
        checkpoints=state.checkpoints,
    )
    return tau, trace


def _quadratic(spec: HomogeneousGroupSpec, x: np.ndarray) -> np.ndarray:
    return 0.25 * np.einsum("kij,i,j->k", spec.S, x, x)


def lift_pair(
    spec: HomogeneousGroupSpec, a: HomogeneousElement, a_tilde: HomogeneousElement
) -> tuple[GroupElement, GroupElement]:
    """Lift two points of a homogeneous group to `G_n`.

    `a` goes to its minimal lift `g`, and `ã` to `g ⋆ (x̃ - x, ζ)` with the fiber
    defect `ζ` of minimal norm among the lifts of `ã`.

    Arguments:
        spec: Homogeneous group.
        a: First point.
        a_tilde: Second point.

    Returns:
        Lifts `(g, g̃)` with `φ(g) = a` and `φ(g̃) = ã`.
    """
    g = minimal_lift(spec, a)
    target = (
        a_tilde.z
        - a.z
        - _quadratic(spec, a_tilde.x)
        + _quadratic(spec, a.x)
        - 0.5 * spec.lift_matrix @ symplectic_entries(a.x, a_tilde.x)
    )
    zeta, _, _, _ = scipy.linalg.lstsq(spec.lift_matrix, target)
    g_tilde = group_mul(g, GroupElement(a_tilde.x - a.x, SkewMatrix(zeta)))
    return g, g_tilde


@dataclasses.dataclass(frozen=True, eq=False)
class ProjectedCheckpoint:
    """Checkpoint of a lifted run seen through the lift morphism."""

    time: float
    a: HomogeneousElement
    a_tilde: HomogeneousElement


def project_checkpoints(
    spec: HomogeneousGroupSpec, trace: CouplingTrace
) -> tuple[ProjectedCheckpoint, ...]:
    """Images `(φ(B_t), φ(B̃_t))` at the checkpoints where both copies were simulated."""
    return tuple(
        ProjectedCheckpoint(
            checkpoint.time,
            lift_morphism(spec, checkpoint.pair.b),
            lift_morphism(spec, checkpoint.pair.b_tilde),
        )
        for checkpoint in trace.checkpoints
        if checkpoint.pair is not None
    )


def projected_coupling_time(spec: HomogeneousGroupSpec, trace: CouplingTrace) -> float:
    """First checkpoint at which the projections of both copies agree.

    With equal horizontal parts, `φ(B)⁻¹ ∘ φ(B̃) = φ((0, ζ)) = (0, L ζ)` for the lift
    matrix `L`, so the projections can meet before `ζ` itself vanishes.

    Arguments:
        spec: Homogeneous group the lifted run projects to.
        trace: Trace of the lifted run.

    Returns:
        Projected coupling time, the lifted one when no checkpoint qualifies.
    """
    for checkpoint in trace.checkpoints:
        if checkpoint.zeta is None:
            continue
        projected = float(np.linalg.norm(spec.lift_matrix @ checkpoint.zeta.entries))
        if projected <= PROJECTION_TOLERANCE * (1 + checkpoint.zeta.norm()):
            return checkpoint.time
    return trace.tau


def lifted_coupling(
    spec: HomogeneousGroupSpec,
    a: HomogeneousElement,
    a_tilde: HomogeneousElement,
    settings: CouplingSettings,
    rng: np.random.Generator | RngStream,
) -> tuple[float, CouplingTrace]:
    """Couple two Brownian motions of a homogeneous group through their lifts.

    The projections `φ(B)` and `φ(B̃)` are Brownian motions of the homogeneous group
    started at `a` and `ã`. Their coupling time is stored as `projected_tau` and never
    exceeds the lifted one.

    Arguments:
        spec: Homogeneous group.
        a: Start of the first copy.
        a_tilde: Start of the second copy.
        settings: Run parameters.
        rng: Random generator or replica stream.

    Returns:
        Tuple of the lifted coupling time and its trace.

    Raises:
        CouplingDiagnosticError: If the projected pair meets after the lifted one.
    """
    g, g_tilde = lift_pair(spec, a, a_tilde)
    tau, trace = global_coupling(g, g_tilde, settings, rng)

    projected_tau = projected_coupling_time(spec, trace)
    if projected_tau > tau * (1 + 1e-12):
        raise CouplingDiagnosticError(
            f"Projected pair met at {projected_tau:.6g}, after the lifted pair ({tau:.6g})."
        )
    logger.debug("Lifted pair met at %.6g, projected pair at %.6g", tau, projected_tau)
    return tau, dataclasses.replace(trace, projected_tau=min(projected_tau, tau))
