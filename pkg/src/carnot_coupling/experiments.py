"""Monte Carlo verification of the coupling bounds."""

import dataclasses
import enum
import functools
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from typing import Any, NamedTuple

import numpy as np
import scipy.stats
from joblib import Parallel, delayed

from carnot_coupling.config import ExperimentConfig, HomogeneousConfig, PointConfig
from carnot_coupling.coupling_engine import (
    CouplingSettings,
    CouplingState,
    CouplingTrace,
    Mode,
    PhaseKind,
    block_boundary,
    constants,
    global_coupling,
    lift_pair,
    lifted_coupling,
    line_coupling,
    reflection_phase,
)
from carnot_coupling.group_algebra import (
    GroupElement,
    HomogeneousGroupSpec,
    SkewMatrix,
    dcc_bounds,
    fiber_defect,
    group_mul,
    heisenberg_spec,
    lift_morphism,
    orthonormal_completion,
    skew_dim,
    symplectic_entries,
)
from carnot_coupling.path_sim import PathSample, PseudoCube, simulate_endpoints, simulate_path
from carnot_coupling.stochastic_kernels import RngStream, sample_wishart_vector
from carnot_coupling.utils import (
    CONFIDENCE_LEVEL,
    chunks,
    clopper_pearson_lower,
    clopper_pearson_upper,
    mean_upper_confidence,
)

logger = logging.getLogger(__name__)

ENDPOINT_BATCH = 1024
"""Independent paths simulated per endpoint batch."""

TV_BINS = 20
"""Histogram bins per coordinate of the total variation estimate."""

TV_FULL_DIMENSION = 4
"""Largest dimension binned jointly; above it coordinate pairs are binned."""

KS_LEVEL = 1e-3
"""Smallest acceptable p-value of two-sample Kolmogorov-Smirnov checks."""

EXIT_SLACK = 2.0
"""Allowed growth of the exit ratio across refinements."""

ProgressHook = Callable[[Iterable[Any], str, int], Iterable[Any]]


class ExperimentPreconditionError(ValueError):
    """Config violates a hypothesis of the requested experiment."""


class Arm(enum.IntEnum):
    """Random stream families, so that independent samples never share draws."""

    COUPLING = 0
    START = 1
    START_TILDE = 2
    CHAIN = 3
    EVENT = 4
    PATH = 5
    LIFTED = 6
    FREE = 7
    REFLECTION = 8
    LINE = 9
    PATHS = 10
    WISHART = 11
    SHARED = 12
    EXIT = 13


def _arm(base: Arm, index: int = 0) -> int:
    """Stream arm of the `index`-th repetition of a family."""
    return int(base) + 64 * index


@dataclasses.dataclass
class ReplicaRunner:
    """Run replicas in parallel batches and merge them in stream order.

    Attributes:
        threads: Number of `joblib` workers (`-1` for all cores).
        batch_size: Replicas per dispatched batch.
        progress: Optional wrapper reporting progress over batches.
    """

    threads: int = 1
    batch_size: int = 256
    progress: ProgressHook | None = None

    def map(self, task: Callable[[int], Any], count: int, description: str) -> list[Any]:
        """Evaluate `task(stream_id)` for `stream_id = 0..count-1`.

        Arguments:
            task: Picklable replica function.
            count: Number of replicas.
            description: Progress label.

        Returns:
            Results ordered by stream id.
        """
        batches = list(chunks(range(count), self.batch_size))
        jobs: Iterable[list[Any]] = Parallel(n_jobs=self.threads, return_as="generator")(
            delayed(_run_batch)(task, batch) for batch in batches
        )
        if self.progress is not None:
            jobs = self.progress(jobs, description, len(batches))

        results: list[Any] = []
        for batch_results in jobs:
            results.extend(batch_results)
        return results


def _run_batch(task: Callable[[int], Any], stream_ids: Sequence[int]) -> list[Any]:
    return [task(stream_id) for stream_id in stream_ids]


@dataclasses.dataclass(frozen=True)
class BoundCheck:
    """Verdict of one inequality check with the numbers behind it.

    Attributes:
        name: Check name.
        t: Time of the check, if any.
        estimate: Point estimate of the left hand side.
        ci_upper: One-sided upper confidence limit of the estimate.
        bound: Right hand side.
        in_regime: Whether the inequality is asserted at this point.
        regime: Description of the asserted regime.
        passed: Verdict; points outside the regime always pass.
    """

    name: str
    t: float | None
    estimate: float
    ci_upper: float
    bound: float
    in_regime: bool
    regime: str
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        """Serialize for JSON reports."""
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True, eq=False)
class RateCurve:
    """Empirical survival curve of coupling times against a bound.

    Attributes:
        t_grid: Times.
        survival: Empirical `P(τ > t)`.
        ci_upper: One-sided Clopper-Pearson upper limits.
        bound: Theoretical bound per time.
        n_replicas: Number of replicas.
        in_regime: Whether the bound is asserted per time.
        survivors: Number of replicas with `τ > t`.
    """

    t_grid: np.ndarray
    survival: np.ndarray
    ci_upper: np.ndarray
    bound: np.ndarray
    n_replicas: int
    in_regime: np.ndarray
    survivors: np.ndarray

    @classmethod
    def from_times(
        cls,
        taus: np.ndarray,
        t_grid: Sequence[float],
        bound: Callable[[float], float],
        regime: Callable[[float], bool],
    ) -> "RateCurve":
        """Build the curve from coupling times (`inf` for censored replicas)."""
        taus = np.sort(np.asarray(taus, dtype=float))
        grid = np.asarray(t_grid, dtype=float)
        n = taus.size
        survivors = n - np.searchsorted(taus, grid, side="right")
        return cls(
            t_grid=grid,
            survival=survivors / n,
            ci_upper=np.array([clopper_pearson_upper(int(k), n) for k in survivors]),
            bound=np.array([bound(t) for t in grid]),
            n_replicas=n,
            in_regime=np.array([regime(t) for t in grid]),
            survivors=survivors,
        )

    def checks(self, name: str, regime: str, sharp: bool = False) -> list[BoundCheck]:
        """Per-time verdicts: PASS iff no survivor or `ci_upper <= bound`.

        Sharp bounds leave no room for the confidence interval, so they PASS unless
        the lower confidence limit already exceeds them.
        """
        n = self.n_replicas
        return [
            BoundCheck(
                name=name,
                t=float(t),
                estimate=float(p),
                ci_upper=float(ci),
                bound=float(b),
                in_regime=bool(ok),
                regime=regime,
                passed=bool(
                    not ok
                    or k == 0
                    or (clopper_pearson_lower(int(k), n) <= b if sharp else ci <= b)
                ),
            )
            for t, p, ci, b, ok, k in zip(
                self.t_grid,
                self.survival,
                self.ci_upper,
                self.bound,
                self.in_regime,
                self.survivors,
                strict=True,
            )
        ]

    def rows(self) -> np.ndarray:
        """CSV rows `t, survival, ci_upper, bound`."""
        return np.column_stack([self.t_grid, self.survival, self.ci_upper, self.bound])


RATE_CSV_HEADER = ["t", "survival", "ci_upper", "bound"]
"""Columns of `rate.csv`."""


@dataclasses.dataclass(eq=False)
class ExperimentReport:
    """Outcome of one experiment.

    Attributes:
        name: Experiment name.
        checks: Individual verdicts.
        data: Estimates and diagnostics.
        config: Echo of the config the experiment ran with.
        curve: Main survival curve, if any.
        traces: Coupling traces, if kept.
        paths: Simulated paths, if kept.
    """

    name: str
    checks: list[BoundCheck]
    data: dict[str, Any] = dataclasses.field(default_factory=dict)
    config: dict[str, Any] = dataclasses.field(default_factory=dict)
    curve: RateCurve | None = None
    traces: list[CouplingTrace] = dataclasses.field(default_factory=list)
    paths: list[PathSample] = dataclasses.field(default_factory=list)

    @property
    def passed(self) -> bool:
        """Whether every check passed."""
        return all(check.passed for check in self.checks)

    @property
    def verdict(self) -> str:
        """`PASS` or `FAIL`."""
        return "PASS" if self.passed else "FAIL"

    def to_dict(self) -> dict[str, Any]:
        """Serialize for `report.json`."""
        report: dict[str, Any] = {
            "experiment": self.name,
            "verdict": self.verdict,
            "checks": [check.to_dict() for check in self.checks],
            "data": self.data,
            "config": self.config,
        }
        if self.curve is not None:
            report["rate_curve"] = [dict(zip(RATE_CSV_HEADER, row)) for row in self.curve.rows()]
        if self.traces:
            report["traces"] = [trace.to_dict() for trace in self.traces]
        return report


def coupling_settings(config: ExperimentConfig, **changes: Any) -> CouplingSettings:
    """Coupling parameters of a config."""
    settings = CouplingSettings(
        mode=Mode(config.mode),
        h=config.h,
        m=config.m,
        block_diagonalize=config.block_diagonalize,
        max_blocks=config.max_blocks,
        horizon=config.effective_horizon,
    )
    return dataclasses.replace(settings, **changes)


# Replica tasks. They live at module level so that `joblib` workers can unpickle them.


def _coupling_task(
    stream_id: int,
    *,
    g: GroupElement,
    g_tilde: GroupElement,
    settings: CouplingSettings,
    seed: int,
    arm: int,
) -> CouplingTrace:
    _, trace = global_coupling(g, g_tilde, settings, RngStream(seed, stream_id, arm))
    return trace


def _lifted_task(
    stream_id: int,
    *,
    config: ExperimentConfig,
    settings: CouplingSettings,
    arm: int,
) -> CouplingTrace:
    assert config.homogeneous is not None
    spec = config.homogeneous.spec()
    a = config.homogeneous.start.to_homogeneous_element()
    a_tilde = config.homogeneous.start_tilde.to_homogeneous_element()
    _, trace = lifted_coupling(
        spec, a, a_tilde, settings, RngStream(config.seed, stream_id, arm)
    )
    return trace


def _reflection_task(
    stream_id: int,
    *,
    g: GroupElement,
    g_tilde: GroupElement,
    settings: CouplingSettings,
    seed: int,
    arm: int,
) -> tuple[float, np.ndarray | None]:
    rng = RngStream(seed, stream_id, arm).generator()
    tau0, state = reflection_phase(g, g_tilde, rng, settings)
    zeta = None if state.zeta is None else state.zeta.entries
    return tau0, zeta


def _line_task(
    stream_id: int,
    *,
    g: GroupElement,
    g_tilde: GroupElement,
    settings: CouplingSettings,
    seed: int,
    arm: int,
) -> float:
    rng = RngStream(seed, stream_id, arm).generator()
    state = CouplingState.start(g, g_tilde)
    if state.phase.kind is PhaseKind.COUPLED:
        return 0.0
    tau_line, _ = line_coupling(state, 0, settings, rng)
    return tau_line


def _endpoint_task(
    batch: int,
    *,
    start: GroupElement,
    T: float,
    h: float,
    total: int,
    seed: int,
    arm: int,
) -> tuple[np.ndarray, np.ndarray]:
    size = min(ENDPOINT_BATCH, total - batch * ENDPOINT_BATCH)
    rng = RngStream(seed, batch, arm).generator()
    return simulate_endpoints(start, T, h, size, rng)


def _wishart_task(
    batch: int, *, n: int, m: int, total: int, seed: int, arm: int
) -> tuple[np.ndarray, np.ndarray]:
    size = min(ENDPOINT_BATCH, total - batch * ENDPOINT_BATCH)
    rng = RngStream(seed, batch, arm).generator()
    v = np.zeros(n - 1)
    v[0] = 1.0
    draws = [sample_wishart_vector(n, m, v, rng) for _ in range(size)]
    return (
        np.array([np.linalg.norm(d.w) for d in draws]),
        np.array([d.sigma_inv_w_norm for d in draws]),
    )


def _endpoints(
    runner: ReplicaRunner,
    start: GroupElement,
    T: float,
    h: float,
    total: int,
    seed: int,
    arm: int,
    description: str,
) -> tuple[np.ndarray, np.ndarray]:
    task = functools.partial(
        _endpoint_task, start=start, T=T, h=h, total=total, seed=seed, arm=arm
    )
    batches = runner.map(task, math.ceil(total / ENDPOINT_BATCH), description)
    return (
        np.concatenate([x for x, _ in batches]),
        np.concatenate([z for _, z in batches]),
    )


def _coupling_traces(
    runner: ReplicaRunner,
    g: GroupElement,
    g_tilde: GroupElement,
    settings: CouplingSettings,
    config: ExperimentConfig,
    arm: int,
    description: str,
    replicas: int | None = None,
) -> list[CouplingTrace]:
    task = functools.partial(
        _coupling_task, g=g, g_tilde=g_tilde, settings=settings, seed=config.seed, arm=arm
    )
    return runner.map(task, replicas or config.replicas, description)


def _taus(traces: Sequence[CouplingTrace]) -> np.ndarray:
    return np.array([trace.tau for trace in traces], dtype=float)


def _row_norm(zeta: SkewMatrix, i: int) -> float:
    return float(np.linalg.norm(np.delete(zeta.dense()[i], i)))


def rate_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Compare empirical coupling survival with the rate bounds.

    The global bound is checked when the horizontal parts differ, the on-fiber
    bound otherwise. The reflection bound (horizontal start) or the line bound
    (first row of the fiber defect) is checked alongside, and homogeneous configs
    add the lifted coupling.

    Arguments:
        config: Experiment config.
        runner: Replica runner.

    Returns:
        Report whose curve is the main survival curve.
    """
    runner = runner or ReplicaRunner()
    c = constants(config.n)
    g, g_tilde = config.start_elements()
    dx, zeta = fiber_defect(g, g_tilde)
    dx_norm, zeta_norm = float(np.linalg.norm(dx)), zeta.norm()
    settings = coupling_settings(config)

    traces = _coupling_traces(
        runner, g, g_tilde, settings, config, _arm(Arm.COUPLING), "Coupling"
    )
    taus = _taus(traces)
    if dx_norm > 0:
        curve = RateCurve.from_times(
            taus,
            config.t_grid,
            lambda t: c.global_bound(dx_norm, zeta_norm, t),
            lambda t: c.global_regime(dx_norm, t),
        )
        checks = curve.checks("global", f"t >= beta_n ||dx||^2 = {c.beta_n * dx_norm**2:.6g}")
    else:
        curve = RateCurve.from_times(
            taus,
            config.t_grid,
            lambda t: c.fiber_bound(zeta_norm, t),
            lambda t: c.fiber_regime(zeta_norm, t),
        )
        checks = curve.checks("fiber", f"t >= (n-1) ||zeta|| = {(c.n - 1) * zeta_norm:.6g}")

    data: dict[str, Any] = {
        "constants": c.to_dict(),
        "dx_norm": dx_norm,
        "zeta_norm": zeta_norm,
        "censored": int(sum(trace.censored for trace in traces)),
        "mean_blocks": float(np.mean([sum(r.blocks for r in t.per_line) for t in traces])),
    }

    if dx_norm > 0:
        task = functools.partial(
            _reflection_task,
            g=g,
            g_tilde=g_tilde,
            settings=dataclasses.replace(settings, mode=Mode.EVENT),
            seed=config.seed,
            arm=_arm(Arm.REFLECTION),
        )
        tau0 = np.array([tau for tau, _ in runner.map(task, config.replicas, "Reflection")])
        reflection = RateCurve.from_times(
            tau0, config.t_grid, lambda t: c.reflection_bound(dx_norm, t), lambda t: True
        )
        checks += reflection.checks("reflection", "t > 0, sharp bound", sharp=True)
    elif (v_norm := _row_norm(zeta, 0)) > 0:
        task = functools.partial(
            _line_task,
            g=g,
            g_tilde=g_tilde,
            settings=dataclasses.replace(settings, mode=Mode.EVENT),
            seed=config.seed,
            arm=_arm(Arm.LINE),
        )
        tau_line = np.array(runner.map(task, config.replicas, "Line"))
        line = RateCurve.from_times(
            tau_line, config.t_grid, lambda t: c.line_bound(v_norm, t), lambda t: t >= v_norm
        )
        checks += line.checks("line", f"t >= ||v0|| = {v_norm:.6g}")
        data["v0_norm"] = v_norm

    if config.homogeneous is not None:
        checks += _lifted_checks(config, settings, runner, data)

    return ExperimentReport(
        name="rate",
        checks=checks,
        data=data,
        config=config.to_dict(),
        curve=curve,
    )


def _lifted_checks(
    config: ExperimentConfig,
    settings: CouplingSettings,
    runner: ReplicaRunner,
    data: dict[str, Any],
) -> list[BoundCheck]:
    assert config.homogeneous is not None
    c = constants(config.n)
    spec = config.homogeneous.spec()
    g, g_tilde = lift_pair(
        spec,
        config.homogeneous.start.to_homogeneous_element(),
        config.homogeneous.start_tilde.to_homogeneous_element(),
    )
    dx, zeta = fiber_defect(g, g_tilde)
    dx_norm, zeta_norm = float(np.linalg.norm(dx)), zeta.norm()

    task = functools.partial(_lifted_task, config=config, settings=settings, arm=_arm(Arm.LIFTED))
    traces = runner.map(task, config.replicas, "Lifted coupling")
    projected_taus = np.array([trace.projected_tau for trace in traces], dtype=float)

    def rate_curve(times: np.ndarray) -> RateCurve:
        return RateCurve.from_times(
            times,
            config.t_grid,
            lambda t: c.global_bound(dx_norm, zeta_norm, t),
            lambda t: c.global_regime(dx_norm, t) and c.fiber_regime(zeta_norm, t),
        )

    curve = rate_curve(_taus(traces))
    projected = rate_curve(projected_taus)
    data["lifted"] = {
        "dx_norm": dx_norm,
        "zeta_norm": zeta_norm,
        "survival": curve.survival,
        "projected_survival": projected.survival,
    }
    regime = "t >= beta_n ||dx||^2 and t >= (n-1) ||zeta||"
    return curve.checks("lifted", regime) + projected.checks("projected", regime)


def binned_total_variation(a: np.ndarray, b: np.ndarray, bins: int = TV_BINS) -> float:
    """Noise corrected plug-in total variation between two samples.

    Coordinates are clipped to the pooled 1st-99th percentile range and binned
    jointly (or by pairs when there are more than `TV_FULL_DIMENSION` of them).
    The plug-in distance is reduced by `½ Σ_b √((p̂_b + q̂_b) / N)` and floored at 0,
    so that the result estimates a lower bound of the true distance.

    Arguments:
        a: First sample, shape `(N, d)`.
        b: Second sample, shape `(N, d)`.
        bins: Bins per coordinate.

    Returns:
        Estimated total variation distance.
    """
    pooled = np.concatenate([a, b])
    low, high = np.percentile(pooled, [1, 99], axis=0)
    high = np.where(high > low, high, low + 1.0)
    a = np.clip(a, low, high)
    b = np.clip(b, low, high)

    def distance(columns: Sequence[int]) -> float:
        ranges = [(low[i], high[i]) for i in columns]
        p, _ = np.histogramdd(a[:, columns], bins=bins, range=ranges)
        q, _ = np.histogramdd(b[:, columns], bins=bins, range=ranges)
        p = p.ravel() / a.shape[0]
        q = q.ravel() / b.shape[0]
        noise = 0.5 * np.sum(np.sqrt((p + q) / min(a.shape[0], b.shape[0])))
        return max(0.0, 0.5 * float(np.abs(p - q).sum()) - float(noise))

    dimension = a.shape[1]
    if dimension <= TV_FULL_DIMENSION:
        return distance(list(range(dimension)))
    return max(
        distance([i, j]) for i in range(dimension) for j in range(i + 1, dimension)
    )


def tv_bound_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Check a binned total variation estimate against the coupling bounds.

    Arguments:
        config: Experiment config; `tv_time` is the time of the comparison.
        runner: Replica runner.

    Returns:
        Report with the bound check and the coupling inequality check.
    """
    runner = runner or ReplicaRunner()
    c = constants(config.n)
    t = config.tv_time
    g, g_tilde = config.start_elements()
    dx, zeta = fiber_defect(g, g_tilde)
    dx_norm, zeta_norm = float(np.linalg.norm(dx)), zeta.norm()
    N = config.replicas

    x, z = _endpoints(runner, g, t, config.h, N, config.seed, _arm(Arm.START), "Endpoints (g)")
    x_tilde, z_tilde = _endpoints(
        runner, g_tilde, t, config.h, N, config.seed, _arm(Arm.START_TILDE), "Endpoints (g~)"
    )
    tv = binned_total_variation(np.hstack([x, z]), np.hstack([x_tilde, z_tilde]))

    settings = coupling_settings(config, horizon=t)
    traces = _coupling_traces(runner, g, g_tilde, settings, config, _arm(Arm.COUPLING), "Coupling")
    survivors = int(np.sum(_taus(traces) > t))
    survival = survivors / N
    sigma = math.sqrt(survival * (1 - survival) / N)

    if dx_norm > 0:
        bound = c.global_bound(dx_norm, zeta_norm, t)
        in_regime = c.global_regime(dx_norm, t)
        regime = "t >= beta_n ||dx||^2"
    else:
        bound = c.fiber_bound(zeta_norm, t)
        in_regime = c.fiber_regime(zeta_norm, t)
        regime = "t >= (n-1) ||zeta||"

    checks = [
        BoundCheck(
            name="tv-bound",
            t=t,
            estimate=tv,
            ci_upper=tv,
            bound=bound,
            in_regime=in_regime,
            regime=regime,
            passed=not in_regime or tv <= bound,
        ),
        BoundCheck(
            name="tv-coupling",
            t=t,
            estimate=tv,
            ci_upper=tv,
            bound=survival + 3 * sigma,
            in_regime=True,
            regime="t > 0",
            passed=tv <= survival + 3 * sigma,
        ),
    ]
    return ExperimentReport(
        name="tv",
        checks=checks,
        data={"tv": tv, "coupling_survival": survival, "dx_norm": dx_norm, "zeta_norm": zeta_norm},
        config=config.to_dict(),
    )


def area_lemma_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Check the truncated expectations of the fiber defect at the reflection time.

    For each level `m`, the checks are `E[(||ζ_τ₀|| / m) ∧ 1] ≤ ||ζ₀|| / m +
    (2√2 / √m)(n - 1)||Δx||` and, in the reflection frame, `E[|ζ^{1,j}_τ₀ - ζ^{1,j}_0|
    ∧ m] ≤ 2√(2m) ||Δx||`. Replicas censored before meeting count with the
    truncation value.

    Arguments:
        config: Experiment config.
        runner: Replica runner.

    Returns:
        Report with one check per level and lemma.
    """
    runner = runner or ReplicaRunner()
    n = config.n
    g, g_tilde = config.start_elements()
    dx, zeta0 = fiber_defect(g, g_tilde)
    dx_norm = float(np.linalg.norm(dx))

    if dx_norm == 0:
        # The reflection is void and `ζ_τ₀ = ζ₀`
        frame = np.eye(n)
        samples = np.tile(zeta0.entries, (2, 1))
        censored = np.zeros(2, dtype=bool)
        exact = True
    else:
        frame = orthonormal_completion(dx / dx_norm)
        task = functools.partial(
            _reflection_task,
            g=g,
            g_tilde=g_tilde,
            settings=coupling_settings(config, mode=Mode.PATH),
            seed=config.seed,
            arm=_arm(Arm.REFLECTION),
        )
        results = runner.map(task, config.replicas, "Reflection")
        censored = np.array([zeta is None for _, zeta in results])
        samples = np.array(
            [zeta0.entries if zeta is None else zeta for _, zeta in results], dtype=float
        )
        exact = False

    norms = np.linalg.norm(samples, axis=1)
    # Row 1 of the defect in the reflection frame
    start_row = zeta0.rotate(frame.T).dense()[0, 1:]
    rows = np.array([SkewMatrix(s).rotate(frame.T).dense()[0, 1:] for s in samples])
    jumps = np.abs(rows - start_row)

    checks = []
    for level in config.area_levels:
        truncated = np.where(censored, 1.0, np.minimum(norms / level, 1.0))
        bound = zeta0.norm() / level + 2 * math.sqrt(2) / math.sqrt(level) * (n - 1) * dx_norm
        checks.append(_mean_check(f"area-norm@m={level:g}", truncated, bound, exact))

        for j in range(n - 1):
            truncated = np.where(censored, level, np.minimum(jumps[:, j], level))
            bound = 2 * math.sqrt(2 * level) * dx_norm
            checks.append(
                _mean_check(f"area-row(1,{j + 2})@m={level:g}", truncated, bound, exact)
            )

    return ExperimentReport(
        name="areas",
        checks=checks,
        data={"dx_norm": dx_norm, "zeta0_norm": zeta0.norm(), "censored": int(censored.sum())},
        config=config.to_dict(),
    )


def _mean_check(
    name: str, samples: np.ndarray, bound: float, exact: bool = False, t: float | None = None
) -> BoundCheck:
    """PASS iff the one-sided upper confidence limit of the mean is `<= bound`."""
    if exact:
        mean = upper = float(np.mean(samples))
    else:
        mean, upper = mean_upper_confidence(samples)
    return BoundCheck(
        name=name,
        t=t,
        estimate=mean,
        ci_upper=upper,
        bound=bound,
        in_regime=True,
        regime="always",
        passed=upper <= bound * (1 + 1e-12),
    )


def exit_time_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Compare the coupling time with the exit time from a pseudo-cube.

    The start separation `(Δx, ζ)` is halved `refinements` times. For each level,
    `p = P(τ > τ_Q(B) ∧ τ_Q(B̃))` is estimated around the midpoint configuration and
    divided by `||Δx|| + max(||ζ||, ||ζ||²)`. The ratios must not grow by more than
    `EXIT_SLACK` from the coarsest level.

    Arguments:
        config: Experiment config (`alpha`, `gamma` and `refinements` are used).
        runner: Replica runner.

    Returns:
        Report with one check per refinement.

    Raises:
        ExperimentPreconditionError: If `alpha > gamma` or the start points are too far
            apart horizontally.
    """
    runner = runner or ReplicaRunner()
    n = config.n
    if config.alpha > config.gamma:
        raise ExperimentPreconditionError("The pseudo-cube needs alpha <= gamma.")

    g, g_tilde = config.start_elements()
    dx, zeta = fiber_defect(g, g_tilde)
    if np.linalg.norm(dx) > 2 / math.sqrt(n - 1):
        raise ExperimentPreconditionError(
            f"Start points must satisfy ||x - x~|| <= 2 / sqrt(n - 1) = {2 / math.sqrt(n - 1):.6g}."
        )

    levels = []
    for k in range(config.refinements + 1):
        scale = 0.5**k
        target = group_mul(g, GroupElement(dx * scale, zeta * scale))
        cube = PseudoCube.around_pair(g, target, config.alpha, config.gamma)
        settings = coupling_settings(config, mode=Mode.PATH, exit_domain=cube)
        traces = _coupling_traces(
            runner, g, target, settings, config, _arm(Arm.EXIT, k), f"Exit level {k}"
        )
        # Replicas neither coupled nor exited by the horizon count as `τ > exit`
        late = sum(math.isfinite(t.exit_time) or t.censored for t in traces)
        p = late / len(traces)
        zeta_norm = zeta.norm() * scale
        size = float(np.linalg.norm(dx)) * scale + max(zeta_norm, zeta_norm**2)
        ratio = p / size if size > 0 else math.nan
        levels.append({"level": k, "p": p, "size": size, "ratio": ratio})

    base = levels[0]["ratio"]
    checks = []
    for level in levels[1:]:
        ratio = level["ratio"]
        passed = math.isnan(ratio) or math.isnan(base) or ratio <= EXIT_SLACK * base
        checks.append(
            BoundCheck(
                name=f"exit-ratio@level={level['level']}",
                t=None,
                estimate=ratio,
                ci_upper=ratio,
                bound=EXIT_SLACK * base,
                in_regime=not math.isnan(ratio),
                regime="start separation > 0",
                passed=passed,
            )
        )

    finite = [level["ratio"] for level in levels if math.isfinite(level["ratio"])]
    spread = max(finite) / min(finite) if finite and min(finite) > 0 else math.nan
    return ExperimentReport(
        name="exit",
        checks=checks,
        data={"levels": levels, "ratio_spread": spread},
        config=config.to_dict(),
    )


class ProbeFunction(NamedTuple):
    """Bounded test function of the gradient experiment."""

    name: str
    sup_norm: float
    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]


PROBE_FUNCTIONS = {
    "cos_x1": ProbeFunction("cos_x1", 1.0, lambda x, z: np.cos(x[:, 0])),
    "cos_z12": ProbeFunction("cos_z12", 1.0, lambda x, z: np.cos(z[:, 0])),
    "constant": ProbeFunction("constant", 1.0, lambda x, z: np.ones(x.shape[0])),
}
"""Bounded test functions by config name."""


def _translate(g: GroupElement, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left translation `g ⋆ (x, z)` of a batch of points."""
    return g.x + x, g.z.entries + z + 0.5 * symplectic_entries(g.x, x)


def gradient_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Check difference quotients of `P_t f` against the gradient bounds.

    Both semigroups are estimated from one set of paths started at the identity and
    translated to `g` and `g̃`. The horizontal displacement `(ε e_1, 0)` is divided by
    the `d_cc` upper bound and compared with `2||f|| C₁ / √t`, the vertical one
    `(0, ε e_(1,2))` by `ε` and compared with `||f|| C₂ / t`. The difference is also
    compared with `2||f|| P(τ > t)` from coupled runs.

    Arguments:
        config: Experiment config (`test_function`, `gradient_times`, `epsilon`).
        runner: Replica runner.

    Returns:
        Report with quotient and coupling checks per time and displacement.

    Raises:
        ExperimentPreconditionError: If a time is below 1.
    """
    runner = runner or ReplicaRunner()
    if min(config.gradient_times) < 1:
        raise ExperimentPreconditionError("Gradient bounds are asserted for t >= 1 only.")

    n = config.n
    c = constants(n)
    f = PROBE_FUNCTIONS[config.test_function]
    g, _ = config.start_elements()
    eps = config.epsilon
    N = config.replicas

    horizontal = np.zeros(n)
    horizontal[0] = eps
    vertical = np.zeros(skew_dim(n))
    vertical[0] = eps
    displacements = {
        "horizontal": GroupElement(horizontal, SkewMatrix.zeros(n)),
        "vertical": GroupElement(np.zeros(n), SkewMatrix(vertical)),
    }

    checks = []
    data: dict[str, Any] = {}
    identity = GroupElement.identity(n)
    for i, t in enumerate(config.gradient_times):
        x, z = _endpoints(
            runner, identity, t, config.h, N, config.seed, _arm(Arm.SHARED, i), f"Paths t={t:g}"
        )
        values = f.evaluate(*_translate(g, x, z))

        for j, (kind, step) in enumerate(displacements.items()):
            g_tilde = group_mul(g, step)
            diff = values - f.evaluate(*_translate(g_tilde, x, z))
            mean = float(diff.mean())
            stderr = float(diff.std(ddof=1)) / math.sqrt(N)
            upper = abs(mean) + float(scipy.stats.norm.ppf(CONFIDENCE_LEVEL)) * stderr

            if kind == "horizontal":
                distance = dcc_bounds(g, g_tilde).upper
                bound = 2 * f.sup_norm * c.C1 / math.sqrt(t)
            else:
                distance = eps
                bound = f.sup_norm * c.C2 / t
            checks.append(
                BoundCheck(
                    name=f"gradient-{kind}",
                    t=t,
                    estimate=abs(mean) / distance,
                    ci_upper=upper / distance,
                    bound=bound,
                    in_regime=True,
                    regime="t >= 1",
                    passed=upper / distance <= bound,
                )
            )

            settings = coupling_settings(config, horizon=t)
            traces = _coupling_traces(
                runner, g, g_tilde, settings, config, _arm(Arm.CHAIN, 2 * i + j), "Coupling"
            )
            survival = float(np.mean(_taus(traces) > t))
            sigma = math.sqrt(
                (2 * f.sup_norm) ** 2 * survival * (1 - survival) / N + stderr**2
            )
            chain_bound = 2 * f.sup_norm * survival
            checks.append(
                BoundCheck(
                    name=f"coupling-{kind}",
                    t=t,
                    estimate=abs(mean),
                    ci_upper=abs(mean),
                    bound=chain_bound + 3 * sigma,
                    in_regime=True,
                    regime="t > 0",
                    passed=abs(mean) <= chain_bound + 3 * sigma,
                )
            )
            data[f"{kind}@t={t:g}"] = {"difference": mean, "stderr": stderr, "survival": survival}

    return ExperimentReport(
        name="gradient", checks=checks, data=data, config=config.to_dict()
    )


def wishart_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Check the mean norms of the Wishart vector `w` against their bounds.

    Arguments:
        config: Experiment config (`n`, `m`, `replicas`).
        runner: Replica runner.

    Returns:
        Report with the `E||w||` and `E||Σ^{-1/2} w||` checks and the rate of samples
        above each bound.
    """
    runner = runner or ReplicaRunner()
    n, m, N = config.n, config.effective_m, config.replicas
    c = constants(n)
    task = functools.partial(
        _wishart_task, n=n, m=m, total=N, seed=config.seed, arm=_arm(Arm.WISHART)
    )
    batches = runner.map(task, math.ceil(N / ENDPOINT_BATCH), "Wishart draws")
    w_norms = np.concatenate([w for w, _ in batches])
    s_norms = np.concatenate([s for _, s in batches])

    w_bound = c.wishart_norm_bound(m)
    s_bound = c.sigma_norm_bound(m)
    checks = [
        _mean_check("wishart-norm", w_norms, w_bound),
        _mean_check("wishart-sigma-norm", s_norms, s_bound),
    ]
    data = {
        "n": n,
        "m": m,
        "w_norm_violation_rate": float(np.mean(w_norms > w_bound)),
        "sigma_norm_violation_rate": float(np.mean(s_norms > s_bound)),
    }
    return ExperimentReport(name="wishart", checks=checks, data=data, config=config.to_dict())


def _ks_check(name: str, a: np.ndarray, b: np.ndarray, horizon: float) -> BoundCheck:
    """Two-sample KS check; censored times are mapped to a common value above `horizon`."""
    censor = 2 * horizon if math.isfinite(horizon) else np.finfo(float).max
    a = np.where(np.isfinite(a), a, censor)
    b = np.where(np.isfinite(b), b, censor)
    result = scipy.stats.ks_2samp(a, b)
    p_value = float(result.pvalue)
    return BoundCheck(
        name=name,
        t=None,
        estimate=float(result.statistic),
        ci_upper=p_value,
        bound=KS_LEVEL,
        in_regime=True,
        regime="p-value > bound",
        passed=p_value > KS_LEVEL,
    )


def cross_fidelity_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Compare event and path fidelity on the first line, and lifted Heisenberg runs.

    Arguments:
        config: Experiment config with both start points on the same fiber.
        runner: Replica runner.

    Returns:
        Report with KS checks (statistic as estimate, p-value as `ci_upper`).

    Raises:
        ExperimentPreconditionError: If the start points are not on the same fiber.
    """
    runner = runner or ReplicaRunner()
    g, g_tilde = config.start_elements()
    dx, _ = fiber_defect(g, g_tilde)
    if np.any(dx != 0):
        raise ExperimentPreconditionError("Cross fidelity runs need start points on one fiber.")

    horizon = config.effective_horizon
    samples = {}
    for mode, arm in ((Mode.EVENT, Arm.EVENT), (Mode.PATH, Arm.PATH)):
        task = functools.partial(
            _line_task,
            g=g,
            g_tilde=g_tilde,
            settings=coupling_settings(config, mode=mode),
            seed=config.seed,
            arm=_arm(arm),
        )
        samples[mode] = np.array(runner.map(task, config.replicas, f"Line ({mode.value})"))

    checks = [_ks_check("line-event-vs-path", samples[Mode.EVENT], samples[Mode.PATH], horizon)]
    data: dict[str, Any] = {
        f"{mode.value}_survival": [float(np.mean(s > t)) for t in config.t_grid]
        for mode, s in samples.items()
    }

    if config.n == 2:
        spec = heisenberg_spec()
        lifted_config = dataclasses.replace(
            config,
            homogeneous=_lifted_section(spec, g, g_tilde),
        )
        settings = coupling_settings(config)
        lifted_task = functools.partial(
            _lifted_task, config=lifted_config, settings=settings, arm=_arm(Arm.LIFTED)
        )
        lifted = _taus(runner.map(lifted_task, config.replicas, "Lifted coupling"))
        free = _taus(
            _coupling_traces(runner, g, g_tilde, settings, config, _arm(Arm.FREE), "Coupling")
        )
        checks.append(_ks_check("heisenberg-lifted-vs-free", lifted, free, horizon))

    return ExperimentReport(
        name="crossfid", checks=checks, data=data, config=config.to_dict()
    )


def _lifted_section(
    spec: HomogeneousGroupSpec, g: GroupElement, g_tilde: GroupElement
) -> HomogeneousConfig:
    """Homogeneous config section holding the images of `g` and `g̃`."""
    a = lift_morphism(spec, g)
    a_tilde = lift_morphism(spec, g_tilde)
    return HomogeneousConfig(
        C=spec.to_dict()["C"],
        start=PointConfig(a.x.tolist(), a.z.tolist()),
        start_tilde=PointConfig(a_tilde.x.tolist(), a_tilde.z.tolist()),
    )


def simulate_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Check simulated Lévy areas against their exact moments and keep sample paths.

    Areas `A = 2 (z_T - z_0)` of the first coordinate pair are simulated from the
    identity: `E[A] = 0`, `Var(A) = T²` and `E[cos(λ (z_T - z_0))] = 1 / cosh(λT/2)`
    at `λ = 1` are each checked within 4 standard errors.

    Arguments:
        config: Experiment config (`path_time`, `h`, `replicas`, `dump_paths`).
        runner: Replica runner.

    Returns:
        Report with the area checks; `paths` holds `dump_paths` paths from `start`.
    """
    runner = runner or ReplicaRunner()
    T, N = config.path_time, config.replicas
    identity = GroupElement.identity(config.n)
    _, z = _endpoints(runner, identity, T, config.h, N, config.seed, _arm(Arm.START), "Areas")
    area = 2 * z[:, 0]
    half = z[:, 0]

    def within(name: str, estimate: float, expected: float, stderr: float) -> BoundCheck:
        error = abs(estimate - expected)
        return BoundCheck(
            name=name,
            t=T,
            estimate=estimate,
            ci_upper=error,
            bound=4 * stderr,
            in_regime=True,
            regime="|estimate - exact| <= 4 SE",
            passed=error <= 4 * stderr,
        )

    cosines = np.cos(half)
    checks = [
        within("area-mean", float(area.mean()), 0.0, T / math.sqrt(N)),
        within("area-variance", float(area.var(ddof=1)), T**2, 2 * T**2 / math.sqrt(N)),
        within(
            "area-characteristic",
            float(cosines.mean()),
            1 / math.cosh(T / 2),
            float(cosines.std(ddof=1)) / math.sqrt(N),
        ),
    ]

    g, _ = config.start_elements()
    paths = [
        simulate_path(g, T, config.h, RngStream(config.seed, i, _arm(Arm.PATHS)).generator())
        for i in range(config.dump_paths)
    ]
    return ExperimentReport(
        name="simulate",
        checks=checks,
        data={"area_mean": float(area.mean()), "area_variance": float(area.var(ddof=1))},
        config=config.to_dict(),
        paths=paths,
    )


def couple_experiment(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> ExperimentReport:
    """Run couplings and keep their traces.

    Homogeneous configs run the lifted coupling of their own start points.

    Arguments:
        config: Experiment config.
        runner: Replica runner.

    Returns:
        Report without checks, holding one trace per replica.
    """
    runner = runner or ReplicaRunner()
    settings = coupling_settings(config)
    if config.homogeneous is not None:
        task = functools.partial(
            _lifted_task, config=config, settings=settings, arm=_arm(Arm.LIFTED)
        )
        traces = runner.map(task, config.replicas, "Lifted coupling")
    else:
        g, g_tilde = config.start_elements()
        traces = _coupling_traces(
            runner, g, g_tilde, settings, config, _arm(Arm.COUPLING), "Coupling"
        )

    taus = _taus(traces)
    finite = taus[np.isfinite(taus)]
    data = {
        "coupled": int(finite.size),
        "censored": int(sum(t.censored for t in traces)),
        "median_tau": float(np.median(finite)) if finite.size else math.inf,
    }
    return ExperimentReport(
        name="couple", checks=[], data=data, config=config.to_dict(), traces=traces
    )


def _point(x: Sequence[float], z: Sequence[float]) -> PointConfig:
    return PointConfig(list(map(float, x)), list(map(float, z)))


def verification_suite(
    config: ExperimentConfig, runner: ReplicaRunner | None = None
) -> list[ExperimentReport]:
    """Run the full verification suite.

    The suite uses the seed, replica count and step of `config` and fixes everything
    else per entry.

    Arguments:
        config: Base config.
        runner: Replica runner.

    Returns:
        One report per suite entry, named after the entry.
    """
    runner = runner or ReplicaRunner()
    base = dataclasses.replace(config, homogeneous=None, horizon=None, m=None)
    block_grid = [block_boundary(1.0, k) for k in range(4, 9)]
    small = min(config.replicas, 5_000)

    def entry(**changes: Any) -> ExperimentConfig:
        return dataclasses.replace(base, **changes)

    n2 = {"n": 2, "start": _point([0, 0], [0])}
    n3 = {"n": 3, "start": _point([0, 0, 0], [0, 0, 0])}
    suite: list[tuple[str, Callable[..., ExperimentReport], ExperimentConfig]] = [
        (
            "rate-fiber-n2",
            rate_experiment,
            entry(**n2, start_tilde=_point([0, 0], [1]), t_grid=block_grid, mode="event"),
        ),
        (
            "rate-fiber-n3",
            rate_experiment,
            entry(
                **n3,
                start_tilde=_point([0, 0, 0], [0.6, 0.8, 0]),
                t_grid=[1.0, 2.0, 4.0, 8.0, 16.0],
                mode="event",
            ),
        ),
        (
            "rate-global-n2",
            rate_experiment,
            entry(
                **n2,
                start_tilde=_point([1, 0], [1]),
                t_grid=[64.0, 128.0, 256.0, 512.0, 1024.0],
                mode="event",
            ),
        ),
        (
            "tv-n2",
            tv_bound_experiment,
            entry(**n2, start_tilde=_point([0.5, 0], [0.5]), tv_time=1.0),
        ),
        (
            "areas-n2",
            area_lemma_experiment,
            entry(**n2, start_tilde=_point([1, 0], [0]), t_grid=[16.0], area_levels=[1.0, 2.0]),
        ),
        (
            "areas-n3",
            area_lemma_experiment,
            entry(
                **n3,
                start_tilde=_point([1, 0, 0], [0, 0, 0]),
                t_grid=[16.0],
                area_levels=[1.0, 2.0],
            ),
        ),
        (
            "exit-n2",
            exit_time_experiment,
            entry(
                **n2,
                start_tilde=_point([0.5, 0], [0.25]),
                replicas=small,
                t_grid=[16.0],
                alpha=1.0,
                gamma=1.0,
                refinements=2,
            ),
        ),
        (
            "gradient-cos_x1",
            gradient_experiment,
            entry(**n2, start_tilde=_point([0, 0], [0]), test_function="cos_x1"),
        ),
        (
            "gradient-cos_z12",
            gradient_experiment,
            entry(**n2, start_tilde=_point([0, 0], [0]), test_function="cos_z12"),
        ),
        ("wishart-n2", wishart_experiment, entry(**n2, start_tilde=_point([0, 0], [0]))),
        ("wishart-n3", wishart_experiment, entry(**n3, start_tilde=_point([0, 0, 0], [0, 0, 0]))),
        (
            "crossfid-n2",
            cross_fidelity_experiment,
            entry(
                **n2,
                start_tilde=_point([0, 0], [1]),
                replicas=small,
                t_grid=block_grid,
            ),
        ),
    ]

    reports = []
    for name, experiment, entry_config in suite:
        logger.debug("Running suite entry %s", name)
        report = experiment(entry_config, runner)
        report.name = name
        reports.append(report)
    return reports
