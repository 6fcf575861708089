"""Test `carnot_coupling.experiments` module."""

import dataclasses
import math

import numpy as np
import pytest

from carnot_coupling.config import ExperimentConfig, PointConfig
from carnot_coupling.experiments import (
    RATE_CSV_HEADER,
    BoundCheck,
    ExperimentPreconditionError,
    ExperimentReport,
    RateCurve,
    ReplicaRunner,
    area_lemma_experiment,
    binned_total_variation,
    couple_experiment,
    cross_fidelity_experiment,
    exit_time_experiment,
    gradient_experiment,
    rate_experiment,
    simulate_experiment,
    tv_bound_experiment,
    verification_suite,
    wishart_experiment,
)
from carnot_coupling.utils import clopper_pearson_upper


@pytest.fixture()
def config() -> ExperimentConfig:
    """Small on-fiber `G_2` config."""
    return ExperimentConfig(
        seed=7,
        replicas=200,
        h=1e-2,
        t_grid=[5.0, 10.333333333333334, 21.0, 42.333333333333336],
        start=PointConfig([0.0, 0.0], [0.0]),
        start_tilde=PointConfig([0.0, 0.0], [1.0]),
    )


def test_replica_runner_orders_results() -> None:
    """Results come back in stream order across batches."""
    runner = ReplicaRunner(batch_size=3)

    assert runner.map(lambda i: i * i, 10, "Squares") == [i * i for i in range(10)]


def test_replica_runner_progress_hook() -> None:
    """The progress hook sees every batch."""
    seen = []

    def progress(jobs, description, total):  # noqa: ANN001, ANN202
        seen.append((description, total))
        return jobs

    ReplicaRunner(batch_size=4, progress=progress).map(lambda i: i, 10, "Identity")

    assert seen == [("Identity", 3)]


def test_replica_runner_threads_agree(config: ExperimentConfig) -> None:
    """Worker count and batch size don't change the results."""
    config = dataclasses.replace(config, replicas=64)
    sequential = rate_experiment(config, ReplicaRunner(threads=1, batch_size=64))
    parallel = rate_experiment(config, ReplicaRunner(threads=2, batch_size=16))

    assert sequential.curve is not None
    assert parallel.curve is not None
    np.testing.assert_array_equal(sequential.curve.survival, parallel.curve.survival)
    assert sequential.data == parallel.data


def test_rate_curve_from_times() -> None:
    """Censored replicas survive every time of the grid."""
    taus = np.array([0.5, 1.5, math.inf, 3.0])
    curve = RateCurve.from_times(taus, [1.0, 2.0, 4.0], lambda t: 1 / t, lambda t: t >= 2)

    np.testing.assert_array_equal(curve.survivors, [3, 2, 1])
    np.testing.assert_allclose(curve.survival, [0.75, 0.5, 0.25])
    assert curve.ci_upper[2] == clopper_pearson_upper(1, 4)
    np.testing.assert_array_equal(curve.in_regime, [False, True, True])
    assert curve.rows().shape == (3, len(RATE_CSV_HEADER))


def test_rate_curve_checks() -> None:
    """Points outside the regime and points without survivors always pass."""
    curve = RateCurve.from_times(
        np.full(100, 0.5), [0.25, 1.0], lambda t: 0.0, lambda t: True
    )
    checks = curve.checks("line", "always")

    assert [c.passed for c in checks] == [False, True]
    assert checks[1].ci_upper > checks[1].bound


def test_rate_curve_sharp_checks() -> None:
    """Sharp bounds fail only when the lower confidence limit exceeds them."""
    taus = np.concatenate([np.full(50, 0.5), np.full(50, 2.0)])
    curve = RateCurve.from_times(taus, [1.0], lambda t: 0.5, lambda t: True)

    assert not curve.checks("reflection", "t > 0")[0].passed
    assert curve.checks("reflection", "t > 0", sharp=True)[0].passed

    tight = RateCurve.from_times(taus, [1.0], lambda t: 0.3, lambda t: True)
    assert not tight.checks("reflection", "t > 0", sharp=True)[0].passed


def test_experiment_report_to_dict() -> None:
    """Verdict follows the checks; the curve is serialized row by row."""
    check = BoundCheck("fiber", 1.0, 0.1, 0.2, 0.5, True, "always", True)
    curve = RateCurve.from_times(np.zeros(4), [1.0], lambda t: 0.0, lambda t: True)
    report = ExperimentReport("rate", [check], curve=curve)

    document = report.to_dict()
    assert document["verdict"] == "PASS"
    assert document["experiment"] == "rate"
    assert document["rate_curve"] == [
        {"t": 1.0, "survival": 0.0, "ci_upper": curve.ci_upper[0], "bound": 0.0}
    ]
    assert "traces" not in document

    report.checks.append(dataclasses.replace(check, passed=False))
    assert report.verdict == "FAIL"


def test_binned_total_variation_identical() -> None:
    """Identical samples are at distance 0."""
    sample = np.random.default_rng(1).standard_normal((5_000, 3))

    assert binned_total_variation(sample, sample) == 0.0


def test_binned_total_variation_same_law() -> None:
    """Noise correction keeps independent samples of one law close to 0."""
    rng = np.random.default_rng(2)
    a = rng.standard_normal((20_000, 2))
    b = rng.standard_normal((20_000, 2))

    assert binned_total_variation(a, b) < 0.05


def test_binned_total_variation_separated() -> None:
    """Far apart samples are close to distance 1."""
    rng = np.random.default_rng(3)
    a = rng.standard_normal((20_000, 2))
    b = rng.standard_normal((20_000, 2)) + 10.0

    assert binned_total_variation(a, b) > 0.8


def test_binned_total_variation_pairs() -> None:
    """High dimensional samples are binned by coordinate pairs."""
    rng = np.random.default_rng(4)
    a = rng.standard_normal((5_000, 6))
    b = a.copy()
    b[:, 5] += 10.0

    assert 0.5 < binned_total_variation(a, b) <= 1.0


def test_rate_experiment_equal_points(config: ExperimentConfig) -> None:
    """Equal start points couple at once and pass every check."""
    config = dataclasses.replace(config, start_tilde=PointConfig([0.0, 0.0], [0.0]))
    report = rate_experiment(config)

    assert report.passed
    assert report.curve is not None
    np.testing.assert_array_equal(report.curve.survival, 0.0)
    assert {c.name for c in report.checks} == {"fiber"}


def test_rate_experiment_fiber(config: ExperimentConfig) -> None:
    """On-fiber runs check the fiber and first line bounds."""
    report = rate_experiment(config)

    assert {c.name for c in report.checks} == {"fiber", "line"}
    assert report.data["v0_norm"] == 1.0
    assert report.data["censored"] >= 0


def test_rate_experiment_global(config: ExperimentConfig) -> None:
    """Horizontally separated runs check the global and reflection bounds."""
    config = dataclasses.replace(
        config,
        replicas=100,
        start_tilde=PointConfig([0.5, 0.0], [0.5]),
        t_grid=[16.0, 32.0],
    )
    report = rate_experiment(config)

    assert {c.name for c in report.checks} == {"global", "reflection"}
    assert report.data["dx_norm"] == 0.5


@pytest.mark.slow()
def test_rate_experiment_line_bound_n3(config: ExperimentConfig) -> None:
    """`P(τ̄₁ > t) <= b₃ / t` for a unit row on `G_3`, N = 10⁴."""
    config = dataclasses.replace(
        config,
        n=3,
        replicas=10_000,
        start=PointConfig([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        start_tilde=PointConfig([0.0, 0.0, 0.0], [0.6, 0.8, 0.0]),
        t_grid=[1.0, 2.0, 4.0, 8.0, 16.0],
    )
    report = rate_experiment(config)

    assert report.passed
    line = [c for c in report.checks if c.name == "line"]
    assert [c.in_regime for c in line] == [True] * 5
    assert line[-1].ci_upper < line[-1].bound < 1.0


@pytest.mark.slow()
def test_rate_experiment_fiber_bound_n2() -> None:
    """The shipped on-fiber `G_2` config passes its fiber and line bounds, N = 10⁴."""
    config = ExperimentConfig.load_default()
    report = rate_experiment(config)

    assert config.replicas == 10_000
    assert report.passed
    assert any(c.in_regime and c.bound < 1.0 for c in report.checks if c.name == "fiber")


@pytest.mark.slow()
def test_rate_experiment_global_bound(config: ExperimentConfig) -> None:
    """Unit horizontal and vertical separation on `G_2` passes the global and reflection bounds."""
    config = dataclasses.replace(
        config,
        replicas=2_000,
        start_tilde=PointConfig([1.0, 0.0], [1.0]),
        t_grid=[200.0, 400.0, 800.0, 1600.0, 3200.0],
    )
    report = rate_experiment(config)

    assert report.passed
    assert all(c.in_regime for c in report.checks if c.name == "global")
    assert all(c.passed for c in report.checks if c.name == "reflection")


def test_rate_experiment_lifted(config: ExperimentConfig) -> None:
    """Homogeneous configs add lifted checks."""
    section = {
        "C": [[[0.0, -1.0], [1.0, 0.0]]],
        "start": {"x": [0.0, 0.0], "z": [0.0]},
        "start_tilde": {"x": [0.0, 0.0], "z": [0.5]},
    }
    config = ExperimentConfig.from_dict({**config.to_dict(), "homogeneous": section})
    report = rate_experiment(config)

    assert {c.name for c in report.checks} >= {"lifted", "projected"}
    lifted = report.data["lifted"]
    assert len(lifted["survival"]) == len(config.t_grid)
    assert np.all(lifted["projected_survival"] <= lifted["survival"])


def test_tv_bound_experiment(config: ExperimentConfig) -> None:
    """Reports both total variation checks."""
    config = dataclasses.replace(
        config, replicas=2_000, h=0.05, start_tilde=PointConfig([0.5, 0.0], [0.5])
    )
    report = tv_bound_experiment(config)

    assert [c.name for c in report.checks] == ["tv-bound", "tv-coupling"]
    assert report.passed
    assert 0.0 <= report.data["tv"] <= 1.0
    assert not report.checks[0].in_regime


def test_area_lemma_on_fiber_is_exact(config: ExperimentConfig) -> None:
    """Without a reflection the defect doesn't move and the checks are exact."""
    report = area_lemma_experiment(config)

    assert [c.name for c in report.checks] == [
        "area-norm@m=1",
        "area-row(1,2)@m=1",
        "area-norm@m=2",
        "area-row(1,2)@m=2",
    ]
    assert report.passed
    assert report.checks[0].estimate == report.checks[0].ci_upper == 1.0


def test_area_lemma_reflection(config: ExperimentConfig) -> None:
    """Reflected runs report one norm and `n - 1` row checks per level."""
    config = dataclasses.replace(
        config,
        n=3,
        replicas=100,
        start=PointConfig([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        start_tilde=PointConfig([0.5, 0.0, 0.0], [0.0, 0.0, 0.0]),
        t_grid=[16.0],
        area_levels=[1.0],
    )
    report = area_lemma_experiment(config)

    assert len(report.checks) == 3
    assert report.data["dx_norm"] == 0.5


def test_exit_time_requires_alpha_below_gamma(config: ExperimentConfig) -> None:
    """`alpha <= gamma` is required."""
    with pytest.raises(ExperimentPreconditionError, match="alpha <= gamma"):
        exit_time_experiment(dataclasses.replace(config, alpha=2.0, gamma=1.0))


def test_exit_time_requires_close_start(config: ExperimentConfig) -> None:
    """Start points must be horizontally close."""
    config = dataclasses.replace(config, start_tilde=PointConfig([3.0, 0.0], [0.0]))

    with pytest.raises(ExperimentPreconditionError, match="sqrt"):
        exit_time_experiment(config)


def test_exit_time_experiment(config: ExperimentConfig) -> None:
    """One ratio check per refinement."""
    config = dataclasses.replace(
        config,
        replicas=50,
        h=5e-3,
        start_tilde=PointConfig([0.5, 0.0], [0.25]),
        t_grid=[4.0],
        refinements=2,
    )
    report = exit_time_experiment(config)

    assert [c.name for c in report.checks] == ["exit-ratio@level=1", "exit-ratio@level=2"]
    assert [level["level"] for level in report.data["levels"]] == [0, 1, 2]


@pytest.mark.slow()
def test_exit_time_experiment_scaling(config: ExperimentConfig) -> None:
    """The exit ratio stays within a factor 2 over two refinements, N = 5000."""
    config = dataclasses.replace(
        config,
        replicas=5_000,
        h=5e-3,
        start_tilde=PointConfig([0.5, 0.0], [0.25]),
        t_grid=[4.0],
        refinements=2,
        alpha=1.0,
        gamma=1.0,
    )
    report = exit_time_experiment(config)

    assert report.passed
    assert all(level["p"] > 0 for level in report.data["levels"])


def test_gradient_requires_late_times(config: ExperimentConfig) -> None:
    """Gradient bounds hold for `t >= 1` only."""
    with pytest.raises(ExperimentPreconditionError, match="t >= 1"):
        gradient_experiment(dataclasses.replace(config, gradient_times=[0.5]))


@pytest.mark.parametrize("test_function", ["cos_x1", "cos_z12", "constant"])
def test_gradient_experiment(config: ExperimentConfig, test_function: str) -> None:
    """Quotient and coupling checks per time and displacement."""
    config = dataclasses.replace(
        config, replicas=500, h=0.05, gradient_times=[1.0], test_function=test_function
    )
    report = gradient_experiment(config)

    assert [c.name for c in report.checks] == [
        "gradient-horizontal",
        "coupling-horizontal",
        "gradient-vertical",
        "coupling-vertical",
    ]
    if test_function == "constant":
        assert all(c.estimate == 0.0 for c in report.checks)


@pytest.mark.slow()
@pytest.mark.parametrize("test_function", ["cos_x1", "cos_z12"])
def test_gradient_experiment_bounds(config: ExperimentConfig, test_function: str) -> None:
    """Difference quotients respect the gradient and coupling bounds at `t ∈ {1, 4}`."""
    config = dataclasses.replace(
        config, replicas=10_000, gradient_times=[1.0, 4.0], test_function=test_function
    )
    report = gradient_experiment(config)

    assert len(report.checks) == 8
    assert report.passed


def test_wishart_experiment(config: ExperimentConfig) -> None:
    """`E||w||` and `E||Σ^{-1/2} w||` stay below their bounds."""
    report = wishart_experiment(dataclasses.replace(config, replicas=2_000))

    assert [c.name for c in report.checks] == ["wishart-norm", "wishart-sigma-norm"]
    assert report.passed
    assert report.data["m"] == 4
    assert 0.0 <= report.data["w_norm_violation_rate"] <= 1.0


def test_cross_fidelity_requires_one_fiber(config: ExperimentConfig) -> None:
    """Horizontally separated starts are rejected."""
    config = dataclasses.replace(config, start_tilde=PointConfig([1.0, 0.0], [0.0]))

    with pytest.raises(ExperimentPreconditionError, match="fiber"):
        cross_fidelity_experiment(config)


def test_cross_fidelity_experiment(config: ExperimentConfig) -> None:
    """Event and path lines, and lifted Heisenberg runs, share one law."""
    report = cross_fidelity_experiment(dataclasses.replace(config, replicas=100, h=0.05))

    assert [c.name for c in report.checks] == [
        "line-event-vs-path",
        "heisenberg-lifted-vs-free",
    ]
    assert all(0.0 <= c.ci_upper <= 1.0 for c in report.checks)


@pytest.mark.slow()
def test_cross_fidelity_experiment_passes(config: ExperimentConfig) -> None:
    """Both KS p-values clear their level at N = 2000."""
    report = cross_fidelity_experiment(dataclasses.replace(config, replicas=2_000, h=1e-2))

    assert report.passed
    assert all(c.ci_upper > c.bound for c in report.checks)


def test_simulate_experiment(config: ExperimentConfig) -> None:
    """Area moments pass and `dump_paths` paths start at `start`."""
    config = dataclasses.replace(
        config,
        replicas=4_000,
        start=PointConfig([1.0, 2.0], [3.0]),
        dump_paths=2,
    )
    report = simulate_experiment(config)

    assert [c.name for c in report.checks] == [
        "area-mean",
        "area-variance",
        "area-characteristic",
    ]
    assert report.passed
    assert len(report.paths) == 2
    np.testing.assert_array_equal(report.paths[0].x[0], [1.0, 2.0])


def test_couple_experiment(config: ExperimentConfig) -> None:
    """Keeps one trace per replica and has no checks."""
    report = couple_experiment(dataclasses.replace(config, replicas=20))

    assert report.checks == []
    assert report.passed
    assert len(report.traces) == 20
    assert [t.stream_id for t in report.traces] == list(range(20))
    assert len(report.to_dict()["traces"]) == 20


@pytest.mark.slow()
def test_verification_suite(config: ExperimentConfig) -> None:
    """Runs every entry under its own name."""
    reports = verification_suite(dataclasses.replace(config, replicas=200, h=0.01))

    assert [r.name for r in reports] == [
        "rate-fiber-n2",
        "rate-fiber-n3",
        "rate-global-n2",
        "tv-n2",
        "areas-n2",
        "areas-n3",
        "exit-n2",
        "gradient-cos_x1",
        "gradient-cos_z12",
        "wishart-n2",
        "wishart-n3",
        "crossfid-n2",
    ]
