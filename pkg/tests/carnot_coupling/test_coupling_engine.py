"""Test `carnot_coupling.coupling_engine` module."""

import dataclasses
import math

import numpy as np
import pytest
import scipy.stats

from carnot_coupling.coupling_engine import (
    COUPLED,
    Checkpoint,
    CouplingDiagnosticError,
    CouplingSettings,
    CouplingState,
    CouplingTrace,
    Mode,
    Phase,
    PhaseKind,
    block_boundary,
    block_length,
    constants,
    fiber_coupling,
    global_coupling,
    lift_pair,
    lifted_coupling,
    line_block,
    line_coupling,
    project_checkpoints,
    projected_coupling_time,
    reflection_phase,
)
from carnot_coupling.group_algebra import (
    GroupElement,
    HomogeneousElement,
    HomogeneousGroupSpec,
    SkewMatrix,
    fiber_defect,
    heisenberg_spec,
    lift_morphism,
    orthonormal_completion,
)
from carnot_coupling.path_sim import PseudoCube
from carnot_coupling.stochastic_kernels import RngStream

EVENT = CouplingSettings(mode=Mode.EVENT)


def on_fiber(zeta: list[float]) -> tuple[GroupElement, GroupElement]:
    """Start pair at the identity and `(0, ζ)`."""
    z = SkewMatrix(zeta)
    return GroupElement.identity(z.n), GroupElement(np.zeros(z.n), z)


def test_constants_n2() -> None:
    """`b_2 = β_2 = 2π`."""
    c = constants(2)

    assert math.isclose(c.b_n, 2 * math.pi)
    assert math.isclose(c.beta_n, 2 * math.pi)
    assert math.isclose(c.C1, 4 * math.sqrt(2 * math.pi) + 1 / math.sqrt(math.pi))
    assert math.isclose(c.C2, 4 * math.pi)


def test_constants_n3() -> None:
    """`b_n = 2√(2πn)` and `β_n = (n-1)^{3/2} b_n` for `n > 2`."""
    c = constants(3)

    assert math.isclose(c.b_n, 2 * math.sqrt(6 * math.pi))
    assert math.isclose(c.beta_n, 2**1.5 * c.b_n)


def test_constants_invalid() -> None:
    """`n >= 2` is required."""
    with pytest.raises(ValueError, match="n >= 2"):
        constants(1)


def test_bounds_capped_and_trivial() -> None:
    """Bounds are capped at 1 and vanish for equal start points."""
    c = constants(2)

    assert c.line_bound(1.0, 1.0) == 1.0
    assert math.isclose(c.line_bound(1.0, 100.0), 2 * math.pi / 100)
    assert c.fiber_bound(0.0, 1.0) == 0.0
    assert c.global_bound(0.0, 0.0, 1.0) == 0.0
    assert math.isclose(c.reflection_bound(1.0, 2.0), 1 / math.sqrt(4 * math.pi))
    assert math.isclose(
        c.global_bound(1.0, 1.0, 1024.0), c.C1 / 32 + c.C2 / 1024, rel_tol=1e-12
    )


def test_regimes() -> None:
    """Regime thresholds."""
    c = constants(3)

    assert c.fiber_regime(1.0, 2.0)
    assert not c.fiber_regime(1.0, 1.9)
    assert c.global_regime(1.0, c.beta_n)
    assert not c.global_regime(1.0, c.beta_n / 2)


def test_wishart_bounds() -> None:
    """Mean bounds of the Wishart vector."""
    c = constants(2)

    assert math.isclose(c.wishart_norm_bound(4), 1 / math.sqrt(2))
    assert math.isclose(c.sigma_norm_bound(4), 4 / math.sqrt(2))
    with pytest.raises(ValueError, match="m > n"):
        c.wishart_norm_bound(2)


def test_lines_executed() -> None:
    """Block diagonalization runs `⌊n/2⌋` lines."""
    assert constants(5).lines_executed() == 2
    assert constants(5).lines_executed(block_diagonalize=False) == 4


def test_block_grid() -> None:
    """`T_k = ||v₀|| 2^k / 3` and `t_k = Σ_{j<k} T_j`."""
    for k in range(6):
        assert math.isclose(
            block_boundary(3.0, k + 1) - block_boundary(3.0, k), block_length(3.0, k)
        )
    assert block_boundary(3.0, 0) == 0.0


def test_settings_exit_domain_needs_path_mode() -> None:
    """Exit detection is only available in path mode."""
    cube = PseudoCube(GroupElement.identity(2), alpha=1.0, gamma=1.0)

    with pytest.raises(ValueError, match="path mode"):
        CouplingSettings(mode=Mode.EVENT, exit_domain=cube)


def test_settings_truncation() -> None:
    """Defaults to `2n` and rejects `m < n + 1`."""
    assert CouplingSettings().truncation(3) == 6
    with pytest.raises(ValueError, match="m >= n \\+ 1"):
        CouplingSettings(m=3).truncation(3)


def test_state_start_phases() -> None:
    """Initial phase depends on the start separation."""
    g = GroupElement.identity(2)

    assert CouplingState.start(g, g).phase == COUPLED
    assert CouplingState.start(*on_fiber([1.0])).phase == Phase(PhaseKind.LINE, 0)
    g_tilde = GroupElement(np.array([1.0, 0.0]), SkewMatrix([0.0]))
    assert CouplingState.start(g, g_tilde).phase.kind is PhaseKind.REFLECTION


@pytest.mark.slow()
def test_line_event_mode_geometric_grid(rng: np.random.Generator) -> None:
    """Event mode lines end on the block grid with the row exactly cancelled (N = 10⁴)."""
    v_norm = 1.0
    boundaries = [block_boundary(v_norm, k) for k in range(1, 40)]
    for _ in range(10_000):
        state = CouplingState.start(*on_fiber([v_norm]))
        tau_line, state = line_coupling(state, 0, EVENT, rng)

        assert any(math.isclose(tau_line, t) for t in boundaries)
        assert state.phase == COUPLED
        assert state.zeta is not None
        assert state.zeta.norm() == 0.0


def test_line_block_success_is_exact(rng: np.random.Generator) -> None:
    """Successful blocks set `M_next` to exactly 0; late blocks succeed often."""
    successes = 0
    for _ in range(500):
        state = CouplingState.start(*on_fiber([0.6, 0.8, 0.0]))
        v = np.array([0.6, 0.8])
        state = dataclasses.replace(state, v_norm=1.0, direction=v, M=1.0, block_index=5)
        outcome, after = line_block(state, 0, 5, EVENT, rng)

        if outcome.success:
            successes += 1
            assert outcome.M_next == 0.0
            assert after.zeta is not None
            np.testing.assert_array_equal(after.zeta.dense()[0], 0.0)
        else:
            assert outcome.M_next > 0
            assert after.zeta is not None
            np.testing.assert_allclose(after.zeta.entries[:2], outcome.M_next * v)
        assert math.isclose(after.elapsed, block_length(1.0, 5))
    assert successes > 0


@pytest.mark.parametrize("k", [0, 3, 6])
def test_line_block_mirror_bookkeeping(k: int, rng: np.random.Generator) -> None:
    """`M_next = M - (2T/π) Y / s` below the level `πsM / (2T)`, and 0 once it is hit."""
    v = np.array([0.6, 0.8])
    for _ in range(300):
        state = CouplingState.start(*on_fiber([0.6, 0.8, 0.0]))
        state = dataclasses.replace(state, v_norm=1.0, direction=v, M=1.0, block_index=k)
        outcome, _ = line_block(state, 0, k, EVENT, rng)
        s, T = outcome.sigma_inv_w_norm, outcome.T_k
        level = math.pi * s / (2 * T)

        assert T == block_length(1.0, k)
        if outcome.success:
            assert math.isclose(outcome.endpoint, level)
            assert outcome.M_next == 0.0
        else:
            assert outcome.endpoint < level
            expected = 1.0 - (2 * T / math.pi) * outcome.endpoint / s
            assert math.isclose(outcome.M_next, expected, rel_tol=1e-12, abs_tol=1e-12)


def test_line_leaves_other_rows(rng: np.random.Generator) -> None:
    """Cancelling row 0 keeps the entries off row 0."""
    state = CouplingState.start(*on_fiber([0.3, -0.4, 0.7]))
    _, state = line_coupling(state, 0, EVENT, rng)

    assert state.phase == Phase(PhaseKind.LINE, 1)
    assert state.zeta is not None
    np.testing.assert_allclose(state.zeta.entries, [0.0, 0.0, 0.7])


def test_line_block_wrong_phase(rng: np.random.Generator) -> None:
    """Blocks can't run outside their line."""
    state = CouplingState.start(*on_fiber([1.0]))

    with pytest.raises(CouplingDiagnosticError):
        line_block(state, 0, 3, EVENT, rng)


def test_line_max_blocks_guard(rng: np.random.Generator) -> None:
    """Runs exceeding the block guard are reported."""
    settings = CouplingSettings(mode=Mode.EVENT, max_blocks=1)

    with pytest.raises(CouplingDiagnosticError, match="did not couple"):
        for _ in range(200):
            line_coupling(CouplingState.start(*on_fiber([1.0])), 0, settings, rng)


def test_line_horizon_censors(rng: np.random.Generator) -> None:
    """Blocks ending after the horizon are not run."""
    settings = CouplingSettings(mode=Mode.EVENT, horizon=0.1)
    tau_line, state = line_coupling(CouplingState.start(*on_fiber([1.0])), 0, settings, rng)

    assert tau_line == math.inf
    assert state.censored


@pytest.mark.parametrize("n", [3, 4, 5])
def test_fiber_coupling_block_diagonalized(n: int, rng: np.random.Generator) -> None:
    """Generic defects couple with `⌊n/2⌋` non empty lines."""
    zeta = SkewMatrix(rng.standard_normal(n * (n - 1) // 2))
    state = CouplingState.start(GroupElement.identity(n), GroupElement(np.zeros(n), zeta))
    tau, state = fiber_coupling(state, EVENT, rng)

    assert state.phase == COUPLED
    assert math.isfinite(tau)
    assert sum(record.blocks > 0 for record in state.history) == n // 2
    assert math.isclose(tau, sum(record.tau_line for record in state.history))


def test_fiber_coupling_without_block_diagonalization(rng: np.random.Generator) -> None:
    """Every row with entries gets its own line."""
    settings = CouplingSettings(mode=Mode.EVENT, block_diagonalize=False)
    state = CouplingState.start(*on_fiber([0.5, 0.5, 0.5]))
    _, state = fiber_coupling(state, settings, rng)

    assert [record.line for record in state.history] == [0, 1]
    assert all(record.blocks > 0 for record in state.history)


def test_reflection_event_law(rng: np.random.Generator) -> None:
    """`P(τ₀ > t) = 2Φ(||Δx|| / (2√t)) - 1` within 3σ."""
    g = GroupElement.identity(2)
    g_tilde = GroupElement(np.array([1.0, 0.0]), SkewMatrix([0.0]))
    n, t = 20_000, 1.0
    taus = np.array([reflection_phase(g, g_tilde, rng, EVENT)[0] for _ in range(n)])
    expected = 2 * scipy.stats.norm.cdf(0.5 / math.sqrt(t)) - 1

    assert abs(np.mean(taus > t) - expected) <= 3 * math.sqrt(expected * (1 - expected) / n)


def test_reflection_path_mode_meets(rng: np.random.Generator) -> None:
    """At `τ₀` both horizontal parts agree and `b̃ = b ⋆ (0, ζ)`."""
    g = GroupElement(np.array([0.0, 0.0, 0.0]), SkewMatrix([0.0, 0.1, 0.0]))
    g_tilde = GroupElement(np.array([0.03, -0.02, 0.01]), SkewMatrix([0.5, 0.0, 0.2]))
    settings = CouplingSettings(mode=Mode.PATH, h=1e-3, horizon=1000.0)
    tau0, state = reflection_phase(g, g_tilde, rng, settings)

    assert math.isfinite(tau0)
    assert state.pair is not None
    assert state.zeta is not None
    np.testing.assert_allclose(state.pair.b.x, state.pair.b_tilde.x, atol=1e-12)
    _, zeta = fiber_defect(state.pair.b, state.pair.b_tilde)
    assert zeta.allclose(state.zeta, atol=1e-12)


def test_reflection_keeps_shared_areas(rng: np.random.Generator) -> None:
    """In the mirror frame, defect entries between shared coordinates don't move."""
    g = GroupElement(np.zeros(4), SkewMatrix([0.0, 0.1, 0.0, 0.3, -0.2, 0.0]))
    g_tilde = GroupElement(
        np.array([0.03, -0.02, 0.01, 0.02]), SkewMatrix([0.5, 0.0, 0.2, -0.1, 0.4, 0.6])
    )
    settings = CouplingSettings(mode=Mode.PATH, h=1e-3, horizon=1000.0)
    dx, zeta_start = fiber_defect(g, g_tilde)
    frame = orthonormal_completion(dx / np.linalg.norm(dx))
    _, state = reflection_phase(g, g_tilde, rng, settings)

    assert state.pair is not None
    _, zeta_end = fiber_defect(state.pair.b, state.pair.b_tilde)
    before = zeta_start.rotate(frame.T).dense()[1:, 1:]
    after = zeta_end.rotate(frame.T).dense()[1:, 1:]
    np.testing.assert_allclose(after, before, atol=1e-8)


def test_path_mode_fiber_coupling(rng: np.random.Generator) -> None:
    """Path mode keeps both copies consistent with the bookkeeping until they meet."""
    settings = CouplingSettings(mode=Mode.PATH, h=1e-2, horizon=40.0)
    for _ in range(5):
        state = CouplingState.start(*on_fiber([0.2, -0.1, 0.3]))
        tau, state = fiber_coupling(state, settings, rng)

        assert state.pair is not None
        if math.isfinite(tau):
            assert state.phase == COUPLED
            assert state.pair.b.allclose(state.pair.b_tilde)
        else:
            assert state.censored


def test_global_coupling_equal_points(rng: np.random.Generator) -> None:
    """Equal start points are coupled at time 0."""
    g = GroupElement(np.ones(2), SkewMatrix([1.0]))
    tau, trace = global_coupling(g, g, EVENT, rng)

    assert tau == 0.0
    assert trace.per_line == ()


def test_global_coupling_reproducible() -> None:
    """Replica streams fully determine the trace."""
    g = GroupElement.identity(2)
    g_tilde = GroupElement(np.array([0.5, 0.0]), SkewMatrix([0.5]))
    settings = CouplingSettings(mode=Mode.EVENT, h=1e-2, horizon=100.0)

    first = global_coupling(g, g_tilde, settings, RngStream(1, 7))[1]
    second = global_coupling(g, g_tilde, settings, RngStream(1, 7))[1]

    assert first.to_dict() == second.to_dict()
    assert first.seed == 1
    assert first.stream_id == 7


def test_global_coupling_trace(rng: np.random.Generator) -> None:
    """Coupling time is the reflection time plus the line durations."""
    g = GroupElement.identity(2)
    g_tilde = GroupElement(np.array([0.5, 0.0]), SkewMatrix([0.5]))
    settings = CouplingSettings(mode=Mode.EVENT, h=1e-2, horizon=1e4)
    tau, trace = global_coupling(g, g_tilde, settings, rng)

    assert math.isclose(tau, trace.tau0 + sum(r.tau_line for r in trace.per_line))
    assert set(trace.to_dict()) == {
        "tau0",
        "per_line",
        "tau",
        "mode",
        "seed",
        "stream_id",
        "censored",
        "exit_time",
    }


def test_global_coupling_exit(rng: np.random.Generator) -> None:
    """A tiny pseudo-cube stops the run at its exit time."""
    g = GroupElement.identity(2)
    g_tilde = GroupElement(np.array([0.01, 0.0]), SkewMatrix([0.5]))
    cube = PseudoCube.around_pair(g, g_tilde, alpha=0.05, gamma=1.0)
    settings = CouplingSettings(mode=Mode.PATH, h=1e-3, horizon=10.0, exit_domain=cube)
    tau, trace = global_coupling(g, g_tilde, settings, rng)

    assert tau == math.inf
    assert math.isfinite(trace.exit_time)


def test_lift_pair_projects_back(rng: np.random.Generator) -> None:
    """`φ(g) = a` and `φ(g̃) = ã`."""
    spec = heisenberg_spec()
    a = HomogeneousElement(rng.standard_normal(2), rng.standard_normal(1))
    a_tilde = HomogeneousElement(rng.standard_normal(2), rng.standard_normal(1))
    g, g_tilde = lift_pair(spec, a, a_tilde)

    assert lift_morphism(spec, g).allclose(a, atol=1e-12)
    assert lift_morphism(spec, g_tilde).allclose(a_tilde, atol=1e-12)


def test_lifted_coupling(rng: np.random.Generator) -> None:
    """Lifted runs return a trace of the lifted pair and its projected coupling time."""
    spec = heisenberg_spec()
    a = HomogeneousElement(np.zeros(2), np.zeros(1))
    a_tilde = HomogeneousElement(np.zeros(2), np.array([0.5]))
    tau, trace = lifted_coupling(spec, a, a_tilde, EVENT, rng)

    assert math.isfinite(tau)
    assert trace.tau0 == 0.0
    assert len(trace.per_line) == 1
    assert trace.projected_tau is not None
    assert math.isclose(trace.projected_tau, tau)
    assert trace.to_dict()["projected_tau"] == trace.projected_tau


def plane_spec() -> HomogeneousGroupSpec:
    """Rank 3 group keeping only the area of the first two coordinates."""
    return HomogeneousGroupSpec(np.array([[[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]))


def test_lifted_coupling_projected_checkpoints(rng: np.random.Generator) -> None:
    """Projections keep the lifted horizontal parts and meet no later than the lifts."""
    spec = heisenberg_spec()
    a = HomogeneousElement(np.zeros(2), np.zeros(1))
    a_tilde = HomogeneousElement(np.array([0.05, 0.0]), np.array([0.02]))
    settings = CouplingSettings(mode=Mode.PATH, h=1e-2, horizon=40.0)
    tau, trace = lifted_coupling(spec, a, a_tilde, settings, rng)

    lifted = [checkpoint for checkpoint in trace.checkpoints if checkpoint.pair is not None]
    projected = project_checkpoints(spec, trace)
    assert len(projected) == len(lifted) >= 1
    for checkpoint, image in zip(lifted, projected):
        assert checkpoint.pair is not None
        assert image.time == checkpoint.time
        np.testing.assert_array_equal(image.a.x, checkpoint.pair.b.x)
        np.testing.assert_array_equal(image.a_tilde.x, checkpoint.pair.b_tilde.x)
    assert projected[0].a.allclose(a)
    assert projected[0].a_tilde.allclose(a_tilde)
    assert trace.projected_tau is not None
    assert trace.projected_tau <= tau


def test_lifted_coupling_partial_group(rng: np.random.Generator) -> None:
    """Projected times never exceed the lifted ones on a group with fewer areas."""
    spec = plane_spec()
    a = HomogeneousElement(np.zeros(3), np.zeros(1))
    a_tilde = HomogeneousElement(np.array([0.1, 0.0, 0.0]), np.array([0.5]))
    settings = CouplingSettings(mode=Mode.EVENT, h=1e-2, horizon=1e4)
    for _ in range(20):
        tau, trace = lifted_coupling(spec, a, a_tilde, settings, rng)

        assert trace.projected_tau is not None
        assert trace.projected_tau <= tau


def test_projected_coupling_time() -> None:
    """Projections meet once the lift matrix kills the defect, before the defect vanishes."""
    checkpoints = (
        Checkpoint(0.0, None, None),
        Checkpoint(0.5, SkewMatrix([1.0, 1.0, 0.0]), None),
        Checkpoint(1.0, SkewMatrix([0.0, 1.0, 0.0]), None),
        Checkpoint(2.0, SkewMatrix.zeros(3), None),
    )
    trace = CouplingTrace(
        tau0=0.5, per_line=(), tau=2.0, mode=Mode.EVENT, checkpoints=checkpoints
    )

    assert projected_coupling_time(plane_spec(), trace) == 1.0
    unfinished = dataclasses.replace(trace, checkpoints=checkpoints[:2])
    assert projected_coupling_time(plane_spec(), unfinished) == 2.0


def test_checkpoints_follow_the_run(rng: np.random.Generator) -> None:
    """Checkpoints start at time 0 and end on the coupled pair."""
    state = CouplingState.start(*on_fiber([0.3, -0.4, 0.7]))
    _, state = fiber_coupling(state, EVENT, rng)

    times = [checkpoint.time for checkpoint in state.checkpoints]
    assert times[0] == 0.0
    assert times == sorted(times)
    final = state.checkpoints[-1].zeta
    assert final is not None
    assert final.norm() < 1e-12
