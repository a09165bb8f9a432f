"""Newton driver, time stepping, and continuation tests.

The per-iteration path-equivalence and transient-limit invariants are
exercised on small meshes with direct linear solves so that any
disagreement is attributable to the drivers rather than Krylov noise.
"""

import numpy as np
import pytest

from vmsflow.assembly import apply_dirichlet, resolve_bcs
from vmsflow.kernels import CaseData, FlowState
from vmsflow.mesh import generate_box_mesh
from vmsflow.solver import (
    ContinuationResult,
    ConvergenceTrace,
    NewtonConfig,
    NewtonError,
    TimeStepError,
    continue_reynolds,
    newton_solve,
    timestep_drive,
)

WALLS_2D = ["xmin", "xmax", "ymin"]


def cavity_2d(n=4, lid=1.0):
    """Lid-driven square cavity: no-slip walls, moving top, pinned pressure."""
    mesh = generate_box_mesh(2, n)
    zero = (0.0, 0.0)
    entries = [(tag, zero) for tag in WALLS_2D] + [("ymax", (lid, 0.0))]
    center = np.argmin(np.linalg.norm(mesh.nodes - 0.5, axis=1))
    bcs = resolve_bcs(mesh, dirichlet=entries, pin=(int(center), 0.0))
    return mesh, bcs


def initial_state(mesh, bcs):
    state = FlowState.zeros(mesh)
    apply_dirichlet(state, bcs)
    return state


class TestNewton:
    def test_zero_iteration_on_converged_start(self):
        mesh, bcs = cavity_2d(3, lid=0.0)
        case = CaseData(nu=1.0, include_convection=False)
        state0 = initial_state(mesh, bcs)
        state, trace = newton_solve(mesh, case, state0, bcs=bcs)
        assert trace.converged
        assert trace.iterations == 0
        assert trace.residual_norms == [0.0]
        assert trace.linear_iters == [0]
        assert np.all(state.v == 0.0) and np.all(state.beta == 0.0)

    def test_stokes_converges_in_one_iteration(self):
        mesh, bcs = cavity_2d(4)
        case = CaseData(nu=1.0, include_convection=False)
        state, trace = newton_solve(
            mesh, case, initial_state(mesh, bcs), bcs=bcs, linear_backend="direct"
        )
        assert trace.converged
        assert trace.iterations == 1
        assert np.max(np.abs(state.v)) > 0.1

    def test_input_state_not_mutated(self):
        mesh, bcs = cavity_2d(3)
        state0 = initial_state(mesh, bcs)
        v0 = state0.v.copy()
        case = CaseData(nu=0.1)
        newton_solve(mesh, case, state0, bcs=bcs, linear_backend="direct")
        np.testing.assert_array_equal(state0.v, v0)
        assert np.all(state0.beta == 0.0)

    def test_navier_stokes_quadratic_tail(self):
        mesh, bcs = cavity_2d(4)
        case = CaseData(nu=0.02)  # Re = 50
        state, trace = newton_solve(
            mesh, case, initial_state(mesh, bcs), bcs=bcs, linear_backend="direct"
        )
        assert trace.converged
        r = trace.residual_norms
        assert 2 <= trace.iterations <= 8
        # once in the asymptotic regime the residual at least squares-ish
        assert r[-1] <= 1e-8 * r[0] or r[-1] <= 1e-10

    def test_pressure_residual_below_atol_at_convergence(self):
        from vmsflow.assembly import build_dofmap, element_dofs, evaluate_chunked
        from vmsflow.condense import condense_blocks
        from vmsflow.kernels import default_tables

        mesh, bcs = cavity_2d(4)
        case = CaseData(nu=0.05)
        cfg = NewtonConfig()
        state, trace = newton_solve(
            mesh, case, initial_state(mesh, bcs), cfg, bcs=bcs, linear_backend="direct"
        )
        tables = default_tables(mesh.dim)
        cond = condense_blocks(
            evaluate_chunked(mesh, tables, state, case), mesh.dim
        )
        dofmap = build_dofmap(mesh, bcs)
        _, pd = element_dofs(mesh, dofmap)
        rp = np.zeros(dofmap.n_total)
        np.add.at(rp, pd.reshape(-1), cond.r2.reshape(-1))
        free_p = dofmap.free_of[pd.reshape(-1)] >= 0
        norm_p = np.linalg.norm(rp[pd.reshape(-1)[free_p]])
        assert norm_p <= cfg.atol

    def test_paths_agree_every_iteration(self):
        mesh, bcs = cavity_2d(3)
        case = CaseData(nu=0.02)
        hopeless = dict(atol=1e-300, rtol=1e-300, divergence_factor=1e12)

        def run_n(path, n):
            cfg = NewtonConfig(max_newton=n, **hopeless)
            try:
                state, _ = newton_solve(
                    mesh, case, initial_state(mesh, bcs), cfg, path,
                    bcs=bcs, linear_backend="direct",
                )
            except NewtonError as exc:
                state = exc.state
            return state

        for n in (1, 2, 3, 4):
            sc = run_n("condensed", n)
            sm = run_n("monolithic", n)
            scale = max(1.0, np.max(np.abs(sm.v)))
            assert np.max(np.abs(sc.v - sm.v)) <= 1e-8 * scale
            assert np.max(np.abs(sc.p - sm.p)) <= 1e-8 * max(1.0, np.max(np.abs(sm.p)))
            assert np.max(np.abs(sc.beta - sm.beta)) <= 1e-8 * scale

    def test_gmres_and_direct_agree(self):
        mesh, bcs = cavity_2d(4)
        case = CaseData(nu=0.05)
        s_dir, _ = newton_solve(
            mesh, case, initial_state(mesh, bcs), bcs=bcs, linear_backend="direct"
        )
        s_gm, trace = newton_solve(
            mesh, case, initial_state(mesh, bcs), bcs=bcs, linear_backend="gmres"
        )
        assert trace.converged
        assert any(k > 0 for k in trace.linear_iters)
        assert np.max(np.abs(s_dir.v - s_gm.v)) < 1e-7

    def test_max_newton_exhaustion_carries_trace(self):
        mesh, bcs = cavity_2d(3)
        case = CaseData(nu=0.02)
        cfg = NewtonConfig(max_newton=2, atol=1e-300, rtol=1e-300, divergence_factor=1e12)
        with pytest.raises(NewtonError, match="no convergence in 2"):
            newton_solve(mesh, case, initial_state(mesh, bcs), cfg, bcs=bcs,
                         linear_backend="direct")
        try:
            newton_solve(mesh, case, initial_state(mesh, bcs), cfg, bcs=bcs,
                         linear_backend="direct")
        except NewtonError as exc:
            assert len(exc.trace.residual_norms) == 3
            assert len(exc.trace.wall_times) == 3
            assert not exc.trace.converged
            assert exc.state is not None

    def test_divergence_detected(self):
        # a rotational force at tiny viscosity makes the first Stokes
        # update O(1/nu), whose convection residual then explodes
        mesh, bcs = cavity_2d(4, lid=0.0)

        def swirl(x, t):
            f = np.zeros_like(x)
            f[..., 0] = x[..., 1]
            return f

        case = CaseData(nu=1e-6, body_force=swirl)
        cfg = NewtonConfig(divergence_factor=2.0)
        with pytest.raises(NewtonError, match="diverged"):
            newton_solve(mesh, case, initial_state(mesh, bcs), cfg, bcs=bcs,
                         linear_backend="direct")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            NewtonConfig(atol=0.0)
        with pytest.raises(ValueError):
            NewtonConfig(max_newton=0)


class TestTimestep:
    def test_marches_toward_steady_state(self):
        mesh, bcs = cavity_2d(4)
        case = CaseData(nu=0.05)
        states, traces = timestep_drive(
            mesh, case, initial_state(mesh, bcs), dt=0.25, n_steps=4,
            bcs=bcs, linear_backend="direct",
        )
        assert len(states) == 4 and len(traces) == 4
        assert all(t.converged for t in traces)
        d1 = np.linalg.norm(states[1].v - states[0].v)
        d3 = np.linalg.norm(states[3].v - states[2].v)
        assert d3 < d1  # transient decays toward the steady solution

    def test_huge_dt_reproduces_steady_newton_sequence(self):
        mesh, bcs = cavity_2d(4)
        steady = CaseData(nu=0.02)
        s_steady, tr_steady = newton_solve(
            mesh, steady, initial_state(mesh, bcs), bcs=bcs, linear_backend="direct"
        )
        states, traces = timestep_drive(
            mesh, steady, initial_state(mesh, bcs), dt=1e12, n_steps=1,
            bcs=bcs, linear_backend="direct",
        )
        tr = traces[0]
        assert len(tr.residual_norms) == len(tr_steady.residual_norms)
        r0 = tr_steady.residual_norms[0]
        for a, b in zip(tr_steady.residual_norms, tr.residual_norms):
            assert abs(a - b) <= 1e-9 * r0
        assert np.max(np.abs(states[0].v - s_steady.v)) <= 1e-9

    def test_failure_carries_step_index(self):
        mesh, bcs = cavity_2d(3, lid=0.0)

        def late_blast(x, t):
            f = np.zeros_like(x)
            if t > 0.15:  # rotational force switching on at step 2
                f[..., 0] = 1e6 * x[..., 1]
            return f

        case = CaseData(nu=1e-3, body_force=late_blast)
        cfg = NewtonConfig(max_newton=1)
        with pytest.raises(TimeStepError) as err:
            timestep_drive(mesh, case, initial_state(mesh, bcs), dt=0.1, n_steps=3,
                           cfg=cfg, bcs=bcs, linear_backend="direct")
        assert err.value.step == 2
        assert err.value.trace.residual_norms  # trace recorded for the failure

    def test_argument_validation(self):
        mesh, bcs = cavity_2d(3)
        case = CaseData(nu=1.0)
        with pytest.raises(ValueError):
            timestep_drive(mesh, case, initial_state(mesh, bcs), dt=0.0, n_steps=1, bcs=bcs)
        with pytest.raises(ValueError):
            timestep_drive(mesh, case, initial_state(mesh, bcs), dt=0.1, n_steps=0, bcs=bcs)


class TestContinuation:
    def test_sweep_converges_with_warm_starts(self):
        mesh, bcs = cavity_2d(4)
        result = continue_reynolds(
            mesh, lambda re: CaseData(nu=1.0 / re), [50.0, 100.0],
            bcs=bcs, linear_backend="direct",
        )
        assert isinstance(result, ContinuationResult)
        assert result.failed is None
        assert result.converged == [50.0, 100.0]
        assert set(result.traces) == {50.0, 100.0}
        assert all(t.converged for t in result.traces.values())
        assert np.max(np.abs(result.state.v)) > 0.1

    def test_failure_is_reported_not_raised(self):
        mesh, bcs = cavity_2d(4)
        result = continue_reynolds(
            mesh, lambda re: CaseData(nu=1.0 / re), [50.0, 1e9],
            bcs=bcs, linear_backend="direct",
        )
        assert result.failed == 1e9
        assert result.converged == [50.0]
        assert result.failure_reason
        # returned state is the last converged one
        ref, _ = newton_solve(
            mesh, CaseData(nu=1 / 50.0), initial_state(mesh, bcs),
            bcs=bcs, linear_backend="direct",
        )
        np.testing.assert_allclose(result.state.v, ref.v, atol=1e-12)

    def test_schedule_validation(self):
        mesh, bcs = cavity_2d(3)
        base = lambda re: CaseData(nu=1.0 / re)
        with pytest.raises(ValueError, match="strictly increasing"):
            continue_reynolds(mesh, base, [100.0, 100.0], bcs=bcs)
        with pytest.raises(ValueError, match="empty"):
            continue_reynolds(mesh, base, [], bcs=bcs)
