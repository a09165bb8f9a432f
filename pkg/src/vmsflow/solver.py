"""Newton iteration, backward-Euler time stepping, and Reynolds continuation.

Each Newton iteration evaluates element systems at the current state,
condenses the fine scales, assembles the coarse system over free dofs,
solves for the coarse increments, recovers the fine increments per
element, and applies full (undamped) updates.  Convergence is measured
on the Euclidean norm of the condensed residual (R_1, R_2) over free
dofs for both solve paths, so condensed and monolithic iterates are
directly comparable.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import (
    BoundaryConditions,
    DofMap,
    apply_dirichlet,
    assemble,
    build_dofmap,
    element_dofs,
    evaluate_chunked,
    free_residual_norm,
)
from .basis import BasisTables
from .condense import condense_blocks, recover_fine
from .kernels import CaseData, FlowState, default_tables
from .linalg import KrylovConfig, LinearSolveError, gmres_solve
from .mesh import Mesh

logger = logging.getLogger(__name__)


@dataclass
class NewtonConfig:
    """Newton settings; full steps, no line search."""

    atol: float = 1e-10
    rtol: float = 1e-8
    max_newton: int = 25
    divergence_factor: float = 1e4

    def __post_init__(self):
        if min(self.atol, self.rtol) <= 0 or self.max_newton < 1:
            raise ValueError("tolerances must be positive and max_newton >= 1")


@dataclass
class ConvergenceTrace:
    """Per-iteration history; recorded for failures as well."""

    residual_norms: list[float] = field(default_factory=list)
    linear_iters: list[int] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    converged: bool = False
    reason: str = ""

    @property
    def iterations(self) -> int:
        """Number of Newton updates taken (residual entries minus one)."""
        return max(0, len(self.residual_norms) - 1)


class NewtonError(RuntimeError):
    """Newton failure; carries the trace and the last iterate."""

    def __init__(self, message: str, trace: ConvergenceTrace, state: FlowState | None = None):
        super().__init__(message)
        self.trace = trace
        self.state = state


class TimeStepError(NewtonError):
    """Newton failure inside a time step; carries the step index."""

    def __init__(self, message: str, trace: ConvergenceTrace, state, step: int):
        super().__init__(message, trace, state)
        self.step = step


def newton_solve(
    mesh: Mesh,
    case: CaseData,
    state0: FlowState,
    cfg: NewtonConfig | None = None,
    path: str = "condensed",
    *,
    bcs: BoundaryConditions,
    tables: BasisTables | None = None,
    dofmap: DofMap | None = None,
    krylov: KrylovConfig | None = None,
    linear_backend: str | None = None,
    workers: int = 1,
    timings=None,
) -> tuple[FlowState, ConvergenceTrace]:
    """Solve the current (steady or one-step transient) problem by Newton.

    ``state0`` must already satisfy the Dirichlet data; it is not
    modified.  ``linear_backend`` is "gmres" or "direct" (sparse LU);
    the default is gmres on the condensed path and direct on the
    monolithic path, whose saddle structure defeats ILU(0).

    Returns (state, trace); raises NewtonError (carrying the trace and
    last iterate) on divergence, iteration exhaustion, or linear-solve
    failure.
    """
    cfg = cfg or NewtonConfig()
    tables = tables or default_tables(mesh.dim)
    dofmap = dofmap or build_dofmap(mesh, bcs, path)
    if linear_backend is None:
        linear_backend = "direct" if path == "monolithic" else "gmres"
    krylov = krylov or KrylovConfig()
    dim = mesh.dim
    state = state0.copy()
    trace = ConvergenceTrace()
    vd, pd = element_dofs(mesh, dofmap)
    r_first = None
    r_min = np.inf

    for it in range(cfg.max_newton + 1):
        t_iter = time.perf_counter()
        blocks = evaluate_chunked(mesh, tables, state, case, workers=workers)
        if timings is not None:
            timings.kernel += time.perf_counter() - t_iter
        t0 = time.perf_counter()
        cond = condense_blocks(blocks, dim)
        if timings is not None:
            timings.condense += time.perf_counter() - t0
        rk = free_residual_norm(dofmap, cond, mesh)
        trace.residual_norms.append(rk)
        if r_first is None:
            r_first = rk
        if rk <= cfg.atol or (r_first > 0 and rk / r_first <= cfg.rtol):
            trace.linear_iters.append(0)
            trace.wall_times.append(time.perf_counter() - t_iter)
            trace.converged = True
            trace.reason = "converged"
            return state, trace

        if not np.isfinite(rk) or rk > cfg.divergence_factor * min(r_min, r_first):
            trace.linear_iters.append(0)
            trace.wall_times.append(time.perf_counter() - t_iter)
            trace.reason = f"diverged at iteration {it} (residual {rk:.3e})"
            raise NewtonError(trace.reason, trace, state)
        r_min = min(r_min, rk)
        if it == cfg.max_newton:
            trace.linear_iters.append(0)
            trace.wall_times.append(time.perf_counter() - t_iter)
            trace.reason = (
                f"no convergence in {cfg.max_newton} iterations "
                f"(residual {rk:.3e}, target {cfg.atol:.1e})"
            )
            raise NewtonError(trace.reason, trace, state)

        t0 = time.perf_counter()
        systems = cond if dofmap.path == "condensed" else blocks
        gs = assemble(mesh, dofmap, systems)
        if timings is not None:
            timings.assemble += time.perf_counter() - t0

        t0 = time.perf_counter()
        try:
            if linear_backend == "direct":
                du = spla.spsolve(gs.a.tocsc(), gs.rhs)
                lin_iters = 0
            else:
                du, lin_iters, _res = gmres_solve(gs.a, gs.rhs, krylov)
        except LinearSolveError as exc:
            trace.linear_iters.append(getattr(exc, "iterations", 0))
            trace.wall_times.append(time.perf_counter() - t_iter)
            trace.reason = f"linear solve failed at iteration {it}: {exc}"
            raise NewtonError(trace.reason, trace, state) from exc
        if timings is not None:
            timings.solve += time.perf_counter() - t0

        dfull = np.zeros(dofmap.n_total)
        dfull[dofmap.free_dofs] = du
        state.v += dfull[: dofmap.n_coarse].reshape(mesh.n_nodes, dim + 1)[:, :dim]
        state.p += dfull[: dofmap.n_coarse].reshape(mesh.n_nodes, dim + 1)[:, dim]
        if dofmap.path == "condensed":
            state.beta += recover_fine(cond, dfull[vd], dfull[pd])
        else:
            state.beta += dfull[dofmap.n_coarse :].reshape(mesh.n_elements, dim)
        trace.linear_iters.append(lin_iters)
        trace.wall_times.append(time.perf_counter() - t_iter)

    raise AssertionError("unreachable")  # pragma: no cover


def timestep_drive(
    mesh: Mesh,
    case: CaseData,
    state0: FlowState,
    dt: float,
    n_steps: int,
    cfg: NewtonConfig | None = None,
    *,
    bcs: BoundaryConditions,
    path: str = "condensed",
    t0: float = 0.0,
    on_step=None,
    **kwargs,
) -> tuple[list[FlowState], list[ConvergenceTrace]]:
    """March ``n_steps`` backward-Euler steps of size ``dt``.

    The fields of ``case`` at step n feed the transient terms of step
    n+1.  Returns the per-step states and traces; a Newton failure
    raises TimeStepError with the failing step index.
    """
    if dt <= 0 or n_steps < 1:
        raise ValueError("dt > 0 and n_steps >= 1 required")
    state = state0.copy()
    states: list[FlowState] = []
    traces: list[ConvergenceTrace] = []
    for n in range(n_steps):
        t_new = t0 + (n + 1) * dt
        step_case = replace(case.advanced(state, t_new), dt=dt)
        apply_dirichlet(state, bcs, t_new)
        try:
            state, trace = newton_solve(
                mesh, step_case, state, cfg, path, bcs=bcs, **kwargs
            )
        except NewtonError as exc:
            raise TimeStepError(
                f"time step {n + 1} (t={t_new:g}) failed: {exc}", exc.trace, exc.state, n + 1
            ) from exc
        states.append(state.copy())
        traces.append(trace)
        if on_step is not None:
            on_step(n + 1, t_new, state, trace)
    return states, traces


@dataclass
class ContinuationResult:
    """Outcome of a Reynolds continuation sweep."""

    state: FlowState
    traces: dict[float, ConvergenceTrace]
    converged: list[float]
    failed: float | None = None
    failure_reason: str = ""


def continue_reynolds(
    mesh: Mesh,
    casebase,
    schedule: list[float],
    cfg: NewtonConfig | None = None,
    *,
    bcs: BoundaryConditions,
    path: str = "condensed",
    state0: FlowState | None = None,
    **kwargs,
) -> ContinuationResult:
    """Solve a strictly increasing Reynolds schedule with warm starts.

    ``casebase`` maps a Reynolds number to CaseData.  A failure is a
    reported outcome, not an exception: the result carries the last
    converged state and the Re that failed.
    """
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"schedule must be strictly increasing, got {schedule}")
    if not schedule:
        raise ValueError("empty continuation schedule")
    if state0 is None:
        state = FlowState.zeros(mesh)
        apply_dirichlet(state, bcs)
    else:
        state = state0.copy()
    traces: dict[float, ConvergenceTrace] = {}
    converged: list[float] = []
    for re in schedule:
        case = casebase(re)
        try:
            state, trace = newton_solve(mesh, case, state, cfg, path, bcs=bcs, **kwargs)
        except NewtonError as exc:
            traces[re] = exc.trace
            logger.warning("continuation stopped at Re=%g: %s", re, exc)
            return ContinuationResult(
                state, traces, converged, failed=re, failure_reason=str(exc)
            )
        traces[re] = trace
        converged.append(re)
        logger.info(
            "Re=%g converged in %d Newton iterations", re, trace.iterations
        )
    return ContinuationResult(state, traces, converged)
