"""Run orchestration shared by the command line and the HTTP service.

Every run writes a manifest echoing the fully resolved configuration
(defaults included) next to its artifacts, so any output directory is
reproducible from the manifest alone.  Artifact file names are fixed:
solution.vtk, centerline.csv, trace.csv, steps.csv, continuation.csv,
perf.csv, efficiency.txt, verify.txt, manifest.txt.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import AssemblyTimings, dof_counts
from .cases import (
    CaseDefinition,
    builtin_case,
    case_body_force_cavity,
    l2_errors,
    observed_orders,
)
from .kernels import (
    CaseData,
    ElementState,
    default_tables,
    element_residual,
    element_tangent,
)
from .linalg import KrylovConfig
from .mesh import generate_box_mesh, load_mesh, validate, write_native
from .output import (
    PerfRecord,
    extract_centerline,
    format_efficiency,
    surface_flux,
    write_centerline_csv,
    write_perf_csv,
    write_vtk,
)
from .solver import (
    ConvergenceTrace,
    NewtonConfig,
    continue_reynolds,
    newton_solve,
    timestep_drive,
)

logger = logging.getLogger(__name__)


@dataclass
class RunOptions:
    """Solver and execution knobs shared by all run kinds."""

    path: str = "condensed"
    linear_backend: str | None = None
    atol: float = 1e-10
    rtol: float = 1e-8
    max_newton: int = 25
    krylov_rtol: float = 1e-12
    krylov_restart: int = 50
    krylov_max_iters: int = 500
    workers: int = 1

    def newton_config(self) -> NewtonConfig:
        return NewtonConfig(atol=self.atol, rtol=self.rtol, max_newton=self.max_newton)

    def krylov_config(self) -> KrylovConfig:
        return KrylovConfig(
            rtol=self.krylov_rtol,
            restart=self.krylov_restart,
            max_iters=self.krylov_max_iters,
        )


@dataclass
class RunResult:
    """What a run produced: artifact paths plus headline metrics."""

    out_dir: Path
    artifacts: dict[str, Path] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)
    traces: list[ConvergenceTrace] = field(default_factory=list)
    ok: bool = True
    state: object = None  # final FlowState where applicable
    record: object = None  # PerfRecord for perf runs


def write_manifest(path: Path, entries: dict) -> Path:
    """Key-value manifest, one ``key = value`` line, sorted by key."""
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    path.write_text("\n".join(lines) + "\n")
    return path


def _manifest_entries(case: CaseDefinition, opts: RunOptions, extra: dict) -> dict:
    coarse, fine = dof_counts(case.mesh)
    entries = {
        "version": __version__,
        "case": case.name,
        "nu": case.nu,
        "dim": case.mesh.dim,
        "nodes": case.mesh.n_nodes,
        "elements": case.mesh.n_elements,
        "coarse_dofs": coarse,
        "fine_dofs": fine,
        "fine_dof_fraction": fine / (coarse + fine),
        "pin": case.pin,
        "traction_tags": ",".join(case.traction_tags) or "-",
    }
    entries.update({f"opt_{k}": v for k, v in asdict(opts).items()})
    entries.update(extra)
    return entries


def _write_trace_csv(path: Path, traces: list[ConvergenceTrace]) -> Path:
    # No wall-clock column: CSV diagnostics are bit-identical across
    # repeated single-worker runs; timings go to the manifest instead.
    lines = ["step,iteration,residual,linear_iters"]
    for s, tr in enumerate(traces):
        for i, (r, li) in enumerate(zip(tr.residual_norms, tr.linear_iters)):
            lines.append(f"{s},{i},{r:.17g},{li}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _export_state(case, state, out_dir, result):
    result.artifacts["solution.vtk"] = write_vtk(
        case.mesh, state, out_dir / "solution.vtk"
    )
    axis = case.diagnostics.get("centerline_axis")
    if axis:
        table = extract_centerline(
            case.mesh, state, axis, case.diagnostics["centerline_through"]
        )
        result.artifacts["centerline.csv"] = write_centerline_csv(
            table, out_dir / "centerline.csv"
        )
    for tag in sorted(case.mesh.tag_names):
        result.metrics[f"flux_{tag}"] = surface_flux(case.mesh, state, tag)
    result.metrics["max_velocity"] = float(np.max(np.abs(state.v)))
    result.metrics["max_fine_velocity"] = float(np.max(np.abs(state.beta)))
    result.metrics["min_pressure"] = float(np.min(state.p))
    result.metrics["max_pressure"] = float(np.max(state.p))


def _finish(case, opts, out_dir, result, extra):
    entries = _manifest_entries(case, opts, extra)
    entries.update({f"metric_{k}": f"{v:.17g}" for k, v in result.metrics.items()})
    result.artifacts["manifest.txt"] = write_manifest(out_dir / "manifest.txt", entries)
    return result


def run_solve(case: CaseDefinition, opts: RunOptions, out_dir) -> RunResult:
    """Steady solve: VTK + centerline + trace + manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(out_dir)
    bcs = case.boundary_conditions()
    timings = AssemblyTimings()
    t0 = time.perf_counter()
    state, trace = newton_solve(
        case.mesh,
        case.case_data(),
        case.initial_state(bcs),
        opts.newton_config(),
        opts.path,
        bcs=bcs,
        krylov=opts.krylov_config(),
        linear_backend=opts.linear_backend,
        workers=opts.workers,
        timings=timings,
    )
    wall = time.perf_counter() - t0
    result.traces = [trace]
    result.metrics["newton_iterations"] = trace.iterations
    result.metrics["final_residual"] = trace.residual_norms[-1]
    result.metrics["wall_s"] = wall
    result.metrics.update({f"{k}_s": v for k, v in timings.as_dict().items()})
    _export_state(case, state, out_dir, result)
    result.artifacts["trace.csv"] = _write_trace_csv(out_dir / "trace.csv", [trace])
    result.state = state
    return _finish(case, opts, out_dir, result, {"command": "solve"})


def run_transient(
    case: CaseDefinition, opts: RunOptions, out_dir, dt=None, n_steps=None
) -> RunResult:
    """Backward-Euler march: per-step summary, final-state exports."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dt = dt if dt is not None else case.dt
    n_steps = n_steps if n_steps is not None else case.n_steps
    if dt is None or n_steps is None:
        raise ValueError(f"case {case.name!r} has no transient parameters")
    result = RunResult(out_dir)
    bcs = case.boundary_conditions()
    t0 = time.perf_counter()
    states, traces = timestep_drive(
        case.mesh,
        case.case_data(),
        case.initial_state(bcs),
        dt,
        n_steps,
        opts.newton_config(),
        bcs=bcs,
        path=opts.path,
        krylov=opts.krylov_config(),
        linear_backend=opts.linear_backend,
        workers=opts.workers,
    )
    result.metrics["wall_s"] = time.perf_counter() - t0
    result.traces = traces
    lines = ["step,t,iterations,final_residual,max_velocity"]
    for n, (st, tr) in enumerate(zip(states, traces), start=1):
        lines.append(
            f"{n},{n * dt:.17g},{tr.iterations},{tr.residual_norms[-1]:.17g},"
            f"{np.max(np.abs(st.v)):.17g}"
        )
    (out_dir / "steps.csv").write_text("\n".join(lines) + "\n")
    result.artifacts["steps.csv"] = out_dir / "steps.csv"
    result.artifacts["trace.csv"] = _write_trace_csv(out_dir / "trace.csv", traces)
    result.metrics["steps"] = n_steps
    result.metrics["total_newton_iterations"] = sum(t.iterations for t in traces)
    _export_state(case, states[-1], out_dir, result)
    result.state = states[-1]
    return _finish(
        case, opts, out_dir, result, {"command": "transient", "dt": dt, "n_steps": n_steps}
    )


def run_continuation(
    case_name: str,
    divisions: int,
    schedule: list[float],
    opts: RunOptions,
    out_dir,
) -> RunResult:
    """Reynolds sweep over a lid-cavity-style case; failure is reported."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = builtin_case(case_name, divisions=divisions, re=schedule[0])
    bcs = first.boundary_conditions()

    def base(re):
        return builtin_case(case_name, divisions=divisions, re=re).case_data()

    result = RunResult(out_dir)
    t0 = time.perf_counter()
    outcome = continue_reynolds(
        first.mesh,
        base,
        schedule,
        opts.newton_config(),
        bcs=bcs,
        path=opts.path,
        krylov=opts.krylov_config(),
        linear_backend=opts.linear_backend,
        workers=opts.workers,
    )
    result.metrics["wall_s"] = time.perf_counter() - t0
    lines = ["re,converged,iterations,final_residual"]
    for re in schedule:
        tr = outcome.traces.get(re)
        if tr is None:
            break
        lines.append(
            f"{re:.17g},{int(tr.converged)},{tr.iterations},{tr.residual_norms[-1]:.17g}"
        )
    (out_dir / "continuation.csv").write_text("\n".join(lines) + "\n")
    result.artifacts["continuation.csv"] = out_dir / "continuation.csv"
    result.traces = [outcome.traces[re] for re in outcome.converged]
    result.ok = outcome.failed is None
    result.metrics["last_converged_re"] = (
        outcome.converged[-1] if outcome.converged else float("nan")
    )
    _export_state(first, outcome.state, out_dir, result)
    result.state = outcome.state
    extra = {
        "command": "continue",
        "schedule": ",".join(f"{r:g}" for r in schedule),
        "failed_re": f"{outcome.failed:g}" if outcome.failed is not None else "-",
        "failure_reason": outcome.failure_reason or "-",
    }
    return _finish(first, opts, out_dir, result, extra)


# ---------------------------------------------------------------------------
# verify: the three fast correctness gates


def _fd_tangent_check(rng, dim=3, n_states=10, step=1e-6) -> float:
    """Max relative error of the element tangent against finite differences."""
    mesh = generate_box_mesh(dim, 1)
    tables = default_tables(dim)
    nen = dim + 1
    case = CaseData(nu=0.7)
    worst = 0.0
    for _ in range(n_states):
        st = ElementState(
            rng.standard_normal((nen, dim)),
            rng.standard_normal(nen),
            rng.standard_normal(dim),
        )
        sys = element_tangent(mesh, 0, tables, st, case)
        k = np.block(
            [
                [sys.dRc_dv, sys.dRc_dp, sys.dRc_db],
                [sys.dRp_dv, sys.dRp_dp, sys.dRp_db],
                [sys.dRf_dv, sys.dRf_dp, sys.dRf_db],
            ]
        )

        def unpack(q):
            return ElementState(
                q[: nen * dim].reshape(nen, dim),
                q[nen * dim : nen * dim + nen],
                q[nen * dim + nen :],
            )

        def residual(q):
            rc, rp, rf = element_residual(mesh, 0, tables, unpack(q), case)
            return np.concatenate([rc, rp, rf])

        q0 = np.concatenate([st.v.ravel(), st.p, st.beta])
        fd = np.empty_like(k)
        for j in range(q0.size):
            h = step * max(1.0, abs(q0[j]))
            qp, qm = q0.copy(), q0.copy()
            qp[j] += h
            qm[j] -= h
            fd[:, j] = (residual(qp) - residual(qm)) / (2 * h)
        scale = max(1.0, np.max(np.abs(fd)))
        worst = max(worst, float(np.max(np.abs(k - fd)) / scale))
    return worst


def _condensation_check(divisions=2) -> float:
    """Max difference between condensed and monolithic Newton updates."""
    from .assembly import apply_dirichlet, resolve_bcs
    from .kernels import FlowState

    mesh = generate_box_mesh(3, divisions)
    walls = ["xmin", "xmax", "ymin", "ymax", "zmin"]
    zero = (0.0, 0.0, 0.0)
    entries = [(t, zero) for t in walls] + [("zmax", (1.0, 0.0, 0.0))]
    bcs = resolve_bcs(mesh, dirichlet=entries, pin=(0, 0.0))
    case = CaseData(nu=0.05)
    cfg = NewtonConfig(max_newton=3, atol=1e-300, rtol=1e-300, divergence_factor=1e12)

    def run(path):
        from .solver import NewtonError

        state0 = apply_dirichlet(FlowState.zeros(mesh), bcs)
        try:
            state, _ = newton_solve(
                mesh, case, state0, cfg, path, bcs=bcs, linear_backend="direct"
            )
        except NewtonError as exc:
            state = exc.state
        return state

    sc, sm = run("condensed"), run("monolithic")
    return float(
        max(
            np.max(np.abs(sc.v - sm.v)),
            np.max(np.abs(sc.p - sm.p)),
            np.max(np.abs(sc.beta - sm.beta)),
        )
    )


def run_verify(opts: RunOptions, out_dir) -> RunResult:
    """Aggregate the convergence, tangent, and condensation gates."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(out_dir)
    rng = np.random.default_rng(20240831)
    report = []

    errs_v, errs_p, hs = [], [], []
    for div in (4, 8, 16):
        case = case_body_force_cavity(2, div, nu=0.1)
        bcs = case.boundary_conditions()
        state, _ = newton_solve(
            case.mesh,
            case.case_data(),
            case.initial_state(bcs),
            opts.newton_config(),
            bcs=bcs,
            linear_backend="direct",
            workers=opts.workers,
        )
        ev, ep = l2_errors(case, state)
        errs_v.append(ev)
        errs_p.append(ep)
        hs.append(1.0 / div)
    ov = observed_orders(hs, errs_v)[-1]
    op = observed_orders(hs, errs_p)[-1]
    ok_mms = ov >= 1.9 and op >= 0.9
    report.append(
        f"manufactured-convergence: velocity order {ov:.3f} (>= 1.9), "
        f"pressure order {op:.3f} (>= 0.9) -> {'PASS' if ok_mms else 'FAIL'}"
    )
    result.metrics["order_velocity"] = ov
    result.metrics["order_pressure"] = op

    fd_err = _fd_tangent_check(rng)
    ok_fd = fd_err <= 1e-6
    report.append(
        f"tangent-vs-finite-difference: max relative error {fd_err:.3e} (<= 1e-6) "
        f"-> {'PASS' if ok_fd else 'FAIL'}"
    )
    result.metrics["tangent_fd_error"] = fd_err

    cond_err = _condensation_check()
    ok_cond = cond_err <= 1e-8
    report.append(
        f"condensation-equivalence: max iterate difference {cond_err:.3e} (<= 1e-8) "
        f"-> {'PASS' if ok_cond else 'FAIL'}"
    )
    result.metrics["condensation_error"] = cond_err

    result.ok = ok_mms and ok_fd and ok_cond
    report.append(f"verify: {'PASS' if result.ok else 'FAIL'}")
    (out_dir / "verify.txt").write_text("\n".join(report) + "\n")
    result.artifacts["verify.txt"] = out_dir / "verify.txt"
    write_manifest(
        out_dir / "manifest.txt",
        {"command": "verify", "version": __version__, "ok": result.ok,
         **{f"opt_{k}": v for k, v in asdict(opts).items()}},
    )
    result.artifacts["manifest.txt"] = out_dir / "manifest.txt"
    logger.info("\n".join(report))
    return result


# ---------------------------------------------------------------------------
# perf


def run_perf(
    case: CaseDefinition,
    opts: RunOptions,
    out_dir,
    worker_counts=(1, 2, 4),
    repeats: int = 3,
) -> RunResult:
    """Time the same solve across worker counts; best-of-``repeats`` each."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(out_dir)
    bcs = case.boundary_conditions()
    coarse, fine = dof_counts(case.mesh)
    times, phase_map = [], {}
    for p in worker_counts:
        best, best_phases = np.inf, None
        for _ in range(repeats):
            timings = AssemblyTimings()
            t0 = time.perf_counter()
            _, trace = newton_solve(
                case.mesh,
                case.case_data(),
                case.initial_state(bcs),
                opts.newton_config(),
                opts.path,
                bcs=bcs,
                krylov=opts.krylov_config(),
                linear_backend=opts.linear_backend,
                workers=p,
                timings=timings,
            )
            wall = time.perf_counter() - t0
            if wall < best:
                best, best_phases = wall, timings.as_dict()
        times.append(best)
        phase_map[p] = best_phases
        logger.info("workers=%d best wall %.3fs", p, best)
    rec = PerfRecord(
        f"{case.name} ({coarse + fine} dofs)", list(worker_counts), times, phase_map
    )
    result.artifacts["perf.csv"] = write_perf_csv(rec, out_dir / "perf.csv")
    text = format_efficiency(rec)
    (out_dir / "efficiency.txt").write_text(text + "\n")
    result.artifacts["efficiency.txt"] = out_dir / "efficiency.txt"
    for p, t in zip(worker_counts, times):
        result.metrics[f"wall_s_p{p}"] = t
    result.record = rec
    logger.info("\n%s", text)
    return _finish(case, opts, out_dir, result, {"command": "perf"})


# ---------------------------------------------------------------------------
# mesh utility


def run_mesh(args_dim, divisions, out_path, validate_only=False, in_path=None, fmt="native"):
    """Generate, validate, or convert a mesh; returns (mesh, violations)."""
    if in_path is not None:
        mesh = load_mesh(in_path, fmt)
    else:
        mesh = generate_box_mesh(args_dim, divisions)
    violations = validate(mesh)
    if violations:
        for v in violations:
            logger.error("mesh violation: %s", v.message)
        return mesh, violations
    if out_path is not None and not validate_only:
        write_native(mesh, out_path)
    return mesh, violations
