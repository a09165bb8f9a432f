"""Command-line front end.

Subcommands: mesh, solve, transient, continue, verify, perf, serve.
Exit codes: 0 success, 1 solver or verification failure (the tail of
the convergence trace is printed), 2 argument or case errors.  The
VMSFLOW_WORKERS environment variable sets the default worker count;
an explicit --workers flag wins.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .assembly import AssemblyError
from .cases import CaseError, builtin_case, load_case_file
from .linalg import LinearSolveError
from .mesh import MeshError
from .output import OutputError
from .runs import (
    RunOptions,
    run_continuation,
    run_mesh,
    run_perf,
    run_solve,
    run_transient,
    run_verify,
)
from .solver import NewtonError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SOLVER = 1
EXIT_USAGE = 2


def _workers_default() -> int:
    env = os.environ.get("VMSFLOW_WORKERS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        logger.warning("ignoring non-integer VMSFLOW_WORKERS=%r", env)
        return 1


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--path", choices=["condensed", "monolithic"], default="condensed",
                   help="solve path (default condensed)")
    p.add_argument("--backend", choices=["gmres", "direct"], default=None,
                   help="linear solver (default: gmres condensed, direct monolithic)")
    p.add_argument("--atol", type=float, default=1e-10, help="Newton absolute tolerance")
    p.add_argument("--rtol", type=float, default=1e-8, help="Newton relative tolerance")
    p.add_argument("--max-newton", type=int, default=25, help="Newton iteration cap")
    p.add_argument("--workers", type=int, default=None,
                   help="element-evaluation threads (default: VMSFLOW_WORKERS or 1)")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def _add_case_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", default=None,
                   help="builtin case: mms2d, mms3d, lid3d, jet3d")
    p.add_argument("--case-file", type=Path, default=None,
                   help="case definition file (overrides --case)")
    p.add_argument("--div", type=int, default=None, help="mesh divisions per side")
    p.add_argument("--re", type=float, default=None, help="Reynolds number")
    p.add_argument("--nu", type=float, default=None, help="kinematic viscosity")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="vmsflow",
        description="Two-level finite-element solver for incompressible flow",
    )
    top.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = top.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mesh", help="generate, validate, or convert meshes")
    m.add_argument("--box", type=int, choices=[2, 3], default=None,
                   help="generate a unit-box mesh of this dimension")
    m.add_argument("--div", type=int, default=4, help="divisions per side")
    m.add_argument("--in", dest="in_path", type=Path, default=None,
                   help="read an existing mesh instead of generating")
    m.add_argument("--format", choices=["native", "gmsh-ascii-v2"], default="native",
                   help="input format for --in")
    m.add_argument("--out", type=Path, default=None, help="write the mesh here")
    m.add_argument("--validate", action="store_true", help="only validate")

    s = sub.add_parser("solve", help="steady Newton solve")
    _add_case_flags(s)
    _add_solver_flags(s)

    t = sub.add_parser("transient", help="backward-Euler time march")
    _add_case_flags(t)
    t.add_argument("--dt", type=float, default=None, help="time step")
    t.add_argument("--steps", type=int, default=None, help="number of steps")
    _add_solver_flags(t)

    c = sub.add_parser("continue", help="Reynolds continuation sweep")
    c.add_argument("--case", default="lid3d", help="builtin case name")
    c.add_argument("--div", type=int, default=10, help="mesh divisions per side")
    c.add_argument("--schedule", required=True,
                   help="comma-separated increasing Reynolds numbers")
    _add_solver_flags(c)

    v = sub.add_parser("verify", help="convergence, tangent, and condensation gates")
    _add_solver_flags(v)

    p = sub.add_parser("perf", help="thread-scaling study with efficiency report")
    _add_case_flags(p)
    p.add_argument("--workers-list", default="1,2,4",
                   help="comma-separated worker counts (default 1,2,4)")
    p.add_argument("--repeats", type=int, default=3, help="timing repeats, best kept")
    _add_solver_flags(p)

    srv = sub.add_parser("serve", help="start the HTTP service")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    return top


def _options(args) -> RunOptions:
    workers = args.workers if args.workers is not None else _workers_default()
    if workers < 1:
        raise CaseError(f"worker count must be positive, got {workers}")
    return RunOptions(
        path=args.path,
        linear_backend=args.backend,
        atol=args.atol,
        rtol=args.rtol,
        max_newton=args.max_newton,
        workers=workers,
    )


def _resolve_case(args):
    if args.case_file is not None:
        return load_case_file(args.case_file)
    if args.case is None:
        raise CaseError("either --case or --case-file is required")
    overrides = {}
    if args.div is not None:
        overrides["divisions"] = args.div
    if args.re is not None:
        overrides["re"] = args.re
    if args.nu is not None:
        overrides["nu"] = args.nu
    return builtin_case(args.case, **overrides)


def _out_dir(args, name: str) -> Path:
    return args.out if args.out is not None else Path("runs") / name


def _print_trace_tail(trace, n=5) -> None:
    print("convergence trace (last entries):", file=sys.stderr)
    start = max(0, len(trace.residual_norms) - n)
    for i in range(start, len(trace.residual_norms)):
        print(
            f"  iter {i}: residual {trace.residual_norms[i]:.6e}, "
            f"linear iters {trace.linear_iters[i]}",
            file=sys.stderr,
        )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except (CaseError, MeshError, AssemblyError, OutputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NewtonError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        _print_trace_tail(exc.trace)
        return EXIT_SOLVER
    except LinearSolveError as exc:
        print(f"linear solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _dispatch(args) -> int:
    if args.command == "mesh":
        if args.box is None and args.in_path is None:
            raise CaseError("mesh needs --box or --in")
        mesh, violations = run_mesh(
            args.box, args.div, args.out,
            validate_only=args.validate, in_path=args.in_path, fmt=args.format,
        )
        if violations:
            return EXIT_SOLVER
        print(
            f"mesh: dim={mesh.dim} nodes={mesh.n_nodes} elements={mesh.n_elements} "
            f"faces={mesh.n_faces}"
        )
        if args.out is not None and not args.validate:
            print(f"wrote {args.out}")
        return EXIT_OK

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    opts = _options(args)

    if args.command == "solve":
        case = _resolve_case(args)
        result = run_solve(case, opts, _out_dir(args, f"solve-{case.name}"))
        tr = result.traces[0]
        print(
            f"{case.name}: converged in {tr.iterations} Newton iterations, "
            f"residual {tr.residual_norms[-1]:.3e}"
        )
        print(f"artifacts in {result.out_dir}")
        return EXIT_OK

    if args.command == "transient":
        case = _resolve_case(args)
        result = run_transient(
            case, opts, _out_dir(args, f"transient-{case.name}"),
            dt=args.dt, n_steps=args.steps,
        )
        print(
            f"{case.name}: {int(result.metrics['steps'])} steps, "
            f"{int(result.metrics['total_newton_iterations'])} Newton iterations total"
        )
        print(f"artifacts in {result.out_dir}")
        return EXIT_OK

    if args.command == "continue":
        schedule = [float(x) for x in args.schedule.split(",") if x.strip()]
        result = run_continuation(
            args.case, args.div, schedule, opts, _out_dir(args, f"continue-{args.case}")
        )
        last = result.metrics["last_converged_re"]
        print(f"last converged Re: {last:g}")
        print(f"artifacts in {result.out_dir}")
        if not result.ok:
            print("continuation did not complete the schedule", file=sys.stderr)
            return EXIT_SOLVER
        return EXIT_OK

    if args.command == "verify":
        result = run_verify(opts, _out_dir(args, "verify"))
        print((result.out_dir / "verify.txt").read_text(), end="")
        return EXIT_OK if result.ok else EXIT_SOLVER

    if args.command == "perf":
        case = _resolve_case(args)
        counts = [int(x) for x in args.workers_list.split(",") if x.strip()]
        result = run_perf(
            case, opts, _out_dir(args, f"perf-{case.name}"),
            worker_counts=counts, repeats=args.repeats,
        )
        print((result.out_dir / "efficiency.txt").read_text(), end="")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
