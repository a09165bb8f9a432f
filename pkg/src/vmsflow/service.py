"""HTTP service wrapping the run orchestration layer.

POST endpoints validate the request, start the run as a background job,
and answer 202 with a job id.  GET /jobs/{id} reports status, metrics,
and artifact names; GET /jobs/{id}/artifacts/{name} streams a produced
file.  Jobs and artifacts live under an output root on the server's
filesystem, one directory per job.
"""

from __future__ import annotations

import logging
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from . import __version__
from .cases import CaseError, builtin_case, builtin_catalog
from .runs import (
    RunOptions,
    RunResult,
    run_continuation,
    run_perf,
    run_solve,
    run_transient,
)

logger = logging.getLogger(__name__)


class SolverOptions(BaseModel):
    """Shared solver knobs; defaults match the command line."""

    path: Literal["condensed", "monolithic"] = "condensed"
    backend: Literal["gmres", "direct"] | None = None
    atol: float = Field(1e-10, gt=0)
    rtol: float = Field(1e-8, gt=0)
    max_newton: int = Field(25, ge=1)
    workers: int = Field(1, ge=1)

    def run_options(self) -> RunOptions:
        return RunOptions(
            path=self.path,
            linear_backend=self.backend,
            atol=self.atol,
            rtol=self.rtol,
            max_newton=self.max_newton,
            workers=self.workers,
        )


class SolveRequest(BaseModel):
    case: str = "lid3d"
    divisions: int | None = Field(None, ge=1)
    re: float | None = Field(None, gt=0)
    nu: float | None = Field(None, gt=0)
    options: SolverOptions = SolverOptions()

    def overrides(self) -> dict:
        out = {}
        if self.divisions is not None:
            out["divisions"] = self.divisions
        if self.re is not None:
            out["re"] = self.re
        if self.nu is not None:
            out["nu"] = self.nu
        return out


class TransientRequest(SolveRequest):
    case: str = "jet3d"
    dt: float | None = Field(None, gt=0)
    n_steps: int | None = Field(None, ge=1)


class ContinueRequest(BaseModel):
    case: str = "lid3d"
    divisions: int = Field(10, ge=1)
    schedule: list[float] = Field(min_length=1)
    options: SolverOptions = SolverOptions()


class PerfRequest(SolveRequest):
    worker_counts: list[int] = [1, 2, 4]
    repeats: int = Field(3, ge=1)


class JobSubmitted(BaseModel):
    id: str
    status: str


class JobStatus(BaseModel):
    id: str
    kind: str
    status: Literal["queued", "running", "done", "failed"]
    ok: bool | None = None
    error: str | None = None
    metrics: dict[str, float] = {}
    artifacts: list[str] = []


@dataclass
class _JobRecord:
    id: str
    kind: str
    status: str = "queued"
    ok: bool | None = None
    error: str | None = None
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def as_status(self) -> JobStatus:
        return JobStatus(
            id=self.id,
            kind=self.kind,
            status=self.status,
            ok=self.ok,
            error=self.error,
            metrics={k: float(v) for k, v in self.metrics.items()},
            artifacts=sorted(self.artifacts),
        )


def create_app(out_root: str | Path = "runs/service") -> FastAPI:
    """Build the application; ``out_root`` holds one directory per job."""
    out_root = Path(out_root)
    app = FastAPI(title="vmsflow", version=__version__)
    store: dict[str, _JobRecord] = {}
    lock = threading.Lock()

    def submit(
        kind: str, tasks: BackgroundTasks, fn: Callable[[Path], RunResult]
    ) -> JobSubmitted:
        job_id = uuid.uuid4().hex[:12]
        with lock:
            store[job_id] = _JobRecord(job_id, kind)
        tasks.add_task(execute, job_id, fn)
        return JobSubmitted(id=job_id, status="queued")

    def execute(job_id: str, fn: Callable[[Path], RunResult]) -> None:
        with lock:
            store[job_id].status = "running"
        try:
            result = fn(out_root / job_id)
        except Exception as exc:  # job isolation: report, never crash the app
            logger.exception("job %s failed", job_id)
            with lock:
                rec = store[job_id]
                rec.status = "failed"
                rec.error = f"{type(exc).__name__}: {exc}"
            return
        with lock:
            rec = store[job_id]
            rec.status = "done"
            rec.ok = result.ok
            rec.metrics = dict(result.metrics)
            rec.artifacts = {name: str(p) for name, p in result.artifacts.items()}

    def resolve(req: SolveRequest):
        try:
            return builtin_case(req.case, **req.overrides())
        except CaseError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/cases")
    def cases() -> dict:
        return builtin_catalog()

    @app.post("/solve", status_code=202)
    def solve(req: SolveRequest, tasks: BackgroundTasks) -> JobSubmitted:
        case = resolve(req)
        opts = req.options.run_options()
        return submit("solve", tasks, lambda d: run_solve(case, opts, d))

    @app.post("/transient", status_code=202)
    def transient(req: TransientRequest, tasks: BackgroundTasks) -> JobSubmitted:
        case = resolve(req)
        opts = req.options.run_options()
        dt, n_steps = req.dt, req.n_steps
        if (dt or case.dt) is None or (n_steps or case.n_steps) is None:
            raise HTTPException(
                status_code=400,
                detail=f"case {case.name!r} needs dt and n_steps",
            )
        return submit(
            "transient",
            tasks,
            lambda d: run_transient(case, opts, d, dt=dt, n_steps=n_steps),
        )

    @app.post("/continue", status_code=202)
    def continuation(req: ContinueRequest, tasks: BackgroundTasks) -> JobSubmitted:
        if sorted(req.schedule) != req.schedule or len(set(req.schedule)) != len(
            req.schedule
        ):
            raise HTTPException(
                status_code=400, detail="schedule must be strictly increasing"
            )
        try:  # fail fast on unknown cases before queueing
            builtin_case(req.case, divisions=req.divisions, re=req.schedule[0])
        except CaseError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        opts = req.options.run_options()
        return submit(
            "continue",
            tasks,
            lambda d: run_continuation(req.case, req.divisions, req.schedule, opts, d),
        )

    @app.post("/perf", status_code=202)
    def perf(req: PerfRequest, tasks: BackgroundTasks) -> JobSubmitted:
        case = resolve(req)
        opts = req.options.run_options()
        return submit(
            "perf",
            tasks,
            lambda d: run_perf(
                case, opts, d, worker_counts=req.worker_counts, repeats=req.repeats
            ),
        )

    @app.get("/jobs")
    def jobs() -> list[JobStatus]:
        with lock:
            return [rec.as_status() for rec in store.values()]

    @app.get("/jobs/{job_id}")
    def job(job_id: str) -> JobStatus:
        with lock:
            rec = store.get(job_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id!r}")
        return rec.as_status()

    @app.get("/jobs/{job_id}/artifacts/{name}")
    def artifact(job_id: str, name: str) -> FileResponse:
        with lock:
            rec = store.get(job_id)
            path = rec.artifacts.get(name) if rec else None
        if path is None:
            raise HTTPException(
                status_code=404, detail=f"no artifact {name!r} for job {job_id!r}"
            )
        return FileResponse(path, filename=name)

    return app


app = create_app()
