"""Result export (VTK, CSV) and performance reporting.

The VTK writer emits the legacy ASCII unstructured-grid dialect with the
coarse velocity and pressure as point data and the fine-scale velocity
as cell data (one beta per element; the bubble is 1 at the centroid, so
beta is the centroid value of the fine field).  Centerline extraction
interpolates coarse plus fine contributions at sample points located by
barycentric search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BUBBLE_SCALE
from .kernels import FlowState
from .mesh import Mesh

VTK_TRIANGLE = 5
VTK_TETRA = 10
CSV_COLUMNS = "coordinate,vx,vy,vz,p"


class OutputError(Exception):
    """Raised for export failures (bad sample points, I/O problems)."""


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_vtk(mesh: Mesh, state: FlowState, path) -> Path:
    """Write the legacy ASCII VTK unstructured-grid file for a state.

    Point data: velocity vectors and the pressure scalar.  Cell data:
    the fine-scale velocity (centroid value of the bubble field).  2D
    data is padded with zero z-components.
    """
    if state.v.shape != (mesh.n_nodes, mesh.dim) or state.beta.shape != (
        mesh.n_elements,
        mesh.dim,
    ):
        raise OutputError(
            f"state shaped for {state.v.shape[0]} nodes / {state.beta.shape[0]} "
            f"elements does not match mesh ({mesh.n_nodes} / {mesh.n_elements})"
        )
    path = Path(path)
    nen = mesh.dim + 1
    cell_type = VTK_TRIANGLE if mesh.dim == 2 else VTK_TETRA
    lines = [
        "# vtk DataFile Version 3.0",
        "two-level flow solution",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    pts = np.zeros((mesh.n_nodes, 3))
    pts[:, : mesh.dim] = mesh.nodes
    lines += [" ".join(map(_fmt, row)) for row in pts]
    lines.append(f"CELLS {mesh.n_elements} {mesh.n_elements * (nen + 1)}")
    lines += [f"{nen} " + " ".join(map(str, row)) for row in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(cell_type)] * mesh.n_elements
    lines.append(f"POINT_DATA {mesh.n_nodes}")
    lines.append("VECTORS velocity double")
    vv = np.zeros((mesh.n_nodes, 3))
    vv[:, : mesh.dim] = state.v
    lines += [" ".join(map(_fmt, row)) for row in vv]
    lines.append("SCALARS pressure double 1")
    lines.append("LOOKUP_TABLE default")
    lines += [_fmt(p) for p in state.p]
    lines.append(f"CELL_DATA {mesh.n_elements}")
    lines.append("VECTORS fine_velocity double")
    bb = np.zeros((mesh.n_elements, 3))
    bb[:, : mesh.dim] = state.beta
    lines += [" ".join(map(_fmt, row)) for row in bb]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# centerline extraction


@dataclass
class CenterlineTable:
    """Samples along an axis-aligned line: total velocity and pressure."""

    axis: str
    coordinate: np.ndarray  # (ns,)
    points: np.ndarray  # (ns, dim)
    v: np.ndarray  # (ns, dim) coarse + fine
    p: np.ndarray  # (ns,)


def _locate(mesh: Mesh, x: np.ndarray, x0, jinv) -> tuple[int, np.ndarray]:
    """Containing element and barycentric coordinates of point ``x``."""
    xi = np.einsum("eij,ej->ei", jinv, x[None, :] - x0)
    lam = np.concatenate([1.0 - xi.sum(axis=1, keepdims=True), xi], axis=1)
    inside = np.where(np.all(lam >= -1e-10, axis=1))[0]
    if inside.size == 0:
        raise OutputError(f"point {x.tolist()} outside mesh")
    e = int(inside[0])
    return e, np.clip(lam[e], 0.0, 1.0)


def extract_centerline(
    mesh: Mesh,
    state: FlowState,
    axis: str,
    through,
    n_samples: int = 101,
) -> CenterlineTable:
    """Sample v (coarse + bubble fine part) and p along an axis line.

    ``through`` fixes the transverse coordinates in axis order with the
    sampled axis omitted; e.g. axis="z", through=(0.5, 0.5) samples
    (0.5, 0.5, s).
    """
    axes = "xyz"[: mesh.dim]
    if axis not in axes:
        raise OutputError(f"axis must be one of {tuple(axes)}, got {axis!r}")
    ax = axes.index(axis)
    through = tuple(through)
    if len(through) != mesh.dim - 1:
        raise OutputError(
            f"through needs {mesh.dim - 1} transverse coordinates, got {len(through)}"
        )
    lo = float(mesh.nodes[:, ax].min())
    hi = float(mesh.nodes[:, ax].max())
    coords = np.linspace(lo, hi, n_samples)
    pts = np.empty((n_samples, mesh.dim))
    others = [i for i in range(mesh.dim) if i != ax]
    pts[:, ax] = coords
    for k, i in enumerate(others):
        pts[:, i] = through[k]

    xe = mesh.nodes[mesh.elements]  # (ne, nen, dim)
    x0 = xe[:, 0, :]
    jmat = np.transpose(xe[:, 1:, :] - x0[:, None, :], (0, 2, 1))  # (ne, dim, dim)
    jinv = np.linalg.inv(jmat)
    scale = BUBBLE_SCALE[mesh.dim]

    v = np.empty((n_samples, mesh.dim))
    p = np.empty(n_samples)
    for s, x in enumerate(pts):
        e, lam = _locate(mesh, x, x0, jinv)
        conn = mesh.elements[e]
        v[s] = lam @ state.v[conn] + scale * np.prod(lam) * state.beta[e]
        p[s] = lam @ state.p[conn]
    return CenterlineTable(axis, coords, pts, v, p)


def write_centerline_csv(table: CenterlineTable, path) -> Path:
    """CSV with the fixed column set coordinate, vx, vy, vz, p."""
    path = Path(path)
    rows = [CSV_COLUMNS]
    dim = table.v.shape[1]
    for i in range(table.coordinate.shape[0]):
        vz = table.v[i, 2] if dim == 3 else 0.0
        rows.append(
            ",".join(
                map(
                    _fmt,
                    (table.coordinate[i], table.v[i, 0], table.v[i, 1], vz, table.p[i]),
                )
            )
        )
    path.write_text("\n".join(rows) + "\n")
    return path


# ---------------------------------------------------------------------------
# surface flux


def surface_flux(mesh: Mesh, state: FlowState, tag: str) -> float:
    """Outward volume flux of the coarse velocity through tagged faces.

    The fine field vanishes on element boundaries, so the flux is
    coarse-only and exact for linear interpolation: measure times the
    nodal mean of v dot n per face.  Outward means away from the owning
    element.
    """
    sel = np.array([i for i, t in enumerate(mesh.face_tags) if t == tag], dtype=np.int64)
    if sel.size == 0:
        raise OutputError(f"no faces tagged {tag!r}")
    fn = mesh.face_nodes[sel]
    xf = mesh.nodes[fn]  # (nf, dim, dim)
    if mesh.dim == 2:
        edge = xf[:, 1] - xf[:, 0]
        normal = np.stack([edge[:, 1], -edge[:, 0]], axis=1)  # length-weighted
    else:
        normal = 0.5 * np.cross(xf[:, 1] - xf[:, 0], xf[:, 2] - xf[:, 0])
    owners = mesh.face_owners[0][sel]
    centroids = mesh.nodes[mesh.elements[owners]].mean(axis=1)
    outward = np.einsum("fi,fi->f", xf.mean(axis=1) - centroids, normal)
    normal[outward < 0] *= -1.0
    vmean = state.v[fn].mean(axis=1)  # (nf, dim)
    return float(np.einsum("fi,fi->", vmean, normal))


# ---------------------------------------------------------------------------
# performance reporting


@dataclass
class PerfRecord:
    """Wall times per worker count with optional phase breakdowns."""

    label: str
    workers: list[int]
    times: list[float]
    phases: dict[int, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.workers) != len(self.times):
            raise ValueError("workers and times must pair up")
        if any(t <= 0 for t in self.times):
            raise ValueError("wall times must be positive")
        if 1 not in self.workers:
            raise ValueError("a single-worker reference time is required")

    @property
    def t1(self) -> float:
        return self.times[self.workers.index(1)]


@dataclass(frozen=True)
class EfficiencyRow:
    p: int
    time: float
    speedup: float
    efficiency: float
    superlinear: bool


def efficiency_report(rec: PerfRecord) -> list[EfficiencyRow]:
    """Speedup T1/Tp and efficiency E_p = T1 / (p Tp), flagging E_p > 1."""
    rows = []
    for p, tp in sorted(zip(rec.workers, rec.times)):
        s = rec.t1 / tp
        e = rec.t1 / (p * tp)
        rows.append(EfficiencyRow(p, tp, s, e, e > 1.0))
    return rows


def format_efficiency(rec: PerfRecord) -> str:
    """Aligned text table of the efficiency report."""
    rows = efficiency_report(rec)
    out = [f"# {rec.label}", f"{'p':>4} {'time_s':>12} {'speedup':>9} {'eff':>7}"]
    for r in rows:
        flag = "  superlinear" if r.superlinear else ""
        out.append(f"{r.p:>4} {r.time:>12.6f} {r.speedup:>9.3f} {r.efficiency:>7.3f}{flag}")
    return "\n".join(out)


def write_perf_csv(rec: PerfRecord, path) -> Path:
    """Machine-readable efficiency report plus phase columns if known."""
    path = Path(path)
    phase_names = ["kernel", "condense", "assemble", "solve"]
    header = "p,time_s,speedup,efficiency,superlinear"
    if rec.phases:
        header += "," + ",".join(f"{n}_s" for n in phase_names)
    lines = [header]
    for r in efficiency_report(rec):
        row = [str(r.p), _fmt(r.time), _fmt(r.speedup), _fmt(r.efficiency),
               str(int(r.superlinear))]
        if rec.phases:
            ph = rec.phases.get(r.p, {})
            row += [_fmt(ph.get(n, 0.0)) for n in phase_names]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def amdahl_speedup(serial_fraction: float, p: float) -> float:
    """Predicted speedup 1 / (s + (1 - s) / p); bounded by 1/s as p grows."""
    if not 0.0 <= serial_fraction <= 1.0:
        raise ValueError(f"serial fraction must lie in [0, 1], got {serial_fraction}")
    if p < 1:
        raise ValueError(f"worker count must be >= 1, got {p}")
    if math.isinf(p):
        return math.inf if serial_fraction == 0.0 else 1.0 / serial_fraction
    return 1.0 / (serial_fraction + (1.0 - serial_fraction) / p)
