"""Degrees of freedom, Dirichlet constraints, and global scatter.

Coarse dofs are interleaved node-major (u, v[, w], p per node); fine
dofs (dim per element) are appended after all coarse dofs on the
monolithic path.  Dirichlet velocity dofs and the pinned pressure dof
are eliminated symmetrically: Newton iterates stay consistent with the
prescribed values, so constrained increments are identically zero and
their rows/columns simply drop out of the solved system.

Element evaluation runs in fixed-size chunks that are independent of
the worker count, and chunk results are concatenated in chunk order, so
the assembled matrix is bitwise identical for any number of workers.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .basis import BasisTables
from .condense import CondensedBatch, condense_blocks
from .kernels import CaseData, ElementBlocks, FlowState, evaluate_elements
from .mesh import Mesh

DEFAULT_CHUNK = 512


class AssemblyError(Exception):
    """Raised for BC-resolution and dof-bookkeeping failures."""


@dataclass(frozen=True)
class DirichletEntry:
    """One resolved Dirichlet velocity patch (applied in declaration order)."""

    tag: str
    nodes: np.ndarray  # (m,)
    coords: np.ndarray  # (m, dim)
    value: Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class PressurePin:
    node: int
    value: float = 0.0


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet patches, optional pressure pin, and traction tags."""

    dirichlet: tuple[DirichletEntry, ...]
    pin: PressurePin | None = None
    traction_tags: frozenset[str] = frozenset()

    @property
    def dirichlet_nodes(self) -> np.ndarray:
        if not self.dirichlet:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate([e.nodes for e in self.dirichlet]))


def _as_value_fn(value, dim: int) -> Callable[[np.ndarray, float], np.ndarray]:
    if callable(value):
        return value
    vec = np.asarray(value, dtype=float).reshape(dim)

    def constant(x, t, _vec=vec):
        return np.broadcast_to(_vec, x.shape[:-1] + (dim,)).copy()

    return constant


def resolve_bcs(
    mesh: Mesh,
    dirichlet: Sequence[tuple[str, object]] = (),
    pin: tuple[int, float] | None = None,
    traction_tags: Sequence[str] = (),
) -> BoundaryConditions:
    """Resolve tag-based BC declarations against a mesh.

    ``dirichlet`` is an ordered sequence of (tag, value) pairs where
    value is a constant vector or a callable (X, t) -> vectors; later
    entries win on shared nodes.
    """
    known = set(mesh.tag_names)
    entries = []
    for tag, value in dirichlet:
        if tag not in known:
            raise AssemblyError(f"BC tag {tag!r} not found in mesh (tags: {sorted(known)})")
        nodes = mesh.nodes_with_tag(tag)
        entries.append(
            DirichletEntry(tag, nodes, mesh.nodes[nodes], _as_value_fn(value, mesh.dim))
        )
    for tag in traction_tags:
        if tag not in known:
            raise AssemblyError(f"traction tag {tag!r} not found in mesh")
    pin_obj = None
    if pin is not None:
        node, value = pin
        if not 0 <= int(node) < mesh.n_nodes:
            raise AssemblyError(f"pin node {node} out of range")
        pin_obj = PressurePin(int(node), float(value))
    return BoundaryConditions(tuple(entries), pin_obj, frozenset(traction_tags))


def apply_dirichlet(state: FlowState, bcs: BoundaryConditions, t: float = 0.0) -> FlowState:
    """Set constrained velocities (and the pinned pressure) in place."""
    for entry in bcs.dirichlet:
        state.v[entry.nodes] = np.asarray(entry.value(entry.coords, t), dtype=float)
    if bcs.pin is not None:
        state.p[bcs.pin.node] = bcs.pin.value
    return state


# ---------------------------------------------------------------------------
# dof map


@dataclass
class DofMap:
    """Global dof numbering and the constrained-dof table."""

    dim: int
    path: str
    n_nodes: int
    n_elements: int
    n_coarse: int
    n_fine: int
    n_total: int
    free_of: np.ndarray  # (n_total,) position among free dofs, -1 if constrained
    free_dofs: np.ndarray  # (n_free,) global dof ids in solve order
    constrained: dict[int, float]  # dof -> prescribed value (at build time)
    pinned_pressure_dof: int | None

    @property
    def n_free(self) -> int:
        return self.free_dofs.shape[0]

    def vdof(self, nodes, comp):
        return np.asarray(nodes) * (self.dim + 1) + comp

    def pdof(self, nodes):
        return np.asarray(nodes) * (self.dim + 1) + self.dim

    def fdof(self, elems, comp):
        return self.n_coarse + np.asarray(elems) * self.dim + comp


def dof_counts(mesh: Mesh) -> tuple[int, int]:
    """(coarse, fine) dof counts: nodal velocity+pressure vs element betas.

    For a structured box with n divisions these follow the closed forms
    (n+1)^d (d+1) coarse and c_d n^d d fine, with c_2 = 2 and c_3 = 6
    elements per grid cell.
    """
    return mesh.n_nodes * (mesh.dim + 1), mesh.n_elements * mesh.dim


def build_dofmap(mesh: Mesh, bcs: BoundaryConditions, path: str = "condensed") -> DofMap:
    """Number dofs and mark constraints for the chosen solve path."""
    if path not in ("condensed", "monolithic"):
        raise AssemblyError(f"unknown path {path!r}")
    dim = mesh.dim
    n_coarse = (dim + 1) * mesh.n_nodes
    n_fine = dim * mesh.n_elements if path == "monolithic" else 0
    n_total = n_coarse + n_fine

    if bcs.pin is None and mesh.n_faces:
        dirichlet_tags = {e.tag for e in bcs.dirichlet}
        if all(t in dirichlet_tags for t in mesh.face_tags):
            raise AssemblyError(
                "fully Dirichlet (enclosed-flow) case has no pressure constraint; "
                "add a pressure pin"
            )

    constrained: dict[int, float] = {}
    for entry in bcs.dirichlet:
        vals = np.asarray(entry.value(entry.coords, 0.0), dtype=float)
        for comp in range(dim):
            dofs = entry.nodes * (dim + 1) + comp
            for d, v in zip(dofs, vals[:, comp]):
                constrained[int(d)] = float(v)
    pinned = None
    if bcs.pin is not None:
        pinned = int(bcs.pin.node) * (dim + 1) + dim
        constrained[pinned] = bcs.pin.value

    free_of = np.full(n_total, -1, dtype=np.int64)
    mask = np.ones(n_total, dtype=bool)
    mask[list(constrained)] = False
    free_dofs = np.flatnonzero(mask).astype(np.int64)
    free_of[free_dofs] = np.arange(free_dofs.size)
    return DofMap(
        dim=dim,
        path=path,
        n_nodes=mesh.n_nodes,
        n_elements=mesh.n_elements,
        n_coarse=n_coarse,
        n_fine=n_fine,
        n_total=n_total,
        free_of=free_of,
        free_dofs=free_dofs,
        constrained=constrained,
        pinned_pressure_dof=pinned,
    )


# ---------------------------------------------------------------------------
# scatter


@dataclass
class GlobalSystem:
    """Sparse system over free dofs; ``ordering`` maps rows to global dofs."""

    a: sp.csr_matrix
    rhs: np.ndarray
    ordering: np.ndarray


def element_dofs(
    mesh: Mesh, dofmap: DofMap, elems: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-element velocity (nv) and pressure (nen) global dof arrays."""
    dim = mesh.dim
    if elems is None:
        elems = np.arange(mesh.n_elements)
    conn = mesh.elements[elems]  # (ne, nen)
    vd = (conn[:, :, None] * (dim + 1) + np.arange(dim)[None, None, :]).reshape(
        elems.shape[0], -1
    )
    pd = conn * (dim + 1) + dim
    return vd, pd


def _scatter_coo(
    dofmap: DofMap,
    rows_list: list[np.ndarray],
    cols_list: list[np.ndarray],
    vals_list: list[np.ndarray],
    rowdofs: np.ndarray,
    coldofs: np.ndarray,
    block: np.ndarray,
) -> None:
    """Append free-free entries of a batched block to the COO lists."""
    ne, nr, nc = block.shape
    r = np.broadcast_to(rowdofs[:, :, None], (ne, nr, nc)).reshape(-1)
    c = np.broadcast_to(coldofs[:, None, :], (ne, nr, nc)).reshape(-1)
    fr = dofmap.free_of[r]
    fc = dofmap.free_of[c]
    keep = (fr >= 0) & (fc >= 0)
    rows_list.append(fr[keep])
    cols_list.append(fc[keep])
    vals_list.append(block.reshape(-1)[keep])


def _add_rhs(dofmap: DofMap, rhs: np.ndarray, dofs: np.ndarray, res: np.ndarray) -> None:
    f = dofmap.free_of[dofs.reshape(-1)]
    keep = f >= 0
    np.add.at(rhs, f[keep], -res.reshape(-1)[keep])


def assemble(
    mesh: Mesh,
    dofmap: DofMap,
    systems: CondensedBatch | ElementBlocks,
    path: str | None = None,
) -> GlobalSystem:
    """Scatter element systems into the global sparse matrix and rhs.

    The rhs is the negated residual on free dofs (Newton update
    convention).  ``systems`` must match the dofmap's path: a
    CondensedBatch for "condensed", raw ElementBlocks for "monolithic".
    """
    path = path or dofmap.path
    if path != dofmap.path:
        raise AssemblyError(f"dofmap built for {dofmap.path!r}, not {path!r}")
    elems = systems.elements
    vd, pd = element_dofs(mesh, dofmap, elems)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    rhs = np.zeros(dofmap.n_free)
    if isinstance(systems, CondensedBatch):
        _scatter_coo(dofmap, rows, cols, vals, vd, vd, systems.kvv)
        _scatter_coo(dofmap, rows, cols, vals, vd, pd, systems.kvp)
        _scatter_coo(dofmap, rows, cols, vals, pd, vd, systems.kpv)
        _scatter_coo(dofmap, rows, cols, vals, pd, pd, systems.kpp)
        _add_rhs(dofmap, rhs, vd, systems.r1)
        _add_rhs(dofmap, rhs, pd, systems.r2)
    else:
        if systems.dRc_dv is None:
            raise AssemblyError("monolithic assembly needs tangent blocks")
        ne = systems.n_elements
        dim = mesh.dim
        nen = dim + 1
        nv = nen * dim
        fd = (
            dofmap.n_coarse
            + elems[:, None] * dim
            + np.arange(dim)[None, :]
        )
        _scatter_coo(dofmap, rows, cols, vals, vd, vd, systems.dRc_dv.reshape(ne, nv, nv))
        _scatter_coo(dofmap, rows, cols, vals, vd, pd, systems.dRc_dp.reshape(ne, nv, nen))
        _scatter_coo(dofmap, rows, cols, vals, vd, fd, systems.dRc_db.reshape(ne, nv, dim))
        _scatter_coo(dofmap, rows, cols, vals, pd, vd, systems.dRp_dv.reshape(ne, nen, nv))
        _scatter_coo(dofmap, rows, cols, vals, pd, fd, systems.dRp_db.reshape(ne, nen, dim))
        _scatter_coo(dofmap, rows, cols, vals, fd, vd, systems.dRf_dv.reshape(ne, dim, nv))
        _scatter_coo(dofmap, rows, cols, vals, fd, pd, systems.dRf_dp.reshape(ne, dim, nen))
        _scatter_coo(dofmap, rows, cols, vals, fd, fd, systems.dRf_db.reshape(ne, dim, dim))
        _add_rhs(dofmap, rhs, vd, systems.rc.reshape(ne, nv))
        _add_rhs(dofmap, rhs, pd, systems.rp)
        _add_rhs(dofmap, rhs, fd, systems.rf)
    n = dofmap.n_free
    a = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    a.sum_duplicates()
    return GlobalSystem(a, rhs, dofmap.free_dofs.copy())


def free_residual_norm(dofmap: DofMap, systems: CondensedBatch, mesh: Mesh) -> float:
    """2-norm of the condensed residual restricted to free dofs."""
    vd, pd = element_dofs(mesh, dofmap, systems.elements)
    r = np.zeros(dofmap.n_free)
    _add_rhs(dofmap, r, vd, systems.r1)
    _add_rhs(dofmap, r, pd, systems.r2)
    return float(np.linalg.norm(r))


# ---------------------------------------------------------------------------
# chunked parallel evaluation


def _concat_batches(parts: list[ElementBlocks], need_tangent: bool) -> ElementBlocks:
    names = ["elements", "rc", "rp", "rf"]
    if need_tangent:
        names += [
            "dRc_dv", "dRc_dp", "dRc_db", "dRp_dv", "dRp_db",
            "dRf_dv", "dRf_dp", "dRf_db",
        ]
    merged = {n: np.concatenate([getattr(p, n) for p in parts]) for n in names}
    return ElementBlocks(**merged)


def evaluate_chunked(
    mesh: Mesh,
    tables: BasisTables,
    state: FlowState,
    case: CaseData,
    workers: int = 1,
    need_tangent: bool = True,
    chunk_size: int = DEFAULT_CHUNK,
) -> ElementBlocks:
    """Evaluate all element systems in fixed-size chunks.

    Chunk boundaries depend only on ``chunk_size``, never on
    ``workers``, and results are concatenated in chunk order, so the
    output is bitwise independent of the worker count.
    """
    ne = mesh.n_elements
    chunks = [
        np.arange(lo, min(lo + chunk_size, ne), dtype=np.int64)
        for lo in range(0, ne, chunk_size)
    ]

    def work(elems):
        return evaluate_elements(mesh, tables, state, case, elems, need_tangent)

    if workers <= 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))
    if len(parts) == 1:
        return parts[0]
    return _concat_batches(parts, need_tangent)


@dataclass
class AssemblyTimings:
    """Wall-clock phase breakdown of one global-system build."""

    kernel: float = 0.0
    condense: float = 0.0
    assemble: float = 0.0
    solve: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "kernel": self.kernel,
            "condense": self.condense,
            "assemble": self.assemble,
            "solve": self.solve,
        }


def build_global_system(
    mesh: Mesh,
    tables: BasisTables,
    state: FlowState,
    case: CaseData,
    dofmap: DofMap,
    workers: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> tuple[GlobalSystem, CondensedBatch | ElementBlocks, AssemblyTimings]:
    """Evaluate, (optionally) condense, and scatter the current tangent.

    Returns the global system, the element data needed for fine-scale
    recovery (condensed path) and residual norms, and phase timings.
    """
    timings = AssemblyTimings()
    t0 = time.perf_counter()
    blocks = evaluate_chunked(
        mesh, tables, state, case, workers=workers, chunk_size=chunk_size
    )
    timings.kernel = time.perf_counter() - t0
    if dofmap.path == "condensed":
        t0 = time.perf_counter()
        systems: CondensedBatch | ElementBlocks = condense_blocks(blocks, mesh.dim)
        timings.condense = time.perf_counter() - t0
    else:
        systems = blocks
    t0 = time.perf_counter()
    gs = assemble(mesh, dofmap, systems)
    timings.assemble = time.perf_counter() - t0
    return gs, systems, timings
