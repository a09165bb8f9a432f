"""Element-level residuals and consistent tangents of the two-level VMS form.

Inside each element the velocity is v = vbar + b*beta, where vbar is the
linear nodal field, b the interior bubble, and beta a per-element
fine-scale coefficient with velocity units.  Three residual blocks are
evaluated against the coarse velocity test functions (R_c), the pressure
test functions (R_p), and the bubble test function (R_f):

    R_c[a,i] = int N_a u_j du_i/dx_j + 2 nu int dN_a/dx_j du_i/dx_j
               - int dN_a/dx_i p - int N_a f_i - bdry int N_a h_i
    R_p[a]   = - int N_a div(u)
    R_f[i]   = int b u_j du_i/dx_j + 2 nu int db/dx_j du_i/dx_j
               - int db/dx_i p - int b f_i

with u = vbar + b*beta.  Backward Euler adds (1/dt) * int N_a (vbar -
vbar_prev) to R_c and (1/dt) * int b^2 (beta - beta_prev) to R_f.  The
nine tangent blocks are the exact derivatives of these expressions; the
convection terms carry both carrier and carried linearizations.

Two implementations share one contract: ``_evaluate_reference`` states
the math as einsum contractions and is the readable source of truth;
the compiled core in ``_compiled`` mirrors it loop for loop, releases
the GIL so thread workers scale, and serves every evaluation path.
Tests pin the two together.  Per-element functions wrap batches of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable

import numpy as np

from ._compiled import evaluate_chunk
from .basis import BasisTables, quadrature, segment_quadrature, tabulate
from .mesh import Mesh

FINE_BLOCK_CONDITION_LIMIT = 1e12

_DUMMY2 = np.zeros((1, 1))
_DUMMY3 = np.zeros((1, 1, 1))

#: einsum with contraction-path optimization (dispatches to BLAS where possible)
_ein = partial(np.einsum, optimize=True)


class FineScaleError(RuntimeError):
    """Raised when a fine block is singular to the condition limit."""


@dataclass
class CaseData:
    """Physical data of one flow problem as seen by the element kernels.

    ``body_force`` and ``traction`` are vectorized: they map points of
    shape (..., dim) (plus time, and the face tag for tractions) to
    vectors of the same shape.  ``dt=None`` means steady; transient runs
    carry the previous-step fields and the evaluation time.
    """

    nu: float
    body_force: Callable[[np.ndarray, float], np.ndarray] | None = None
    traction: Callable[[np.ndarray, float, str], np.ndarray] | None = None
    traction_tags: frozenset[str] = frozenset()
    dt: float | None = None
    v_prev: np.ndarray | None = None
    beta_prev: np.ndarray | None = None
    time: float = 0.0
    include_convection: bool = True

    @property
    def transient(self) -> bool:
        return self.dt is not None and math.isfinite(self.dt)

    def advanced(self, state: "FlowState", time: float) -> "CaseData":
        """Copy with previous-step fields taken from ``state``."""
        return replace(
            self, v_prev=state.v.copy(), beta_prev=state.beta.copy(), time=time
        )


@dataclass
class FlowState:
    """Global solution fields: nodal velocity/pressure plus element betas."""

    v: np.ndarray  # (n_nodes, dim)
    p: np.ndarray  # (n_nodes,)
    beta: np.ndarray  # (n_elements, dim)

    @classmethod
    def zeros(cls, mesh: Mesh) -> "FlowState":
        return cls(
            np.zeros((mesh.n_nodes, mesh.dim)),
            np.zeros(mesh.n_nodes),
            np.zeros((mesh.n_elements, mesh.dim)),
        )

    def copy(self) -> "FlowState":
        return FlowState(self.v.copy(), self.p.copy(), self.beta.copy())


@dataclass
class ElementState:
    """Solution restricted to one element."""

    v: np.ndarray  # (nen, dim)
    p: np.ndarray  # (nen,)
    beta: np.ndarray  # (dim,)

    @classmethod
    def from_global(cls, state: FlowState, mesh: Mesh, e: int) -> "ElementState":
        conn = mesh.elements[e]
        return cls(state.v[conn].copy(), state.p[conn].copy(), state.beta[e].copy())


@dataclass
class ElementSystem:
    """Residual blocks and the nine tangent blocks of one element.

    Coarse-velocity degrees of freedom are flattened node-major:
    local dof = a * dim + i.
    """

    rc: np.ndarray  # (nen*dim,)
    rp: np.ndarray  # (nen,)
    rf: np.ndarray  # (dim,)
    dRc_dv: np.ndarray  # (nen*dim, nen*dim)
    dRc_dp: np.ndarray  # (nen*dim, nen)
    dRc_db: np.ndarray  # (nen*dim, dim)
    dRp_dv: np.ndarray  # (nen, nen*dim)
    dRp_dp: np.ndarray  # (nen, nen)
    dRp_db: np.ndarray  # (nen, dim)
    dRf_dv: np.ndarray  # (dim, nen*dim)
    dRf_dp: np.ndarray  # (dim, nen)
    dRf_db: np.ndarray  # (dim, dim)


@dataclass
class ElementBlocks:
    """Batched residuals/tangents for a set of elements (leading axis).

    Residuals keep their natural shapes; ``flatten_*`` helpers produce
    the node-major flattened layout used by assembly and condensation.
    """

    elements: np.ndarray  # (ne,) global element ids
    rc: np.ndarray  # (ne, nen, dim)
    rp: np.ndarray  # (ne, nen)
    rf: np.ndarray  # (ne, dim)
    dRc_dv: np.ndarray | None = None  # (ne, nen, dim, nen, dim)
    dRc_dp: np.ndarray | None = None  # (ne, nen, dim, nen)
    dRc_db: np.ndarray | None = None  # (ne, nen, dim, dim)
    dRp_dv: np.ndarray | None = None  # (ne, nen, nen, dim)
    dRp_db: np.ndarray | None = None  # (ne, nen, dim)
    dRf_dv: np.ndarray | None = None  # (ne, dim, nen, dim)
    dRf_dp: np.ndarray | None = None  # (ne, dim, nen)
    dRf_db: np.ndarray | None = None  # (ne, dim, dim)

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


def evaluate_elements(
    mesh: Mesh,
    tables: BasisTables,
    state: FlowState,
    case: CaseData,
    elems: np.ndarray | None = None,
    need_tangent: bool = True,
) -> ElementBlocks:
    """Residual (and optionally tangent) blocks for a batch of elements."""
    if elems is None:
        elems = np.arange(mesh.n_elements, dtype=np.int64)
    conn = mesh.elements[elems]
    ve = state.v[conn]
    pe = state.p[conn]
    be = state.beta[elems]
    vprev = case.v_prev[conn] if (case.transient and case.v_prev is not None) else None
    bprev = case.beta_prev[elems] if (case.transient and case.beta_prev is not None) else None
    blocks = _evaluate(mesh, elems, tables, ve, pe, be, case, vprev, bprev, need_tangent)
    _add_traction(mesh, tables, case, blocks)
    return blocks


def _evaluate(
    mesh: Mesh,
    elems: np.ndarray,
    tables: BasisTables,
    ve: np.ndarray,
    pe: np.ndarray,
    be: np.ndarray,
    case: CaseData,
    vprev: np.ndarray | None,
    bprev: np.ndarray | None,
    need_tangent: bool,
) -> ElementBlocks:
    """Dispatch a batch to the compiled core (see module docstring)."""
    dim = mesh.dim
    nen = dim + 1
    ne = elems.shape[0]
    coords = np.ascontiguousarray(mesh.nodes[mesh.elements[elems]], dtype=float)
    N, b, w = tables.N, tables.b, tables.quad.weights

    if case.body_force is not None:
        xq = _ein("qa,eai->eqi", N, coords)
        fq = np.ascontiguousarray(case.body_force(xq, case.time), dtype=float)
        have_f = True
    else:
        fq, have_f = _DUMMY3, False

    if case.transient:
        tau = 1.0 / case.dt
        vp = np.ascontiguousarray(vprev, dtype=float) if vprev is not None else np.zeros_like(ve)
        bp = np.ascontiguousarray(bprev, dtype=float) if bprev is not None else np.zeros_like(be)
    else:
        tau, vp, bp = 0.0, _DUMMY3, _DUMMY2

    rc = np.zeros((ne, nen, dim))
    rp = np.zeros((ne, nen))
    rf = np.zeros((ne, dim))
    if need_tangent:
        tangents = (
            np.zeros((ne, nen, dim, nen, dim)),
            np.zeros((ne, nen, dim, nen)),
            np.zeros((ne, nen, dim, dim)),
            np.zeros((ne, nen, nen, dim)),
            np.zeros((ne, nen, dim)),
            np.zeros((ne, dim, nen, dim)),
            np.zeros((ne, dim, nen)),
            np.zeros((ne, dim, dim)),
        )
    else:
        tangents = (
            np.zeros((1,) * 5), np.zeros((1,) * 4), np.zeros((1,) * 4),
            np.zeros((1,) * 4), np.zeros((1,) * 3), np.zeros((1,) * 4),
            np.zeros((1,) * 3), np.zeros((1,) * 3),
        )
    bad = evaluate_chunk(
        coords,
        np.ascontiguousarray(ve, dtype=float),
        np.ascontiguousarray(pe, dtype=float),
        np.ascontiguousarray(be, dtype=float),
        tables.DN, N, b, tables.Db, w,
        case.nu, case.include_convection, tau, vp, bp, have_f, fq,
        need_tangent, rc, rp, rf, *tangents,
    )
    if bad >= 0:
        raise FineScaleError(
            f"degenerate element {int(elems[bad])}: non-positive jacobian"
        )
    blocks = ElementBlocks(elems, rc, rp, rf)
    if need_tangent:
        (blocks.dRc_dv, blocks.dRc_dp, blocks.dRc_db, blocks.dRp_dv,
         blocks.dRp_db, blocks.dRf_dv, blocks.dRf_dp, blocks.dRf_db) = tangents
    return blocks


def _evaluate_reference(
    mesh: Mesh,
    elems: np.ndarray,
    tables: BasisTables,
    ve: np.ndarray,
    pe: np.ndarray,
    be: np.ndarray,
    case: CaseData,
    vprev: np.ndarray | None,
    bprev: np.ndarray | None,
    need_tangent: bool,
) -> ElementBlocks:
    dim = mesh.dim
    nen = dim + 1
    N, b, w = tables.N, tables.b, tables.quad.weights
    coords = mesh.nodes[mesh.elements[elems]]  # (ne, nen, dim)

    jac = _ein("eai,aj->eij", coords, tables.DN)
    detj = np.linalg.det(jac)
    if np.any(detj <= 0.0):
        bad = int(elems[np.argmax(detj <= 0.0)])
        raise FineScaleError(f"degenerate element {bad}: non-positive jacobian")
    jinv = np.linalg.inv(jac)
    G = _ein("aj,eji->eai", tables.DN, jinv)  # (ne, nen, dim)
    g = _ein("qj,eji->eqi", tables.Db, jinv)  # (ne, nq, dim)
    wdet = w[None, :] * detj[:, None]  # (ne, nq)

    gradv = _ein("eai,eaj->eij", ve, G)  # d vbar_i / d x_j
    vq = _ein("qa,eai->eqi", N, ve)
    uq = vq + b[None, :, None] * be[:, None, :]
    gradu = gradv[:, None, :, :] + _ein("ei,eqj->eqij", be, g)
    pq = _ein("qa,ea->eq", N, pe)
    divu = _ein("eqii->eq", gradu)

    nu2 = 2.0 * case.nu
    rc = nu2 * _ein("eq,eaj,eqij->eai", wdet, G, gradu)
    rc -= _ein("eq,eai,eq->eai", wdet, G, pq)
    rf = nu2 * _ein("eq,eqj,eqij->ei", wdet, g, gradu)
    rf -= _ein("eq,eqi,eq->ei", wdet, g, pq)
    rp = -_ein("eq,qa,eq->ea", wdet, N, divu)

    if case.include_convection:
        conv = _ein("eqj,eqij->eqi", uq, gradu)
        rc += _ein("eq,qa,eqi->eai", wdet, N, conv)
        rf += _ein("eq,q,eqi->ei", wdet, b, conv)

    if case.body_force is not None:
        xq = _ein("qa,eai->eqi", N, coords)
        fq = np.asarray(case.body_force(xq, case.time))
        rc -= _ein("eq,qa,eqi->eai", wdet, N, fq)
        rf -= _ein("eq,q,eqi->ei", wdet, b, fq)

    tau = 0.0
    if case.transient:
        tau = 1.0 / case.dt
        dv = vq - (_ein("qa,eai->eqi", N, vprev) if vprev is not None else 0.0)
        rc += tau * _ein("eq,qa,eqi->eai", wdet, N, dv)
        mbb = _ein("eq,q,q->e", wdet, b, b)
        db = be - (bprev if bprev is not None else 0.0)
        rf += tau * mbb[:, None] * db

    blocks = ElementBlocks(elems, rc, rp, rf)
    if not need_tangent:
        return blocks

    eye = np.eye(dim)
    vol2nu = nu2 * _ein("eq,eaj,ecj->eac", wdet, G, G)
    dRc_dv = _ein("eac,ik->eaick", vol2nu, eye)
    dRc_dp = -_ein("eq,eai,qc->eaic", wdet, G, N)
    dRc_db = nu2 * _ein("eq,eaj,eqj,ik->eaik", wdet, G, g, eye)
    dRp_dv = -_ein("eq,qa,eck->eack", wdet, N, G)
    dRp_db = -_ein("eq,qa,eqk->eak", wdet, N, g)
    dRf_dv = nu2 * _ein("eq,eqj,ecj,ik->eick", wdet, g, G, eye)
    dRf_dp = -_ein("eq,eqi,qc->eic", wdet, g, N)
    dRf_db = nu2 * _ein("eq,eqj,eqj,ik->eik", wdet, g, g, eye)

    if case.include_convection:
        uG = _ein("eqj,ecj->eqc", uq, G)  # u . grad N_c
        ug = _ein("eqj,eqj->eq", uq, g)  # u . grad b
        dRc_dv += _ein("eq,qa,qc,eqik->eaick", wdet, N, N, gradu)
        dRc_dv += _ein("eq,qa,eqc,ik->eaick", wdet, N, uG, eye)
        dRc_db += _ein("eq,qa,q,eqik->eaik", wdet, N, b, gradu)
        dRc_db += _ein("eq,qa,eq,ik->eaik", wdet, N, ug, eye)
        dRf_dv += _ein("eq,q,qc,eqik->eick", wdet, b, N, gradu)
        dRf_dv += _ein("eq,q,eqc,ik->eick", wdet, b, uG, eye)
        dRf_db += _ein("eq,q,q,eqik->eik", wdet, b, b, gradu)
        dRf_db += _ein("eq,q,eq,ik->eik", wdet, b, ug, eye)

    if case.transient:
        mass = _ein("eq,qa,qc->eac", wdet, N, N)
        dRc_dv += tau * _ein("eac,ik->eaick", mass, eye)
        mbb = _ein("eq,q,q->e", wdet, b, b)
        dRf_db += tau * mbb[:, None, None] * eye[None, :, :]

    blocks.dRc_dv = dRc_dv
    blocks.dRc_dp = dRc_dp
    blocks.dRc_db = dRc_db
    blocks.dRp_dv = dRp_dv
    blocks.dRp_db = dRp_db
    blocks.dRf_dv = dRf_dv
    blocks.dRf_dp = dRf_dp
    blocks.dRf_db = dRf_db
    return blocks


def _add_traction(
    mesh: Mesh, tables: BasisTables, case: CaseData, blocks: ElementBlocks
) -> None:
    """Subtract boundary traction loads from R_c on face-owning elements.

    The bubble vanishes on element boundaries, so R_f gets no boundary
    term, and the traction is state-independent, so no tangent term.
    """
    if case.traction is None or not case.traction_tags:
        return
    dim = mesh.dim
    owners_all, _ = mesh.face_owners
    pos_of = {int(e): i for i, e in enumerate(blocks.elements)}
    for tag in sorted(case.traction_tags):
        fidx = mesh.faces_with_tag(tag)
        if fidx.size == 0:
            continue
        keep = np.array([f for f in fidx if int(owners_all[f]) in pos_of], dtype=np.int64)
        if keep.size == 0:
            continue
        fn = mesh.face_nodes[keep]  # (nf, dim)
        owners = owners_all[keep]
        coords = mesh.nodes[fn]  # (nf, dim, d)
        if dim == 2:
            t, wq = segment_quadrature(tables.quad.degree)
            edge = coords[:, 1] - coords[:, 0]
            scale = np.linalg.norm(edge, axis=1)  # length
            X = coords[:, None, 0, :] + t[None, :, None] * edge[:, None, :]
            Nf = np.column_stack([1.0 - t, t])  # (nq, 2)
        else:
            rule = quadrature(2, min(tables.quad.degree, 8))
            s, t = rule.points[:, 0], rule.points[:, 1]
            wq = rule.weights  # sum to 1/2 on the reference triangle
            e1 = coords[:, 1] - coords[:, 0]
            e2 = coords[:, 2] - coords[:, 0]
            scale = np.linalg.norm(np.cross(e1, e2), axis=1)  # 2 * face area
            X = (
                coords[:, None, 0, :]
                + s[None, :, None] * e1[:, None, :]
                + t[None, :, None] * e2[:, None, :]
            )
            Nf = np.column_stack([1.0 - s - t, s, t])  # (nq, 3)
        h = np.asarray(case.traction(X, case.time, tag))  # (nf, nq, d)
        contrib = _ein("q,f,qa,fqi->fai", wq, scale, Nf, h)
        conn = mesh.elements[owners]  # (nf, nen)
        rows = (conn[:, None, :] == fn[:, :, None]).argmax(axis=2)  # (nf, dim)
        pos = np.array([pos_of[int(e)] for e in owners])
        np.subtract.at(blocks.rc, (pos[:, None], rows), contrib)


# ---------------------------------------------------------------------------
# per-element wrappers


def _single(mesh: Mesh, e: int, tables: BasisTables, state, case: CaseData, need_tangent: bool) -> ElementBlocks:
    if isinstance(state, FlowState):
        state = ElementState.from_global(state, mesh, e)
    elems = np.array([e], dtype=np.int64)
    conn = mesh.elements[e]
    vprev = case.v_prev[conn][None] if (case.transient and case.v_prev is not None) else None
    bprev = case.beta_prev[elems] if (case.transient and case.beta_prev is not None) else None
    blocks = _evaluate(
        mesh,
        elems,
        tables,
        state.v[None],
        state.p[None],
        state.beta[None],
        case,
        vprev,
        bprev,
        need_tangent,
    )
    _add_traction(mesh, tables, case, blocks)
    return blocks


def element_residual(
    mesh: Mesh,
    e: int,
    tables: BasisTables,
    state: ElementState | FlowState,
    case: CaseData,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual blocks (R_c flattened node-major, R_p, R_f) of element e."""
    blocks = _single(mesh, e, tables, state, case, need_tangent=False)
    dim = mesh.dim
    return blocks.rc[0].reshape((dim + 1) * dim), blocks.rp[0], blocks.rf[0]


def element_tangent(
    mesh: Mesh,
    e: int,
    tables: BasisTables,
    state: ElementState | FlowState,
    case: CaseData,
) -> ElementSystem:
    """Residuals plus all nine tangent blocks of element e."""
    blocks = _single(mesh, e, tables, state, case, need_tangent=True)
    dim = mesh.dim
    nen = dim + 1
    nv = nen * dim
    return ElementSystem(
        rc=blocks.rc[0].reshape(nv),
        rp=blocks.rp[0],
        rf=blocks.rf[0],
        dRc_dv=blocks.dRc_dv[0].reshape(nv, nv),
        dRc_dp=blocks.dRc_dp[0].reshape(nv, nen),
        dRc_db=blocks.dRc_db[0].reshape(nv, dim),
        dRp_dv=blocks.dRp_dv[0].reshape(nen, nv),
        dRp_dp=np.zeros((nen, nen)),
        dRp_db=blocks.dRp_db[0],
        dRf_dv=blocks.dRf_dv[0].reshape(dim, nv),
        dRf_dp=blocks.dRf_dp[0],
        dRf_db=blocks.dRf_db[0],
    )


def fine_block_invert(aff: np.ndarray, elements: np.ndarray | None = None) -> np.ndarray:
    """Invert fine blocks (dim x dim), batched over a leading axis.

    Raises
    ------
    FineScaleError
        If any block has condition number above 1e12.
    """
    aff = np.asarray(aff, dtype=float)
    single = aff.ndim == 2
    batch = aff[None] if single else aff
    cond = np.linalg.cond(batch)
    bad = ~(cond < FINE_BLOCK_CONDITION_LIMIT)  # catches NaN too
    if np.any(bad):
        i = int(np.argmax(bad))
        label = int(elements[i]) if elements is not None else i
        raise FineScaleError(
            f"fine block of element {label} is singular to working precision "
            f"(condition number {cond[i]:.3e})"
        )
    inv = np.linalg.inv(batch)
    return inv[0] if single else inv


def default_tables(dim: int, degree: int | None = None) -> BasisTables:
    """Basis tables at the default (or given) quadrature degree."""
    return tabulate(quadrature(dim, degree))
