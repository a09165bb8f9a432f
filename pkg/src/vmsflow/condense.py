"""Element-level Schur condensation of the fine-scale block and recovery.

With the element tangent partitioned into coarse-velocity (v), pressure
(p), and fine (f) rows/columns, eliminating the fine unknowns gives

    K_vv = A_vv - A_vf A_ff^-1 A_fv       K_vp = A_vp - A_vf A_ff^-1 A_fp
    K_pv = A_pv - A_pf A_ff^-1 A_fv       K_pp =      - A_pf A_ff^-1 A_fp

(the pressure-pressure block starts at zero, hence the leading minus)
and condensed residuals

    R_1 = R_c - A_vf A_ff^-1 R_f          R_2 = R_p - A_pf A_ff^-1 R_f.

After the coarse solve the fine increment is recovered per element:

    dbeta = A_ff^-1 (-R_f - A_fv dv - A_fp dp).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import ElementBlocks, ElementSystem, fine_block_invert


@dataclass
class CondensedBatch:
    """Condensed blocks for a batch of elements (leading axis).

    Coarse-velocity dofs are flattened node-major (a * dim + i).  The
    fine-block inverses and fine rows are kept for increment recovery.
    """

    elements: np.ndarray  # (ne,)
    kvv: np.ndarray  # (ne, nv, nv)
    kvp: np.ndarray  # (ne, nv, nen)
    kpv: np.ndarray  # (ne, nen, nv)
    kpp: np.ndarray  # (ne, nen, nen)
    r1: np.ndarray  # (ne, nv)
    r2: np.ndarray  # (ne, nen)
    aff_inv: np.ndarray  # (ne, dim, dim)
    afv: np.ndarray  # (ne, dim, nv)
    afp: np.ndarray  # (ne, dim, nen)
    rf: np.ndarray  # (ne, dim)

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]


@dataclass
class CondensedElement:
    """Single-element view of the condensed system."""

    kvv: np.ndarray
    kvp: np.ndarray
    kpv: np.ndarray
    kpp: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    aff_inv: np.ndarray
    afv: np.ndarray
    afp: np.ndarray
    rf: np.ndarray


def condense_blocks(blocks: ElementBlocks, dim: int) -> CondensedBatch:
    """Schur-condense a batch of element systems."""
    ne = blocks.n_elements
    nen = dim + 1
    nv = nen * dim
    avv = blocks.dRc_dv.reshape(ne, nv, nv)
    avp = blocks.dRc_dp.reshape(ne, nv, nen)
    avf = blocks.dRc_db.reshape(ne, nv, dim)
    apv = blocks.dRp_dv.reshape(ne, nen, nv)
    apf = blocks.dRp_db.reshape(ne, nen, dim)
    afv = blocks.dRf_dv.reshape(ne, dim, nv)
    afp = blocks.dRf_dp.reshape(ne, dim, nen)
    aff = blocks.dRf_db.reshape(ne, dim, dim)
    rc = blocks.rc.reshape(ne, nv)
    rp = blocks.rp
    rf = blocks.rf

    aff_inv = fine_block_invert(aff, elements=blocks.elements)
    xv = avf @ aff_inv  # (ne, nv, dim)
    xp = apf @ aff_inv  # (ne, nen, dim)
    return CondensedBatch(
        elements=blocks.elements,
        kvv=avv - xv @ afv,
        kvp=avp - xv @ afp,
        kpv=apv - xp @ afv,
        kpp=-(xp @ afp),
        r1=rc - (xv @ rf[..., None])[..., 0],
        r2=rp - (xp @ rf[..., None])[..., 0],
        aff_inv=aff_inv,
        afv=afv,
        afp=afp,
        rf=rf,
    )


def condense_element(sys: ElementSystem) -> CondensedElement:
    """Condense one ElementSystem (wraps the batched path)."""
    dim = sys.dRf_db.shape[0]
    nen = dim + 1
    blocks = ElementBlocks(
        elements=np.array([0], dtype=np.int64),
        rc=sys.rc[None].reshape(1, nen, dim),
        rp=sys.rp[None],
        rf=sys.rf[None],
        dRc_dv=sys.dRc_dv[None],
        dRc_dp=sys.dRc_dp[None],
        dRc_db=sys.dRc_db[None],
        dRp_dv=sys.dRp_dv[None],
        dRp_db=sys.dRp_db[None],
        dRf_dv=sys.dRf_dv[None],
        dRf_dp=sys.dRf_dp[None],
        dRf_db=sys.dRf_db[None],
    )
    batch = condense_blocks(blocks, dim)
    return CondensedElement(
        kvv=batch.kvv[0],
        kvp=batch.kvp[0],
        kpv=batch.kpv[0],
        kpp=batch.kpp[0],
        r1=batch.r1[0],
        r2=batch.r2[0],
        aff_inv=batch.aff_inv[0],
        afv=batch.afv[0],
        afp=batch.afp[0],
        rf=batch.rf[0],
    )


def recover_fine(
    cond: CondensedBatch | CondensedElement,
    dv: np.ndarray,
    dp: np.ndarray,
) -> np.ndarray:
    """Fine-scale increments from the coarse solution increments.

    Parameters
    ----------
    cond : CondensedBatch or CondensedElement
    dv : ndarray, (..., nv) coarse-velocity increments (node-major flat)
    dp : ndarray, (..., nen) pressure increments

    Returns
    -------
    ndarray, (..., dim)
    """
    rhs = -(
        cond.rf
        + (cond.afv @ dv[..., None])[..., 0]
        + (cond.afp @ dp[..., None])[..., 0]
    )
    return (cond.aff_inv @ rhs[..., None])[..., 0]
