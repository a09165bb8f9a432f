"""Compiled element-kernel core.

The loops here mirror ``kernels._evaluate_reference`` term by term; that
einsum implementation is the readable statement of the math and the two
are pinned together by tests.  This version exists so element evaluation
releases the GIL (``nogil=True``), letting thread workers scale instead
of contending.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def evaluate_chunk(
    coords,  # (ne, nen, dim)
    ve,  # (ne, nen, dim)
    pe,  # (ne, nen)
    be,  # (ne, dim)
    dn,  # (nen, dim) reference coarse gradients
    shp,  # (nq, nen) coarse shape values
    bub,  # (nq,) bubble values
    dbub,  # (nq, dim) reference bubble gradients
    wq,  # (nq,) quadrature weights
    nu,
    convect,  # bool
    tau,  # 1/dt, or 0.0 for steady
    vprev,  # (ne, nen, dim); zeros when steady
    bprev,  # (ne, dim); zeros when steady
    have_f,  # bool
    fq,  # (ne, nq, dim) body force at quadrature points
    need_tangent,  # bool
    rc,  # (ne, nen, dim) out
    rp,  # (ne, nen) out
    rf,  # (ne, dim) out
    d_cv,  # (ne, nen, dim, nen, dim) out
    d_cp,  # (ne, nen, dim, nen) out
    d_cb,  # (ne, nen, dim, dim) out
    d_pv,  # (ne, nen, nen, dim) out
    d_pb,  # (ne, nen, dim) out
    d_fv,  # (ne, dim, nen, dim) out
    d_fp,  # (ne, dim, nen) out
    d_fb,  # (ne, dim, dim) out
):
    """Residual/tangent blocks for a chunk; returns the index of the
    first element with a non-positive jacobian, or -1."""
    ne, nen, dim = coords.shape
    nq = wq.shape[0]
    nu2 = 2.0 * nu
    transient = tau != 0.0

    jac = np.empty((dim, dim))
    jinv = np.empty((dim, dim))
    G = np.empty((nen, dim))
    g = np.empty((nq, dim))
    gradv = np.empty((dim, dim))
    gradu = np.empty((nq, dim, dim))
    uq = np.empty((nq, dim))
    vq = np.empty((nq, dim))
    pq = np.empty(nq)
    conv = np.empty((nq, dim))

    for e in range(ne):
        for i in range(dim):
            for j in range(dim):
                s = 0.0
                for a in range(nen):
                    s += coords[e, a, i] * dn[a, j]
                jac[i, j] = s
        if dim == 2:
            detj = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        else:
            detj = (
                jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
                - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
                + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0])
            )
        if detj <= 0.0:
            return e
        inv_det = 1.0 / detj
        if dim == 2:
            jinv[0, 0] = jac[1, 1] * inv_det
            jinv[0, 1] = -jac[0, 1] * inv_det
            jinv[1, 0] = -jac[1, 0] * inv_det
            jinv[1, 1] = jac[0, 0] * inv_det
        else:
            jinv[0, 0] = (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1]) * inv_det
            jinv[0, 1] = (jac[0, 2] * jac[2, 1] - jac[0, 1] * jac[2, 2]) * inv_det
            jinv[0, 2] = (jac[0, 1] * jac[1, 2] - jac[0, 2] * jac[1, 1]) * inv_det
            jinv[1, 0] = (jac[1, 2] * jac[2, 0] - jac[1, 0] * jac[2, 2]) * inv_det
            jinv[1, 1] = (jac[0, 0] * jac[2, 2] - jac[0, 2] * jac[2, 0]) * inv_det
            jinv[1, 2] = (jac[0, 2] * jac[1, 0] - jac[0, 0] * jac[1, 2]) * inv_det
            jinv[2, 0] = (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0]) * inv_det
            jinv[2, 1] = (jac[0, 1] * jac[2, 0] - jac[0, 0] * jac[2, 1]) * inv_det
            jinv[2, 2] = (jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]) * inv_det

        for a in range(nen):
            for i in range(dim):
                s = 0.0
                for j in range(dim):
                    s += dn[a, j] * jinv[j, i]
                G[a, i] = s
        for q in range(nq):
            for i in range(dim):
                s = 0.0
                for j in range(dim):
                    s += dbub[q, j] * jinv[j, i]
                g[q, i] = s

        for i in range(dim):
            for j in range(dim):
                s = 0.0
                for a in range(nen):
                    s += ve[e, a, i] * G[a, j]
                gradv[i, j] = s
        for q in range(nq):
            for i in range(dim):
                s = 0.0
                for a in range(nen):
                    s += shp[q, a] * ve[e, a, i]
                vq[q, i] = s
                uq[q, i] = s + bub[q] * be[e, i]
                for j in range(dim):
                    gradu[q, i, j] = gradv[i, j] + be[e, i] * g[q, j]
            s = 0.0
            for a in range(nen):
                s += shp[q, a] * pe[e, a]
            pq[q] = s

        for q in range(nq):
            wd = wq[q] * detj
            for a in range(nen):
                for i in range(dim):
                    s = 0.0
                    for j in range(dim):
                        s += G[a, j] * gradu[q, i, j]
                    rc[e, a, i] += wd * (nu2 * s - G[a, i] * pq[q])
            for i in range(dim):
                s = 0.0
                for j in range(dim):
                    s += g[q, j] * gradu[q, i, j]
                rf[e, i] += wd * (nu2 * s - g[q, i] * pq[q])
            div = 0.0
            for i in range(dim):
                div += gradu[q, i, i]
            for a in range(nen):
                rp[e, a] -= wd * shp[q, a] * div

            if convect:
                for i in range(dim):
                    s = 0.0
                    for j in range(dim):
                        s += uq[q, j] * gradu[q, i, j]
                    conv[q, i] = s
                for a in range(nen):
                    for i in range(dim):
                        rc[e, a, i] += wd * shp[q, a] * conv[q, i]
                for i in range(dim):
                    rf[e, i] += wd * bub[q] * conv[q, i]

            if have_f:
                for a in range(nen):
                    for i in range(dim):
                        rc[e, a, i] -= wd * shp[q, a] * fq[e, q, i]
                for i in range(dim):
                    rf[e, i] -= wd * bub[q] * fq[e, q, i]

            if transient:
                for a in range(nen):
                    for i in range(dim):
                        s = 0.0
                        for c in range(nen):
                            s += shp[q, c] * vprev[e, c, i]
                        rc[e, a, i] += tau * wd * shp[q, a] * (vq[q, i] - s)
                for i in range(dim):
                    rf[e, i] += tau * wd * bub[q] * bub[q] * (be[e, i] - bprev[e, i])

            if need_tangent:
                for a in range(nen):
                    for c in range(nen):
                        gg = 0.0
                        for j in range(dim):
                            gg += G[a, j] * G[c, j]
                        visc = wd * nu2 * gg
                        for i in range(dim):
                            d_cv[e, a, i, c, i] += visc
                            d_cp[e, a, i, c] -= wd * G[a, i] * shp[q, c]
                            d_pv[e, a, c, i] -= wd * shp[q, a] * G[c, i]
                for a in range(nen):
                    gb = 0.0
                    for j in range(dim):
                        gb += G[a, j] * g[q, j]
                    for i in range(dim):
                        d_cb[e, a, i, i] += wd * nu2 * gb
                        d_pb[e, a, i] -= wd * shp[q, a] * g[q, i]
                for c in range(nen):
                    gb = 0.0
                    for j in range(dim):
                        gb += g[q, j] * G[c, j]
                    for i in range(dim):
                        d_fv[e, i, c, i] += wd * nu2 * gb
                        d_fp[e, i, c] -= wd * g[q, i] * shp[q, c]
                bb = 0.0
                for j in range(dim):
                    bb += g[q, j] * g[q, j]
                for i in range(dim):
                    d_fb[e, i, i] += wd * nu2 * bb

                if convect:
                    ug = 0.0
                    for j in range(dim):
                        ug += uq[q, j] * g[q, j]
                    for c in range(nen):
                        uGc = 0.0
                        for j in range(dim):
                            uGc += uq[q, j] * G[c, j]
                        for a in range(nen):
                            na = wd * shp[q, a]
                            for i in range(dim):
                                for k in range(dim):
                                    d_cv[e, a, i, c, k] += (
                                        na * shp[q, c] * gradu[q, i, k]
                                    )
                                d_cv[e, a, i, c, i] += na * uGc
                        bw = wd * bub[q]
                        for i in range(dim):
                            for k in range(dim):
                                d_fv[e, i, c, k] += bw * shp[q, c] * gradu[q, i, k]
                            d_fv[e, i, c, i] += bw * uGc
                    for a in range(nen):
                        na = wd * shp[q, a]
                        for i in range(dim):
                            for k in range(dim):
                                d_cb[e, a, i, k] += na * bub[q] * gradu[q, i, k]
                            d_cb[e, a, i, i] += na * ug
                    bw = wd * bub[q]
                    for i in range(dim):
                        for k in range(dim):
                            d_fb[e, i, k] += bw * bub[q] * gradu[q, i, k]
                        d_fb[e, i, i] += bw * ug

                if transient:
                    for a in range(nen):
                        for c in range(nen):
                            m = tau * wd * shp[q, a] * shp[q, c]
                            for i in range(dim):
                                d_cv[e, a, i, c, i] += m
                    mb = tau * wd * bub[q] * bub[q]
                    for i in range(dim):
                        d_fb[e, i, i] += mb
    return -1
