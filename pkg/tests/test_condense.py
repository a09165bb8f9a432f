"""Schur condensation against the monolithic block solve."""

import numpy as np
import pytest

from vmsflow.condense import condense_element, recover_fine
from vmsflow.kernels import ElementSystem, FineScaleError


def random_system(rng, dim, couple=True):
    nen = dim + 1
    nv = nen * dim
    sys = ElementSystem(
        rc=rng.uniform(-1, 1, nv),
        rp=rng.uniform(-1, 1, nen),
        rf=rng.uniform(-1, 1, dim),
        dRc_dv=rng.uniform(-1, 1, (nv, nv)) + 4 * np.eye(nv),
        dRc_dp=rng.uniform(-1, 1, (nv, nen)),
        dRc_db=rng.uniform(-1, 1, (nv, dim)) if couple else np.zeros((nv, dim)),
        dRp_dv=rng.uniform(-1, 1, (nen, nv)),
        dRp_dp=np.zeros((nen, nen)),
        dRp_db=rng.uniform(-1, 1, (nen, dim)) if couple else np.zeros((nen, dim)),
        dRf_dv=rng.uniform(-1, 1, (dim, nv)),
        dRf_dp=rng.uniform(-1, 1, (dim, nen)),
        dRf_db=rng.uniform(-1, 1, (dim, dim)) + 3 * np.eye(dim),
    )
    return sys


def monolithic(sys, dim):
    nen = dim + 1
    nv = nen * dim
    a = np.block(
        [
            [sys.dRc_dv, sys.dRc_dp, sys.dRc_db],
            [sys.dRp_dv, sys.dRp_dp, sys.dRp_db],
            [sys.dRf_dv, sys.dRf_dp, sys.dRf_db],
        ]
    )
    r = np.concatenate([sys.rc, sys.rp, sys.rf])
    return a, r


def test_no_coupling_is_identity():
    rng = np.random.default_rng(1)
    sys = random_system(rng, 3, couple=False)
    cond = condense_element(sys)
    assert np.allclose(cond.kvv, sys.dRc_dv)
    assert np.allclose(cond.kvp, sys.dRc_dp)
    assert np.allclose(cond.kpv, sys.dRp_dv)
    assert np.allclose(cond.kpp, 0.0)
    assert np.allclose(cond.r1, sys.rc)
    assert np.allclose(cond.r2, sys.rp)


def test_zero_fine_residual_keeps_coarse_residuals():
    rng = np.random.default_rng(2)
    sys = random_system(rng, 2)
    sys.rf[:] = 0.0
    cond = condense_element(sys)
    assert np.allclose(cond.r1, sys.rc)
    assert np.allclose(cond.r2, sys.rp)


def test_kpp_nonzero_from_elimination():
    """Pressure-pressure stabilization appears even though DRp_dp = 0."""
    rng = np.random.default_rng(3)
    sys = random_system(rng, 3)
    cond = condense_element(sys)
    assert np.abs(cond.kpp).max() > 1e-3


@pytest.mark.parametrize("dim", [2, 3])
def test_condensed_solve_matches_monolithic(dim):
    """Condense + solve + recover equals the full block solve."""
    rng = np.random.default_rng(40 + dim)
    nen = dim + 1
    nv = nen * dim
    for _ in range(10):
        sys = random_system(rng, dim)
        a, r = monolithic(sys, dim)
        full = np.linalg.solve(a, -r)
        cond = condense_element(sys)
        k = np.block([[cond.kvv, cond.kvp], [cond.kpv, cond.kpp]])
        rhs = -np.concatenate([cond.r1, cond.r2])
        coarse = np.linalg.solve(k, rhs)
        dv, dp = coarse[:nv], coarse[nv:]
        dbeta = recover_fine(cond, dv, dp)
        got = np.concatenate([dv, dp, dbeta])
        ref = max(1.0, np.abs(full).max())
        assert np.abs(got - full).max() / ref <= 1e-10


def test_recover_fine_trivial_cases():
    rng = np.random.default_rng(5)
    sys = random_system(rng, 3)
    sys.rf[:] = 0.0
    cond = condense_element(sys)
    assert np.allclose(recover_fine(cond, np.zeros(12), np.zeros(4)), 0.0)
    sys2 = random_system(rng, 3)
    cond2 = condense_element(sys2)
    expect = -np.linalg.solve(sys2.dRf_db, sys2.rf)
    assert np.allclose(recover_fine(cond2, np.zeros(12), np.zeros(4)), expect, atol=1e-12)


def test_recovered_update_satisfies_fine_row():
    """Plug (dv, dp, dbeta) back into the fine block row."""
    rng = np.random.default_rng(6)
    sys = random_system(rng, 3)
    cond = condense_element(sys)
    dv = rng.uniform(-1, 1, 12)
    dp = rng.uniform(-1, 1, 4)
    dbeta = recover_fine(cond, dv, dp)
    row = sys.rf + sys.dRf_dv @ dv + sys.dRf_dp @ dp + sys.dRf_db @ dbeta
    assert np.abs(row).max() <= 1e-12


def test_singular_fine_block_propagates():
    rng = np.random.default_rng(7)
    sys = random_system(rng, 3)
    sys.dRf_db = np.zeros((3, 3))
    with pytest.raises(FineScaleError):
        condense_element(sys)
