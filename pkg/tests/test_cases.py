"""Case definitions, manufactured fields, and the case-file parser.

The manufactured body force is cross-checked against a finite-difference
evaluation of the strong momentum equation so the symbolic pipeline is
validated by independent numerics, not by its own derivatives.
"""

import numpy as np
import pytest
import sympy

from vmsflow.cases import (
    JET_ORIFICE_RADIUS,
    CaseDefinition,
    CaseError,
    ManufacturedSolution,
    builtin_case,
    case_body_force_cavity,
    case_jet_orifice_3d,
    case_lid_cavity_3d,
    l2_errors,
    load_case_file,
    observed_orders,
)
from vmsflow.kernels import FlowState
from vmsflow.mesh import generate_box_mesh, write_native
from vmsflow.solver import newton_solve

RNG = np.random.default_rng(2718)


def fd_gradient(fn, x, comp, h=1e-5):
    """4th-order central difference of scalar fn(x)[..., comp]."""
    g = np.zeros(x.shape[-1])
    for j in range(x.shape[-1]):
        vals = []
        for k in (-2, -1, 1, 2):
            xp = x.copy()
            xp[..., j] += k * h
            vals.append(fn(xp[None])[0, comp] if fn(xp[None]).ndim == 2 else fn(xp[None])[0])
        g[j] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return g


class TestManufactured:
    @pytest.mark.parametrize("dim", [2, 3])
    def test_divergence_free_symbolically(self, dim):
        ms = ManufacturedSolution.build(dim, 0.05)
        assert ms.divergence_expr() == 0

    @pytest.mark.parametrize("dim", [2, 3])
    def test_strong_residual_zero_symbolically(self, dim):
        ms = ManufacturedSolution.build(dim, 0.05)
        assert all(r == 0 for r in ms.strong_residual_exprs())

    @pytest.mark.parametrize("dim", [2, 3])
    def test_body_force_matches_finite_differences(self, dim):
        """Independent check: f = v.grad v - 2 nu lap v + grad p by FD."""
        nu = 0.05
        ms = ManufacturedSolution.build(dim, nu)
        h = 1e-3
        for _ in range(5):
            x = 0.2 + 0.6 * RNG.random(dim)
            v = ms.velocity(x[None])[0]
            conv = np.array(
                [v @ fd_gradient(ms.velocity, x, i, h) for i in range(dim)]
            )
            lap = np.zeros(dim)
            for i in range(dim):
                for j in range(dim):
                    xp, xm = x.copy(), x.copy()
                    xp[j] += h
                    xm[j] -= h
                    lap[i] += (
                        ms.velocity(xp[None])[0, i]
                        - 2 * v[i]
                        + ms.velocity(xm[None])[0, i]
                    ) / h**2
            gp = fd_gradient(ms.pressure, x, 0, h)
            f_fd = conv - 2 * nu * lap + gp
            f = ms.body_force(x[None])[0]
            np.testing.assert_allclose(f, f_fd, atol=5e-4, rtol=1e-4)

    @pytest.mark.parametrize("dim", [2, 3])
    def test_velocity_vanishes_on_boundary(self, dim):
        ms = ManufacturedSolution.build(dim, 0.1)
        for axis in range(dim):
            for val in (0.0, 1.0):
                x = RNG.random((100, dim))
                x[:, axis] = val
                assert np.max(np.abs(ms.velocity(x))) <= 1e-13

    @pytest.mark.parametrize("dim", [2, 3])
    def test_pressure_has_zero_mean(self, dim):
        ms = ManufacturedSolution.build(dim, 0.1)
        syms = ms.coords
        integral = ms.p_expr
        for s in syms:
            integral = sympy.integrate(integral, (s, 0, 1))
        assert sympy.simplify(integral) == 0

    def test_bad_dim_rejected(self):
        with pytest.raises(CaseError, match="dim 2 or 3"):
            ManufacturedSolution.build(4, 0.1)


class TestCaseConstruction:
    def test_mms_cavity_pins_exact_pressure(self):
        case = case_body_force_cavity(2, 4, nu=0.1)
        node, value = case.pin
        expected = float(case.exact.pressure(case.mesh.nodes[node][None])[0])
        assert value == pytest.approx(expected, abs=1e-14)
        assert {t for t, _ in case.dirichlet} == set(case.mesh.tag_names)

    def test_missing_tag_rejected(self):
        mesh = generate_box_mesh(2, 2)
        with pytest.raises(CaseError, match="without a condition"):
            CaseDefinition(
                name="bad", mesh=mesh, nu=1.0,
                dirichlet=[("xmin", (0.0, 0.0))], pin=(0, 0.0),
            )

    def test_enclosed_flow_needs_pin(self):
        mesh = generate_box_mesh(2, 2)
        zero = (0.0, 0.0)
        with pytest.raises(CaseError, match="pressure pin"):
            CaseDefinition(
                name="bad", mesh=mesh, nu=1.0,
                dirichlet=[(t, zero) for t in mesh.tag_names], pin=None,
            )

    def test_nonpositive_viscosity_rejected(self):
        mesh = generate_box_mesh(2, 2)
        zero = (0.0, 0.0)
        with pytest.raises(CaseError, match="viscosity"):
            CaseDefinition(
                name="bad", mesh=mesh, nu=0.0,
                dirichlet=[(t, zero) for t in mesh.tag_names], pin=(0, 0.0),
            )

    def test_lid_cavity_lid_wins_on_edges(self):
        case = case_lid_cavity_3d(4, re=100.0)
        assert case.nu == pytest.approx(0.01)
        bcs = case.boundary_conditions()
        state = case.initial_state(bcs)
        mesh = case.mesh
        top = np.abs(mesh.nodes[:, 2] - 1.0) < 1e-12
        np.testing.assert_allclose(state.v[top, 0], 1.0)
        np.testing.assert_allclose(state.v[top, 1:], 0.0)
        np.testing.assert_allclose(state.v[~top & (mesh.nodes[:, 0] < 1e-12)], 0.0)
        with pytest.raises(CaseError, match="Reynolds"):
            case_lid_cavity_3d(4, re=0.0)

    def test_jet_orifice_profile(self):
        case = case_jet_orifice_3d(8)
        bcs = case.boundary_conditions()
        state = case.initial_state(bcs)
        mesh = case.mesh
        on_wall = np.abs(mesh.nodes[:, 0]) < 1e-12
        center = on_wall & (np.abs(mesh.nodes[:, 1] - 0.5) < 1e-12) & (
            np.abs(mesh.nodes[:, 2] - 0.5) < 1e-12
        )
        assert np.count_nonzero(center) == 1
        np.testing.assert_allclose(state.v[center], [[1.0, 0.0, 0.0]])
        r = np.hypot(mesh.nodes[:, 1] - 0.5, mesh.nodes[:, 2] - 0.5)
        edge = on_wall & (np.abs(r - JET_ORIFICE_RADIUS) < 1e-12)
        assert np.count_nonzero(edge) >= 4
        np.testing.assert_allclose(state.v[edge], 0.0, atol=1e-14)
        outside = on_wall & (r > JET_ORIFICE_RADIUS)
        np.testing.assert_allclose(state.v[outside], 0.0)
        assert case.pin is None
        assert len(case.traction_tags) == 5

    def test_jet_unresolvable_orifice(self):
        with pytest.raises(CaseError, match="fewer than 2 nodes across"):
            case_jet_orifice_3d(4)

    def test_builtin_names(self):
        assert builtin_case("lid3d", divisions=3, re=10.0).name == "lid3d"
        assert builtin_case("mms2d", divisions=3).exact is not None
        with pytest.raises(CaseError, match="unknown case"):
            builtin_case("warp-drive")


class TestErrors:
    def test_zero_state_error_is_field_norm(self):
        """With u_h = 0 the L2 error equals ||v*|| and ||p*||, known exactly."""
        case = case_body_force_cavity(2, 8, nu=0.1)
        ms = case.exact
        state = FlowState.zeros(case.mesh)
        err_v, err_p = l2_errors(case, state)
        x, y = ms.coords
        norm_v2 = sympy.integrate(
            sum(e**2 for e in ms.v_exprs), (x, 0, 1), (y, 0, 1)
        )
        norm_p2 = sympy.integrate(ms.p_expr**2, (x, 0, 1), (y, 0, 1))
        assert err_v == pytest.approx(float(sympy.sqrt(norm_v2)), rel=1e-2)
        assert err_p == pytest.approx(float(sympy.sqrt(norm_p2)), rel=1e-2)

    def test_error_requires_exact_solution(self):
        case = case_lid_cavity_3d(2, re=10.0)
        with pytest.raises(CaseError, match="no exact solution"):
            l2_errors(case, FlowState.zeros(case.mesh))

    def test_observed_orders_formula(self):
        hs = [0.25, 0.125, 0.0625]
        errors = [h**2 for h in hs]
        np.testing.assert_allclose(observed_orders(hs, errors), [2.0, 2.0])

    def test_coarse_pair_convergence_2d(self):
        """Cheap two-mesh sanity run; the full study is an acceptance case."""
        errs, hs = [], []
        for div in (4, 8):
            case = case_body_force_cavity(2, div, nu=0.1)
            bcs = case.boundary_conditions()
            state, _ = newton_solve(
                case.mesh, case.case_data(), case.initial_state(bcs),
                bcs=bcs, linear_backend="direct",
            )
            ev, _ = l2_errors(case, state)
            errs.append(ev)
            hs.append(1.0 / div)
        assert observed_orders(hs, errs)[0] >= 1.5


class TestStokesSymmetry:
    def test_lid_cavity_stokes_mirror_symmetry(self):
        """Stokes flow is time-reversible: u_x even and u_z odd under
        x -> 1-x.  Tolerance covers the mirror-asymmetric element split."""
        case = case_lid_cavity_3d(8, re=1.0)
        case.include_convection = False
        bcs = case.boundary_conditions()
        state, _ = newton_solve(
            case.mesh, case.case_data(), case.initial_state(bcs),
            bcs=bcs, linear_backend="direct",
        )
        nodes = case.mesh.nodes
        key = {tuple(np.round(p, 9)): i for i, p in enumerate(nodes)}
        mirror = np.array(
            [key[tuple(np.round([1 - p[0], p[1], p[2]], 9))] for p in nodes]
        )
        scale = np.max(np.abs(state.v[:, 0]))
        assert np.max(np.abs(state.v[:, 0] - state.v[mirror, 0])) <= 0.05 * scale
        assert np.max(np.abs(state.v[:, 2] + state.v[mirror, 2])) <= 0.05 * scale


CASE_FILE = """
[case]
name = demo
nu = 0.04
mesh = box 2 4
pin = auto

[tag:xmin]
kind = dirichlet
value = 0.0, 0.0

[tag:xmax]
kind = dirichlet
value = 0.0, 0.0

[tag:ymin]
kind = dirichlet
value = 0.0, 0.0

[tag:ymax]
kind = dirichlet
value = sin(pi*x)*t, 0.0
"""


class TestCaseFile:
    def test_round_trip_expressions(self, tmp_path):
        path = tmp_path / "demo.case"
        path.write_text(CASE_FILE)
        case = load_case_file(path)
        assert case.name == "demo"
        assert case.nu == pytest.approx(0.04)
        assert case.mesh.dim == 2 and case.mesh.n_nodes == 25
        assert case.pin is not None  # enclosed -> auto pin
        lid = dict(case.dirichlet)["ymax"]
        x = np.array([[0.25, 1.0], [0.5, 1.0]])
        got = lid(x, t=2.0)
        np.testing.assert_allclose(
            got[:, 0], 2.0 * np.sin(np.pi * x[:, 0]), atol=1e-14
        )
        np.testing.assert_allclose(got[:, 1], 0.0)
        # constant entries collapse to plain vectors
        assert dict(case.dirichlet)["xmin"] == (0.0, 0.0)

    def test_solvable_from_file(self, tmp_path):
        path = tmp_path / "demo.case"
        path.write_text(CASE_FILE.replace("sin(pi*x)*t", "1.0"))
        case = load_case_file(path)
        bcs = case.boundary_conditions()
        state, trace = newton_solve(
            case.mesh, case.case_data(), case.initial_state(bcs),
            bcs=bcs, linear_backend="direct",
        )
        assert trace.converged
        assert np.max(np.abs(state.v)) > 0.1

    def test_mesh_from_file_reference(self, tmp_path):
        mesh = generate_box_mesh(2, 3)
        write_native(mesh, tmp_path / "grid.vmsh")
        text = CASE_FILE.replace("box 2 4", "file grid.vmsh")
        (tmp_path / "ref.case").write_text(text)
        case = load_case_file(tmp_path / "ref.case")
        assert case.mesh.n_nodes == mesh.n_nodes

    def test_traction_free_and_auto_pin_suppression(self, tmp_path):
        text = CASE_FILE.replace(
            "[tag:xmax]\nkind = dirichlet\nvalue = 0.0, 0.0",
            "[tag:xmax]\nkind = traction-free",
        )
        path = tmp_path / "open.case"
        path.write_text(text)
        case = load_case_file(path)
        assert case.traction_tags == ("xmax",)
        assert case.pin is None

    @pytest.mark.parametrize(
        "breakage, message",
        [
            (("nu = 0.04", "nu = fast"), "bad nu"),
            (("mesh = box 2 4", "mesh = sphere 5"), "mesh must be"),
            (("kind = dirichlet\nvalue = sin(pi*x)*t, 0.0", "kind = robin"), "kind must be"),
            (("value = sin(pi*x)*t, 0.0", "value = q+1, 0.0"), "unknown symbols"),
            (("value = sin(pi*x)*t, 0.0", "value = 1.0"), "expected 2 components"),
            (("[tag:ymax]", "[tag:lid]"), "unknown tag"),
        ],
    )
    def test_malformed_files_rejected(self, tmp_path, breakage, message):
        old, new = breakage
        path = tmp_path / "bad.case"
        path.write_text(CASE_FILE.replace(old, new))
        with pytest.raises(CaseError, match=message):
            load_case_file(path)

    def test_missing_file_and_section(self, tmp_path):
        with pytest.raises(CaseError, match="cannot read"):
            load_case_file(tmp_path / "nope.case")
        p = tmp_path / "empty.case"
        p.write_text("[tag:xmin]\nkind = traction-free\n")
        with pytest.raises(CaseError, match="missing .case. section"):
            load_case_file(p)
