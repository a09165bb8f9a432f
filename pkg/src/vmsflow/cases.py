"""Benchmark case definitions and the manufactured-solution machinery.

A CaseDefinition bundles a mesh, boundary conditions, physical data,
and optional transient/diagnostic settings, and knows how to produce
the objects the solver consumes.  The manufactured solution drives the
convergence study: velocity comes from a stream function (2D) or a
vector potential (3D) so it is solenoidal by construction, and the
body force is derived symbolically from the strong momentum equation
with the same full-gradient viscous operator the kernels integrate.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import sympy
from sympy.parsing.sympy_parser import parse_expr

from .assembly import BoundaryConditions, apply_dirichlet, resolve_bcs
from .basis import element_kinematics
from .kernels import CaseData, FlowState, default_tables
from .mesh import Mesh, generate_box_mesh, load_mesh

_X, _Y, _Z, _T = sympy.symbols("x y z t")
_AXES = {"x": 0, "y": 1, "z": 2}

JET_ORIFICE_RADIUS = 0.125
JET_ORIFICE_CENTER = (0.5, 0.5)  # (y, z) on the x=0 face


class CaseError(Exception):
    """Raised for unbuildable or inconsistent case definitions."""


# ---------------------------------------------------------------------------
# manufactured solution


def _vectorize(exprs, syms):
    """Lambdify a list of sympy expressions into an (..., k) evaluator."""
    fns = [sympy.lambdify(syms, e, "numpy") for e in exprs]

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        args = [x[..., i] for i in range(len(syms))]
        cols = [np.broadcast_to(np.asarray(f(*args), dtype=float), x.shape[:-1])
                for f in fns]
        return np.stack(cols, axis=-1)

    return evaluate


@dataclass(frozen=True)
class ManufacturedSolution:
    """Closed-form solenoidal velocity/pressure pair with derived body force."""

    dim: int
    nu: float
    v_exprs: tuple
    p_expr: object
    f_exprs: tuple
    coords: tuple

    @classmethod
    def build(cls, dim: int, nu: float) -> "ManufacturedSolution":
        if dim == 2:
            psi = sympy.sin(sympy.pi * _X) ** 2 * sympy.sin(sympy.pi * _Y) ** 2
            v = (sympy.diff(psi, _Y), -sympy.diff(psi, _X))
            p = sympy.sin(sympy.pi * _X) * sympy.sin(sympy.pi * _Y) - 4 / sympy.pi**2
            coords = (_X, _Y)
        elif dim == 3:
            s = (
                sympy.sin(sympy.pi * _X) ** 2
                * sympy.sin(sympy.pi * _Y) ** 2
                * sympy.sin(sympy.pi * _Z) ** 2
            )
            g = [sympy.diff(s, c) for c in (_X, _Y, _Z)]
            # v = grad(S) x (1, 1, 1): solenoidal, zero wherever grad S is
            v = (g[1] - g[2], g[2] - g[0], g[0] - g[1])
            p = (
                sympy.sin(sympy.pi * _X)
                * sympy.sin(sympy.pi * _Y)
                * sympy.sin(sympy.pi * _Z)
                - (2 / sympy.pi) ** 3
            )
            coords = (_X, _Y, _Z)
        else:
            raise CaseError(f"manufactured solution needs dim 2 or 3, got {dim}")
        conv = [
            sum(v[j] * sympy.diff(v[i], coords[j]) for j in range(dim))
            for i in range(dim)
        ]
        lap = [sum(sympy.diff(v[i], c, 2) for c in coords) for i in range(dim)]
        f = tuple(
            conv[i] - 2 * nu * lap[i] + sympy.diff(p, coords[i]) for i in range(dim)
        )
        return cls(dim, nu, v, p, f, coords)

    @property
    def velocity(self):
        return _vectorize(self.v_exprs, self.coords)

    @property
    def pressure(self):
        fn = _vectorize([self.p_expr], self.coords)
        return lambda x: fn(x)[..., 0]

    @property
    def body_force(self):
        fn = _vectorize(self.f_exprs, self.coords)
        return lambda x, t=0.0: fn(x)

    def divergence_expr(self):
        return sympy.simplify(
            sum(sympy.diff(self.v_exprs[i], self.coords[i]) for i in range(self.dim))
        )

    def strong_residual_exprs(self):
        """Momentum residual with the derived force; zero by construction."""
        conv = [
            sum(self.v_exprs[j] * sympy.diff(self.v_exprs[i], self.coords[j])
                for j in range(self.dim))
            for i in range(self.dim)
        ]
        lap = [
            sum(sympy.diff(self.v_exprs[i], c, 2) for c in self.coords)
            for i in range(self.dim)
        ]
        return [
            sympy.simplify(
                conv[i]
                - 2 * self.nu * lap[i]
                + sympy.diff(self.p_expr, self.coords[i])
                - self.f_exprs[i]
            )
            for i in range(self.dim)
        ]


# ---------------------------------------------------------------------------
# case definition


@dataclass
class CaseDefinition:
    """One fully resolved flow problem ready to hand to the solver."""

    name: str
    mesh: Mesh
    nu: float
    dirichlet: list  # ordered (tag, value) pairs; later entries win
    pin: tuple | None = None  # (node, value)
    traction_tags: tuple = ()
    body_force: object = None
    dt: float | None = None
    n_steps: int | None = None
    diagnostics: dict = field(default_factory=dict)
    exact: ManufacturedSolution | None = None
    include_convection: bool = True

    def __post_init__(self):
        if self.nu <= 0:
            raise CaseError(f"viscosity must be positive, got {self.nu}")
        known = set(self.mesh.tag_names)
        declared = {t for t, _ in self.dirichlet} | set(self.traction_tags)
        missing = known - declared
        if missing:
            raise CaseError(f"boundary tags without a condition: {sorted(missing)}")
        if not self.traction_tags and self.pin is None:
            raise CaseError("enclosed flow needs a pressure pin")

    def boundary_conditions(self) -> BoundaryConditions:
        return resolve_bcs(
            self.mesh,
            dirichlet=self.dirichlet,
            pin=self.pin,
            traction_tags=self.traction_tags,
        )

    def case_data(self) -> CaseData:
        return CaseData(
            nu=self.nu,
            body_force=self.body_force,
            traction_tags=frozenset(self.traction_tags),
            include_convection=self.include_convection,
        )

    def initial_state(self, bcs: BoundaryConditions | None = None, t: float = 0.0) -> FlowState:
        state = FlowState.zeros(self.mesh)
        apply_dirichlet(state, bcs or self.boundary_conditions(), t)
        return state


def _center_node(mesh: Mesh) -> int:
    return int(np.argmin(np.linalg.norm(mesh.nodes - 0.5, axis=1)))


def case_body_force_cavity(dim: int, divisions: int, nu: float = 0.1) -> CaseDefinition:
    """Enclosed no-slip box driven by the manufactured body force.

    The exact fields vanish on the boundary, so all walls are
    homogeneous Dirichlet; the pressure is pinned to the exact value at
    the node nearest the box center.
    """
    mesh = generate_box_mesh(dim, divisions)
    ms = ManufacturedSolution.build(dim, nu)
    pin_node = _center_node(mesh)
    pin_value = float(ms.pressure(mesh.nodes[pin_node][None])[0])
    zero = tuple(0.0 for _ in range(dim))
    return CaseDefinition(
        name=f"mms{dim}d",
        mesh=mesh,
        nu=nu,
        dirichlet=[(tag, zero) for tag in sorted(mesh.tag_names)],
        pin=(pin_node, pin_value),
        body_force=ms.body_force,
        exact=ms,
    )


def case_lid_cavity_3d(divisions: int, re: float) -> CaseDefinition:
    """Cubic lid-driven cavity: unit x-velocity on the top (zmax) face.

    The lid entry is declared last so shared edge nodes take the lid
    value; the centerline diagnostic runs in z through the cavity
    center.
    """
    if re <= 0:
        raise CaseError(f"Reynolds number must be positive, got {re}")
    mesh = generate_box_mesh(3, divisions)
    walls = ["xmin", "xmax", "ymin", "ymax", "zmin"]
    zero = (0.0, 0.0, 0.0)
    return CaseDefinition(
        name="lid3d",
        mesh=mesh,
        nu=1.0 / re,
        dirichlet=[(tag, zero) for tag in walls] + [("zmax", (1.0, 0.0, 0.0))],
        pin=(_center_node(mesh), 0.0),
        diagnostics={"centerline_axis": "z", "centerline_through": (0.5, 0.5)},
    )


def _jet_inflow(x, t):
    """Paraboloid x-velocity over the orifice, zero elsewhere on the wall."""
    r2 = (x[..., 1] - JET_ORIFICE_CENTER[0]) ** 2 + (
        x[..., 2] - JET_ORIFICE_CENTER[1]
    ) ** 2
    prof = np.maximum(0.0, 1.0 - r2 / JET_ORIFICE_RADIUS**2)
    out = np.zeros_like(x)
    out[..., 0] = prof
    return out


def case_jet_orifice_3d(
    divisions: int,
    nu: float = 0.001,
    dt: float = 0.01,
    n_steps: int = 50,
) -> CaseDefinition:
    """Transient jet entering a unit box through a circular wall orifice.

    The x=0 wall is no-slip except over an orifice of radius 0.125
    centered at (y, z) = (0.5, 0.5), where a paraboloid x-velocity with
    peak 1 is prescribed; the five remaining faces are traction-free.
    """
    h = 1.0 / divisions
    if h > JET_ORIFICE_RADIUS:
        raise CaseError(
            "orifice not resolvable: fewer than 2 nodes across "
            f"(node spacing {h:g} > radius {JET_ORIFICE_RADIUS:g})"
        )
    mesh = generate_box_mesh(3, divisions)
    return CaseDefinition(
        name="jet3d",
        mesh=mesh,
        nu=nu,
        dirichlet=[("xmin", _jet_inflow)],
        traction_tags=("xmax", "ymin", "ymax", "zmin", "zmax"),
        dt=dt,
        n_steps=n_steps,
        diagnostics={"centerline_axis": "x", "centerline_through": (0.5, 0.5)},
    )


# ---------------------------------------------------------------------------
# discretization error against the exact fields


def l2_errors(case: CaseDefinition, state: FlowState) -> tuple[float, float]:
    """L2 velocity (coarse + fine) and mean-free pressure errors.

    The pressure comparison removes the volume mean of the difference
    so the pinned constant does not pollute the rate.
    """
    if case.exact is None:
        raise CaseError(f"case {case.name!r} has no exact solution")
    mesh, ms = case.mesh, case.exact
    dim = mesh.dim
    tables = default_tables(dim)
    xe = mesh.nodes[mesh.elements]  # (ne, nen, dim)
    _, detj, _ = element_kinematics(xe, tables.DN)
    wdet = tables.quad.weights[None, :] * detj[:, None]  # (ne, nq)
    xq = np.einsum("qa,eai->eqi", tables.N, xe, optimize=True)

    ve = state.v[mesh.elements]  # (ne, nen, dim)
    vh = np.einsum("qa,eai->eqi", tables.N, ve, optimize=True)
    vh = vh + tables.b[None, :, None] * state.beta[:, None, :]
    dv = vh - ms.velocity(xq)
    err_v = float(np.sqrt(np.sum(wdet * np.sum(dv**2, axis=-1))))

    pe = state.p[mesh.elements]
    ph = np.einsum("qa,ea->eq", tables.N, pe, optimize=True)
    dp = ph - ms.pressure(xq)
    volume = float(np.sum(wdet))
    shift = float(np.sum(wdet * dp)) / volume
    err_p = float(np.sqrt(np.sum(wdet * (dp - shift) ** 2)))
    return err_v, err_p


def observed_orders(hs, errors) -> list[float]:
    """Pairwise convergence orders log(e_i/e_{i+1}) / log(h_i/h_{i+1})."""
    return [
        float(np.log(errors[i] / errors[i + 1]) / np.log(hs[i] / hs[i + 1]))
        for i in range(len(errors) - 1)
    ]


# ---------------------------------------------------------------------------
# case files


_BUILTINS = {
    "mms2d": (
        lambda divisions, nu: case_body_force_cavity(2, divisions, nu),
        {"divisions": 8, "nu": 0.1},
    ),
    "mms3d": (
        lambda divisions, nu: case_body_force_cavity(3, divisions, nu),
        {"divisions": 4, "nu": 0.1},
    ),
    "lid3d": (case_lid_cavity_3d, {"divisions": 10, "re": 100.0}),
    "jet3d": (
        case_jet_orifice_3d,
        {"divisions": 8, "nu": 0.001, "dt": 0.01, "n_steps": 50},
    ),
}


def builtin_catalog() -> dict[str, dict[str, float | int]]:
    """Names of the builtin cases mapped to their default parameters."""
    return {name: dict(defaults) for name, (_, defaults) in _BUILTINS.items()}


def builtin_case(name: str, **overrides) -> CaseDefinition:
    """Construct one of the named benchmark cases with keyword overrides."""
    try:
        factory, defaults = _BUILTINS[name]
    except KeyError:
        raise CaseError(
            f"unknown case {name!r} (available: {sorted(_BUILTINS)})"
        ) from None
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise CaseError(
            f"case {name!r} does not accept {sorted(unknown)} "
            f"(accepts: {sorted(defaults)})"
        )
    return factory(**{**defaults, **overrides})


_EXPR_LOCALS = {"x": _X, "y": _Y, "z": _Z, "t": _T, "pi": sympy.pi,
                "sin": sympy.sin, "cos": sympy.cos, "exp": sympy.exp,
                "sqrt": sympy.sqrt, "tanh": sympy.tanh}


def _parse_value(text: str, dim: int, where: str):
    """Parse comma-separated component expressions over x, y, z, t."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != dim:
        raise CaseError(f"{where}: expected {dim} components, got {len(parts)}")
    syms = (_X, _Y, _Z)[:dim]
    try:
        exprs = [parse_expr(p, local_dict=_EXPR_LOCALS) for p in parts]
    except (SyntaxError, TypeError, sympy.SympifyError) as exc:
        raise CaseError(f"{where}: bad expression ({exc})") from None
    free = set().union(*(e.free_symbols for e in exprs)) - set(syms) - {_T}
    if free:
        raise CaseError(f"{where}: unknown symbols {sorted(map(str, free))}")
    if not free and all(e.is_number for e in exprs):
        return tuple(float(e) for e in exprs)
    fns = [sympy.lambdify((*syms, _T), e, "numpy") for e in exprs]

    def value(xp, t=0.0):
        xp = np.asarray(xp, dtype=float)
        args = [xp[..., i] for i in range(dim)]
        cols = [
            np.broadcast_to(np.asarray(f(*args, t), dtype=float), xp.shape[:-1])
            for f in fns
        ]
        return np.stack(cols, axis=-1)

    return value


def load_case_file(path) -> CaseDefinition:
    """Read a case from key-value text with one section per boundary tag.

    The ``[case]`` section carries name, nu, the mesh source
    (``box <dim> <divisions>`` or ``file <path>``), the optional pin
    (``auto``, ``none``, or a node index), body_force expressions, and
    transient parameters.  Each ``[tag:<name>]`` section declares
    ``kind = dirichlet`` with ``value`` expressions, or
    ``kind = traction-free``.
    """
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise CaseError(f"cannot read case file {path}")
    if "case" not in parser:
        raise CaseError(f"{path}: missing [case] section")
    sec = parser["case"]
    try:
        nu = sec.getfloat("nu")
    except ValueError as exc:
        raise CaseError(f"{path}: bad nu ({exc})") from None
    if nu is None:
        raise CaseError(f"{path}: [case] needs nu")
    mesh_spec = sec.get("mesh", "").split()
    if len(mesh_spec) == 3 and mesh_spec[0] == "box":
        mesh = generate_box_mesh(int(mesh_spec[1]), int(mesh_spec[2]))
    elif len(mesh_spec) == 2 and mesh_spec[0] == "file":
        mesh_path = path.parent / mesh_spec[1]
        fmt = "gmsh-ascii-v2" if mesh_path.suffix == ".msh" else "native"
        mesh = load_mesh(mesh_path, fmt)
    else:
        raise CaseError(
            f"{path}: mesh must be 'box <dim> <divisions>' or 'file <path>', "
            f"got {sec.get('mesh')!r}"
        )
    dim = mesh.dim

    dirichlet, traction = [], []
    for section in parser.sections():
        if not section.startswith("tag:"):
            continue
        tag = section[4:]
        if tag not in mesh.tag_names:
            raise CaseError(f"{path}: [{section}] names unknown tag {tag!r}")
        kind = parser[section].get("kind", "")
        if kind == "dirichlet":
            text = parser[section].get("value")
            if text is None:
                raise CaseError(f"{path}: [{section}] needs value expressions")
            dirichlet.append((tag, _parse_value(text, dim, f"[{section}] value")))
        elif kind == "traction-free":
            traction.append(tag)
        else:
            raise CaseError(
                f"{path}: [{section}] kind must be 'dirichlet' or 'traction-free', "
                f"got {kind!r}"
            )

    body_force = None
    if sec.get("body_force"):
        bf = _parse_value(sec["body_force"], dim, "[case] body_force")
        if isinstance(bf, tuple):
            vec = np.asarray(bf)
            body_force = lambda xp, t=0.0, _v=vec: np.broadcast_to(
                _v, np.asarray(xp).shape[:-1] + (dim,)
            ).copy()
        else:
            body_force = bf

    pin_text = sec.get("pin", "auto").strip()
    if pin_text == "none":
        pin = None
    elif pin_text == "auto":
        pin = None if traction else (_center_node(mesh), 0.0)
    else:
        pin = (int(pin_text), sec.getfloat("pin_value", 0.0))

    dt = sec.getfloat("dt", fallback=None)
    n_steps = sec.getint("n_steps", fallback=None)
    return CaseDefinition(
        name=sec.get("name", path.stem),
        mesh=mesh,
        nu=nu,
        dirichlet=dirichlet,
        pin=pin,
        traction_tags=tuple(traction),
        body_force=body_force,
        dt=dt,
        n_steps=n_steps,
    )
