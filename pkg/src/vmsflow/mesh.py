"""Unstructured simplex meshes with tagged boundary faces.

Supports a native line-based ASCII format, a small subset of gmsh ASCII
v2, and structured box generation (2-triangle cells in 2D, 6-tetrahedra
Kuhn cells in 3D).

Native format::

    vmsmesh 1 <dim>
    <n_nodes> <n_elements> <n_faces>
    x y [z]          (n_nodes lines)
    a b c [d]        (n_elements lines, zero-based node indices)
    a b [c] tag      (n_faces lines)

``#`` begins a comment.  Coordinates are written with ``repr`` so a
write/load round trip reproduces them bit for bit.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NATIVE_MAGIC = "vmsmesh"
NATIVE_VERSION = 1

#: local faces opposite each vertex, consistent across the package
TRI_FACES = ((1, 2), (0, 2), (0, 1))
TET_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))

GMSH_TRI = 2
GMSH_TET = 4

DEFAULT_BOX_SIDES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


class MeshError(Exception):
    """Raised for unreadable, inconsistent, or degenerate meshes."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplex mesh.

    Attributes
    ----------
    dim : int
        Spatial dimension, 2 or 3.
    nodes : ndarray, shape (n_nodes, dim)
    elements : ndarray, shape (n_elements, dim + 1)
        Zero-based node indices, positively oriented.
    face_nodes : ndarray, shape (n_faces, dim)
        Node indices of tagged boundary faces.
    face_tags : tuple of str
        Tag of each boundary face, aligned with ``face_nodes``.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    face_nodes: np.ndarray
    face_tags: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_faces(self) -> int:
        return self.face_nodes.shape[0]

    @property
    def boundary_faces(self) -> list[tuple[tuple[int, ...], str]]:
        """Faces as (node tuple, tag) pairs."""
        return [
            (tuple(int(n) for n in fn), tag)
            for fn, tag in zip(self.face_nodes, self.face_tags)
        ]

    @cached_property
    def tag_names(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for t in self.face_tags:
            seen.setdefault(t)
        return tuple(seen)

    @cached_property
    def face_owners(self) -> tuple[np.ndarray, np.ndarray]:
        """(element index, local face index) owning each boundary face.

        Raises
        ------
        MeshError
            If a tagged face is not a face of exactly one element.
        """
        local_faces = TRI_FACES if self.dim == 2 else TET_FACES
        lookup: dict[tuple[int, ...], list[tuple[int, int]]] = {}
        for e, elem in enumerate(self.elements):
            for lf, idx in enumerate(local_faces):
                key = tuple(sorted(int(elem[i]) for i in idx))
                lookup.setdefault(key, []).append((e, lf))
        owners = np.empty(self.n_faces, dtype=np.int64)
        local = np.empty(self.n_faces, dtype=np.int64)
        for f, fn in enumerate(self.face_nodes):
            key = tuple(sorted(int(n) for n in fn))
            hits = lookup.get(key, [])
            if len(hits) == 0:
                raise MeshError(f"dangling face {f} {key}: not a face of any element")
            if len(hits) > 1:
                raise MeshError(
                    f"face {f} {key} is shared by elements "
                    f"{[h[0] for h in hits]}; tagged faces must be on the boundary"
                )
            owners[f], local[f] = hits[0]
        return owners, local

    def faces_with_tag(self, tag: str) -> np.ndarray:
        """Indices into ``face_nodes`` carrying the given tag."""
        return np.array([i for i, t in enumerate(self.face_tags) if t == tag], dtype=np.int64)

    def nodes_with_tag(self, tag: str) -> np.ndarray:
        """Sorted unique node indices on faces carrying the given tag."""
        idx = self.faces_with_tag(tag)
        if idx.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.face_nodes[idx])


@dataclass(frozen=True)
class MeshViolation:
    """One broken mesh invariant; ``kind`` is a stable identifier."""

    kind: str
    index: int
    message: str


def element_volumes(mesh: Mesh) -> np.ndarray:
    """Signed simplex volumes, vectorized over elements."""
    coords = mesh.nodes[mesh.elements]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    det = np.linalg.det(edges)
    return det / math.factorial(mesh.dim)


def _orient(nodes: np.ndarray, elements: np.ndarray, dim: int, *, source: str) -> np.ndarray:
    """Flip negatively oriented elements (swap the last two nodes).

    Zero-volume elements cannot be repaired and raise MeshError.
    """
    coords = nodes[elements]
    edges = coords[:, 1:, :] - coords[:, :1, :]
    det = np.linalg.det(edges)
    degenerate = np.flatnonzero(det == 0.0)
    if degenerate.size:
        raise MeshError(f"element {degenerate[0]} has zero volume ({source})")
    neg = np.flatnonzero(det < 0.0)
    if neg.size:
        elements = elements.copy()
        elements[neg, -2], elements[neg, -1] = (
            elements[neg, -1].copy(),
            elements[neg, -2].copy(),
        )
        logger.info(
            "repaired orientation of %d element(s) in %s (first: %d)",
            neg.size,
            source,
            neg[0],
        )
    return elements


def _build_mesh(
    dim: int,
    nodes: np.ndarray,
    elements: np.ndarray,
    face_nodes: np.ndarray,
    face_tags: tuple[str, ...],
    *,
    source: str,
) -> Mesh:
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    elements = np.ascontiguousarray(elements, dtype=np.int64)
    if face_nodes.size == 0:
        face_nodes = np.empty((0, dim), dtype=np.int64)
    face_nodes = np.ascontiguousarray(face_nodes, dtype=np.int64)
    if elements.size and (elements.min() < 0 or elements.max() >= nodes.shape[0]):
        raise MeshError(f"element node index out of range ({source})")
    if face_nodes.size and (face_nodes.min() < 0 or face_nodes.max() >= nodes.shape[0]):
        raise MeshError(f"face node index out of range ({source})")
    elements = _orient(nodes, elements, dim, source=source)
    mesh = Mesh(dim, nodes, elements, face_nodes, face_tags)
    mesh.face_owners  # raises on dangling/interior tagged faces
    return mesh


# ---------------------------------------------------------------------------
# generation


def generate_box_mesh(
    dim: int,
    divisions: int | tuple[int, ...],
    tags: dict[str, str] | None = None,
) -> Mesh:
    """Structured simplex mesh of the unit box [0, 1]^dim.

    Each grid cell is split into 2 triangles (2D) or 6 Kuhn tetrahedra
    (3D).  Outer faces are tagged by side; ``tags`` remaps the default
    side names ``xmin, xmax, ymin, ymax, zmin, zmax``.

    Parameters
    ----------
    dim : {2, 3}
    divisions : int or tuple of int
        Cells per axis (single int broadcast to all axes).
    tags : dict, optional
        Partial map from side name to tag string.
    """
    if dim not in (2, 3):
        raise MeshError(f"unsupported dimension {dim}")
    if isinstance(divisions, (int, np.integer)):
        divs = (int(divisions),) * dim
    else:
        divs = tuple(int(d) for d in divisions)
    if len(divs) != dim:
        raise MeshError(f"expected {dim} division counts, got {len(divs)}")
    if any(d < 1 for d in divs):
        raise MeshError(f"divisions must be >= 1 per axis, got {divs}")

    side_tags = {s: s for s in DEFAULT_BOX_SIDES[: 2 * dim]}
    if tags:
        unknown = set(tags) - set(side_tags)
        if unknown:
            raise MeshError(f"unknown box side(s) {sorted(unknown)}")
        side_tags.update(tags)

    axes = [np.linspace(0.0, 1.0, d + 1) for d in divs]
    if dim == 2:
        nx, ny = divs
        xg, yg = np.meshgrid(axes[0], axes[1], indexing="ij")
        nodes = np.column_stack([xg.ravel(order="F"), yg.ravel(order="F")])
        # node index (i, j) -> i + (nx + 1) * j
        def nid(i, j):
            return i + (nx + 1) * j

        elems = []
        for j in range(ny):
            for i in range(nx):
                n00, n10 = nid(i, j), nid(i + 1, j)
                n01, n11 = nid(i, j + 1), nid(i + 1, j + 1)
                elems.append((n00, n10, n11))
                elems.append((n00, n11, n01))
        elements = np.array(elems, dtype=np.int64)
    else:
        nx, ny, nz = divs
        xg, yg, zg = np.meshgrid(axes[0], axes[1], axes[2], indexing="ij")
        nodes = np.column_stack(
            [xg.ravel(order="F"), yg.ravel(order="F"), zg.ravel(order="F")]
        )

        def nid(i, j, k):
            return i + (nx + 1) * (j + (ny + 1) * k)

        # Kuhn subdivision: six tets around the main diagonal of each cell.
        perms = sorted(itertools.permutations(range(3)))
        elems = []
        for k in range(nz):
            for j in range(ny):
                for i in range(nx):
                    corner = np.array([i, j, k])
                    far = corner + 1
                    for perm in perms:
                        p = corner.copy()
                        tet = [nid(*p)]
                        for ax in perm:
                            p = p.copy()
                            p[ax] += 1
                            tet.append(nid(*p))
                        assert np.all(p == far)
                        elems.append(tuple(tet))
        elements = np.array(elems, dtype=np.int64)

    face_nodes, face_tags = _tag_box_faces(dim, nodes, elements, side_tags)
    return _build_mesh(
        dim, nodes, elements, face_nodes, face_tags, source="generate_box_mesh"
    )


def _tag_box_faces(
    dim: int,
    nodes: np.ndarray,
    elements: np.ndarray,
    side_tags: dict[str, str],
) -> tuple[np.ndarray, tuple[str, ...]]:
    """Find element faces on the outer box surface and tag them by side."""
    local_faces = TRI_FACES if dim == 2 else TET_FACES
    counts: dict[tuple[int, ...], int] = {}
    for elem in elements:
        for idx in local_faces:
            key = tuple(sorted(int(elem[i]) for i in idx))
            counts[key] = counts.get(key, 0) + 1
    face_list: list[tuple[int, ...]] = []
    tag_list: list[str] = []
    for elem in elements:
        for idx in local_faces:
            fn = tuple(int(elem[i]) for i in idx)
            key = tuple(sorted(fn))
            if counts[key] != 1:
                continue
            counts[key] = 0  # emit once
            coords = nodes[list(fn)]
            side = None
            for ax in range(dim):
                if np.all(coords[:, ax] == 0.0):
                    side = DEFAULT_BOX_SIDES[2 * ax]
                elif np.all(coords[:, ax] == 1.0):
                    side = DEFAULT_BOX_SIDES[2 * ax + 1]
                if side:
                    break
            if side is None:  # pragma: no cover - structured grid always tags
                raise MeshError(f"boundary face {fn} not on any box side")
            face_list.append(fn)
            tag_list.append(side_tags[side])
    return np.array(face_list, dtype=np.int64), tuple(tag_list)


# ---------------------------------------------------------------------------
# validation


def validate(mesh: Mesh) -> list[MeshViolation]:
    """Check all Mesh invariants; returns one record per violation."""
    out: list[MeshViolation] = []
    n = mesh.n_nodes
    for e, elem in enumerate(mesh.elements):
        ints = [int(v) for v in elem]
        if any(v < 0 or v >= n for v in ints):
            out.append(MeshViolation("index-range", e, f"element {e} references node outside 0..{n - 1}"))
            continue
        if len(set(ints)) != len(ints):
            out.append(MeshViolation("duplicate-node", e, f"element {e} repeats a node index"))
    vols = None
    try:
        vols = element_volumes(mesh)
    except (IndexError, ValueError):
        pass
    if vols is not None:
        for e in np.flatnonzero(vols <= 0.0):
            out.append(
                MeshViolation(
                    "negative-volume",
                    int(e),
                    f"element {int(e)} has non-positive signed volume {vols[e]:.3e}",
                )
            )
    local_faces = TRI_FACES if mesh.dim == 2 else TET_FACES
    counts: dict[tuple[int, ...], int] = {}
    for elem in mesh.elements:
        for idx in local_faces:
            key = tuple(sorted(int(elem[i]) for i in idx))
            counts[key] = counts.get(key, 0) + 1
    for f, fn in enumerate(mesh.face_nodes):
        ints = [int(v) for v in fn]
        if any(v < 0 or v >= n for v in ints):
            out.append(MeshViolation("index-range", f, f"face {f} references node outside 0..{n - 1}"))
            continue
        c = counts.get(tuple(sorted(ints)), 0)
        if c == 0:
            out.append(MeshViolation("dangling-face", f, f"face {f} is not a face of any element"))
        elif c > 1:
            out.append(MeshViolation("interior-face", f, f"face {f} is shared by {c} elements"))
    return out


# ---------------------------------------------------------------------------
# native format


def write_native(mesh: Mesh, path: str | Path) -> None:
    """Write the native ASCII format (see module docstring)."""
    path = Path(path)
    with path.open("w") as f:
        f.write(f"{NATIVE_MAGIC} {NATIVE_VERSION} {mesh.dim}\n")
        f.write(f"{mesh.n_nodes} {mesh.n_elements} {mesh.n_faces}\n")
        for row in mesh.nodes:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
        for row in mesh.elements:
            f.write(" ".join(str(int(v)) for v in row) + "\n")
        for fn, tag in zip(mesh.face_nodes, mesh.face_tags):
            f.write(" ".join(str(int(v)) for v in fn) + f" {tag}\n")


def load_mesh(path: str | Path, format: str = "native") -> Mesh:
    """Load a mesh from ``path``.

    Parameters
    ----------
    path : str or Path
    format : {"native", "gmsh-ascii-v2"}

    Raises
    ------
    MeshError
        On parse errors (with line number), orientation defects that
        cannot be repaired, or dangling faces.
    """
    path = Path(path)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    if format == "native":
        return _load_native(path)
    if format == "gmsh-ascii-v2":
        return _load_gmsh(path)
    raise MeshError(f"unknown mesh format {format!r}")


def _stripped_lines(path: Path):
    """Yield (line_number, content) with comments and blanks removed."""
    with path.open() as f:
        for ln, raw in enumerate(f, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield ln, text


def _load_native(path: Path) -> Mesh:
    lines = _stripped_lines(path)

    def next_line(what: str) -> tuple[int, str]:
        try:
            return next(lines)
        except StopIteration:
            raise MeshError(f"unexpected end of file while reading {what}") from None

    ln, header = next_line("header")
    parts = header.split()
    if len(parts) != 3 or parts[0] != NATIVE_MAGIC:
        raise MeshError(f"expected '{NATIVE_MAGIC} <version> <dim>' header", line=ln)
    try:
        version, dim = int(parts[1]), int(parts[2])
    except ValueError:
        raise MeshError("malformed header", line=ln) from None
    if version != NATIVE_VERSION:
        raise MeshError(f"unsupported format version {version}", line=ln)
    if dim not in (2, 3):
        raise MeshError(f"unsupported dimension {dim}", line=ln)

    ln, counts = next_line("counts")
    try:
        n_nodes, n_elements, n_faces = (int(v) for v in counts.split())
    except ValueError:
        raise MeshError("expected '<n_nodes> <n_elements> <n_faces>'", line=ln) from None
    if min(n_nodes, n_elements, n_faces) < 0:
        raise MeshError("negative count", line=ln)

    nodes = np.empty((n_nodes, dim))
    for i in range(n_nodes):
        ln, text = next_line(f"node {i}")
        parts = text.split()
        if len(parts) != dim:
            raise MeshError(f"expected {dim} coordinates", line=ln)
        try:
            nodes[i] = [float(p) for p in parts]
        except ValueError:
            raise MeshError("malformed coordinate", line=ln) from None

    nen = dim + 1
    elements = np.empty((n_elements, nen), dtype=np.int64)
    for e in range(n_elements):
        ln, text = next_line(f"element {e}")
        parts = text.split()
        if len(parts) != nen:
            raise MeshError(f"expected {nen} node indices", line=ln)
        try:
            elements[e] = [int(p) for p in parts]
        except ValueError:
            raise MeshError("malformed node index", line=ln) from None

    face_nodes = np.empty((n_faces, dim), dtype=np.int64)
    face_tags: list[str] = []
    for fidx in range(n_faces):
        ln, text = next_line(f"face {fidx}")
        parts = text.split()
        if len(parts) != dim + 1:
            raise MeshError(f"expected {dim} node indices and a tag", line=ln)
        try:
            face_nodes[fidx] = [int(p) for p in parts[:dim]]
        except ValueError:
            raise MeshError("malformed node index", line=ln) from None
        face_tags.append(parts[dim])

    for ln, _ in lines:
        raise MeshError("trailing content after mesh data", line=ln)

    return _build_mesh(
        dim, nodes, elements, face_nodes, tuple(face_tags), source=str(path)
    )


# ---------------------------------------------------------------------------
# gmsh ASCII v2 subset


def _load_gmsh(path: Path) -> Mesh:
    """Parse gmsh ASCII v2 with node/element sections.

    Supported element types: 2 (3-node triangle) and 4 (4-node
    tetrahedron).  When tetrahedra are present the mesh is 3D and
    triangles become tagged boundary faces (tag from $PhysicalNames, or
    ``surface<id>``).  A triangle-only file is a 2D mesh with no tagged
    faces.  Any other element type is a parse error.
    """
    phys_names: dict[int, str] = {}
    raw_nodes: list[tuple[int, float, float, float]] = []
    tris: list[tuple[int, list[int], int]] = []  # (line, nodes, physical id)
    tets: list[tuple[int, list[int]]] = []

    with path.open() as f:
        numbered = enumerate(f, start=1)

        def body(section: str):
            """Yield numbered lines until the matching $End marker."""
            for ln, raw in numbered:
                text = raw.strip()
                if text == f"$End{section}":
                    return
                yield ln, text
            raise MeshError(f"missing $End{section}")

        for ln, raw in numbered:
            text = raw.strip()
            if not text:
                continue
            if text == "$MeshFormat":
                for ln2, t in body("MeshFormat"):
                    parts = t.split()
                    if not parts or not parts[0].startswith("2."):
                        raise MeshError(f"unsupported gmsh format {t!r}", line=ln2)
            elif text == "$PhysicalNames":
                rows = body("PhysicalNames")
                next(rows, None)  # count line
                for ln2, t in rows:
                    parts = t.split(maxsplit=2)
                    if len(parts) != 3:
                        raise MeshError("malformed physical name", line=ln2)
                    phys_names[int(parts[1])] = parts[2].strip('"')
            elif text == "$Nodes":
                rows = body("Nodes")
                next(rows, None)  # count line
                for ln2, t in rows:
                    parts = t.split()
                    if len(parts) != 4:
                        raise MeshError("expected 'id x y z'", line=ln2)
                    try:
                        raw_nodes.append(
                            (int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]))
                        )
                    except ValueError:
                        raise MeshError("malformed node line", line=ln2) from None
            elif text == "$Elements":
                rows = body("Elements")
                next(rows, None)  # count line
                for ln2, t in rows:
                    parts = [int(v) for v in t.split()]
                    if len(parts) < 3:
                        raise MeshError("malformed element line", line=ln2)
                    etype, ntags = parts[1], parts[2]
                    conn = parts[3 + ntags :]
                    phys = parts[3] if ntags >= 1 else 0
                    if etype == GMSH_TRI:
                        if len(conn) != 3:
                            raise MeshError("triangle needs 3 nodes", line=ln2)
                        tris.append((ln2, conn, phys))
                    elif etype == GMSH_TET:
                        if len(conn) != 4:
                            raise MeshError("tetrahedron needs 4 nodes", line=ln2)
                        tets.append((ln2, conn))
                    else:
                        raise MeshError(
                            f"unsupported gmsh element type {etype} "
                            "(only 3-node triangles and 4-node tetrahedra)",
                            line=ln2,
                        )
            elif text.startswith("$End"):
                raise MeshError(f"unmatched {text}", line=ln)
            elif text.startswith("$"):
                # unknown section: skip to its end marker
                name = text[1:]
                for _ in body(name):
                    pass

    if not raw_nodes:
        raise MeshError(f"{path}: no $Nodes section")
    index_of = {nid: i for i, (nid, *_xyz) in enumerate(raw_nodes)}
    xyz = np.array([[x, y, z] for _nid, x, y, z in raw_nodes])

    def remap(ln: int, conn: list[int]) -> list[int]:
        try:
            return [index_of[c] for c in conn]
        except KeyError as exc:
            raise MeshError(f"unknown node id {exc.args[0]}", line=ln) from None

    if tets:
        dim = 3
        elements = np.array([remap(ln, c) for ln, c in tets], dtype=np.int64)
        face_nodes = np.array(
            [remap(ln, c) for ln, c, _p in tris], dtype=np.int64
        ).reshape(len(tris), 3)
        face_tags = tuple(
            phys_names.get(p, f"surface{p}") for _ln, _c, p in tris
        )
        nodes = xyz
    else:
        if not tris:
            raise MeshError(f"{path}: no supported elements found")
        dim = 2
        if np.any(xyz[:, 2] != 0.0):
            raise MeshError(f"{path}: triangle-only mesh must lie in the z=0 plane")
        elements = np.array([remap(ln, c) for ln, c, _p in tris], dtype=np.int64)
        face_nodes = np.empty((0, 2), dtype=np.int64)
        face_tags = ()
        nodes = xyz[:, :2]

    return _build_mesh(dim, nodes, elements, face_nodes, face_tags, source=str(path))
