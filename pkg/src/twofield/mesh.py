"""Structured meshes of the driven-cavity and backward-facing-step domains.

Both domains are unions of axis-aligned squares on a uniform lattice.  Squares
are either kept as quadrilaterals or bisected into two right-angled
triangles.  The default ``"alternating"`` diagonal flips orientation in a
checkerboard pattern, so no corner triangle has two boundary edges; the
uniform ``"forward"`` (bottom-left to top-right) cut is available too.
Vertices are numbered lexicographically by ``(y, x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TAGS = ("wall", "lid", "inflow", "outflow")


class TopologyError(ValueError):
    """Raised when a mesh is not conforming."""


@dataclass(frozen=True)
class InteriorFaces:
    elem_a: np.ndarray
    elem_b: np.ndarray
    vertices: np.ndarray  # (n, 2) endpoint vertex indices
    length: np.ndarray
    normal: np.ndarray  # (n, 2) unit normal pointing from elem_a into elem_b

    def __len__(self):
        return len(self.elem_a)


@dataclass(frozen=True)
class BoundaryEdges:
    elem: np.ndarray
    vertices: np.ndarray
    length: np.ndarray
    normal: np.ndarray  # outward unit normal
    tag: np.ndarray  # array of str

    def __len__(self):
        return len(self.elem)


@dataclass(frozen=True)
class Mesh:
    """Conforming 2D mesh of triangles or quadrilaterals.

    ``elements`` lists vertex indices counter-clockwise.  Quadrilaterals are
    ordered ``(bl, br, tr, tl)``; a forward-cut square gives triangles
    ``(bl, br, tr)`` and ``(bl, tr, tl)``, a backward cut ``(bl, br, tl)``
    and ``(br, tr, tl)``.
    """

    vertices: np.ndarray
    elements: np.ndarray
    element_kind: str
    grid_level: int
    spacing: float
    domain: str
    interior_faces: InteriorFaces | None = field(default=None, repr=False)
    boundary_edges: BoundaryEdges | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def h(self) -> float:
        """Maximum element diameter."""
        pts = self.vertices[self.elements]
        diffs = pts[:, :, None, :] - pts[:, None, :, :]
        return float(np.sqrt((diffs**2).sum(-1)).max())

    def areas(self) -> np.ndarray:
        pts = self.vertices[self.elements]
        x, y = pts[..., 0], pts[..., 1]
        # shoelace formula, valid for any simple polygon
        return 0.5 * (x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y).sum(axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)


DIAGONALS = ("forward", "backward", "symmetric", "away", "alternating")


def _lattice_mesh(squares, origin, spacing, kind, level, domain, tagger,
                  diagonal="alternating", centre=(0.0, 0.0)):
    squares = np.asarray(squares, dtype=np.int64)
    i, j = squares[:, 0], squares[:, 1]
    corners = np.stack([
        np.stack([i, j], 1), np.stack([i + 1, j], 1),
        np.stack([i + 1, j + 1], 1), np.stack([i, j + 1], 1),
    ], axis=1)  # (nsq, 4, 2) lattice coordinates, (bl, br, tr, tl)

    width = int(corners[..., 0].max()) + 1
    keys = corners[..., 1] * width + corners[..., 0]
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    # np.unique sorts keys, so vertex order is lexicographic in (y, x)
    quads = inverse.reshape(-1, 4)
    lattice = np.stack([uniq % width, uniq // width], axis=1)
    vertices = np.asarray(origin, dtype=float) + spacing * lattice.astype(float)

    if kind == "quad":
        elements = quads
    elif kind == "triangle":
        if diagonal not in DIAGONALS:
            raise ValueError(f"unknown diagonal pattern {diagonal!r}")
        forward = np.stack([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], axis=1)
        backward = np.stack([quads[:, [0, 1, 3]], quads[:, [1, 2, 3]]], axis=1)
        if diagonal == "forward":
            use_forward = np.ones(len(quads), dtype=bool)
        elif diagonal == "backward":
            use_forward = np.zeros(len(quads), dtype=bool)
        elif diagonal == "alternating":
            use_forward = (i + j) % 2 == 0
        else:
            # diagonals point towards ``centre``, so no triangle has two
            # edges on the boundary at a convex corner
            mid = np.asarray(origin) + spacing * (squares + 0.5)
            rel = mid - np.asarray(centre)
            use_forward = rel[:, 0] * rel[:, 1] > 0
            if diagonal == "away":
                use_forward = ~use_forward
        elements = np.where(use_forward[:, None, None], forward, backward).reshape(-1, 3)
    else:
        raise ValueError(f"unknown element kind {kind!r}")

    mesh = Mesh(vertices=vertices, elements=np.ascontiguousarray(elements),
                element_kind=kind, grid_level=level, spacing=spacing, domain=domain)
    return face_topology(mesh, tagger)


def _tag_cavity(midpoints):
    return np.where(np.isclose(midpoints[:, 1], 1.0), "lid", "wall")


def _tag_step(midpoints):
    tags = np.full(len(midpoints), "wall", dtype=object)
    tags[np.isclose(midpoints[:, 0], -1.0)] = "inflow"
    tags[np.isclose(midpoints[:, 0], 5.0)] = "outflow"
    return tags.astype(str)


def build_square_mesh(n: int, kind: str = "triangle", level: int = 0,
                      diagonal: str = "alternating") -> Mesh:
    """Uniform mesh of ``[-1, 1]^2`` with ``n x n`` squares."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    squares = np.stack([i.ravel(), j.ravel()], axis=1)
    return _lattice_mesh(squares, (-1.0, -1.0), 2.0 / n, kind, level, "cavity", _tag_cavity,
                         diagonal=diagonal)


def build_cavity_mesh(level: int, kind: str = "triangle", diagonal: str = "alternating") -> Mesh:
    """Cavity mesh at grid ``level``: ``n = 2**level`` squares per side."""
    if level < 1:
        raise ValueError("level must be >= 1")
    return build_square_mesh(2**level, kind, level, diagonal)


def build_step_mesh(level: int, kind: str = "triangle", diagonal: str = "alternating") -> Mesh:
    """Backward-facing step ``[-1,0]x[0,1] U [0,5]x[-1,1]``, squares of side ``2**-(level-1)``."""
    if level < 1:
        raise ValueError("level must be >= 1")
    m = 2 ** (level - 1)  # squares per unit length
    inlet = [(i, j) for j in range(m, 2 * m) for i in range(m)]
    channel = [(i, j) for j in range(2 * m) for i in range(m, 6 * m)]
    squares = sorted(inlet + channel, key=lambda s: (s[1], s[0]))
    return _lattice_mesh(squares, (-1.0, -1.0), 1.0 / m, kind, level, "step", _tag_step,
                         diagonal=diagonal)


def _edge_normals(p0, p1):
    d = p1 - p0
    length = np.hypot(d[:, 0], d[:, 1])
    # elements are counter-clockwise, so (dy, -dx) points out of the owner
    normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / length[:, None]
    return length, normal


def face_topology(mesh: Mesh, tagger=None) -> Mesh:
    """Return a copy of ``mesh`` with interior faces and tagged boundary edges.

    Raises :class:`TopologyError` if an edge is shared by more than two
    elements or a vertex hangs on another element's edge.
    """
    if tagger is None:
        tagger = {"cavity": _tag_cavity, "step": _tag_step}.get(mesh.domain, _tag_cavity)
    elems = mesh.elements
    nv = elems.shape[1]
    local = np.stack([elems, np.roll(elems, -1, axis=1)], axis=2).reshape(-1, 2)
    owner = np.repeat(np.arange(len(elems)), nv)
    key = np.sort(local, axis=1)

    order = np.lexsort((key[:, 1], key[:, 0]))
    key_sorted = key[order]
    starts = np.ones(len(order), dtype=bool)
    starts[1:] = np.any(key_sorted[1:] != key_sorted[:-1], axis=1)
    group = np.cumsum(starts) - 1
    counts = np.bincount(group)
    if counts.max(initial=0) > 2:
        raise TopologyError("edge shared by more than two elements")

    first = order[starts]
    interior = first[counts == 2]
    boundary = first[counts == 1]
    # partner of each interior edge is the next entry in the sorted order
    start_pos = np.flatnonzero(starts)
    partner = order[start_pos[counts == 2] + 1]

    verts = mesh.vertices
    a_edges = local[interior]
    length, normal = _edge_normals(verts[a_edges[:, 0]], verts[a_edges[:, 1]])
    faces = InteriorFaces(elem_a=owner[interior], elem_b=owner[partner],
                          vertices=a_edges, length=length, normal=normal)

    b_edges = local[boundary]
    b_len, b_normal = _edge_normals(verts[b_edges[:, 0]], verts[b_edges[:, 1]])
    _check_no_hanging_vertices(verts, b_edges)
    midpoints = 0.5 * (verts[b_edges[:, 0]] + verts[b_edges[:, 1]])
    bnd = BoundaryEdges(elem=owner[boundary], vertices=b_edges, length=b_len,
                        normal=b_normal, tag=np.asarray(tagger(midpoints)).astype(str))
    return replace(mesh, interior_faces=faces, boundary_edges=bnd)


def _check_no_hanging_vertices(verts, b_edges, chunk=128):
    # a vertex strictly inside a boundary-only edge means the edge is half of a
    # non-matching interface
    p0, p1 = verts[b_edges[:, 0]], verts[b_edges[:, 1]]
    scale = np.abs(verts).max() + 1.0
    for s in range(0, len(b_edges), chunk):
        a, b = p0[s:s + chunk, None, :], p1[s:s + chunk, None, :]
        d = b - a
        rel = verts[None, :, :] - a
        cross = d[..., 0] * rel[..., 1] - d[..., 1] * rel[..., 0]
        t = (rel * d).sum(-1) / (d**2).sum(-1)
        inside = (np.abs(cross) <= 1e-12 * scale**2) & (t > 1e-12) & (t < 1 - 1e-12)
        if inside.any():
            raise TopologyError("hanging vertex on a boundary edge")


def dump_mesh(mesh: Mesh, path) -> None:
    """Write an index-based plain-text listing of the mesh, one record per line."""
    lines = [f"mesh {mesh.domain} {mesh.element_kind} {mesh.grid_level} "
             f"{mesh.n_vertices} {mesh.n_elements}"]
    lines += [f"vertex {i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.vertices.tolist())]
    lines += ["element {} {}".format(i, " ".join(map(str, e)))
              for i, e in enumerate(mesh.elements.tolist())]
    f = mesh.interior_faces
    if f is not None:
        for i in range(len(f)):
            lines.append(f"face {f.elem_a[i]} {f.elem_b[i]} {f.vertices[i, 0]} {f.vertices[i, 1]} "
                         f"{f.length[i]!r} {f.normal[i, 0]!r} {f.normal[i, 1]!r}")
    b = mesh.boundary_edges
    if b is not None:
        for i in range(len(b)):
            lines.append(f"boundary {b.elem[i]} {b.vertices[i, 0]} {b.vertices[i, 1]} {b.tag[i]}")
    Path(path).write_text("\n".join(lines) + "\n")
