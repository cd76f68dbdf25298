"""Finite element assembly for P2-P1(*) triangles and Q2-Q1(*) quadrilaterals.

Velocity dofs are stored component-wise: ``[u_x at all nodes, u_y at all
nodes]``.  Pressure dofs are the continuous vertex pressures followed, for
the enriched space, by one piecewise-constant pressure per element.

Dirichlet velocity dofs are eliminated: the blocks of :class:`SaddleSystem`
act on the free velocity dofs only, and the known boundary values are moved
into the right-hand sides ``f`` and ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .elements import element_geometry, family, gauss_1d, physical_gradients
from .mesh import Mesh, TopologyError

SPACES = ("TH", "enriched")


@dataclass(frozen=True)
class DofMap:
    """Velocity and pressure numbering for one mesh and pressure space."""

    space: str
    node_coords: np.ndarray  # (n_nodes, 2), lexicographic in (y, x)
    element_nodes: np.ndarray  # (nel, 6) or (nel, 9) velocity nodes per element
    vertex_node: np.ndarray  # velocity node of each mesh vertex
    node_keys: np.ndarray = field(repr=False)
    node_key_scale: tuple = field(repr=False)
    n_k: int = 0
    n_0: int = 0
    dirichlet: np.ndarray = field(default=None, repr=False)  # velocity dof indices
    dirichlet_values: np.ndarray = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def n_u(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_p(self) -> int:
        return self.n_k + self.n_0

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_u, dtype=bool)
        mask[self.dirichlet] = False
        return np.flatnonzero(mask)

    @property
    def dirichlet_dofs(self):
        """``(dof, value)`` pairs of the prescribed velocity dofs."""
        return list(zip(self.dirichlet.tolist(), self.dirichlet_values.tolist()))

    def node_at(self, points) -> np.ndarray:
        """Velocity node indices at the given coordinates (must be nodes)."""
        keys = _lattice_keys(np.atleast_2d(points), *self.node_key_scale)
        idx = np.searchsorted(self.node_keys, keys)
        idx = np.minimum(idx, len(self.node_keys) - 1)
        if np.any(self.node_keys[idx] != keys):
            raise KeyError("point is not a velocity node")
        return idx

    def full_velocity(self, u_free: np.ndarray) -> np.ndarray:
        """Velocity on all nodes, with the Dirichlet values inserted."""
        u = np.zeros(self.n_u)
        u[self.free] = u_free
        u[self.dirichlet] = self.dirichlet_values
        return u


@dataclass
class SaddleSystem:
    """Saddle point system ``[[A, B^T], [B, 0]] [u; p] = [f; g]``.

    ``A`` is the Stokes vector Laplacian or the Oseen operator
    ``F = nu*A + N(w)``; ``B = [B1; B0]`` with ``B0`` empty for Taylor-Hood.
    """

    A: sp.csr_matrix
    B1: sp.csr_matrix
    B0: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    symmetric: bool = True

    @property
    def F(self):
        return self.A

    @property
    def B(self) -> sp.csr_matrix:
        return sp.vstack([self.B1, self.B0], format="csr")

    @property
    def n_u(self) -> int:
        return self.A.shape[0]

    @property
    def n_k(self) -> int:
        return self.B1.shape[0]

    @property
    def n_0(self) -> int:
        return self.B0.shape[0]

    @property
    def n_p(self) -> int:
        return self.n_k + self.n_0

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([self.f, self.g])

    def matrix(self) -> sp.csr_matrix:
        B = self.B
        return sp.bmat([[self.A, B.T], [B, None]], format="csr")

    def matvec(self, x):
        u, p = x[:self.n_u], x[self.n_u:]
        B = self.B
        return np.concatenate([self.A @ u + B.T @ p, B @ u])

    def residual(self, x):
        return self.rhs - self.matvec(x)

    def reduced(self) -> "SaddleSystem":
        """The Taylor-Hood part: drop the piecewise-constant pressure rows."""
        empty = sp.csr_matrix((0, self.n_u))
        return SaddleSystem(self.A, self.B1, empty, self.f, self.g[:self.n_k], self.symmetric)


@dataclass
class PressureMassBlocks:
    Qk: sp.csr_matrix
    R: sp.csr_matrix
    Q0: sp.dia_matrix

    @property
    def M_Q(self) -> sp.csr_matrix:
        return sp.bmat([[self.Qk, self.R.T], [self.R, self.Q0]], format="csr")


@dataclass
class PcdOperators:
    Q1: sp.csr_matrix
    F1: sp.csr_matrix
    Q0: sp.dia_matrix
    F0: sp.csr_matrix
    Mdiag: np.ndarray  # diagonal of the velocity mass matrix on free dofs


# -- numbering ------------------------------------------------------------------

def _lattice_keys(points, origin, step, width):
    ij = np.rint((points - origin) / step).astype(np.int64)
    return ij[:, 1] * width + ij[:, 0]


def build_dofmap(mesh: Mesh, space: str = "TH", problem: str | None = None) -> DofMap:
    """Number velocity nodes and pressure dofs; tag Dirichlet velocity dofs."""
    if space not in SPACES:
        raise ValueError(f"unknown pressure space {space!r}")
    fam = family(mesh.element_kind)
    V, E = mesh.vertices, mesh.elements
    pts = [V[E]]
    for i, j in fam.edges:
        pts.append(0.5 * (V[E[:, i]] + V[E[:, j]])[:, None, :])
    if fam.kind == "quad":
        pts.append(V[E].mean(axis=1)[:, None, :])
    local = np.concatenate(pts, axis=1)  # (nel, nb, 2)

    origin = V.min(axis=0)
    step = 0.5 * mesh.spacing
    width = int(np.rint((V[:, 0].max() - origin[0]) / step)) + 1
    keys = _lattice_keys(local.reshape(-1, 2), origin, step, width)
    uniq, inverse = np.unique(keys, return_inverse=True)
    element_nodes = inverse.reshape(len(E), fam.n_velocity)
    coords = np.empty((len(uniq), 2))
    coords[inverse] = local.reshape(-1, 2)
    vertex_node = np.searchsorted(uniq, _lattice_keys(V, origin, step, width))

    n_0 = mesh.n_elements if space == "enriched" else 0
    dm = DofMap(space=space, node_coords=coords, element_nodes=element_nodes,
                vertex_node=vertex_node, node_keys=uniq,
                node_key_scale=(origin, step, width), n_k=mesh.n_vertices, n_0=n_0)
    dofs, values = _dirichlet(mesh, dm, problem or mesh.domain)
    return replace(dm, dirichlet=dofs, dirichlet_values=values)


def boundary_profiles(problem: str):
    """Dirichlet velocity on tagged boundary points: ``profile(points, tags) -> (n, 2)``."""
    if problem in ("cavity2d", "cavity"):
        def profile(points, tags):
            out = np.zeros((len(points), 2))
            lid = tags == "lid"
            # tangential lid velocity 1 - x^4, vanishing at the corners
            out[lid, 0] = 1.0 - points[lid, 0] ** 4
            return out
    elif problem == "step":
        def profile(points, tags):
            out = np.zeros((len(points), 2))
            inflow = tags == "inflow"
            y = points[inflow, 1]
            out[inflow, 0] = 4.0 * y * (1.0 - y)
            return out
    else:
        raise ValueError(f"unknown problem {problem!r}")
    return profile


def _dirichlet(mesh, dm, problem):
    b = mesh.boundary_edges
    V = mesh.vertices
    p0, p1 = V[b.vertices[:, 0]], V[b.vertices[:, 1]]
    n_nodes = len(dm.node_coords)
    tag_rank = {"outflow": 0, "wall": 1, "lid": 2, "inflow": 2}
    rank = np.full(n_nodes, -1)
    node_tag = np.full(n_nodes, "", dtype=object)
    for pts in (p0, p1, 0.5 * (p0 + p1)):
        nodes = dm.node_at(pts)
        for node, tag in zip(nodes, b.tag):
            r = tag_rank[str(tag)]
            if r > rank[node]:
                rank[node], node_tag[node] = r, str(tag)
    # outflow-only nodes keep the natural boundary condition
    nodes = np.flatnonzero(rank >= 1)
    values = boundary_profiles(problem)(dm.node_coords[nodes], node_tag[nodes].astype(str))
    dofs = np.concatenate([nodes, nodes + n_nodes])
    vals = np.concatenate([values[:, 0], values[:, 1]])
    order = np.argsort(dofs)
    return dofs[order], vals[order]


# -- element kernels ------------------------------------------------------------

class _Quadrature:
    """Basis values and mapped gradients at the quadrature points of every element."""

    def __init__(self, mesh: Mesh):
        fam = family(mesh.element_kind)
        pts, wts = fam.rule()
        coords = mesh.vertices[mesh.elements]
        self.xq, det, invJT = element_geometry(coords, fam, pts)
        self.wdet = det * wts
        self.phi, dphi = fam.velocity(pts)
        self.dphi = physical_gradients(dphi, invJT)
        self.psi, dpsi = fam.pressure(pts)
        self.dpsi = physical_gradients(dpsi, invJT)


def _scatter(rows, cols, local, shape):
    r = np.broadcast_to(rows[:, :, None], local.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], local.shape).ravel()
    mat = sp.coo_matrix((local.ravel(), (r, c)), shape=shape).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def _velocity_at_quad(q, dm, w):
    """Values of a full velocity vector ``w`` at quadrature points, (nel, nq, 2)."""
    n = dm.n_nodes
    wx = w[:n][dm.element_nodes]
    wy = w[n:][dm.element_nodes]
    return np.stack([wx @ q.phi.T, wy @ q.phi.T], axis=-1)


def scalar_laplacian(mesh, dm, q=None):
    q = q or _Quadrature(mesh)
    local = np.einsum("eq,eqai,eqbi->eab", q.wdet, q.dphi, q.dphi)
    return _scatter(dm.element_nodes, dm.element_nodes, local, (dm.n_nodes,) * 2)


def scalar_mass(mesh, dm, q=None):
    q = q or _Quadrature(mesh)
    local = np.einsum("eq,qa,qb->eab", q.wdet, q.phi, q.phi)
    return _scatter(dm.element_nodes, dm.element_nodes, local, (dm.n_nodes,) * 2)


def scalar_convection(mesh, dm, w, q=None):
    """``N[a, b] = int (w . grad phi_b) phi_a`` on the velocity nodes."""
    q = q or _Quadrature(mesh)
    wq = _velocity_at_quad(q, dm, w)
    local = np.einsum("eq,qa,eqi,eqbi->eab", q.wdet, q.phi, wq, q.dphi)
    return _scatter(dm.element_nodes, dm.element_nodes, local, (dm.n_nodes,) * 2)


def divergence_blocks(mesh, dm, q=None):
    """Full (unreduced) ``B1`` and ``B0`` with ``b(u, p) = -int p div u``."""
    q = q or _Quadrature(mesh)
    E = mesh.elements
    cols = np.concatenate([dm.element_nodes, dm.element_nodes + dm.n_nodes], axis=1)
    b1 = -np.einsum("eq,qp,eqai->epia", q.wdet, q.psi, q.dphi)
    b1 = np.concatenate([b1[:, :, 0, :], b1[:, :, 1, :]], axis=2)
    B1 = _scatter(E, cols, b1, (dm.n_k, dm.n_u))
    if dm.n_0 == 0:
        return B1, sp.csr_matrix((0, dm.n_u))
    b0 = -np.einsum("eq,eqai->eia", q.wdet, q.dphi)
    b0 = np.concatenate([b0[:, 0, :], b0[:, 1, :]], axis=1)[:, None, :]
    rows = np.arange(len(E))[:, None]
    B0 = _scatter(rows, cols, b0, (dm.n_0, dm.n_u))
    return B1, B0


def _vector(block):
    return sp.block_diag([block, block], format="csr")


def _eliminate(K, B1, B0, dm):
    free, fixed, ud = dm.free, dm.dirichlet, dm.dirichlet_values
    Kc = K.tocsc()
    A = K[free][:, free].tocsr()
    f = -(Kc[:, fixed] @ ud)[free]
    g1 = -(B1.tocsc()[:, fixed] @ ud)
    g0 = -(B0.tocsc()[:, fixed] @ ud)
    B1f = B1.tocsc()[:, free].tocsr()
    B0f = B0.tocsc()[:, free].tocsr()
    for m in (A, B1f, B0f):
        m.sort_indices()
    return A, B1f, B0f, f, np.concatenate([g1, g0])


def assemble_stokes(mesh: Mesh, space: str = "TH", problem: str | None = None):
    """Stokes system (unit viscosity) and its dof map."""
    dm = build_dofmap(mesh, space, problem)
    q = _Quadrature(mesh)
    K = _vector(scalar_laplacian(mesh, dm, q))
    B1, B0 = divergence_blocks(mesh, dm, q)
    A, B1f, B0f, f, g = _eliminate(K, B1, B0, dm)
    return SaddleSystem(A, B1f, B0f, f, g, symmetric=True), dm


def assemble_oseen(mesh: Mesh, space: str, w: np.ndarray, nu: float,
                   problem: str | None = None, dofmap: DofMap | None = None) -> SaddleSystem:
    """Oseen system with ``F = nu*A + N(w)``; ``w`` is a full velocity vector."""
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    dm = dofmap or build_dofmap(mesh, space, problem)
    w = np.asarray(w, dtype=float)
    if w.shape != (dm.n_u,):
        raise ValueError(f"convection field must have {dm.n_u} entries")
    q = _Quadrature(mesh)
    L = scalar_laplacian(mesh, dm, q)
    K = _vector(nu * L + scalar_convection(mesh, dm, w, q))
    B1, B0 = divergence_blocks(mesh, dm, q)
    A, B1f, B0f, f, g = _eliminate(K, B1, B0, dm)
    return SaddleSystem(A, B1f, B0f, f, g, symmetric=not np.any(w))


def assemble_pressure_mass(mesh: Mesh, space: str = "enriched") -> PressureMassBlocks:
    """Galerkin mass matrix of the pressure frame, in ``[[Qk, R^T], [R, Q0]]`` blocks."""
    q = _Quadrature(mesh)
    E = mesh.elements
    n_k, nel = mesh.n_vertices, mesh.n_elements
    Qk = _scatter(E, E, np.einsum("eq,qa,qb->eab", q.wdet, q.psi, q.psi), (n_k, n_k))
    if space == "TH":
        return PressureMassBlocks(Qk, sp.csr_matrix((0, n_k)), sp.dia_matrix((0, 0)))
    r = np.einsum("eq,qa->ea", q.wdet, q.psi)[:, None, :]
    R = _scatter(np.arange(nel)[:, None], E, r, (nel, n_k))
    Q0 = sp.diags(q.wdet.sum(axis=1), format="dia")
    return PressureMassBlocks(Qk, R, Q0)


def pressure_nullspace(dm: DofMap, enclosed: bool) -> np.ndarray:
    """Basis (n_p, m) of the pressure directions annihilated by ``B^T``.

    Enriched spaces always contain ``k = [1; -1]``; enclosed flow adds the
    hydrostatic constant.
    """
    cols = []
    if dm.n_0:
        k = np.concatenate([np.ones(dm.n_k), -np.ones(dm.n_0)])
        cols.append(k)
        if enclosed:
            cols.append(np.concatenate([np.ones(dm.n_k), np.zeros(dm.n_0)]))
    elif enclosed:
        cols.append(np.ones(dm.n_k))
    return np.stack(cols, axis=1) if cols else np.zeros((dm.n_p, 0))


def face_fluxes(mesh: Mesh, dm: DofMap, w: np.ndarray):
    """Normal fluxes ``int_e w.n`` across interior faces and boundary edges.

    Simpson's rule is exact: ``w`` restricted to an edge is quadratic.
    """
    V = mesh.vertices
    n = dm.n_nodes

    def flux(edge_vertices, length, normal):
        p0, p1 = V[edge_vertices[:, 0]], V[edge_vertices[:, 1]]
        nodes = [dm.node_at(p) for p in (p0, 0.5 * (p0 + p1), p1)]
        vals = [np.stack([w[i], w[n + i]], axis=1) for i in nodes]
        mean = (vals[0] + 4 * vals[1] + vals[2]) / 6.0
        return length * (mean * normal).sum(axis=1)

    f, b = mesh.interior_faces, mesh.boundary_edges
    return flux(f.vertices, f.length, f.normal), flux(b.vertices, b.length, b.normal)


def assemble_f0(mesh: Mesh, dm: DofMap, w: np.ndarray, nu: float) -> sp.csr_matrix:
    """Piecewise-constant convection-diffusion operator from face jumps.

    Diffusion: ``nu*|e|/h_e`` two-cell stencil with ``h_e`` the centroid
    distance.  Convection: first-order upwind, each face adds its absolute
    flux to the downwind cell's diagonal and subtracts it from the coupling
    to the upwind cell.  Outflow boundary edges add their outgoing flux to
    the diagonal.
    """
    faces, bnd = mesh.interior_faces, mesh.boundary_edges
    if faces is None or bnd is None:
        raise TopologyError("face topology required for the piecewise-constant operator")
    nel = mesh.n_elements
    a, b = faces.elem_a, faces.elem_b
    c = mesh.centroids()
    h_e = np.linalg.norm(c[a] - c[b], axis=1)
    d = nu * faces.length / h_e
    q_int, q_bnd = face_fluxes(mesh, dm, w)

    down = np.where(q_int > 0, b, a)
    up = np.where(q_int > 0, a, b)
    mag = np.abs(q_int)
    out = (bnd.tag == "outflow") & (q_bnd > 0)
    rows = np.concatenate([a, b, a, b, down, down, bnd.elem[out]])
    cols = np.concatenate([a, b, b, a, down, up, bnd.elem[out]])
    vals = np.concatenate([d, d, -d, -d, mag, -mag, q_bnd[out]])
    F0 = sp.coo_matrix((vals, (rows, cols)), shape=(nel, nel)).tocsr()
    F0.sum_duplicates()
    F0.sort_indices()
    return F0


def inflow_robin(mesh: Mesh, dm: DofMap, w: np.ndarray) -> sp.csr_matrix:
    """``-int_{inflow} (w.n) phi_j phi_i`` on the continuous pressure space.

    The volume form of the pressure convection-diffusion operator maps
    constants to zero; this boundary term (positive where ``w`` enters the
    domain) makes it nonsingular for inflow/outflow problems.
    """
    b = mesh.boundary_edges
    sel = np.flatnonzero(b.tag == "inflow")
    n_k = dm.n_k
    if sel.size == 0:
        return sp.csr_matrix((n_k, n_k))
    t, wt = gauss_1d(3)
    V = mesh.vertices
    v0, v1 = b.vertices[sel, 0], b.vertices[sel, 1]
    p0, p1 = V[v0], V[v1]
    n = dm.n_nodes
    # quadratic velocity along the edge from its end and midpoint nodes
    nodes = [dm.node_at(p) for p in (p0, 0.5 * (p0 + p1), p1)]
    lag = np.stack([2 * (t - 0.5) * (t - 1), 4 * t * (1 - t), 2 * t * (t - 0.5)], axis=1)
    wn = sum(lag[:, a][None, :] * (w[nodes[a]] * b.normal[sel, 0] + w[n + nodes[a]] * b.normal[sel, 1])[:, None]
             for a in range(3))  # (nedge, nq)
    lin = np.stack([1 - t, t], axis=1)  # pressure hats along the edge
    local = -np.einsum("e,q,eq,qa,qb->eab", b.length[sel], wt, wn, lin, lin)
    conn = np.stack([v0, v1], axis=1)
    return _scatter(conn, conn, local, (n_k, n_k))


def assemble_pcd(mesh: Mesh, dm: DofMap, w: np.ndarray, nu: float,
                 inflow_bc: str = "robin") -> PcdOperators:
    """Pressure convection-diffusion operators on both pressure fields.

    ``inflow_bc="robin"`` adds :func:`inflow_robin` to ``F1``; ``"none"``
    keeps the plain volume form.
    """
    if inflow_bc not in ("robin", "none"):
        raise ValueError(f"unknown inflow treatment {inflow_bc!r}")
    q = _Quadrature(mesh)
    E = mesh.elements
    n_k = dm.n_k
    Q1 = _scatter(E, E, np.einsum("eq,qa,qb->eab", q.wdet, q.psi, q.psi), (n_k, n_k))
    wq = _velocity_at_quad(q, dm, w)
    stiff = np.einsum("eq,eqai,eqbi->eab", q.wdet, q.dpsi, q.dpsi)
    conv = np.einsum("eq,qa,eqi,eqbi->eab", q.wdet, q.psi, wq, q.dpsi)
    F1 = _scatter(E, E, nu * stiff + conv, (n_k, n_k))
    if inflow_bc == "robin":
        F1 = (F1 + inflow_robin(mesh, dm, w)).tocsr()
    if dm.n_0:
        Q0 = sp.diags(q.wdet.sum(axis=1), format="dia")
        F0 = assemble_f0(mesh, dm, w, nu)
    else:
        Q0, F0 = sp.dia_matrix((0, 0)), sp.csr_matrix((0, 0))
    mdiag = scalar_mass(mesh, dm, q).diagonal()
    Mdiag = np.concatenate([mdiag, mdiag])[dm.free]
    return PcdOperators(Q1=Q1, F1=F1, Q0=Q0, F0=F0, Mdiag=Mdiag)


def velocity_mass_diagonal(mesh: Mesh, dm: DofMap, free_only: bool = True) -> np.ndarray:
    mdiag = scalar_mass(mesh, dm).diagonal()
    full = np.concatenate([mdiag, mdiag])
    return full[dm.free] if free_only else full


def element_divergence(mesh: Mesh, dm: DofMap, u: np.ndarray):
    """Per-element ``int_T div u`` and ``||div u||_{L2(T)}`` for a full velocity."""
    q = _Quadrature(mesh)
    n = dm.n_nodes
    ux, uy = u[:n][dm.element_nodes], u[n:][dm.element_nodes]
    div = (np.einsum("eqa,ea->eq", q.dphi[..., 0], ux)
           + np.einsum("eqa,ea->eq", q.dphi[..., 1], uy))
    mean = (q.wdet * div).sum(axis=1)
    l2 = np.sqrt((q.wdet * div**2).sum(axis=1))
    return mean, l2
