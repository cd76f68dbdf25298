"""Reference elements, quadrature rules and geometric maps.

Reference triangle: vertices ``(0,0), (1,0), (0,1)``; reference square:
``[0,1]^2`` with corners ``(0,0), (1,0), (1,1), (0,1)``.  Quadratic nodes
follow the vertices, then the edge midpoints in edge order ``(0,1), (1,2),
(2,0)`` (triangles) or ``(0,1), (1,2), (2,3), (3,0)`` (squares), then the
square centre.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def triangle_rule():
    """7-point degree-5 rule on the reference triangle (points, weights)."""
    s15 = np.sqrt(15.0)
    a, b = (6.0 - s15) / 21.0, (6.0 + s15) / 21.0
    wa, wb = (155.0 - s15) / 2400.0, (155.0 + s15) / 2400.0
    pts = np.array([
        [1 / 3, 1 / 3],
        [a, a], [1 - 2 * a, a], [a, 1 - 2 * a],
        [b, b], [1 - 2 * b, b], [b, 1 - 2 * b],
    ])
    wts = np.array([9 / 80, wa, wa, wa, wb, wb, wb])
    return pts, wts


def gauss_1d(n=3):
    """Gauss-Legendre rule on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def square_rule(n=3):
    x, w = gauss_1d(n)
    X, Y = np.meshgrid(x, x, indexing="ij")
    W = np.outer(w, w)
    return np.stack([X.ravel(), Y.ravel()], axis=1), W.ravel()


# -- shape functions -------------------------------------------------------
# Each returns (values (nq, nb), gradients (nq, nb, 2)) at reference points.

def p1(pts):
    x, y = pts[:, 0], pts[:, 1]
    val = np.stack([1 - x - y, x, y], axis=1)
    grad = np.empty((len(x), 3, 2))
    grad[:, 0] = [-1, -1]
    grad[:, 1] = [1, 0]
    grad[:, 2] = [0, 1]
    return val, grad


def p2(pts):
    x, y = pts[:, 0], pts[:, 1]
    l = np.stack([1 - x - y, x, y], axis=1)
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    val = np.empty((len(x), 6))
    grad = np.empty((len(x), 6, 2))
    for i in range(3):
        val[:, i] = l[:, i] * (2 * l[:, i] - 1)
        grad[:, i] = (4 * l[:, i] - 1)[:, None] * dl[i]
    for k, (i, j) in enumerate([(0, 1), (1, 2), (2, 0)]):
        val[:, 3 + k] = 4 * l[:, i] * l[:, j]
        grad[:, 3 + k] = 4 * (l[:, j, None] * dl[i] + l[:, i, None] * dl[j])
    return val, grad


def _lagrange_1d_linear(t):
    return np.stack([1 - t, t], 1), np.stack([-np.ones_like(t), np.ones_like(t)], 1)


def _lagrange_1d_quadratic(t):
    # nodes 0, 1/2, 1
    val = np.stack([(1 - t) * (1 - 2 * t), 4 * t * (1 - t), t * (2 * t - 1)], 1)
    der = np.stack([4 * t - 3, 4 - 8 * t, 4 * t - 1], 1)
    return val, der


def _tensor(pts, basis1d, index_pairs):
    lx, dlx = basis1d(pts[:, 0])
    ly, dly = basis1d(pts[:, 1])
    ix = np.array([p[0] for p in index_pairs])
    iy = np.array([p[1] for p in index_pairs])
    val = lx[:, ix] * ly[:, iy]
    grad = np.stack([dlx[:, ix] * ly[:, iy], lx[:, ix] * dly[:, iy]], axis=2)
    return val, grad


def q1(pts):
    return _tensor(pts, _lagrange_1d_linear, [(0, 0), (1, 0), (1, 1), (0, 1)])


def q2(pts):
    # 1D node index: 0 -> t=0, 1 -> t=1/2, 2 -> t=1
    order = [(0, 0), (2, 0), (2, 2), (0, 2),  # corners
             (1, 0), (2, 1), (1, 2), (0, 1),  # edge midpoints
             (1, 1)]  # centre
    return _tensor(pts, _lagrange_1d_quadratic, order)


@dataclass(frozen=True)
class ElementFamily:
    """Velocity/pressure reference data for one element shape."""

    kind: str
    geometry: callable  # linear (P1/Q1) map basis
    velocity: callable  # P2 / Q2
    pressure: callable  # P1 / Q1
    rule: callable
    ref_vertices: np.ndarray
    edges: tuple  # local vertex pairs, in the order of the quadratic edge nodes
    n_velocity: int


TRIANGLE = ElementFamily(
    kind="triangle", geometry=p1, velocity=p2, pressure=p1, rule=triangle_rule,
    ref_vertices=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
    edges=((0, 1), (1, 2), (2, 0)), n_velocity=6,
)

QUAD = ElementFamily(
    kind="quad", geometry=q1, velocity=q2, pressure=q1, rule=square_rule,
    ref_vertices=np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]),
    edges=((0, 1), (1, 2), (2, 3), (3, 0)), n_velocity=9,
)


def family(kind: str) -> ElementFamily:
    return {"triangle": TRIANGLE, "quad": QUAD}[kind]


def element_geometry(coords, fam: ElementFamily, pts):
    """Jacobian data for elements with vertex ``coords`` (nel, nv, 2).

    Returns ``(xq, detJ, invJT)`` with physical quadrature points (nel, nq, 2),
    Jacobian determinants (nel, nq) and inverse-transpose Jacobians
    (nel, nq, 2, 2) used to map reference gradients.
    """
    val, grad = fam.geometry(pts)
    xq = np.einsum("qa,ead->eqd", val, coords)
    # J[e,q,d,k] = d x_d / d xi_k
    J = np.einsum("qak,ead->eqdk", grad, coords)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    invJT = np.empty_like(J)
    invJT[..., 0, 0] = J[..., 1, 1] / det
    invJT[..., 0, 1] = -J[..., 1, 0] / det
    invJT[..., 1, 0] = -J[..., 0, 1] / det
    invJT[..., 1, 1] = J[..., 0, 0] / det
    return xq, det, invJT


def physical_gradients(ref_grad, invJT):
    """Map reference gradients (nq, nb, 2) to physical ones (nel, nq, nb, 2)."""
    return np.einsum("eqij,qbj->eqbi", invJT, ref_grad)
