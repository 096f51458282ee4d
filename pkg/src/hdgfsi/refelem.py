"""Reference simplex: quadrature rules and basis tables.

Everything downstream evaluates fields through tables produced here, so the
conventions fixed in this module (facet numbering, edge directions, node
ordering) are the single source of truth for the whole package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    """Positive-weight rule on the unit segment [0,1] or unit triangle."""

    dim: int
    order: int
    points: np.ndarray = field(compare=False)
    weights: np.ndarray = field(compare=False)

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)


_RULE_CACHE: dict[tuple[int, int], QuadratureRule] = {}


def quad_rule(dim: int, order: int) -> QuadratureRule:
    """Rule exact for polynomials of total degree <= order.

    dim=1: Gauss-Legendre on [0,1]. dim=2: tensor rule on the unit triangle
    via the Duffy map with a Gauss-Jacobi(1,0) factor absorbing the (1-b)
    area weight, so all weights stay positive.
    """
    order = max(int(order), 0)
    key = (dim, order)
    hit = _RULE_CACHE.get(key)
    if hit is not None:
        return hit
    n = order // 2 + 1
    if dim == 1:
        t, w = roots_legendre(n)
        pts = ((t + 1.0) / 2.0)[:, None]
        wts = w / 2.0
    elif dim == 2:
        ta, wa = roots_legendre(n)
        a = (ta + 1.0) / 2.0
        tb, wb = roots_jacobi(n, 1.0, 0.0)
        b = (tb + 1.0) / 2.0
        wb = wb / 4.0
        A, B = np.meshgrid(a, b, indexing="ij")
        x = (A * (1.0 - B)).ravel()
        y = B.ravel()
        pts = np.column_stack([x, y])
        wts = np.outer(wa / 2.0, wb).ravel()
    else:
        raise ValueError(f"unsupported dim {dim}")
    rule = QuadratureRule(dim, order, pts, wts)
    _RULE_CACHE[key] = rule
    return rule


class RefSimplex:
    """Geometry conventions of the reference segment / triangle.

    Triangle vertices (0,0), (1,0), (0,1). Facet l sits opposite vertex l and
    is directed from vertex (l+1)%3 to vertex (l+2)%3; its parameterization is
    psi_l(s) = a + s (b - a) for s in [0,1].
    """

    def __init__(self, dim: int):
        self.dim = dim
        if dim == 1:
            self.vertices = np.array([[0.0], [1.0]])
        elif dim == 2:
            self.vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
            self.facet_vertices = np.array([[1, 2], [2, 0], [0, 1]])
            # unnormalized tangents (param derivative) and outward normals
            self.facet_tangents = np.array([[-1.0, 1.0], [0.0, -1.0], [1.0, 0.0]])
            s = 1.0 / math.sqrt(2.0)
            self.facet_normals = np.array([[s, s], [-1.0, 0.0], [0.0, -1.0]])
        else:
            raise ValueError(f"unsupported dim {dim}")

    def facet_points(self, l: int, s: np.ndarray) -> np.ndarray:
        """Map facet parameters s (n,) to triangle coordinates (n,2)."""
        a = self.vertices[self.facet_vertices[l, 0]]
        b = self.vertices[self.facet_vertices[l, 1]]
        return a[None, :] + s[:, None] * (b - a)[None, :]


def lattice(degree: int) -> np.ndarray:
    """Equispaced triangle lattice, shared-entity ordering.

    Vertices first, then for each facet l its degree-1 interior nodes walked
    in facet direction, then interior nodes. This ordering is what H1 dof
    matching relies on.
    """
    ref = RefSimplex(2)
    pts = [ref.vertices[i] for i in range(3)]
    if degree >= 2:
        for l in range(3):
            a = ref.vertices[ref.facet_vertices[l, 0]]
            b = ref.vertices[ref.facet_vertices[l, 1]]
            for i in range(1, degree):
                pts.append(a + (i / degree) * (b - a))
    for j in range(1, degree):
        for i in range(1, degree):
            if i + j <= degree - 1:
                pts.append(np.array([i / degree, j / degree]))
    return np.array(pts)


def _monomial_exponents(degree: int) -> list[tuple[int, int]]:
    out = []
    for d in range(degree + 1):
        for i in range(d, -1, -1):
            out.append((i, d - i))
    return out


def _monomial_tables(degree: int, points: np.ndarray):
    exps = _monomial_exponents(degree)
    x, y = points[:, 0], points[:, 1]
    vals = np.empty((len(exps), len(points)))
    grads = np.empty((len(exps), len(points), 2))
    for r, (i, j) in enumerate(exps):
        vals[r] = x**i * y**j
        grads[r, :, 0] = i * x ** max(i - 1, 0) * y**j if i else 0.0
        grads[r, :, 1] = j * x**i * y ** max(j - 1, 0) if j else 0.0
    return vals, grads


def _monomial_hess(degree: int, points: np.ndarray) -> np.ndarray:
    exps = _monomial_exponents(degree)
    x, y = points[:, 0], points[:, 1]
    hess = np.zeros((len(exps), len(points), 2, 2))
    for r, (i, j) in enumerate(exps):
        if i >= 2:
            hess[r, :, 0, 0] = i * (i - 1) * x ** (i - 2) * y**j
        if j >= 2:
            hess[r, :, 1, 1] = j * (j - 1) * x**i * y ** (j - 2)
        if i >= 1 and j >= 1:
            hess[r, :, 0, 1] = hess[r, :, 1, 0] = i * j * x ** (i - 1) * y ** (j - 1)
    return hess


def eval_hess(family: str, degree: int, points: np.ndarray) -> np.ndarray:
    """Second derivatives (nb, nq, 2, 2) of a scalar triangle family."""
    points = np.asarray(points, dtype=float)
    mh = _monomial_hess(degree, points)
    if family == "modal":
        C = _modal_coeffs(degree)
    elif family == "lagrange":
        C = _lagrange_coeffs(degree) @ _modal_coeffs(degree)
    else:
        raise ValueError(f"no hessians for family {family!r}")
    return np.einsum("rm,mqab->rqab", C, mh)


def _triangle_modal_coeffs(degree: int) -> np.ndarray:
    """Rows express an L2-orthonormal basis in the monomial basis.

    The monomial Gram matrix on the unit triangle is exact:
    int x^a y^b = a! b! / (a+b+2)!.
    """
    exps = _monomial_exponents(degree)
    n = len(exps)
    G = np.empty((n, n))
    for r, (a, b) in enumerate(exps):
        for c, (p, q) in enumerate(exps):
            G[r, c] = math.factorial(a + p) * math.factorial(b + q) / math.factorial(a + p + b + q + 2)
    L = np.linalg.cholesky(G)
    B = np.linalg.solve(L, np.eye(n))
    # second pass against a quadrature Gram tightens orthonormality lost to
    # monomial conditioning (the first-pass basis is already near-orthonormal,
    # so this Gram is well scaled and the correction is tiny)
    rule = quad_rule(2, 2 * degree)
    mv, _ = _monomial_tables(degree, rule.points)
    V = B @ mv
    G2 = np.einsum("aq,bq,q->ab", V, V, rule.weights)
    L2 = np.linalg.cholesky(G2)
    return np.linalg.solve(L2, B)


@dataclass
class BasisTable:
    """Basis values (and gradients) at a fixed point set.

    Scalar families: values (nb, nq), grads (nb, nq, dim).
    Vector families: values (nb, nq, 2), grads (nb, nq, 2, 2) with
    grads[b, q, i, j] = d v_i / d x_j.
    """

    family: str
    degree: int
    values: np.ndarray
    grads: np.ndarray


def _legendre01(degree: int, s: np.ndarray):
    """Orthonormal shifted Legendre on [0,1]: values and d/ds."""
    t = 2.0 * s - 1.0
    nb = degree + 1
    vals = np.empty((nb, len(s)))
    ders = np.empty((nb, len(s)))
    for j in range(nb):
        c = np.zeros(j + 1)
        c[j] = 1.0
        scale = math.sqrt(2 * j + 1)
        vals[j] = scale * np.polynomial.legendre.legval(t, c)
        ders[j] = 2.0 * scale * np.polynomial.legendre.legval(t, np.polynomial.legendre.legder(c))
    return vals, ders


_MODAL_COEFF_CACHE: dict[int, np.ndarray] = {}
_HCURL_COEFF_CACHE: dict[int, np.ndarray] = {}
_LAGRANGE_COEFF_CACHE: dict[int, np.ndarray] = {}


def _modal_coeffs(degree: int) -> np.ndarray:
    if degree not in _MODAL_COEFF_CACHE:
        _MODAL_COEFF_CACHE[degree] = _triangle_modal_coeffs(degree)
    return _MODAL_COEFF_CACHE[degree]


def _lagrange_coeffs(degree: int) -> np.ndarray:
    """Nodal coefficients in the modal basis: N_j(node_i) = delta_ij."""
    if degree not in _LAGRANGE_COEFF_CACHE:
        nodes = lattice(degree)
        B = _modal_coeffs(degree)
        mv, _ = _monomial_tables(degree, nodes)
        V = (B @ mv).T  # V[i, m] = phi_m(node_i)
        _LAGRANGE_COEFF_CACHE[degree] = np.linalg.inv(V).T
    return _LAGRANGE_COEFF_CACHE[degree]


def n_scalar(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


def hcurl_edge_count(degree: int) -> int:
    return degree + 1


def hcurl_interior_count(degree: int) -> int:
    return degree * degree - 1


def _hcurl_coeffs(degree: int) -> np.ndarray:
    """Coefficients (nb, 2*nsc) of the tangential-trace edge/interior basis.

    Edge dofs are Legendre moments of the covariant trace v . t_l on each
    facet; the remaining functions span the zero-trace subspace. The basis is
    pinned by pseudo-inverse (edge functions have no zero-trace component)
    and SVD (interior functions L2-orthonormal).
    """
    if degree in _HCURL_COEFF_CACHE:
        return _HCURL_COEFF_CACHE[degree]
    k = degree
    nsc = n_scalar(k)
    ref = RefSimplex(2)
    rule = quad_rule(1, 2 * k + 2)
    s = rule.points[:, 0]
    w = rule.weights
    leg, _ = _legendre01(k, s)
    B = _modal_coeffs(k)
    nedof = hcurl_edge_count(k)
    M = np.zeros((3 * nedof, 2 * nsc))
    for l in range(3):
        pts = ref.facet_points(l, s)
        mv, _ = _monomial_tables(k, pts)
        phi = B @ mv  # (nsc, nq) scalar modal traces
        t = ref.facet_tangents[l]
        for c in range(2):
            # moment of component c against Legendre mode j, tangent weight
            M[l * nedof:(l + 1) * nedof, c * nsc:(c + 1) * nsc] = t[c] * (leg * w) @ phi.T
    U, sv, Vt = np.linalg.svd(M)
    rank = 3 * nedof
    if not np.all(sv[:rank] > 1e-10):
        raise RuntimeError("edge trace moments are rank deficient")
    null = Vt[rank:]  # (k^2-1, 2 nsc), orthonormal rows
    edge = np.linalg.pinv(M).T  # rows: edge functions
    coeffs = np.vstack([edge, null])
    _HCURL_COEFF_CACHE[degree] = coeffs
    return coeffs


def eval_basis(family: str, degree: int, points: np.ndarray) -> BasisTable:
    """Tabulate a reference basis at given points.

    Families: 'modal' (scalar, L2-orthonormal), 'lagrange' (scalar nodal,
    lattice ordering), 'hcurl' (vector, edge-then-interior ordering). On the
    segment (points of shape (nq,1)) only scalar families exist; 'modal' is
    the orthonormal shifted Legendre basis and 'lagrange' the equispaced
    nodal one.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    dim = points.shape[1]
    if dim == 1:
        s = points[:, 0]
        if family == "modal":
            vals, ders = _legendre01(degree, s)
            return BasisTable(family, degree, vals, ders[:, :, None])
        if family == "lagrange":
            nodes = np.linspace(0.0, 1.0, degree + 1)
            mv, md = _legendre01(degree, nodes)
            V = mv.T
            C = np.linalg.inv(V).T
            vals, ders = _legendre01(degree, s)
            return BasisTable(family, degree, C @ vals, (C @ ders)[:, :, None])
        raise ValueError(f"unknown segment family {family!r}")
    if family == "modal":
        mv, md = _monomial_tables(degree, points)
        B = _modal_coeffs(degree)
        return BasisTable(family, degree, B @ mv, np.einsum("rm,mqd->rqd", B, md))
    if family == "lagrange":
        mv, md = _monomial_tables(degree, points)
        C = _lagrange_coeffs(degree) @ _modal_coeffs(degree)
        return BasisTable(family, degree, C @ mv, np.einsum("rm,mqd->rqd", C, md))
    if family == "hcurl":
        mv, md = _monomial_tables(degree, points)
        B = _modal_coeffs(degree)
        phi = B @ mv
        dphi = np.einsum("rm,mqd->rqd", B, md)
        W = _hcurl_coeffs(degree)
        nsc = n_scalar(degree)
        nq = points.shape[0]
        nb = W.shape[0]
        vals = np.empty((nb, nq, 2))
        grads = np.empty((nb, nq, 2, 2))
        for c in range(2):
            Wc = W[:, c * nsc:(c + 1) * nsc]
            vals[:, :, c] = Wc @ phi
            grads[:, :, c, :] = np.einsum("rm,mqd->rqd", Wc, dphi)
        return BasisTable(family, degree, vals, grads)
    raise ValueError(f"unknown triangle family {family!r}")


_TABLE_CACHE: dict[tuple, BasisTable] = {}


def basis_on_rule(family: str, degree: int, rule: QuadratureRule) -> BasisTable:
    """Cached eval_basis for quadrature points (tables reused across meshes)."""
    key = (family, degree, rule.dim, rule.order)
    if key not in _TABLE_CACHE:
        _TABLE_CACHE[key] = eval_basis(family, degree, rule.points)
    return _TABLE_CACHE[key]


def facet_basis_on_rule(family: str, degree: int, local_facet: int, rule: QuadratureRule,
                        flip: bool) -> BasisTable:
    """Triangle basis traced on facet `local_facet` of the reference cell.

    `rule` is a segment rule in the global facet parameter; flip=True means
    the element walks the facet against the global direction (s -> 1-s).
    """
    key = (family, degree, local_facet, rule.order, flip)
    if key not in _TABLE_CACHE:
        s = rule.points[:, 0]
        if flip:
            s = 1.0 - s
        pts = RefSimplex(2).facet_points(local_facet, s)
        _TABLE_CACHE[key] = eval_basis(family, degree, pts)
    return _TABLE_CACHE[key]
