"""Finite element spaces, dof maps, and physical evaluation tables.

Volume fields are stored cellwise in the orthonormal modal basis (or nodal
lattice basis for continuous spaces); skeleton fields live facetwise in the
global facet parameterization. All physical transforms happen here:
scalar/tensor pullback, Piola (1/J) F vhat, covariant F^-T vhat, and the
minimal-component facet representations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import mesh as meshmod
from . import refelem


class SpaceKind(enum.Enum):
    SCALAR_L2 = "scalar_l2"
    TENSOR_SYM_L2 = "tensor_sym_l2"
    TENSOR_L2 = "tensor_l2"
    VECTOR_PIOLA = "vector_piola"
    VECTOR_HCURL = "vector_hcurl"
    VECTOR_H1 = "vector_h1"
    SCALAR_H1 = "scalar_h1"
    SKELETON_SCALAR = "skeleton_scalar"
    SKELETON_TANGENTIAL = "skeleton_tangential"
    SKELETON_NORMAL = "skeleton_normal"


_CELL_KINDS = {SpaceKind.SCALAR_L2, SpaceKind.TENSOR_SYM_L2, SpaceKind.TENSOR_L2,
               SpaceKind.VECTOR_PIOLA, SpaceKind.VECTOR_HCURL, SpaceKind.VECTOR_H1,
               SpaceKind.SCALAR_H1}
_SKEL_KINDS = {SpaceKind.SKELETON_SCALAR, SpaceKind.SKELETON_TANGENTIAL,
               SpaceKind.SKELETON_NORMAL}
_L2_KINDS = {SpaceKind.SCALAR_L2, SpaceKind.TENSOR_SYM_L2, SpaceKind.TENSOR_L2,
             SpaceKind.VECTOR_PIOLA}


@dataclass(frozen=True)
class Space:
    kind: SpaceKind
    degree: int
    tri: meshmod.Triangulation

    @property
    def nloc(self) -> int:
        k = self.degree
        nsc = refelem.n_scalar(k)
        nlat = len(refelem.lattice(k))
        return {
            SpaceKind.SCALAR_L2: nsc,
            SpaceKind.TENSOR_SYM_L2: 3 * nsc,
            SpaceKind.TENSOR_L2: 4 * nsc,
            SpaceKind.VECTOR_PIOLA: 2 * nsc,
            SpaceKind.VECTOR_HCURL: 3 * (k + 1) + k * k - 1,
            SpaceKind.VECTOR_H1: 2 * nlat,
            SpaceKind.SCALAR_H1: nlat,
            SpaceKind.SKELETON_SCALAR: k + 1,
            SpaceKind.SKELETON_TANGENTIAL: k + 1,
            SpaceKind.SKELETON_NORMAL: k + 1,
        }[self.kind]


@dataclass
class DofMap:
    """Local-to-global map with orientation signs where needed.

    `cellwise` spaces carry no inter-element continuity and are eligible for
    static condensation. H(curl) maps carry +-1 signs aligning edge functions
    with the global facet direction; H1 maps permute shared lattice nodes.
    """

    space: Space
    ndofs: int
    cell_dofs: np.ndarray | None = None    # (nc, nloc)
    cell_signs: np.ndarray | None = None   # (nc, nloc)
    facet_dofs: np.ndarray | None = None   # (nf, k+1)
    cellwise: bool = False
    n_edge_dofs: int = 0                   # hcurl: global edge dof count

    def gather(self, coeffs: np.ndarray, cells: np.ndarray | None = None) -> np.ndarray:
        """Cell-local coefficient blocks (nc, nloc)."""
        cd = self.cell_dofs if cells is None else self.cell_dofs[cells]
        out = coeffs[cd]
        if self.cell_signs is not None:
            sg = self.cell_signs if cells is None else self.cell_signs[cells]
            out = out * sg
        return out

    def gather_facet(self, coeffs: np.ndarray, facets: np.ndarray) -> np.ndarray:
        return coeffs[self.facet_dofs[facets]]


def build_dofmap(space: Space) -> DofMap:
    tri = space.tri
    k = space.degree
    nc, nf, nv = tri.nc, tri.nf, tri.nv
    nloc = space.nloc
    kind = space.kind

    if kind in _L2_KINDS:
        cell_dofs = np.arange(nc * nloc, dtype=np.int64).reshape(nc, nloc)
        return DofMap(space, nc * nloc, cell_dofs=cell_dofs, cellwise=True)

    if kind in _SKEL_KINDS:
        facet_dofs = np.arange(nf * (k + 1), dtype=np.int64).reshape(nf, k + 1)
        return DofMap(space, nf * (k + 1), facet_dofs=facet_dofs)

    if kind is SpaceKind.VECTOR_HCURL:
        ne = k + 1
        ni = k * k - 1
        cell_dofs = np.empty((nc, nloc), dtype=np.int64)
        cell_signs = np.ones((nc, nloc))
        j = np.arange(ne)
        for l in range(3):
            f = tri.cell_facets[:, l]
            cell_dofs[:, l * ne:(l + 1) * ne] = f[:, None] * ne + j[None, :]
            side = (tri.facet_cells[f, 0] != np.arange(nc)).astype(int)
            flip = tri.facet_flip[f, side]
            # reversed edge walk: L_j(1-s) = (-1)^j L_j(s), direction flips too
            cell_signs[:, l * ne:(l + 1) * ne] = np.where(
                flip[:, None], (-1.0) ** (j[None, :] + 1), 1.0)
        base = nf * ne
        cell_dofs[:, 3 * ne:] = base + np.arange(nc * ni).reshape(nc, ni)
        return DofMap(space, base + nc * ni, cell_dofs=cell_dofs,
                      cell_signs=cell_signs, n_edge_dofs=base)

    if kind in (SpaceKind.VECTOR_H1, SpaceKind.SCALAR_H1):
        ncomp = 2 if kind is SpaceKind.VECTOR_H1 else 1
        nedge = k - 1
        nlat = len(refelem.lattice(k))
        nint = nlat - 3 - 3 * nedge
        nodes = np.empty((nc, nlat), dtype=np.int64)
        nodes[:, :3] = tri.cells
        for l in range(3):
            f = tri.cell_facets[:, l]
            side = (tri.facet_cells[f, 0] != np.arange(nc)).astype(int)
            flip = tri.facet_flip[f, side]
            for i in range(nedge):
                gi = np.where(flip, nedge - 1 - i, i)
                nodes[:, 3 + l * nedge + i] = nv + f * nedge + gi
        base = nv + nf * nedge
        nodes[:, 3 + 3 * nedge:] = base + np.arange(nc * nint).reshape(nc, nint)
        nnodes = base + nc * nint
        cell_dofs = (nodes[:, :, None] * ncomp + np.arange(ncomp)[None, None, :]
                     ).reshape(nc, nlat * ncomp)
        return DofMap(space, nnodes * ncomp, cell_dofs=cell_dofs)

    raise ValueError(kind)


def facet_support_dofs(dm: DofMap, facets: np.ndarray) -> np.ndarray:
    """Global dofs whose trace lives on the given facets.

    Skeleton: the facet's dofs. HCurl: the facet's edge dofs (tangential
    trace). H1: vertex and edge-node dofs on the facets.
    """
    space = dm.space
    k = space.degree
    tri = space.tri
    facets = np.asarray(facets, dtype=np.int64)
    if space.kind in _SKEL_KINDS:
        return dm.facet_dofs[facets].ravel()
    if space.kind is SpaceKind.VECTOR_HCURL:
        ne = k + 1
        return (facets[:, None] * ne + np.arange(ne)[None, :]).ravel()
    if space.kind in (SpaceKind.VECTOR_H1, SpaceKind.SCALAR_H1):
        ncomp = 2 if space.kind is SpaceKind.VECTOR_H1 else 1
        nedge = k - 1
        nodes = set()
        for f in facets:
            nodes.update(tri.facet_vertices[f].tolist())
            nodes.update((tri.nv + f * nedge + np.arange(nedge)).tolist())
        nodes = np.array(sorted(nodes), dtype=np.int64)
        return (nodes[:, None] * ncomp + np.arange(ncomp)[None, :]).ravel()
    raise ValueError(space.kind)


# -- reference component layouts ----------------------------------------------


_SYM_SLOTS = [(0, 0), (1, 1), (0, 1)]           # xx, yy, xy (+ symmetric)
_FULL_SLOTS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def _tensor_ref_table(degree: int, points: np.ndarray, sym: bool) -> np.ndarray:
    tab = refelem.eval_basis("modal", degree, points)
    nsc, nq = tab.values.shape
    slots = _SYM_SLOTS if sym else _FULL_SLOTS
    out = np.zeros((len(slots) * nsc, nq, 2, 2))
    for c, (i, j) in enumerate(slots):
        out[c * nsc:(c + 1) * nsc, :, i, j] = tab.values
        if sym and i != j:
            out[c * nsc:(c + 1) * nsc, :, j, i] = tab.values
    return out


def _vector_ref_table(degree: int, points: np.ndarray, family: str):
    """Component-major vector basis from a scalar family: (2 nsc, nq, 2)."""
    tab = refelem.eval_basis(family, degree, points)
    nb, nq = tab.values.shape
    vals = np.zeros((2 * nb, nq, 2))
    grads = np.zeros((2 * nb, nq, 2, 2))
    for c in range(2):
        vals[c * nb:(c + 1) * nb, :, c] = tab.values
        grads[c * nb:(c + 1) * nb, :, c, :] = tab.grads
    return vals, grads


def _h1_vector_ref_table(degree: int, points: np.ndarray):
    """Node-major (comp fastest) vector lagrange table matching dof layout."""
    tab = refelem.eval_basis("lagrange", degree, points)
    nb, nq = tab.values.shape
    vals = np.zeros((2 * nb, nq, 2))
    grads = np.zeros((2 * nb, nq, 2, 2))
    for n in range(nb):
        for c in range(2):
            vals[2 * n + c, :, c] = tab.values[n]
            grads[2 * n + c, :, c, :] = tab.grads[n]
    return vals, grads


# -- physical tables (volume) -------------------------------------------------


def volume_tables(space: Space, geom: meshmod.CellGeom, need=("val",)) -> SimpleNamespace:
    """Physical basis tables at volume quadrature points.

    val: scalar (nc, nb, nq); vector (nc, nb, nq, 2); tensor (nc, nb, nq, 2, 2)
    grad (vectors): (nc, nb, nq, 2, 2) with [..., i, j] = d v_i / d x_j
    div (Piola): (nc, nb, nq)
    Curved geometry requires geom.H for vector gradients.
    """
    k = space.degree
    pts = geom.ref_points
    out = SimpleNamespace()
    kind = space.kind

    if kind is SpaceKind.SCALAR_L2:
        tab = refelem.eval_basis("modal", k, pts)
        if "val" in need:
            out.val = np.broadcast_to(tab.values, (len(geom.J),) + tab.values.shape)
        if "grad" in need:
            out.grad = np.einsum("bqa,cqaj->cbqj", tab.grads, geom.Finv)
        return out

    if kind in (SpaceKind.TENSOR_SYM_L2, SpaceKind.TENSOR_L2):
        ref = _tensor_ref_table(k, pts, kind is SpaceKind.TENSOR_SYM_L2)
        out.val = np.broadcast_to(ref, (len(geom.J),) + ref.shape)
        return out

    if kind is SpaceKind.VECTOR_PIOLA:
        vals, grads = _vector_ref_table(k, pts, "modal")
        if "val" in need:
            out.val = np.einsum("cqia,bqa->cbqi", geom.F, vals) / geom.J[:, None, :, None]
        if "div" in need:
            refdiv = grads[:, :, 0, 0] + grads[:, :, 1, 1]
            out.div = refdiv[None, :, :] / geom.J[:, None, :]
        if "grad" in need:
            # d/dxhat_e of ((1/J) F vhat), then chain with F^-1
            A = np.einsum("cqia,bqae->cbqie", geom.F, grads)
            if geom.H is not None:
                A += np.einsum("cqiae,bqa->cbqie", geom.H, vals)
                dJ_over_J = np.einsum("cqag,cqgae->cqe", geom.Finv, geom.H)
                A -= np.einsum("cqe,cqia,bqa->cbqie", dJ_over_J, geom.F, vals)
            A /= geom.J[:, None, :, None, None]
            out.grad = np.einsum("cbqie,cqej->cbqij", A, geom.Finv)
        return out

    if kind is SpaceKind.VECTOR_HCURL:
        tab = refelem.eval_basis("hcurl", k, pts)
        if "val" in need:
            out.val = np.einsum("cqai,bqa->cbqi", geom.Finv, tab.values)
        if "grad" in need:
            A = np.einsum("cqai,bqae->cbqie", geom.Finv, tab.grads)
            if geom.H is not None:
                dFinv = -np.einsum("cqag,cqgde,cqdi->cqaie", geom.Finv, geom.H, geom.Finv)
                A += np.einsum("cqaie,bqa->cbqie", dFinv, tab.values)
            out.grad = np.einsum("cbqie,cqej->cbqij", A, geom.Finv)
        return out

    if kind in (SpaceKind.VECTOR_H1, SpaceKind.SCALAR_H1):
        if kind is SpaceKind.VECTOR_H1:
            vals, grads = _h1_vector_ref_table(k, pts)
            if "val" in need:
                out.val = np.broadcast_to(vals, (len(geom.J),) + vals.shape)
            if "grad" in need:
                out.grad = np.einsum("bqie,cqej->cbqij", grads, geom.Finv)
        else:
            tab = refelem.eval_basis("lagrange", k, pts)
            if "val" in need:
                out.val = np.broadcast_to(tab.values, (len(geom.J),) + tab.values.shape)
            if "grad" in need:
                out.grad = np.einsum("bqe,cqej->cbqj", tab.grads, geom.Finv)
        return out

    raise ValueError(f"{kind} has no volume support")


# -- physical tables (facet traces) -------------------------------------------


def trace_tables(space: Space, fg: meshmod.FacetGeom, side: int) -> SimpleNamespace:
    """Values of a cell-supported space traced on facets from one side."""
    sd = fg.sides[side]
    k = space.degree
    kind = space.kind
    nf, nq = sd.J.shape
    family = {SpaceKind.SCALAR_L2: "modal", SpaceKind.VECTOR_PIOLA: "modal",
              SpaceKind.TENSOR_SYM_L2: "modal", SpaceKind.TENSOR_L2: "modal",
              SpaceKind.VECTOR_HCURL: "hcurl", SpaceKind.VECTOR_H1: "lagrange",
              SpaceKind.SCALAR_H1: "lagrange"}[kind]

    nb = Space(kind, k, space.tri).nloc
    shape = {SpaceKind.SCALAR_L2: (nf, nb, nq), SpaceKind.SCALAR_H1: (nf, nb, nq),
             SpaceKind.TENSOR_SYM_L2: (nf, nb, nq, 2, 2),
             SpaceKind.TENSOR_L2: (nf, nb, nq, 2, 2)}.get(kind, (nf, nb, nq, 2))
    val = np.empty(shape)
    for combo in range(6):
        sel = np.flatnonzero(sd.combo == combo)
        if not len(sel):
            continue
        loc, flip = combo // 2, bool(combo % 2)
        tab = refelem.facet_basis_on_rule(family, k, loc, fg.rule, flip)
        if kind in (SpaceKind.SCALAR_L2, SpaceKind.SCALAR_H1):
            val[sel] = tab.values[None]
        elif kind in (SpaceKind.TENSOR_SYM_L2, SpaceKind.TENSOR_L2):
            ref = _tensor_ref_table(k, tab_points(loc, flip, fg.rule),
                                    kind is SpaceKind.TENSOR_SYM_L2)
            val[sel] = ref[None]
        elif kind is SpaceKind.VECTOR_PIOLA:
            vals, _ = _vector_ref_table(k, tab_points(loc, flip, fg.rule), "modal")
            val[sel] = np.einsum("cqia,bqa->cbqi", sd.F[sel], vals) \
                / sd.J[sel][:, None, :, None]
        elif kind is SpaceKind.VECTOR_HCURL:
            val[sel] = np.einsum("cqai,bqa->cbqi", sd.Finv[sel], tab.values)
        elif kind is SpaceKind.VECTOR_H1:
            vals, _ = _h1_vector_ref_table(k, tab_points(loc, flip, fg.rule))
            val[sel] = np.broadcast_to(vals, (len(sel),) + vals.shape)
        else:
            raise ValueError(kind)
    return SimpleNamespace(val=val)


def tab_points(loc: int, flip: bool, rule: refelem.QuadratureRule) -> np.ndarray:
    s = rule.points[:, 0]
    if flip:
        s = 1.0 - s
    return refelem.RefSimplex(2).facet_points(loc, s)


def skeleton_tables(space: Space, fg: meshmod.FacetGeom) -> SimpleNamespace:
    """Physical values of facet-supported spaces at facet quadrature points.

    SKELETON_SCALAR: scalar modes L_j(s). SKELETON_TANGENTIAL: L_j t / |t|^2
    (covariant component = L_j). SKELETON_NORMAL: (L_j / |t|) n with n the
    right-handed rotation of the global tangent.
    """
    k = space.degree
    leg = refelem.basis_on_rule("modal", k, fg.rule).values  # (k+1, nq)
    nf, nq = fg.jac.shape
    out = SimpleNamespace(scal=np.broadcast_to(leg, (nf, k + 1, nq)))
    if space.kind is SpaceKind.SKELETON_SCALAR:
        out.val = out.scal
        return out
    if space.kind is SpaceKind.SKELETON_TANGENTIAL:
        out.val = np.einsum("bq,fqi->fbqi", leg, fg.tangent / fg.jac[..., None] ** 2)
        return out
    if space.kind is SpaceKind.SKELETON_NORMAL:
        n = np.stack([fg.tangent[..., 1], -fg.tangent[..., 0]], axis=-1)
        out.val = np.einsum("bq,fqi->fbqi", leg, n / fg.jac[..., None] ** 2)
        return out
    raise ValueError(space.kind)


# -- field evaluation and interpolation ----------------------------------------


def eval_volume(space: Space, dm: DofMap, coeffs: np.ndarray, geom: meshmod.CellGeom,
                need=("val",), cells: np.ndarray | None = None) -> SimpleNamespace:
    tabs = volume_tables(space, geom, need)
    loc = dm.gather(coeffs, cells)
    out = SimpleNamespace()
    for name in need:
        t = getattr(tabs, name)
        out.__dict__[name] = np.einsum("cb,cb...->c...", loc, t)
    return out


def eval_trace(space: Space, dm: DofMap, coeffs: np.ndarray, fg: meshmod.FacetGeom,
               side: int) -> np.ndarray:
    tabs = trace_tables(space, fg, side)
    loc = dm.gather(coeffs, fg.sides[side].cells)
    return np.einsum("cb,cb...->c...", loc, tabs.val)


def eval_skeleton(space: Space, dm: DofMap, coeffs: np.ndarray,
                  fg: meshmod.FacetGeom) -> np.ndarray:
    tabs = skeleton_tables(space, fg)
    loc = dm.gather_facet(coeffs, fg.facets)
    return np.einsum("fb,fb...->f...", loc, tabs.val)


def interpolate(space: Space, dm: DofMap, f, quad_order: int | None = None) -> np.ndarray:
    """Best-fit coefficients for a callable f(x) -> value.

    Cellwise spaces use per-cell L2 projection in physical measure; H1 spaces
    interpolate at mapped lattice nodes; HCurl uses edge trace moments plus an
    interior L2 fit; skeleton spaces project the represented scalar in the
    facet parameter.
    """
    tri = space.tri
    k = space.degree
    kind = space.kind
    coeffs = np.zeros(dm.ndofs)

    def fvals(x):  # x (..., 2) -> (..., comps)
        flat = x.reshape(-1, 2)
        vals = np.array([np.asarray(f(p), dtype=float) for p in flat])
        return vals.reshape(x.shape[:-1] + vals.shape[1:])

    if kind in _L2_KINDS:
        order = quad_order or 2 * k + 2 + 2 * tri.geom_degree
        rule = refelem.quad_rule(2, order)
        geom = meshmod.cell_geometry(tri, rule.points)
        tabs = volume_tables(space, geom, ("val",))
        target = fvals(geom.x)
        nc, nb, nq = tabs.val.shape[:3]
        tv = tabs.val.reshape(nc, nb, nq, -1)
        tg = target.reshape(nc, nq, -1)
        w = rule.weights[None, :] * geom.J
        G = np.einsum("caqk,cbqk,cq->cab", tv, tv, w)
        b = np.einsum("caqk,cqk,cq->ca", tv, tg, w)
        sol = np.linalg.solve(G, b[..., None])[..., 0]
        coeffs[dm.cell_dofs] = sol
        return coeffs

    if kind in (SpaceKind.VECTOR_H1, SpaceKind.SCALAR_H1):
        nodes = refelem.lattice(k)
        geom = meshmod.cell_geometry(tri, nodes)
        vals = fvals(geom.x)  # (nc, nlat[, 2])
        ncomp = 2 if kind is SpaceKind.VECTOR_H1 else 1
        flat = vals.reshape(tri.nc, -1) if ncomp == 2 else vals
        coeffs[dm.cell_dofs.ravel()] = flat.ravel()
        return coeffs

    if kind in _SKEL_KINDS:
        order = quad_order or 2 * k + 2 + 2 * tri.geom_degree
        rule = refelem.quad_rule(1, order)
        fg = meshmod.facet_geometry(tri, rule, np.arange(tri.nf), both=False)
        leg = refelem.basis_on_rule("modal", k, rule).values
        target = fvals(fg.x)
        if kind is SpaceKind.SKELETON_TANGENTIAL:
            scal = np.einsum("fqi,fqi->fq", target, fg.tangent)
        elif kind is SpaceKind.SKELETON_NORMAL:
            n = np.stack([fg.tangent[..., 1], -fg.tangent[..., 0]], axis=-1)
            scal = np.einsum("fqi,fqi->fq", target, n / fg.jac[..., None])
            scal = scal * fg.jac  # undo 1/|t| scaling of the representation
        else:
            scal = target
        coeffs[dm.facet_dofs] = np.einsum("bq,fq,q->fb", leg, scal, rule.weights)
        return coeffs

    if kind is SpaceKind.VECTOR_HCURL:
        ne = k + 1
        order = quad_order or 2 * k + 2 + 2 * tri.geom_degree
        rule1 = refelem.quad_rule(1, order)
        fg = meshmod.facet_geometry(tri, rule1, np.arange(tri.nf), both=False)
        leg = refelem.basis_on_rule("modal", k, rule1).values
        target = fvals(fg.x)
        cov = np.einsum("fqi,fqi->fq", target, fg.tangent)
        edge = np.einsum("bq,fq,q->fb", leg, cov, rule1.weights)
        coeffs[:dm.n_edge_dofs] = edge.ravel()
        ni = k * k - 1
        if ni:
            rule2 = refelem.quad_rule(2, order)
            geom = meshmod.cell_geometry(tri, rule2.points)
            tabs = volume_tables(space, geom, ("val",))
            tv = fvals(geom.x)
            w = rule2.weights[None, :] * geom.J
            G = np.einsum("caqi,cbqi,cq->cab", tabs.val, tabs.val, w)
            b = np.einsum("caqi,cqi,cq->ca", tabs.val, tv, w)
            ce = dm.gather(coeffs)  # interior entries still zero
            rhs = b[:, 3 * ne:] - np.einsum("cab,cb->ca", G[:, 3 * ne:, :3 * ne],
                                            ce[:, :3 * ne])
            sol = np.linalg.solve(G[:, 3 * ne:, 3 * ne:], rhs[..., None])[..., 0]
            coeffs[dm.cell_dofs[:, 3 * ne:]] = sol
        return coeffs

    raise ValueError(kind)
