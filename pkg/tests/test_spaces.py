"""Dof maps, transforms, continuity, and interpolation exactness."""

import numpy as np
import pytest

from hdgfsi import mesh, refelem, spaces
from hdgfsi.spaces import Space, SpaceKind, build_dofmap


def two_cell_square():
    verts = [(0, 0), (1, 0), (1, 1), (0, 1)]
    cells = [(0, 1, 2), (0, 2, 3)]
    tags = {"bottom": [(0, 1)], "right": [(1, 2)], "top": [(2, 3)], "left": [(3, 0)]}
    return mesh.triangulation(verts, cells, tags)


def brute_force_hcurl_count(tri, k):
    """Elementwise dim minus rank of tangential-continuity constraints."""
    nloc = Space(SpaceKind.VECTOR_HCURL, k, tri).nloc
    rule = refelem.quad_rule(1, 2 * k + 2)
    rows = []
    fg = mesh.facet_geometry(tri, rule, tri.interior_facets())
    for fi in range(len(fg.facets)):
        for j in range(k + 1):
            row = np.zeros(tri.nc * nloc)
            for side in (0, 1):
                sd = fg.sides[side]
                c = sd.cells[fi]
                tab = refelem.eval_basis("hcurl", k, sd.ref_points[fi])
                phys = np.einsum("qai,bqa->bqi", sd.Finv[fi], tab.values)
                cov = np.einsum("bqi,qi->bq", phys, fg.tangent[fi])
                leg = refelem.basis_on_rule("modal", k, rule).values
                mom = np.einsum("bq,q,q->b", cov, leg[j], rule.weights)
                row[c * nloc:(c + 1) * nloc] += mom if side == 0 else -mom
            rows.append(row)
    if not rows:
        return tri.nc * nloc
    rank = np.linalg.matrix_rank(np.array(rows), tol=1e-8)
    return tri.nc * nloc - rank


def test_dof_counts_cellwise():
    tri = two_cell_square()
    assert build_dofmap(Space(SpaceKind.SCALAR_L2, 2, tri)).ndofs == 12
    assert build_dofmap(Space(SpaceKind.TENSOR_SYM_L2, 2, tri)).ndofs == 36
    assert build_dofmap(Space(SpaceKind.SKELETON_SCALAR, 2, tri)).ndofs == 15


def test_hcurl_single_cell_count():
    verts = [(0, 0), (1, 0), (0, 1)]
    tri = mesh.triangulation(verts, [(0, 1, 2)],
                             {"b": [(0, 1)], "h": [(1, 2)], "l": [(2, 0)]})
    assert build_dofmap(Space(SpaceKind.VECTOR_HCURL, 1, tri)).ndofs == 6


@pytest.mark.parametrize("k", [1, 2, 3])
def test_hcurl_count_matches_constraint_rank_oracle(k):
    tri = two_cell_square()
    dm = build_dofmap(Space(SpaceKind.VECTOR_HCURL, k, tri))
    assert dm.ndofs == brute_force_hcurl_count(tri, k)


@pytest.mark.parametrize("k", [2, 3])
def test_h1_count_matches_euler_formula(k):
    tri = mesh.unit_square(3)
    dm = build_dofmap(Space(SpaceKind.VECTOR_H1, k, tri))
    nint = (k - 1) * (k - 2) // 2
    expect = 2 * (tri.nv + tri.nf * (k - 1) + tri.nc * nint)
    assert dm.ndofs == expect


def test_hcurl_tangential_continuity_random_field():
    tri = mesh.unit_square(3)
    k = 2
    sp = Space(SpaceKind.VECTOR_HCURL, k, tri)
    dm = build_dofmap(sp)
    rng = np.random.default_rng(3)
    coeffs = rng.standard_normal(dm.ndofs)
    rule = refelem.quad_rule(1, 2 * k)
    fg = mesh.facet_geometry(tri, rule, tri.interior_facets())
    v0 = spaces.eval_trace(sp, dm, coeffs, fg, 0)
    v1 = spaces.eval_trace(sp, dm, coeffs, fg, 1)
    cov0 = np.einsum("fqi,fqi->fq", v0, fg.tangent)
    cov1 = np.einsum("fqi,fqi->fq", v1, fg.tangent)
    assert np.max(np.abs(cov0 - cov1)) < 1e-12
    nrm0 = np.einsum("fqi,fqi->fq", v0, fg.normal)
    nrm1 = np.einsum("fqi,fqi->fq", v1, fg.normal)
    assert np.max(np.abs(nrm0 - nrm1)) > 1e-3  # normal trace genuinely jumps


def test_h1_continuity_random_field():
    tri = mesh.unit_square(2)
    sp = Space(SpaceKind.VECTOR_H1, 3, tri)
    dm = build_dofmap(sp)
    rng = np.random.default_rng(5)
    coeffs = rng.standard_normal(dm.ndofs)
    rule = refelem.quad_rule(1, 6)
    fg = mesh.facet_geometry(tri, rule, tri.interior_facets())
    v0 = spaces.eval_trace(sp, dm, coeffs, fg, 0)
    v1 = spaces.eval_trace(sp, dm, coeffs, fg, 1)
    assert np.max(np.abs(v0 - v1)) < 1e-12


def test_piola_divergence_identity():
    """div of a Piola-mapped field equals (1/J) reference divergence."""
    tri = mesh.curve_to_circle(mesh.unit_square(2), (-1.0, -1.0), 0.5, "left", 3)
    sp = Space(SpaceKind.VECTOR_PIOLA, 3, tri)
    dm = build_dofmap(sp)
    rng = np.random.default_rng(11)
    coeffs = rng.standard_normal(dm.ndofs)
    rule = refelem.quad_rule(2, 6)
    geom = mesh.cell_geometry(tri, rule.points, hessian=True)
    out = spaces.eval_volume(sp, dm, coeffs, geom, ("val", "grad", "div"))
    tr = out.grad[..., 0, 0] + out.grad[..., 1, 1]
    assert np.max(np.abs(tr - out.div)) < 1e-9


def test_vector_gradients_match_fd_on_curved_cells():
    tri = mesh.curve_to_circle(mesh.unit_square(2), (-1.0, -1.0), 0.5, "left", 3)
    rng = np.random.default_rng(2)
    pts = np.array([[0.2, 0.3], [0.4, 0.15]])
    h = 1e-6
    for kind in (SpaceKind.VECTOR_PIOLA, SpaceKind.VECTOR_HCURL, SpaceKind.VECTOR_H1):
        sp = Space(kind, 2, tri)
        dm = build_dofmap(sp)
        coeffs = rng.standard_normal(dm.ndofs)
        geom = mesh.cell_geometry(tri, pts, hessian=True)
        grad = spaces.eval_volume(sp, dm, coeffs, geom, ("val", "grad")).grad

        # physical-space FD: perturb the reference point so that x moves along e_j
        for j in range(2):
            dxhat = np.einsum("cqej,j->cqe", geom.Finv, np.eye(2)[j]) * h
            vp = np.empty_like(grad[..., 0])
            vm = np.empty_like(grad[..., 0])
            for c in range(tri.nc):
                gp = mesh.cell_geometry(tri, pts + dxhat[c], hessian=True,
                                        cells=np.array([c]))
                gm = mesh.cell_geometry(tri, pts - dxhat[c], hessian=True,
                                        cells=np.array([c]))
                vp[c] = spaces.eval_volume(sp, dm, coeffs, gp, ("val",),
                                           cells=np.array([c])).val[0]
                vm[c] = spaces.eval_volume(sp, dm, coeffs, gm, ("val",),
                                           cells=np.array([c])).val[0]
            fd = (vp - vm) / (2 * h)
            assert np.max(np.abs(fd - grad[..., j])) < 2e-6, kind


@pytest.mark.parametrize("kind,val", [
    (SpaceKind.SCALAR_L2, lambda x: x[0] ** 2 - 3 * x[1] * x[0]),
    (SpaceKind.VECTOR_PIOLA, lambda x: np.array([x[0] * x[1], x[1] ** 2 - 1.0])),
    (SpaceKind.VECTOR_HCURL, lambda x: np.array([x[1] ** 2, x[0] * x[1]])),
    (SpaceKind.VECTOR_H1, lambda x: np.array([x[0] ** 2, x[0] + 2 * x[1]])),
])
def test_interpolation_reproduces_polynomials(kind, val):
    tri = mesh.unit_square(2)
    sp = Space(kind, 2, tri)
    dm = build_dofmap(sp)
    coeffs = spaces.interpolate(sp, dm, val)
    rule = refelem.quad_rule(2, 5)
    geom = mesh.cell_geometry(tri, rule.points)
    got = spaces.eval_volume(sp, dm, coeffs, geom).val
    want = np.array([[val(x) for x in row] for row in geom.x])
    assert np.max(np.abs(got - want)) < 1e-11, kind


def test_skeleton_tangential_representation():
    tri = mesh.unit_square(2)
    sp = Space(SpaceKind.SKELETON_TANGENTIAL, 2, tri)
    dm = build_dofmap(sp)

    def g(x):
        return np.array([x[0] + x[1] ** 2, 1.0 - x[0] * x[1]])

    coeffs = spaces.interpolate(sp, dm, g)
    rule = refelem.quad_rule(1, 6)
    fg = mesh.facet_geometry(tri, rule, np.arange(tri.nf), both=False)
    got = spaces.eval_skeleton(sp, dm, coeffs, fg)
    want = np.array([[g(x) for x in row] for row in fg.x])
    t = fg.tangent / fg.jac[..., None]
    # tangential parts agree (the space only carries the tangential component)
    gt = np.einsum("fqi,fqi->fq", got, t)
    wt = np.einsum("fqi,fqi->fq", want, t)
    assert np.max(np.abs(gt - wt)) < 1e-12
    # and the representation is purely tangential
    n = fg.normal
    assert np.max(np.abs(np.einsum("fqi,fqi->fq", got, n))) < 1e-12


def test_skeleton_normal_representation():
    tri = mesh.unit_square(2)
    sp = Space(SpaceKind.SKELETON_NORMAL, 2, tri)
    dm = build_dofmap(sp)

    def g(x):
        return np.array([x[0] ** 2, x[0] - x[1]])

    coeffs = spaces.interpolate(sp, dm, g)
    rule = refelem.quad_rule(1, 6)
    fg = mesh.facet_geometry(tri, rule, np.arange(tri.nf), both=False)
    got = spaces.eval_skeleton(sp, dm, coeffs, fg)
    want = np.array([[g(x) for x in row] for row in fg.x])
    n = np.stack([fg.tangent[..., 1], -fg.tangent[..., 0]], axis=-1) / fg.jac[..., None]
    gn = np.einsum("fqi,fqi->fq", got, n)
    wn = np.einsum("fqi,fqi->fq", want, n)
    assert np.max(np.abs(gn - wn)) < 1e-12
    t = fg.tangent / fg.jac[..., None]
    assert np.max(np.abs(np.einsum("fqi,fqi->fq", got, t))) < 1e-12


def test_facet_support_dofs_set_equality():
    tri = mesh.unit_square(2)
    left = tri.facets_by_tag("left")
    spH = Space(SpaceKind.VECTOR_H1, 3, tri)
    dmH = build_dofmap(spH)
    got = set(spaces.facet_support_dofs(dmH, left).tolist())
    # independent: dofs whose basis function is nonzero on the left boundary
    rule = refelem.quad_rule(1, 7)
    fg = mesh.facet_geometry(tri, rule, left, both=False)
    tabs = spaces.trace_tables(spH, fg, 0)
    expect = set()
    for fi in range(len(left)):
        nz = np.flatnonzero(np.abs(tabs.val[fi]).max(axis=(1, 2)) > 1e-12)
        expect.update(dmH.cell_dofs[fg.sides[0].cells[fi]][nz].tolist())
    assert got == expect
