"""Mesh motion: linearized solves, mesh velocity, deformed-configuration data."""

import numpy as np
import pytest

from hdgfsi import mesh as meshmod
from hdgfsi import refelem
from hdgfsi.fluid import FluidCache, FluidDiscrete, FluidParams, ale_from_maps
from hdgfsi.mesh_motion import (AleState, MeshMotion, MeshTangledError,
                                ale_data, mesh_velocity)


def graded_strip(widths, ny=6):
    """Structured mesh whose column widths follow `widths`."""
    xs = np.concatenate([[0.0], np.cumsum(widths)])
    xs = xs / xs[-1]
    ys = np.linspace(0, 1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    nx = len(widths)

    def vid(i, j):
        return i * (ny + 1) + j

    cells, bt = [], {"left": [], "right": [], "bottom": [], "top": []}
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            cells += [(a, b, c), (a, c, d)]
    for j in range(ny):
        bt["left"].append((vid(0, j), vid(0, j + 1)))
        bt["right"].append((vid(nx, j), vid(nx, j + 1)))
    for i in range(nx):
        bt["bottom"].append((vid(i, 0), vid(i + 1, 0)))
        bt["top"].append((vid(i, ny), vid(i + 1, ny)))
    return meshmod.triangulation(verts, np.array(cells, dtype=np.int64), bt)


def test_zero_data_keeps_identity():
    mm = MeshMotion(meshmod.unit_square(3), 2)
    phi = mm.solve(mm.identity())
    assert np.max(np.abs(phi - mm.x0)) < 1e-13


def test_whole_boundary_translation_exact():
    # translations lie in the kernel of the linearized operator
    mm = MeshMotion(meshmod.unit_square(3), 3)
    c = np.array([0.3, -0.2])
    bdofs = np.flatnonzero(mm.fixed)
    exact = mm.x0 + np.tile(c, mm.ndofs // 2)
    phi = mm.solve(mm.identity(), bdofs, exact[bdofs])
    assert np.max(np.abs(phi - exact)) < 1e-12


def test_small_bump_keeps_jacobians_near_one():
    mm = MeshMotion(meshmod.unit_square(4), 3)
    dofs, params = mm.facet_node_dofs(mm.tri.facets_by_tag("bottom"))
    vals = mm.x0[dofs].copy()
    vals[..., 1] += 1e-3 * np.sin(np.pi * mm.x0[dofs[..., 0]])
    phi = mm.solve(mm.identity(), dofs, vals)
    jmin, jmax = mm.jacobian_range(phi)
    assert jmin > 0.9
    # Dirichlet data is honored exactly
    assert np.max(np.abs(phi[dofs] - vals)) == 0.0


def test_tangling_detected_and_rejected():
    mm = MeshMotion(meshmod.unit_square(4), 2)
    dofs, _ = mm.facet_node_dofs(mm.tri.facets_by_tag("bottom"))
    vals = mm.x0[dofs].copy()
    vals[..., 1] += 1.2 * np.sin(np.pi * mm.x0[dofs[..., 0]])
    with pytest.raises(MeshTangledError):
        mm.solve(mm.identity(), dofs, vals)


def test_data_off_the_boundary_rejected():
    mm = MeshMotion(meshmod.unit_square(3), 2)
    inner = np.flatnonzero(~mm.fixed)[:4]
    with pytest.raises(ValueError, match="non-boundary"):
        mm.solve(mm.identity(), inner, mm.x0[inner])


def test_mesh_velocity_bdf_exactness():
    mm = MeshMotion(meshmod.unit_square(2), 2)
    rng = np.random.default_rng(0)
    A = 0.01 * rng.standard_normal(mm.ndofs)
    B = 0.02 * rng.standard_normal(mm.ndofs)
    t0, dt = 1.0, 0.05

    def phit(t):
        return mm.x0 + t * A + t * t * B

    st = AleState(phit(t0), phit(t0 - dt), phit(t0 - 2 * dt))
    om = mesh_velocity(st, dt)
    assert np.max(np.abs(om - (A + 2 * t0 * B))) < 1e-12
    same = AleState(st.phi, st.phi, st.phi)
    assert np.max(np.abs(mesh_velocity(same, dt))) < 1e-12
    lin = AleState(phit_l := mm.x0 + 3 * dt * A, mm.x0 + 2 * dt * A,
                   mm.x0 + dt * A)
    assert np.max(np.abs(mesh_velocity(lin, dt) - A)) < 1e-12


def test_geometric_conservation_probe():
    # phi linear in time: BDF2 of det(grad phi) equals J tr(grad_x omega)
    mm = MeshMotion(meshmod.unit_square(3), 3)
    rng = np.random.default_rng(1)
    A = 0.05 * rng.standard_normal(mm.ndofs)
    t0, dt = 0.4, 0.05
    states = [mm.x0 + t * A for t in (t0, t0 - dt, t0 - 2 * dt)]
    om = mesh_velocity(AleState(*states), dt)
    Fs = [mm.gradient(p) for p in states]
    Js = [meshmod.det2(F) for F in Fs]
    dJdt = (1.5 * Js[0] - 2.0 * Js[1] + 0.5 * Js[2]) / dt
    gom = np.einsum("cb,cbqij->cqij", om[mm.dm.cell_dofs], mm.tab_g)
    divx = np.einsum("cqij,cqji->cq", gom, meshmod.inv2(Fs[0], Js[0]))
    assert np.max(np.abs(dJdt - Js[0] * divx)) < 1e-10


def test_stiffening_protects_small_cells():
    # alternating thin/wide columns under the same boundary bump: the thin
    # (stiffer) cells must distort no more than the wide ones
    tri = graded_strip([0.05, 0.15] * 3)
    mm = MeshMotion(tri, 2)
    dofs, _ = mm.facet_node_dofs(tri.facets_by_tag("bottom"))
    vals = mm.x0[dofs].copy()
    vals[..., 1] += 0.08 * np.sin(np.pi * mm.x0[dofs[..., 0]])
    phi = mm.solve(mm.identity(), dofs, vals)
    dist = mm.cell_distortion(phi)
    order = np.argsort(meshmod.cell_areas(tri))
    ten = max(1, len(order) // 10)
    assert dist[order[:ten]].max() <= dist[order[-ten:]].max()


def test_ale_data_identity_and_composition():
    tri = meshmod.unit_square(3)
    k = 3
    mm = MeshMotion(tri, k)
    ad = ale_data(mm, mm.identity())
    assert ad.degree == k
    areas = meshmod.cell_areas(tri)
    assert np.max(np.abs(meshmod.cell_areas(tri, ad.coeffs, ad.degree) - areas)) < 1e-14

    # a cubic analytic map is reproduced exactly through the interpolant
    def psi(X):
        x, y = X[..., 0], X[..., 1]
        return np.stack([x + 0.02 * x * x * y, y - 0.03 * x * y * y], -1)

    phi = np.zeros(mm.ndofs)
    lat_geom = meshmod.cell_geometry(tri, refelem.lattice(k))
    phi[mm.dm.cell_dofs] = psi(lat_geom.x).reshape(tri.nc, -1)
    # mesh-velocity values ride on the deformed nodes
    om_field = lambda X: np.stack([0.1 + 0.2 * X[..., 1], 0.3 * X[..., 0]], -1)
    om = np.zeros(mm.ndofs)
    om[mm.dm.cell_dofs] = om_field(psi(lat_geom.x)).reshape(tri.nc, -1)
    ad = ale_data(mm, phi, om)
    ref = ale_from_maps(tri, k, psi, om_field)
    assert ad.omega is om
    assert np.max(np.abs(ad.coeffs - ref.coeffs)) < 1e-13
    assert np.max(np.abs(ad.omega - ref.omega)) < 1e-13

    # re-expression at a higher degree reproduces the analytic sampling
    # (om_field is linear, psi cubic, so the composition stays in P3)
    ad4 = ale_data(mm, phi, om, degree=4)
    ref4 = ale_from_maps(tri, 4, psi, om_field)
    assert np.max(np.abs(ad4.coeffs - ref4.coeffs)) < 1e-13
    assert np.max(np.abs(ad4.omega - ref4.omega)) < 1e-13

    # the fluid cache accepts the composed configuration
    disc = FluidDiscrete(tri, 2, FluidParams(1.0, 1.0))
    cache = FluidCache(disc, ad)
    assert cache.geom.J.min() > 0


def test_facet_node_dofs_order_matches_parameters():
    tri = meshmod.unit_square(2)
    mm = MeshMotion(tri, 3)
    f = tri.facets_by_tag("bottom")
    dofs, params = mm.facet_node_dofs(f)
    # nodal x-coordinates must advance with the facet parameter
    xs = mm.x0[dofs[..., 0]]
    a = tri.vertices[tri.facet_vertices[f, 0], 0]
    b = tri.vertices[tri.facet_vertices[f, 1], 0]
    want = a[:, None] + params[None, :] * (b - a)[:, None]
    assert np.max(np.abs(xs - want)) < 1e-14
