"""Interface pairing and fluid-structure coupling assembly."""

import numpy as np
import pytest

from hdgfsi import mesh as meshmod
from hdgfsi import refelem
from hdgfsi.fluid import (FluidBC, FluidCache, FluidDiscrete, FluidParams,
                          ale_from_maps, assemble_fluid, static_ale)
from hdgfsi.interface import (InterfaceCoupler, assemble_interface,
                              build_pairing)
from hdgfsi.solid import (SolidCache, SolidDiscrete, SolidHistory, SolidParams,
                          assemble_solid, displacement_update, initial_state)
from hdgfsi.spaces import interpolate
from hdgfsi.system import ElemBatch, FieldLayout, NewtonConfig, newton_solve

from test_fluid import dense_jacobian


def reverse_ids(tri):
    """Same mesh with vertex ids relabeled backwards.

    Reverses the stored orientation of every facet, exercising the
    parameter-mirroring path of the pairing.
    """
    nv = len(tri.vertices)
    tags = {name: [(nv - 1 - a, nv - 1 - b)
                   for a, b in tri.facet_vertices[tri.facets_by_tag(name)]]
            for name in tri.tag_names}
    return meshmod.triangulation(tri.vertices[::-1], nv - 1 - tri.cells, tags)


def warp(X):
    x, y = X[..., 0], X[..., 1]
    return np.stack([x + 0.04 * np.sin(np.pi * x) * (1 - y),
                     y + 0.05 * np.sin(np.pi * x) * (1 - y)], -1)


def make_pair(n=2, k=2, reverse=False, deform=False,
              fparams=None, sparams=None):
    """Unit-square fluid over a clamped elastic strip, joined along y=0."""
    ftri = meshmod.rectangle(0, 0, 1, 1, n, n,
                             tags=("left", "right", "interface", "top"))
    stri = meshmod.rectangle(0, -0.4, 1, 0, n, max(1, n // 2),
                             tags=("sleft", "sright", "sbottom", "sinterface"))
    if reverse:
        stri = reverse_ids(stri)
    lo = FieldLayout()
    fd = FluidDiscrete(ftri, k, fparams or FluidParams(1.0, 0.7), layout=lo)
    sd = SolidDiscrete(stri, k, sparams or SolidParams(2.0, 50.0, 30.0),
                       layout=lo)
    pairing = build_pairing(ftri, stri, ftri.facets_by_tag("interface"),
                            stri.facets_by_tag("sinterface"))
    coup = InterfaceCoupler(fd, sd, pairing)
    ale = ale_from_maps(ftri, 3, warp) if deform else static_ale(ftri)
    fc = FluidCache(fd, ale)
    return lo, fd, sd, pairing, coup, fc


def coupling_only(lo, fd, coup, fc, x):
    """System holding nothing but the interface blocks."""
    gd = np.hstack([fd.gdofs, coup.extra_gdofs])
    nl, ng, nc = fd.nl, gd.shape[1], fd.tri.nc
    batch = ElemBatch(fd.ldofs, gd, np.zeros((nc, nl, nl)),
                      np.zeros((nc, nl, ng)), np.zeros((nc, ng, nl)),
                      np.zeros((nc, ng, ng)), np.zeros((nc, nl)),
                      np.zeros((nc, ng)))
    sys = lo.new_system(np.zeros(lo.ndofs, bool))
    sys.batches.append(batch)
    assemble_interface(coup, fc, x, batch)
    return sys


def vfield(p):
    x, y = p[..., 0], p[..., 1]
    return np.stack([0.3 * x * x - y, 0.2 + x * y], -1)


def wfield(p):
    x, y = p[..., 0], p[..., 1]
    return np.stack([y - 0.1 * x, 0.5 * x * x + 0.4], -1)


def one_triangle(verts, tag):
    return meshmod.triangulation(verts, [[0, 1, 2]],
                                 {tag: [(0, 1)], "rest": [(1, 2), (0, 2)]})


def test_single_facet_pair_identity_alignment():
    ftri = one_triangle([(0, 0), (1, 0), (0.5, 0.8)], "gam")
    stri = one_triangle([(0, 0), (1, 0), (0.5, -0.8)], "gam")
    p = build_pairing(ftri, stri, ftri.facets_by_tag("gam"),
                      stri.facets_by_tag("gam"))
    assert len(p.ffacets) == 1 and not p.flip[0]


def test_single_facet_pair_reversed_orientation():
    ftri = one_triangle([(0, 0), (1, 0), (0.5, 0.8)], "gam")
    stri = one_triangle([(1, 0), (0, 0), (0.5, -0.8)], "gam")
    p = build_pairing(ftri, stri, ftri.facets_by_tag("gam"),
                      stri.facets_by_tag("gam"))
    assert len(p.ffacets) == 1 and p.flip[0]


def test_reversed_mesh_points_coincide():
    # five-point coincidence of aligned quadrature parameters
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=True)
    assert pairing.flip.all()
    rule = refelem.quad_rule(1, 8)
    assert len(rule.weights) == 5
    fx = meshmod.facet_geometry(fd.tri, rule, pairing.ffacets, both=False).x
    mir = refelem.QuadratureRule(1, 90001, 1.0 - rule.points[:, 0][:, None],
                                 rule.weights)
    sx = meshmod.facet_geometry(sd.tri, mir, pairing.sfacets, both=False).x
    assert np.max(np.linalg.norm(fx - sx, axis=-1)) < 1e-13


def test_pairing_count_and_errors():
    ftri = meshmod.rectangle(0, 0, 1, 1, 3, 2,
                             tags=("left", "right", "interface", "top"))
    stri = meshmod.rectangle(0, -0.4, 1, 0, 3, 1,
                             tags=("sleft", "sright", "sbottom", "sinterface"))
    p = build_pairing(ftri, stri, ftri.facets_by_tag("interface"),
                      stri.facets_by_tag("sinterface"))
    assert len(p.ffacets) == 3
    with pytest.raises(ValueError, match="count mismatch"):
        build_pairing(ftri, stri, ftri.facets_by_tag("interface"),
                      stri.facets_by_tag("sinterface")[:2])
    shifted = meshmod.rectangle(0.5, -0.4, 1.5, 0, 3, 1,
                                tags=("sleft", "sright", "sbottom",
                                      "sinterface"))
    with pytest.raises(ValueError, match="unmatched interface facet"):
        build_pairing(ftri, shifted, ftri.facets_by_tag("interface"),
                      shifted.facets_by_tag("sinterface"))


def test_mismatched_degrees_and_layouts_rejected():
    ftri = meshmod.rectangle(0, 0, 1, 1, 2, 2,
                             tags=("left", "right", "interface", "top"))
    stri = meshmod.rectangle(0, -0.4, 1, 0, 2, 1,
                             tags=("sleft", "sright", "sbottom", "sinterface"))
    pairing = build_pairing(ftri, stri, ftri.facets_by_tag("interface"),
                            stri.facets_by_tag("sinterface"))
    lo = FieldLayout()
    fd = FluidDiscrete(ftri, 2, FluidParams(1.0, 1.0), layout=lo)
    sd3 = SolidDiscrete(stri, 3, SolidParams(1.0, 1.0, 1.0), layout=lo)
    with pytest.raises(ValueError, match="degrees"):
        InterfaceCoupler(fd, sd3, pairing)
    sd = SolidDiscrete(stri, 2, SolidParams(1.0, 1.0, 1.0),
                       layout=FieldLayout())
    with pytest.raises(ValueError, match="layout"):
        InterfaceCoupler(fd, sd, pairing)


def test_extra_gdofs_padding_is_global():
    lo, fd, sd, pairing, coup, fc = make_pair()
    k = fd.k
    assert coup.extra_gdofs.shape == (fd.tri.nc, 6 * (k + 1))
    sys = lo.new_system(np.zeros(lo.ndofs, bool))
    pad = lo.off("sig")
    assert not sys.is_local[pad]
    touched = np.flatnonzero(np.any(coup.extra_gdofs != pad, axis=1))
    assert set(touched) == set(coup.fcells)
    for i, (c, f) in enumerate(zip(coup.fcells, pairing.ffacets)):
        row = coup.extra_gdofs[c]
        assert set(coup.U_dofs[i]) <= set(row)
        assert set(coup.W_dofs[i]) <= set(row)


@pytest.mark.parametrize("reverse", [False, True])
def test_mortar_pair_skew_at_matrix_level(reverse):
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=reverse, deform=True)
    rng = np.random.default_rng(5)
    x = rng.standard_normal(lo.ndofs)
    sys = coupling_only(lo, fd, coup, fc, x)
    K = dense_jacobian(sys)
    S = (lo.off("sig") + fd.dms["sig"].facet_dofs[pairing.ffacets]).ravel()
    UW = np.concatenate([coup.U_dofs.ravel(), coup.W_dofs.ravel()])
    scale = 1.0 + np.max(np.abs(K))
    assert np.max(np.abs(K[np.ix_(S, UW)] + K[np.ix_(UW, S)].T)) < 1e-14 * scale


def test_coupling_residual_linear_in_state():
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=True, deform=True)
    rng = np.random.default_rng(6)
    x = rng.standard_normal(lo.ndofs)
    sys = coupling_only(lo, fd, coup, fc, x)
    K = dense_jacobian(sys)
    assert np.max(np.abs(sys.residual() - K @ x)) < 1e-12 * (1 + np.max(np.abs(K)))


@pytest.mark.parametrize("reverse,deform", [(False, False), (True, True)])
def test_trial_test_reduces_to_penalty_norm(reverse, deform):
    # with trial = test the mortar pair cancels exactly and the Nitsche
    # pair cancels, leaving the tangential penalty on the moved interface
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=reverse, deform=deform)
    rng = np.random.default_rng(17)
    x0 = rng.standard_normal(lo.ndofs)
    K = dense_jacobian(coupling_only(lo, fd, coup, fc, x0))
    for _ in range(20):
        y = rng.standard_normal(lo.ndofs)
        pen = coup.penalty_energy(fc, y)
        assert abs(y @ K @ y - pen) <= 1e-10 * abs(pen)


@pytest.mark.parametrize("reverse", [False, True])
def test_displacement_trace_matches_decomposition(reverse):
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=reverse)
    d = interpolate(sd.spaces["us"], sd.dms["us"], vfield)
    dtil = interpolate(sd.spaces["uts"], sd.dms["uts"], wfield)
    params = np.array([0.0, 0.13, 0.5, 0.77, 1.0])
    got = coup.displacement_trace(d, dtil, params)
    rule = refelem.QuadratureRule(1, 90010 + reverse, params[:, None],
                                  np.zeros(len(params)))
    X = meshmod.facet_geometry(fd.tri, rule, pairing.ffacets, both=False).x
    n0 = np.array([0.0, 1.0])  # strip outward normal along the joint
    vv, wv = vfield(X), wfield(X)
    want = vv - (vv @ n0)[..., None] * n0 + (wv @ n0)[..., None] * n0
    assert np.max(np.abs(got - want)) < 1e-12


def test_matched_traces_cancel_mortar_and_penalty_rows():
    # same polynomial trace on both sides: combined constraint rows and the
    # coupling's penalty rows vanish, and both velocity gaps are zero
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=True)
    x = initial_state(sd)
    for name, disc in (("u", fd), ("ut", fd), ("us", sd), ("uts", sd)):
        x[lo.slc(name)] = interpolate(disc.spaces[name], disc.dms[name], vfield)
    sys = lo.new_system(np.zeros(lo.ndofs, bool))
    bf = assemble_fluid(fd, fc, x, sys, convection="none",
                        extra_gdofs=coup.extra_gdofs)
    assemble_interface(coup, fc, x, bf)
    r = sys.residual()
    S = (lo.off("sig") + fd.dms["sig"].facet_dofs[pairing.ffacets]).ravel()
    assert np.max(np.abs(r[S])) < 1e-13

    rc = coupling_only(lo, fd, coup, fc, x).residual()
    T = (lo.off("ut") + fd.dms["ut"].facet_dofs[pairing.ffacets]).ravel()
    UW = np.concatenate([coup.U_dofs.ravel(), coup.W_dofs.ravel()])
    assert np.max(np.abs(rc[T])) < 1e-13
    assert np.max(np.abs(rc[UW])) < 1e-13
    gapn, gapt = coup.velocity_gap(fc, x)
    assert gapn < 1e-26 and gapt < 1e-26


def test_coupled_jacobian_matches_fd():
    lo, fd, sd, pairing, coup, fc = make_pair(reverse=True, deform=True)
    sc = SolidCache(sd)
    rng = np.random.default_rng(11)
    dt = 0.05
    x1 = 0.05 * rng.standard_normal(lo.ndofs)
    x2 = 0.05 * rng.standard_normal(lo.ndofs)
    sh = SolidHistory(u1=x1, d1=0.01 * rng.standard_normal(sd.dms["us"].ndofs),
                      dt1=0.01 * rng.standard_normal(sd.dms["uts"].ndofs),
                      u2=x2, d2=0.01 * rng.standard_normal(sd.dms["us"].ndofs),
                      dt2=0.01 * rng.standard_normal(sd.dms["uts"].ndofs))
    x0 = initial_state(sd) + 0.1 * rng.standard_normal(lo.ndofs)

    def assemble_all(xx):
        sys = lo.new_system(np.zeros(lo.ndofs, bool))
        bf = assemble_fluid(fd, fc, xx, sys, dt=dt, hist=(x1, x2),
                            convection="implicit",
                            extra_gdofs=coup.extra_gdofs)
        assemble_interface(coup, fc, xx, bf)
        assemble_solid(sd, sc, xx, sys, dt=dt, hist=sh)
        return sys

    sys = assemble_all(x0)
    K = dense_jacobian(sys)
    scale = np.max(np.abs(K))
    h = 1e-6
    for c in rng.choice(lo.ndofs, 40, replace=False):
        xp = x0.copy(); xp[c] += h
        xm = x0.copy(); xm[c] -= h
        col = (assemble_all(xp).residual() - assemble_all(xm).residual()) / (2 * h)
        assert np.max(np.abs(col - K[:, c])) < 1e-6 * scale


def test_coupled_step_converges_with_velocity_continuity():
    # one backward Euler step of a lid-driven cavity over an elastic pad:
    # Newton contracts quadratically, the normal trace gap closes to
    # roundoff, and the interface actually moves (two-way coupling)
    lo, fd, sd, pairing, coup, fc = make_pair(n=3, reverse=True)
    sc = SolidCache(sd)

    def lid(p):
        return np.stack([0.1 * np.ones(p.shape[:-1]),
                         np.zeros(p.shape[:-1])], -1)

    bc = FluidBC(velocity={"left": None, "right": None, "top": lid},
                 coupled=("interface",))
    fixed = fd.fixed_mask(bc) | sd.clamp_mask(sd.tri.facets_by_tag("sbottom"))
    dofs, vals, gn = fc.boundary_data(bc)
    dt, bdf = 0.1, (1.0, -1.0, 0.0)
    x1 = initial_state(sd)
    sh = SolidHistory(u1=x1, d1=np.zeros(sd.dms["us"].ndofs),
                      dt1=np.zeros(sd.dms["uts"].ndofs))

    def assemble_all(x):
        sys = lo.new_system(fixed)
        bf = assemble_fluid(fd, fc, x, sys, dt=dt, hist=(x1, None), bdf=bdf,
                            convection="none", gn=gn,
                            extra_gdofs=coup.extra_gdofs)
        assemble_interface(coup, fc, x, bf)
        assemble_solid(sd, sc, x, sys, dt=dt, hist=sh, bdf=bdf)
        return sys

    x0 = x1.copy()
    x0[dofs] = vals
    res = newton_solve(assemble_all, x0, NewtonConfig(tol=1e-11))
    assert res.converged and res.iterations <= 4

    gapn, gapt = coup.velocity_gap(fc, res.x)
    umax = np.max(np.abs(res.x[lo.slc("u")]))
    assert umax > 1e-3
    assert np.sqrt(gapn) < 1e-13 * umax
    assert np.sqrt(gapt) < 0.1 * umax
    d, dtil = displacement_update(sd, res.x, sh, dt, bdf)
    gam = coup.displacement_trace(d, dtil, np.linspace(0, 1, 5))
    assert np.max(np.abs(gam)) > 1e-6
