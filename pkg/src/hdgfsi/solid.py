"""Lagrangian HDG assembly for Saint Venant-Kirchhoff elastodynamics.

Unknowns per solid mesh: first Piola-Kirchhoff stress P and deformation
gradient F (discontinuous full tensors, degree k), velocity us (tangentially
continuous covariant vectors, degree k) and its normal trace uts on the
skeleton (degree k).  P, F and the interior H(curl) modes are element-local
and condense away; the H(curl) edge modes and uts stay global.

Element residual rows, with (Q, G, xi, xit) the test functions, n the
outward element normal and nrm(v) = (v.n) n:

  Q:    (F - grad d - I, Q) + <nrm(d - dtil), Q n>
  G:    (dPsi/dF(F) - P, G)
  xi:   rho_s (Dt u, xi) + (P, grad xi)
        - <P n - alpha nrm(d - dtil), nrm xi> - rho_s (f, xi)
  xit:  <P n - alpha nrm(d - dtil), nrm xit>   (summed over both sides)

Displacements never enter the solve directly.  Within a time step d and its
trace dtil are eliminated through the BDF relation d = dbar + (dt/a0) u with
dbar the weighted history, so the unknown stays the velocity.  In the static
problem (dt None) the us slot carries d itself and inertia is dropped.  The
tangentially continuous velocity space keeps interface traces well defined
while all normal continuity is enforced weakly through the flux.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

from functools import partial
import numpy as np

# BLAS-friendly contraction paths; the 4-operand forms are hot
ein = partial(np.einsum, optimize=True)

from . import mesh as meshmod
from . import refelem
from .spaces import (Space, SpaceKind, build_dofmap, facet_support_dofs,
                     interpolate, skeleton_tables, trace_tables, volume_tables)
from .system import BlockSystem, ElemBatch, FieldLayout


@dataclass
class SolidParams:
    """Density, Lame moduli and the normal facet stabilization weight."""

    rho: float
    lam: float
    mu: float
    alpha: float | None = None

    def __post_init__(self):
        if self.rho <= 0.0 or self.mu <= 0.0:
            raise ValueError("rho and mu must be positive")
        if self.lam < 0.0:
            raise ValueError("lam must be nonnegative")
        if self.alpha is None:
            self.alpha = 2.0 * self.mu
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


def svk_stress(F: np.ndarray, lam: float, mu: float):
    """Energy density and first Piola-Kirchhoff stress, (..., 2, 2) batched.

    Psi = lam/2 tr(E)^2 + mu E:E and P = F (lam tr(E) I + 2 mu E) with
    E = (F^T F - I)/2 the Green-Lagrange strain.
    """
    F = np.asarray(F, dtype=float)
    E = 0.5 * (ein("...ki,...kj->...ij", F, F) - np.eye(2))
    trE = np.trace(E, axis1=-2, axis2=-1)
    psi = 0.5 * lam * trE ** 2 + mu * ein("...ij,...ij->...", E, E)
    S = lam * trE[..., None, None] * np.eye(2) + 2.0 * mu * E
    return psi, ein("...ik,...kj->...ij", F, S)


def svk_tangent(F: np.ndarray, dF: np.ndarray, lam: float, mu: float) -> np.ndarray:
    """Directional stress derivative d/ds P(F + s dF) at s = 0."""
    F = np.asarray(F, dtype=float)
    dF = np.asarray(dF, dtype=float)
    E = 0.5 * (ein("...ki,...kj->...ij", F, F) - np.eye(2))
    trE = np.trace(E, axis1=-2, axis2=-1)
    S = lam * trE[..., None, None] * np.eye(2) + 2.0 * mu * E
    dE = 0.5 * (ein("...ki,...kj->...ij", dF, F)
                + ein("...ki,...kj->...ij", F, dF))
    trdE = np.trace(dE, axis1=-2, axis2=-1)
    dS = lam * trdE[..., None, None] * np.eye(2) + 2.0 * mu * dE
    return (ein("...ik,...kj->...ij", dF, S)
            + ein("...ik,...kj->...ij", F, dS))


def svk_tangent_tensor(F: np.ndarray, lam: float, mu: float) -> np.ndarray:
    """Full material tangent A[..., i, j, k, l] = d P_ij / d F_kl."""
    F = np.asarray(F, dtype=float)
    eye = np.eye(2)
    E = 0.5 * (ein("...ki,...kj->...ij", F, F) - eye)
    trE = np.trace(E, axis1=-2, axis2=-1)
    S = lam * trE[..., None, None] * eye + 2.0 * mu * E
    FFt = ein("...ik,...jk->...ij", F, F)
    return (ein("ik,...lj->...ijkl", eye, S)
            + lam * ein("...ij,...kl->...ijkl", F, F)
            + mu * (ein("...il,...kj->...ijkl", F, F)
                    + ein("...ik,jl->...ijkl", FFt, eye)))


@dataclass
class SolidHistory:
    """Previous-step data feeding the BDF stencil.

    u1, u2: full layout vectors of the one- and two-back states (only their
    us blocks are read). d1, d2: H(curl) displacement coefficients; dt1,
    dt2 the matching skeleton traces. Two-back entries may be None during
    the backward Euler startup step.
    """

    u1: np.ndarray
    d1: np.ndarray
    dt1: np.ndarray
    u2: np.ndarray | None = None
    d2: np.ndarray | None = None
    dt2: np.ndarray | None = None


class SolidDiscrete:
    """Spaces, dofmaps and flat-vector layout of one solid discretization."""

    FIELD_NAMES = ("P", "F", "us", "uts")

    def __init__(self, tri: meshmod.Triangulation, k: int, params: SolidParams,
                 layout: FieldLayout | None = None,
                 vol_order: int | None = None, fac_order: int | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.tri, self.k, self.params = tri, k, params
        self.layout = layout if layout is not None else FieldLayout()
        kinds = {"P": (SpaceKind.TENSOR_L2, k),
                 "F": (SpaceKind.TENSOR_L2, k),
                 "us": (SpaceKind.VECTOR_HCURL, k),
                 "uts": (SpaceKind.SKELETON_NORMAL, k)}
        self.spaces = {n: Space(kd, deg, tri) for n, (kd, deg) in kinds.items()}
        self.dms = {n: build_dofmap(s) for n, s in self.spaces.items()}
        dmu = self.dms["us"]
        interior = np.arange(dmu.ndofs) >= dmu.n_edge_dofs
        local = {"P": True, "F": True, "us": interior, "uts": False}
        for name in self.FIELD_NAMES:
            self.layout.add(name, self.dms[name], local=local[name])
        self.vol_order = vol_order if vol_order is not None else 3 * k + 2
        self.fac_order = fac_order if fac_order is not None else 3 * k + 2

        nt = self.dms["P"].space.nloc
        ne1 = k + 1
        nv = dmu.space.nloc
        self.nt, self.nv, self.ne1 = nt, nv, ne1
        self.nl = 2 * nt + nv - 3 * ne1
        self.ng = 6 * ne1
        self.rows_P = np.arange(nt)
        self.rows_F = nt + np.arange(nt)
        self.rows_ui = 2 * nt + np.arange(nv - 3 * ne1)
        self.cols_ue = np.arange(3 * ne1)
        self.cols_uts = [3 * ne1 + l * ne1 + np.arange(ne1) for l in range(3)]

        lo = self.layout
        self.ldofs = np.hstack([lo.off("P") + self.dms["P"].cell_dofs,
                                lo.off("F") + self.dms["F"].cell_dofs,
                                lo.off("us") + dmu.cell_dofs[:, 3 * ne1:]])
        fd = lo.off("uts") + self.dms["uts"].facet_dofs
        self.gdofs = np.hstack([lo.off("us") + dmu.cell_dofs[:, :3 * ne1],
                                fd[tri.cell_facets].reshape(tri.nc, 3 * ne1)])

    def state(self, x: np.ndarray) -> SimpleNamespace:
        """Named views of the solid blocks of a flat vector."""
        return SimpleNamespace(**{n: x[self.layout.slc(n)] for n in self.FIELD_NAMES})

    def clamp_mask(self, facets) -> np.ndarray:
        """Layout mask fixing us edge dofs and uts dofs on the given facets.

        Fixing both pins the full trace of the eliminated displacement, which
        is the essential displacement (or velocity) boundary condition.
        """
        facets = np.asarray(facets, dtype=np.int64)
        mask = np.zeros(self.layout.ndofs, dtype=bool)
        mask[self.layout.off("us")
             + facet_support_dofs(self.dms["us"], facets)] = True
        mask[self.layout.off("uts")
             + self.dms["uts"].facet_dofs[facets].ravel()] = True
        return mask


def reference_gradient(disc: SolidDiscrete) -> np.ndarray:
    """Coefficients of the identity tensor in the F space."""
    return interpolate(disc.spaces["F"], disc.dms["F"], lambda p: np.eye(2))


def initial_state(disc: SolidDiscrete) -> np.ndarray:
    """Rest state: zero everywhere except F = I, the natural Newton start."""
    x = np.zeros(disc.layout.ndofs)
    x[disc.layout.slc("F")] = reference_gradient(disc)
    return x


class SolidCache:
    """Quadrature tables on the reference configuration, built once.

    Facet data is reduced to normal-component scalars: every interface of
    the scheme couples only v.n, (Q n).n and the skeleton modes, so the
    per-side tables vn, Tnn and sknn carry all geometric content.  H(curl)
    orientation signs are folded into every stored table; assembly then
    gathers raw coefficients.
    """

    def __init__(self, disc: SolidDiscrete):
        tri = disc.tri
        self.disc = disc
        vr = refelem.quad_rule(2, disc.vol_order)
        geom = meshmod.cell_geometry(tri, vr.points, hessian=tri.geom_degree > 1)
        self.vol_rule, self.geom = vr, geom
        self.wv = vr.weights[None, :] * geom.J
        self.tab_T = volume_tables(disc.spaces["P"], geom).val
        tv = volume_tables(disc.spaces["us"], geom, ("val", "grad"))
        sg = disc.dms["us"].cell_signs
        self.tab_v = tv.val * sg[..., None, None]
        self.tab_gv = tv.grad * sg[..., None, None, None]

        wv = self.wv
        self.G_TT = ein("cbqij,caqij,cq->cba", self.tab_T, self.tab_T, wv)
        self.B_gv_T = ein("cbqij,caqij,cq->cba",
                                self.tab_gv, self.tab_T, wv)
        self.M_vv = ein("cbqi,caqi,cq->cba", self.tab_v, self.tab_v, wv)

        fr = refelem.quad_rule(1, disc.fac_order)
        self.fac_rule = fr
        self.groups = []
        for facets, nsides in ((tri.interior_facets(), 2),
                               (tri.boundary_facets(), 1)):
            if not len(facets):
                continue
            fg = meshmod.facet_geometry(tri, fr, facets, both=nsides == 2)
            g = SimpleNamespace(fg=fg, boundary=nsides == 1,
                                wf=fr.weights[None, :] * fg.jac)
            sk = skeleton_tables(disc.spaces["uts"], fg).val
            g.fdofs = disc.dms["uts"].facet_dofs[facets]
            g.uts_dofs = disc.layout.off("uts") + g.fdofs
            g.sides = []
            for s in range(nsides):
                cells = fg.sides[s].cells
                slots = tri.facet_local[facets, s]
                n = fg.normal if s == 0 else -fg.normal
                tabv = trace_tables(disc.spaces["us"], fg, s).val \
                    * sg[cells][..., None, None]
                tabT = trace_tables(disc.spaces["P"], fg, s).val
                sd = SimpleNamespace(
                    cells=cells, n=n,
                    vn=ein("fbqi,fqi->fbq", tabv, n),
                    Tnn=ein("fbqij,fqj,fqi->fbq", tabT, n, n),
                    sknn=ein("fbqi,fqi->fbq", sk, n),
                    sels=[np.flatnonzero(slots == l) for l in range(3)])
                wf = g.wf
                sd.G_vv = ein("fbq,faq,fq->fba", sd.vn, sd.vn, wf)
                sd.G_vs = ein("fbq,faq,fq->fba", sd.vn, sd.sknn, wf)
                sd.G_vT = ein("fbq,faq,fq->fba", sd.vn, sd.Tnn, wf)
                sd.G_Ts = ein("fbq,faq,fq->fba", sd.Tnn, sd.sknn, wf)
                sd.G_ss = ein("fbq,faq,fq->fba", sd.sknn, sd.sknn, wf)
                g.sides.append(sd)
            self.groups.append(g)


def assemble_solid(disc: SolidDiscrete, cache: SolidCache, x: np.ndarray,
                   sys: BlockSystem, *, dt: float | None = None,
                   hist: SolidHistory | None = None, bdf=(1.5, -2.0, 0.5),
                   force=None, extra_gdofs: np.ndarray | None = None) -> ElemBatch:
    """Add the solid residual and Jacobian at state x to the block system.

    dt=None solves the static problem with the us slot holding the
    displacement. Otherwise displacements are eliminated elementwise via
    d = dbar + (dt/a0) u built from hist. extra_gdofs widens every element
    block with additional global columns (filled by couplers); their entries
    are left zero here.

    Returns the element batch so couplers may extend it.
    """
    lam, mu = disc.params.lam, disc.params.mu
    rho, alpha = disc.params.rho, disc.params.alpha
    tri, lay = disc.tri, disc.layout
    nc, nl, ng = tri.nc, disc.nl, disc.ng
    gdofs = disc.gdofs
    if extra_gdofs is not None:
        gdofs = np.hstack([gdofs, extra_gdofs])
        ng = gdofs.shape[1]
    A_ll = np.zeros((nc, nl, nl))
    A_lg = np.zeros((nc, nl, ng))
    A_gl = np.zeros((nc, ng, nl))
    A_gg = np.zeros((nc, ng, ng))
    r_l = np.zeros((nc, nl))
    r_g = np.zeros((nc, ng))

    nt, ne1 = disc.nt, disc.ne1
    ne3 = 3 * ne1
    RP, RI, CE = disc.rows_P, disc.rows_ui, disc.cols_ue
    sP, sF, sI = slice(0, nt), slice(nt, 2 * nt), slice(2 * nt, nl)
    sE = slice(0, ne3)
    dmu = disc.dms["us"]

    if dt is None:
        c_d = 1.0
    else:
        if hist is None:
            raise ValueError("dt given without history")
        a0, a1, a2 = bdf
        c_d = dt / a0
        dbar = -a1 * hist.d1 / a0
        dtbar = -a1 * hist.dt1 / a0
        if hist.d2 is not None:
            dbar -= a2 * hist.d2 / a0
            dtbar -= a2 * hist.dt2 / a0

    xP = x[lay.slc("P")][disc.dms["P"].cell_dofs]
    xF = x[lay.slc("F")][disc.dms["F"].cell_dofs]
    xu = x[lay.slc("us")][dmu.cell_dofs]
    xd = xu if dt is None else dbar[dmu.cell_dofs] + c_d * xu

    wv = cache.wv
    Pv = ein("cb,cbqij->cqij", xP, cache.tab_T)
    Fv = ein("cb,cbqij->cqij", xF, cache.tab_T)
    gd = ein("cb,cbqij->cqij", xd, cache.tab_gv)
    _, Pm = svk_stress(Fv, lam, mu)

    # volume residual
    r_l[:, sP] += ein("cqij,caqij,cq->ca",
                            Fv - gd - np.eye(2), cache.tab_T, wv)
    r_l[:, sF] += ein("cqij,caqij,cq->ca", Pm - Pv, cache.tab_T, wv)
    rV = ein("cqij,cbqij,cq->cb", Pv, cache.tab_gv, wv)
    IX = 0.0                              # paired with xi values
    if dt is not None:
        u = ein("cb,cbqi->cqi", xu, cache.tab_v)
        u1 = ein("cb,cbqi->cqi",
                       hist.u1[lay.slc("us")][dmu.cell_dofs], cache.tab_v)
        u2 = 0.0
        if hist.u2 is not None:
            u2 = ein("cb,cbqi->cqi",
                           hist.u2[lay.slc("us")][dmu.cell_dofs], cache.tab_v)
        IX = rho * (a0 * u + a1 * u1 + a2 * u2) / dt
    if force is not None:
        fv = force(cache.geom.x) if callable(force) else force
        IX = IX - rho * np.asarray(fv, dtype=float)
    if not np.isscalar(IX):
        rV += ein("cqi,cbqi,cq->cb", IX, cache.tab_v, wv)
    r_l[:, sI] += rV[:, ne3:]
    r_g[:, sE] += rV[:, :ne3]

    # volume Jacobian
    A_ll[:, sP, sF] += cache.G_TT
    A_ll[:, sF, sP] -= cache.G_TT
    Atan = svk_tangent_tensor(Fv, lam, mu)
    X = ein("cqijkl,caqkl->caqij", Atan, cache.tab_T)
    A_ll[:, sF, sF] += ein("cbqij,caqij,cq->cba", cache.tab_T, X, wv)
    B = cache.B_gv_T
    A_gl[:, sE, sP] += B[:, :ne3, :]
    A_ll[:, sI, sP] += B[:, ne3:, :]
    Bt = -c_d * B.transpose(0, 2, 1)
    A_lg[:, sP, sE] += Bt[:, :, :ne3]
    A_ll[:, sP, sI] += Bt[:, :, ne3:]
    if dt is not None:
        M = rho * (a0 / dt) * cache.M_vv
        A_gg[:, sE, sE] += M[:, :ne3, :ne3]
        A_gl[:, sE, sI] += M[:, :ne3, ne3:]
        A_lg[:, sI, sE] += M[:, ne3:, :ne3]
        A_ll[:, sI, sI] += M[:, ne3:, ne3:]

    # facet terms, one pass per element side
    for g in cache.groups:
        xut = x[g.uts_dofs]
        xdt = xut if dt is None else dtbar[g.fdofs] + c_d * xut
        for sd in g.sides:
            wf = g.wf
            dn = ein("fb,fbq->fq", xd[sd.cells], sd.vn) \
                - ein("fb,fbq->fq", xdt, sd.sknn)
            Pnn = ein("fb,fbq->fq", xP[sd.cells], sd.Tnn)
            fluxn = Pnn - alpha * dn
            rV_f = -ein("fq,fbq,fq->fb", fluxn, sd.vn, wf)
            rT = ein("fq,fbq,fq->fb", fluxn, sd.sknn, wf)
            rP_f = ein("fq,fbq,fq->fb", dn, sd.Tnn, wf)

            BVP = -sd.G_vT
            BVV = alpha * c_d * sd.G_vv
            BVT = -alpha * c_d * sd.G_vs
            BPV = c_d * sd.G_vT.transpose(0, 2, 1)
            BPT = -c_d * sd.G_Ts
            BTP = sd.G_Ts.transpose(0, 2, 1)
            BTV = -alpha * c_d * sd.G_vs.transpose(0, 2, 1)
            BTT = alpha * c_d * sd.G_ss

            for l in range(3):
                sel = sd.sels[l]
                if not len(sel):
                    continue
                b = sd.cells[sel]
                CT = disc.cols_uts[l]
                r_l[np.ix_(b, RP)] += rP_f[sel]
                r_l[np.ix_(b, RI)] += rV_f[sel][:, ne3:]
                r_g[np.ix_(b, CE)] += rV_f[sel][:, :ne3]
                r_g[np.ix_(b, CT)] += rT[sel]

                def put(A, R, C, Bk):
                    A[b[:, None, None], R[None, :, None], C[None, None, :]] \
                        += Bk[sel]
                put(A_gl, CE, RP, BVP[:, :ne3, :])
                put(A_ll, RI, RP, BVP[:, ne3:, :])
                put(A_gg, CE, CE, BVV[:, :ne3, :ne3])
                put(A_gl, CE, RI, BVV[:, :ne3, ne3:])
                put(A_lg, RI, CE, BVV[:, ne3:, :ne3])
                put(A_ll, RI, RI, BVV[:, ne3:, ne3:])
                put(A_gg, CE, CT, BVT[:, :ne3, :])
                put(A_lg, RI, CT, BVT[:, ne3:, :])
                put(A_lg, RP, CE, BPV[:, :, :ne3])
                put(A_ll, RP, RI, BPV[:, :, ne3:])
                put(A_lg, RP, CT, BPT)
                put(A_gl, CT, RP, BTP)
                put(A_gg, CT, CE, BTV[:, :, :ne3])
                put(A_gl, CT, RI, BTV[:, :, ne3:])
                put(A_gg, CT, CT, BTT)

    batch = ElemBatch(disc.ldofs, gdofs, A_ll, A_lg, A_gl, A_gg, r_l, r_g)
    sys.batches.append(batch)
    return batch


def displacement_update(disc: SolidDiscrete, x: np.ndarray, hist: SolidHistory,
                        dt: float, bdf=(1.5, -2.0, 0.5)):
    """(d, dtil) coefficients implied by the BDF relation at state x."""
    a0, a1, a2 = bdf
    d = (dt * x[disc.layout.slc("us")] - a1 * hist.d1) / a0
    dtil = (dt * x[disc.layout.slc("uts")] - a1 * hist.dt1) / a0
    if hist.d2 is not None:
        d -= a2 * hist.d2 / a0
        dtil -= a2 * hist.dt2 / a0
    return d, dtil


def solid_energy_terms(disc: SolidDiscrete, cache: SolidCache, x: np.ndarray,
                       d: np.ndarray, dtil: np.ndarray):
    """(kinetic, strain, facet penalty) parts of the discrete solid energy.

    kinetic = rho_s/2 (u, u); strain = (Psi(F), 1); penalty = alpha/2 times
    the sum over element sides of |nrm(d - dtil)|^2. d and dtil are the
    displacement coefficients matching the velocity state in x.
    """
    rho, alpha = disc.params.rho, disc.params.alpha
    lay, dmu = disc.layout, disc.dms["us"]
    xu = x[lay.slc("us")][dmu.cell_dofs]
    xF = x[lay.slc("F")][disc.dms["F"].cell_dofs]
    u = ein("cb,cbqi->cqi", xu, cache.tab_v)
    Fv = ein("cb,cbqij->cqij", xF, cache.tab_T)
    psi, _ = svk_stress(Fv, disc.params.lam, disc.params.mu)
    kin = 0.5 * rho * ein("cqi,cqi,cq->", u, u, cache.wv)
    pot = ein("cq,cq->", psi, cache.wv)
    fac = 0.0
    for g in cache.groups:
        xdt = dtil[g.fdofs]
        for sd in g.sides:
            dn = ein("fb,fbq->fq", d[dmu.cell_dofs[sd.cells]], sd.vn) \
                - ein("fb,fbq->fq", xdt, sd.sknn)
            fac += 0.5 * alpha * ein("fq,fq,fq->", dn, dn, g.wf)
    return float(kin), float(pot), float(fac)


def elastic_energy(disc: SolidDiscrete, cache: SolidCache, x: np.ndarray,
                   d: np.ndarray, dtil: np.ndarray) -> float:
    """Total discrete energy: kinetic + strain + normal-jump penalty."""
    return sum(solid_energy_terms(disc, cache, x, d, dtil))
