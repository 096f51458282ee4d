"""ALE divergence-free HDG assembly for incompressible Navier-Stokes.

Unknowns per fluid mesh: pressure p (discontinuous scalars, degree k-1),
strain rate eps (symmetric tensors, degree k), velocity u (Piola-mapped
vectors, degree k), and on the skeleton the normal-normal stress sig and
the tangential velocity ut (both degree k).  p, eps, u are element-local
and condense away; sig, ut stay global.

Element residual rows, with (v, G, q, taut, vt) the test functions and
n the outward element normal:

  v:    rho (Dt u, v) + rho (div w)(u, v) - rho (u (x) c, grad v)
        + 2 mu (eps, grad v) - (p, div v)
        - <2 mu tng(eps n) - alpha tng(u - ut), tng v> - <sig, v.n>
        + <chi tng(uup), tng v> + <chi (u.n), v.n> - rho (f, v)
  G:    2 mu (eps - grad u, G) + 2 mu <tng(u - ut), G n>
  q:    (div u, q)
  taut: <u.n - g.n, taut>
  vt:   <2 mu tng(eps n) - alpha tng(u - ut) - chi tng(uup), vt>

where w is the mesh velocity, Dt the BDF stencil on coefficients plus the
(grad w - (div w) I) u correction from the time-dependent Piola map, c the
convective velocity (u - w implicit, extrapolated history minus w
otherwise), chi = rho c.n, and uup the upwinded tangential trace (u where
chi > 0, ut elsewhere).  The q and taut rows reduce to exact
reference-element integrals under the Piola map, so converged velocities
are elementwise divergence-free with machine-zero normal jumps on affine,
curved, and deformed meshes alike.
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
from .spaces import (Space, SpaceKind, build_dofmap, eval_trace, eval_volume,
                     skeleton_tables, trace_tables, volume_tables)
from .system import BlockSystem, ElemBatch, FieldLayout


@dataclass
class FluidParams:
    """Density, viscosity and the tangential facet stabilization weight."""

    rho: float
    mu: float
    alpha: float | None = None

    def __post_init__(self):
        if self.rho <= 0.0 or self.mu <= 0.0:
            raise ValueError("rho and mu must be positive")
        if self.alpha is None:
            self.alpha = 2.0 * self.mu
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


@dataclass
class FluidBC:
    """Boundary protocol by tag name.

    velocity: tag -> g(x) -> (..., 2), or None for a no-slip wall. The
    tangential part of g is imposed strongly on ut dofs; the normal part
    enters the sig row as data. outflow: stress-free tags, where sig is
    pinned to zero and u.n is left free. coupled: tags handled by an
    interface assembler, where sig and ut stay unknowns.
    """

    velocity: dict
    outflow: tuple = ()
    coupled: tuple = ()


@dataclass
class AleData:
    """Deformed fluid-mesh configuration plus mesh velocity.

    coeffs: cell-local lattice coefficients of the deformed geometry map,
    in the layout of Triangulation.geom_coeffs at `degree`. omega: flat
    VectorH1(degree) coefficients of the mesh velocity, None for zero.
    The velocity is tied to the same composite-map view of the deformed
    configuration, i.e. its nodal values live at the deformed nodes.
    """

    coeffs: np.ndarray
    degree: int
    omega: np.ndarray | None = None


def static_ale(tri: meshmod.Triangulation) -> AleData:
    return AleData(tri.geom_coeffs, tri.geom_degree, None)


def ale_from_maps(tri: meshmod.Triangulation, degree: int, phi, omega=None) -> AleData:
    """Prescribed analytic deformation phi and mesh velocity omega.

    Both callables must be vectorized (..., 2) -> (..., 2). omega is
    sampled at the deformed lattice nodes.
    """
    lat = refelem.lattice(degree)
    X0 = meshmod.cell_geometry(tri, lat).x
    coeffs = phi(X0)
    om = None
    if omega is not None:
        dm = build_dofmap(Space(SpaceKind.VECTOR_H1, degree, tri))
        om = np.zeros(dm.ndofs)
        om[dm.cell_dofs] = omega(coeffs).reshape(len(coeffs), -1)
    return AleData(coeffs, degree, om)


class FluidDiscrete:
    """Spaces, dofmaps and flat-vector layout of one fluid discretization."""

    FIELD_NAMES = ("p", "eps", "u", "sig", "ut")

    def __init__(self, tri: meshmod.Triangulation, k: int, params: FluidParams,
                 layout: FieldLayout | None = None,
                 vol_order: int | None = None, fac_order: int | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.tri, self.k, self.params = tri, k, params
        self.layout = layout if layout is not None else FieldLayout()
        kinds = {"p": (SpaceKind.SCALAR_L2, k - 1),
                 "eps": (SpaceKind.TENSOR_SYM_L2, k),
                 "u": (SpaceKind.VECTOR_PIOLA, k),
                 "sig": (SpaceKind.SKELETON_SCALAR, k),
                 "ut": (SpaceKind.SKELETON_TANGENTIAL, k)}
        self.spaces = {n: Space(kd, deg, tri) for n, (kd, deg) in kinds.items()}
        self.dms = {n: build_dofmap(s) for n, s in self.spaces.items()}
        for name in self.FIELD_NAMES:
            self.layout.add(name, self.dms[name], local=name in ("p", "eps", "u"))
        self.vol_order = vol_order if vol_order is not None else 3 * k + 2
        self.fac_order = fac_order if fac_order is not None else 3 * k + 2

        npb = self.dms["p"].space.nloc
        nse = self.dms["eps"].space.nloc
        nsu = self.dms["u"].space.nloc
        self.nl = npb + nse + nsu
        self.rows_p = np.arange(npb)
        self.rows_e = npb + np.arange(nse)
        self.rows_u = npb + nse + np.arange(nsu)
        ne1 = k + 1
        self.ng = 6 * ne1
        self.cols_sig = [l * ne1 + np.arange(ne1) for l in range(3)]
        self.cols_ut = [3 * ne1 + l * ne1 + np.arange(ne1) for l in range(3)]

        lo = self.layout
        self.ldofs = np.hstack([lo.off(n) + self.dms[n].cell_dofs
                                for n in ("p", "eps", "u")])
        gd = []
        for n in ("sig", "ut"):
            fd = lo.off(n) + self.dms[n].facet_dofs
            gd.append(fd[tri.cell_facets].reshape(tri.nc, 3 * ne1))
        self.gdofs = np.hstack(gd)

    def state(self, x: np.ndarray) -> SimpleNamespace:
        """Named views of the fluid blocks of a flat vector."""
        return SimpleNamespace(**{n: x[self.layout.slc(n)] for n in self.FIELD_NAMES})

    def fixed_mask(self, bc: FluidBC) -> np.ndarray:
        """Dirichlet mask over the layout: ut on velocity tags, sig on outflow."""
        tri = self.tri
        covered = set()
        mask = np.zeros(self.layout.ndofs, dtype=bool)
        for tag in bc.velocity:
            f = tri.facets_by_tag(tag)
            covered.update(f.tolist())
            mask[self.layout.off("ut") + self.dms["ut"].facet_dofs[f].ravel()] = True
        for tag in bc.outflow:
            f = tri.facets_by_tag(tag)
            covered.update(f.tolist())
            mask[self.layout.off("sig") + self.dms["sig"].facet_dofs[f].ravel()] = True
        for tag in bc.coupled:
            covered.update(tri.facets_by_tag(tag).tolist())
        missing = set(tri.boundary_facets().tolist()) - covered
        if missing:
            raise ValueError(f"boundary facets without bc: {sorted(missing)[:5]} ...")
        return mask

    def pressure_pin(self) -> int:
        """Dof index of one pressure mode, for enclosed-flow gauge fixing."""
        return self.layout.off("p")


class FluidCache:
    """Geometry-dependent quadrature tables for one deformed configuration."""

    def __init__(self, disc: FluidDiscrete, ale: AleData):
        tri = disc.tri
        self.disc, self.ale = disc, ale
        curved = ale.degree > 1

        vr = refelem.quad_rule(2, disc.vol_order)
        geom = meshmod.cell_geometry(tri, vr.points, ale.coeffs, ale.degree,
                                     hessian=curved)
        if np.any(geom.J <= 0.0):
            raise ValueError("deformed geometry is tangled (J <= 0)")
        self.vol_rule, self.geom = vr, geom
        self.wv = vr.weights[None, :] * geom.J
        self.tab_p = volume_tables(disc.spaces["p"], geom).val
        self.tab_e = volume_tables(disc.spaces["eps"], geom).val
        tu = volume_tables(disc.spaces["u"], geom, ("val", "grad", "div"))
        self.tab_u, self.tab_gu, self.tab_du = tu.val, tu.grad, tu.div

        nq = len(vr.weights)
        if ale.omega is None:
            self.om_val = np.zeros((tri.nc, nq, 2))
            self.om_grad = np.zeros((tri.nc, nq, 2, 2))
        else:
            sp = Space(SpaceKind.VECTOR_H1, ale.degree, tri)
            dm = build_dofmap(sp)
            ev = eval_volume(sp, dm, ale.omega, geom, ("val", "grad"))
            self.om_val, self.om_grad = ev.val, ev.grad
        self.om_div = self.om_grad[..., 0, 0] + self.om_grad[..., 1, 1]

        fr = refelem.quad_rule(1, disc.fac_order)
        self.fac_rule = fr
        self.groups = []
        for facets, nsides in ((tri.interior_facets(), 2),
                               (tri.boundary_facets(), 1)):
            if not len(facets):
                continue
            fg = meshmod.facet_geometry(tri, fr, facets, ale.coeffs, ale.degree,
                                        both=nsides == 2)
            g = SimpleNamespace(fg=fg, boundary=nsides == 1,
                                wf=fr.weights[None, :] * fg.jac)
            g.sk_s = skeleton_tables(disc.spaces["sig"], fg).val
            g.sk_t = skeleton_tables(disc.spaces["ut"], fg).val
            g.sig_dofs = disc.layout.off("sig") + disc.dms["sig"].facet_dofs[facets]
            g.ut_dofs = disc.layout.off("ut") + disc.dms["ut"].facet_dofs[facets]
            if ale.omega is None:
                g.om = np.zeros_like(fg.normal)
            else:
                sp = Space(SpaceKind.VECTOR_H1, ale.degree, tri)
                g.om = eval_trace(sp, build_dofmap(sp), ale.omega, fg, 0)
            g.sides = []
            for s in range(nsides):
                cells = fg.sides[s].cells
                slots = tri.facet_local[facets, s]
                g.sides.append(SimpleNamespace(
                    cells=cells,
                    n=fg.normal if s == 0 else -fg.normal,
                    tab_u=trace_tables(disc.spaces["u"], fg, s).val,
                    tab_e=trace_tables(disc.spaces["eps"], fg, s).val,
                    sels=[np.flatnonzero(slots == l) for l in range(3)]))
            self.groups.append(g)

    def boundary_data(self, bc: FluidBC):
        """(fixed dofs, their values, g.n data per boundary facet quad point).

        Wall/inflow values are facet Legendre moments of the tangential data;
        they agree with tng(g) exactly on straight facets whenever g.t is a
        polynomial of degree <= k along the facet.
        """
        disc, tri = self.disc, self.disc.tri
        bg = next((g for g in self.groups if g.boundary), None)
        if bg is None:
            return np.empty(0, np.int64), np.empty(0), None
        facets = bg.fg.facets
        pos = np.full(tri.nf, -1, dtype=np.int64)
        pos[facets] = np.arange(len(facets))
        leg = refelem.basis_on_rule("modal", disc.k, bg.fg.rule).values
        gn = np.zeros(bg.wf.shape)
        dofs, vals = [], []
        for tag, gfun in bc.velocity.items():
            idx = pos[tri.facets_by_tag(tag)]
            dofs.append(bg.ut_dofs[idx].ravel())
            if gfun is None:
                vals.append(np.zeros(idx.size * (disc.k + 1)))
                continue
            gv = np.asarray(gfun(bg.fg.x[idx]), dtype=float)
            gn[idx] = ein("fqi,fqi->fq", gv, bg.fg.normal[idx])
            gT = ein("fqi,fqi->fq", gv, bg.fg.tangent[idx])
            vals.append(ein("bq,fq,q->fb", leg, gT,
                                  bg.fg.rule.weights).ravel())
        for tag in bc.outflow:
            idx = pos[tri.facets_by_tag(tag)]
            dofs.append(bg.sig_dofs[idx].ravel())
            vals.append(np.zeros(idx.size * (disc.k + 1)))
        if dofs:
            return np.concatenate(dofs), np.concatenate(vals), gn
        return np.empty(0, np.int64), np.empty(0), gn


def _tng_tab(tab: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Tangential projection of a (f, b, q, 2) table against (f, q, 2) normals."""
    an = ein("fbqi,fqi->fbq", tab, n)
    return tab - an[..., None] * n[:, None, :, :]


def _tng(v: np.ndarray, n: np.ndarray) -> np.ndarray:
    return v - ein("fqi,fqi->fq", v, n)[..., None] * n


def assemble_fluid(disc: FluidDiscrete, cache: FluidCache, x: np.ndarray,
                   sys: BlockSystem, *, dt: float | None = None,
                   hist: tuple = (None, None), bdf=(1.5, -2.0, 0.5),
                   convection: str = "implicit", include_a: bool = True,
                   force=None, gn: np.ndarray | None = None,
                   extra_gdofs: np.ndarray | None = None,
                   material_facets=None) -> ElemBatch:
    """Add the fluid residual and Jacobian at state x to the block system.

    dt=None drops inertia (steady). hist holds the two previous full state
    vectors (only their u blocks are read). convection: "implicit",
    "extrapolated" (frozen convective velocity 2 u1 - u2 - w, linear in the
    unknowns) or "none" (Stokes). include_a=False drops the viscous/pressure
    operator, leaving convection alone. gn supplies normal boundary data per
    boundary-facet quad point. extra_gdofs widens every element block with
    additional global columns (filled by the interface assembler); their
    entries are left zero here.

    material_facets lists boundary facets that move with a material surface
    (a coupled structure). There the relative normal velocity (u - w).n
    vanishes identically in the time-continuous limit, so no momentum is
    convected across. The upwind facet flux is dropped on those facets and
    the volume term's integration-by-parts shed is returned through the
    completion 1/2 rho ((u_c - w).n)(u . v), making the net convective
    power through each such facet exactly zero for every discrete state.
    Both changes are O((u - w).n), hence consistent. Left alone, the
    mesh-velocity lag behind the mortar-tied trace feeds the momentum
    balance and pumps structural modes the time step does not resolve.

    Returns the element batch so couplers may extend it.
    """
    if convection not in ("implicit", "extrapolated", "none"):
        raise ValueError(convection)
    rho, mu, alpha = disc.params.rho, disc.params.mu, disc.params.alpha
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

    P, E, U = disc.rows_p, disc.rows_e, disc.rows_u
    dmu = disc.dms["u"]
    xp = x[lay.slc("p")][disc.dms["p"].cell_dofs]
    xe = x[lay.slc("eps")][disc.dms["eps"].cell_dofs]
    xu = x[lay.slc("u")][dmu.cell_dofs]
    wv = cache.wv

    p = ein("cb,cbq->cq", xp, cache.tab_p)
    eps = ein("cb,cbqij->cqij", xe, cache.tab_e)
    u = ein("cb,cbqi->cqi", xu, cache.tab_u)
    gu = ein("cb,cbqij->cqij", xu, cache.tab_gu)
    du = ein("cb,cbq->cq", xu, cache.tab_du)

    conv = convection != "none"
    u1 = u2 = None
    if dt is not None or convection == "extrapolated":
        xu1 = hist[0][lay.slc("u")][dmu.cell_dofs] if hist[0] is not None else None
        xu2 = hist[1][lay.slc("u")][dmu.cell_dofs] if hist[1] is not None else None
        u1 = ein("cb,cbqi->cqi", xu1, cache.tab_u) if xu1 is not None else 0.0
        u2 = ein("cb,cbqi->cqi", xu2, cache.tab_u) if xu2 is not None else 0.0

    # volume residual
    Vv = np.zeros_like(u)                 # paired with v values
    Gv = np.zeros_like(gu)                # paired with grad v
    Dv = np.zeros_like(p)                 # paired with div v
    if dt is not None:
        a0, a1, a2 = bdf
        Vv += rho * ((a0 * u + a1 * u1 + a2 * u2) / dt
                     + ein("cqij,cqj->cqi", cache.om_grad, u)
                     - cache.om_div[..., None] * u)
    if conv:
        c_v = (u if convection == "implicit" else 2.0 * u1 - u2) - cache.om_val
        Vv += rho * cache.om_div[..., None] * u
        Gv -= rho * ein("cqi,cqj->cqij", u, c_v)
    if include_a:
        Gv += 2.0 * mu * eps
        Dv -= p
        r_l[:, E] += 2.0 * mu * ein("cqij,cbqij,cq->cb",
                                          eps - gu, cache.tab_e, wv)
        r_l[:, P] += ein("cq,cbq,cq->cb", du, cache.tab_p, wv)
    if force is not None:
        fv = force(cache.geom.x) if callable(force) else force
        Vv -= rho * np.asarray(fv, dtype=float)
    r_l[:, U] += (ein("cqi,cbqi,cq->cb", Vv, cache.tab_u, wv)
                  + ein("cqij,cbqij,cq->cb", Gv, cache.tab_gu, wv)
                  + ein("cq,cbq,cq->cb", Dv, cache.tab_du, wv))

    # volume Jacobian
    ix = np.ix_
    if include_a:
        A_ll[:, ix(E, E)[0], ix(E, E)[1]] += 2.0 * mu * ein(
            "cbqij,caqij,cq->cba", cache.tab_e, cache.tab_e, wv)
        A_ll[:, ix(E, U)[0], ix(E, U)[1]] -= 2.0 * mu * ein(
            "cbqij,caqij,cq->cba", cache.tab_e, cache.tab_gu, wv)
        A_ll[:, ix(P, U)[0], ix(P, U)[1]] += ein(
            "cbq,caq,cq->cba", cache.tab_p, cache.tab_du, wv)
        A_ll[:, ix(U, E)[0], ix(U, E)[1]] += 2.0 * mu * ein(
            "cbqij,caqij,cq->cba", cache.tab_gu, cache.tab_e, wv)
        A_ll[:, ix(U, P)[0], ix(U, P)[1]] -= ein(
            "cbq,caq,cq->cba", cache.tab_du, cache.tab_p, wv)
    Juu = 0.0
    if dt is not None:
        a0 = bdf[0]
        Juu = rho * (a0 / dt) * ein("cbqi,caqi,cq->cba",
                                          cache.tab_u, cache.tab_u, wv)
        Juu += rho * ein("cbqi,cqij,caqj,cq->cba",
                               cache.tab_u, cache.om_grad, cache.tab_u, wv)
        Juu -= rho * ein("cbqi,caqi,cq->cba", cache.tab_u, cache.tab_u,
                               wv * cache.om_div)
    if conv:
        Juu = Juu + rho * ein("cbqi,caqi,cq->cba", cache.tab_u, cache.tab_u,
                                    wv * cache.om_div)
        Juu -= rho * ein("cbqij,caqi,cqj,cq->cba",
                               cache.tab_gu, cache.tab_u, c_v, wv)
        if convection == "implicit":
            Juu -= rho * ein("cbqij,cqi,caqj,cq->cba",
                                   cache.tab_gu, u, cache.tab_u, wv)
    if not np.isscalar(Juu):
        A_ll[:, ix(U, U)[0], ix(U, U)[1]] += Juu

    # facet terms, one pass per element side
    for g in cache.groups:
        facets = g.fg.facets
        live = 1.0
        if conv and material_facets is not None and g.boundary:
            mask = np.isin(facets, np.asarray(material_facets, dtype=np.int64))
            if mask.any():
                live = (~mask).astype(float)[:, None]
        sig = ein("fb,fbq->fq", x[g.sig_dofs], g.sk_s)
        utv = ein("fb,fbqi->fqi", x[g.ut_dofs], g.sk_t)
        for sd in g.sides:
            n, wf = sd.n, g.wf
            xu_s = x[lay.slc("u")][dmu.cell_dofs[sd.cells]]
            xe_s = x[lay.slc("eps")][disc.dms["eps"].cell_dofs[sd.cells]]
            u_tr = ein("fb,fbqi->fqi", xu_s, sd.tab_u)
            eps_tr = ein("fb,fbqij->fqij", xe_s, sd.tab_e)
            tngV = _tng_tab(sd.tab_u, n)
            vn = ein("fbqi,fqi->fbq", sd.tab_u, n)
            Gn = ein("fbqij,fqj->fbqi", sd.tab_e, n)
            un = ein("fqi,fqi->fq", u_tr, n)
            tdiff = _tng(u_tr - utv, n)

            IV = np.zeros_like(u_tr)          # paired with v traces
            IT = np.zeros_like(u_tr)          # paired with vt
            rE = rS = None
            if include_a:
                t_visc = 2.0 * mu * _tng(ein("fqij,fqj->fqi", eps_tr, n), n) \
                    - alpha * tdiff
                IV -= t_visc + sig[..., None] * n
                IT += t_visc
                rE = 2.0 * mu * ein("fqi,fbqi,fq->fb", tdiff, Gn, wf)
                rS = ein("fq,fbq,fq->fb", un, g.sk_s, wf)
            if conv:
                uc_tr = u_tr if convection == "implicit" \
                    else ein("fb,fbqi->fqi",
                                   hist[0][lay.slc("u")][dmu.cell_dofs[sd.cells]] * 2.0
                                   - hist[1][lay.slc("u")][dmu.cell_dofs[sd.cells]],
                                   sd.tab_u)
                chiraw = rho * ein("fqi,fqi->fq", uc_tr - g.om, n)
                chi = live * chiraw
                up = (chi > 0.0).astype(float)
                uup = up[..., None] * _tng(u_tr, n) + (1 - up)[..., None] * utv
                IV += chi[..., None] * uup + (chi * un)[..., None] * n
                IT -= chi[..., None] * uup
                cm = None
                if not np.isscalar(live):
                    # dropping the facet flux is not enough: the volume term
                    # still sheds 1/2 rho ((uc-w).n)|u|^2 through the facet
                    # under integration by parts, so that power is returned
                    cm = (1.0 - live) * chiraw
                    IV += 0.5 * cm[..., None] * u_tr
            rU = ein("fqi,fbqi,fq->fb", IV, sd.tab_u, wf)
            rT = ein("fqi,fbqi,fq->fb", IT, g.sk_t, wf)

            BUE = BUU = BUS = BUT = BEU = BET = BSU = BTE = BTU = BTT = None
            if include_a:
                BUE = -2.0 * mu * ein("fbqi,faqi,fq->fba", tngV, Gn, wf)
                BUU = alpha * ein("fbqi,faqi,fq->fba", tngV, tngV, wf)
                BUS = -ein("fbq,faq,fq->fba", vn, g.sk_s, wf)
                BUT = -alpha * ein("fbqi,faqi,fq->fba", tngV, g.sk_t, wf)
                BEU = 2.0 * mu * ein("fbqi,faqi,fq->fba", Gn, tngV, wf)
                BET = -2.0 * mu * ein("fbqi,faqi,fq->fba", Gn, g.sk_t, wf)
                BSU = ein("fbq,faq,fq->fba", g.sk_s, vn, wf)
                BTE = 2.0 * mu * ein("fbqi,faqi,fq->fba", g.sk_t, Gn, wf)
                BTU = -alpha * ein("fbqi,faqi,fq->fba", g.sk_t, tngV, wf)
                BTT = alpha * ein("fbqi,faqi,fq->fba", g.sk_t, g.sk_t, wf)
            if conv:
                def z(a):
                    return a if a is not None else 0.0
                cup, cdn = wf * chi * up, wf * chi * (1.0 - up)
                BUU = z(BUU) + ein("fbqi,faqi,fq->fba", tngV, tngV, cup) \
                    + ein("fbq,faq,fq->fba", vn, vn, wf * chi)
                BUT = z(BUT) + ein("fbqi,faqi,fq->fba", tngV, g.sk_t, cdn)
                BTU = z(BTU) - ein("fbqi,faqi,fq->fba", g.sk_t, tngV, cup)
                BTT = z(BTT) - ein("fbqi,faqi,fq->fba", g.sk_t, g.sk_t, cdn)
                if convection == "implicit":
                    wfl = wf * live
                    tup = ein("fbqi,fqi->fbq", tngV, uup)
                    tvt = ein("fbqi,fqi->fbq", g.sk_t, uup)
                    BUU += rho * ein("fbq,faq,fq->fba", tup, vn, wfl) \
                        + rho * ein("fbq,faq,fq->fba", vn, vn, wfl * un)
                    BTU = BTU - rho * ein("fbq,faq,fq->fba", tvt, vn, wfl)
                if cm is not None:
                    BUU += 0.5 * ein("fbqi,faqi,fq->fba",
                                     sd.tab_u, sd.tab_u, wf * cm)
                    if convection == "implicit":
                        ub = ein("fbqi,fqi->fbq", sd.tab_u, u_tr)
                        BUU += 0.5 * rho * ein("fbq,faq,fq->fba", ub, vn,
                                               wf * (1.0 - live))

            for l in range(3):
                sel = sd.sels[l]
                if not len(sel):
                    continue
                b = sd.cells[sel]
                CS, CT = disc.cols_sig[l], disc.cols_ut[l]
                r_l[np.ix_(b, U)] += rU[sel]
                if rE is not None:
                    r_l[np.ix_(b, E)] += rE[sel]
                    r_g[np.ix_(b, CS)] += rS[sel]
                r_g[np.ix_(b, CT)] += rT[sel]

                def put(A, R, C, B):
                    if B is not None:
                        A[b[:, None, None], R[None, :, None], C[None, None, :]] \
                            += B[sel]
                put(A_ll, U, E, BUE)
                put(A_ll, U, U, BUU)
                put(A_lg, U, CS, BUS)
                put(A_lg, U, CT, BUT)
                put(A_ll, E, U, BEU)
                put(A_lg, E, CT, BET)
                put(A_gl, CS, U, BSU)
                put(A_gl, CT, E, BTE)
                put(A_gl, CT, U, BTU)
                put(A_gg, CT, CT, BTT)

        if g.boundary and gn is not None and include_a:
            data = -ein("fq,fbq,fq->fb", gn, g.sk_s, g.wf)
            sys.add_residual(g.sig_dofs, data)

    batch = ElemBatch(disc.ldofs, gdofs, A_ll, A_lg, A_gl, A_gg, r_l, r_g)
    sys.batches.append(batch)
    return batch


def divergence_report(disc: FluidDiscrete, cache: FluidCache,
                      x: np.ndarray) -> tuple[float, float]:
    """(max |div u| over volume quad points, max interior normal jump)."""
    xu = x[disc.layout.slc("u")][disc.dms["u"].cell_dofs]
    du = ein("cb,cbq->cq", xu, cache.tab_du)
    maxdiv = float(np.max(np.abs(du))) if du.size else 0.0
    maxjump = 0.0
    for g in cache.groups:
        if g.boundary:
            continue
        tr = [ein("fb,fbqi->fqi",
                        x[disc.layout.slc("u")][disc.dms["u"].cell_dofs[sd.cells]],
                        sd.tab_u) for sd in g.sides]
        jump = ein("fqi,fqi->fq", tr[0] - tr[1], g.fg.normal)
        maxjump = max(maxjump, float(np.max(np.abs(jump))))
    return maxdiv, maxjump


def fluid_energy_terms(disc: FluidDiscrete, cache: FluidCache,
                       x: np.ndarray) -> tuple[float, float, float]:
    """(kinetic, viscous dissipation, stabilized facet dissipation).

    kinetic = rho/2 (u, u); dissipation = 2 mu (eps, eps); facet =
    sum over element sides of ((alpha + rho |(u - w).n|) |tng(u - ut)|^2, 1).
    """
    rho, mu, alpha = disc.params.rho, disc.params.mu, disc.params.alpha
    lay = disc.layout
    xu = x[lay.slc("u")][disc.dms["u"].cell_dofs]
    xe = x[lay.slc("eps")][disc.dms["eps"].cell_dofs]
    u = ein("cb,cbqi->cqi", xu, cache.tab_u)
    eps = ein("cb,cbqij->cqij", xe, cache.tab_e)
    kin = 0.5 * rho * ein("cqi,cqi,cq->", u, u, cache.wv)
    diss = 2.0 * mu * ein("cqij,cqij,cq->", eps, eps, cache.wv)
    fac = 0.0
    for g in cache.groups:
        utv = ein("fb,fbqi->fqi", x[g.ut_dofs], g.sk_t)
        for sd in g.sides:
            u_tr = ein("fb,fbqi->fqi",
                             x[lay.slc("u")][disc.dms["u"].cell_dofs[sd.cells]],
                             sd.tab_u)
            tdiff = _tng(u_tr - utv, sd.n)
            gam = alpha + rho * np.abs(
                ein("fqi,fqi->fq", u_tr - g.om, sd.n))
            fac += ein("fq,fqi,fqi,fq->", gam, tdiff, tdiff, g.wf)
    return float(kin), float(diss), float(fac)


def stream_velocity(disc: FluidDiscrete, psi: np.ndarray) -> np.ndarray:
    """Exactly divergence-free velocity coefficients from a stream function.

    psi holds ScalarH1(k+1) coefficients; the rotated gradient
    (d psi/dy, -d psi/dx) lies in the degree-k Piola space on straight
    meshes and is fitted cellwise, preserving zero divergence and normal
    continuity to solver precision.  Zero boundary values of psi give
    u.n = 0 on the domain boundary.
    """
    tri, k = disc.tri, disc.k
    sp = Space(SpaceKind.SCALAR_H1, k + 1, tri)
    dm = build_dofmap(sp)
    rule = refelem.quad_rule(2, 2 * k + 2)
    geom = meshmod.cell_geometry(tri, rule.points)
    gp = eval_volume(sp, dm, psi, geom, ("grad",)).grad
    target = np.stack([gp[..., 1], -gp[..., 0]], axis=-1)
    tab = volume_tables(disc.spaces["u"], geom).val
    w = rule.weights[None, :] * geom.J
    G = ein("caqi,cbqi,cq->cab", tab, tab, w)
    b = ein("caqi,cqi,cq->ca", tab, target, w)
    sol = np.linalg.solve(G, b[..., None])[..., 0]
    out = np.zeros(disc.dms["u"].ndofs)
    out[disc.dms["u"].cell_dofs] = sol
    return out
