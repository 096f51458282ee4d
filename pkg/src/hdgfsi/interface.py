"""Fluid-structure coupling on matched interface facets.

The interface terms tie the fluid skeleton unknowns (sig, ut) and the fluid
strain rate to the structure velocity trace

  ubar = tng0(us) + nrm0(uts)

assembled from the structure's edge modes and normal skeleton modes in the
reference frame (n0 the reference solid normal). With n the deformed
fluid-side normal and the integrals over the moved interface, the coupling
adds, per facet pair,

  taut:        - <ubar . n, taut>                     (mortar constraint)
  xi rows:     + <sig, xibar . n>                     (mortar load)
  vt/xi rows:  - 2 mu <eps n, tng(vt - xibar)>        (Nitsche consistency)
  G row:       + 2 mu <G n, tng(ut - ubar)>           (Nitsche symmetry)
  all traces:  + alpha <tng(ut - ubar), tng(vt - xibar)>

With trial = test the mortar pair is exactly skew and the Nitsche pair
cancels, leaving alpha ||tng(ut - ubar)||^2 on the moved interface. The
composition with the deformation map never inverts it: matched facets share
the reference parameterization, so structure fields are evaluated at the
aligned reference parameter while measure and normal come from the deformed
fluid facet.

Every block touches only the fluid element adjacent to the facet, so the
whole coupling lives inside that element's batch, widened by the structure's
global interface dofs (see assemble_fluid's extra_gdofs hook).
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
from .fluid import FluidCache, FluidDiscrete
from .solid import SolidDiscrete
from .spaces import facet_support_dofs, skeleton_tables, trace_tables
from .system import ElemBatch


@dataclass
class InterfacePairing:
    """Matched interface facets: fluid facet i pairs with solid facet i.

    flip marks pairs whose facet parameterizations run in opposite
    directions; aligned quadrature points must coincide in the reference
    configuration.
    """

    ffacets: np.ndarray
    sfacets: np.ndarray
    flip: np.ndarray


def build_pairing(ftri: meshmod.Triangulation, stri: meshmod.Triangulation,
                  ffacets, sfacets) -> InterfacePairing:
    """Match coincident facets by midpoint, orientation by first vertex.

    Raises if the sets do not form a bijection of geometrically identical
    facets.
    """
    ffacets = np.asarray(ffacets, dtype=np.int64)
    sfacets = np.asarray(sfacets, dtype=np.int64)
    if len(ffacets) != len(sfacets):
        raise ValueError(f"facet count mismatch: {len(ffacets)} fluid"
                         f" vs {len(sfacets)} solid")
    fx = ftri.vertices[ftri.facet_vertices[ffacets]]    # (n, 2, 2)
    sx = stri.vertices[stri.facet_vertices[sfacets]]
    scale = max(np.ptp(fx), 1.0)
    from scipy.spatial import cKDTree
    tree = cKDTree(sx.mean(axis=1))
    dist, j = tree.query(fx.mean(axis=1))
    if np.max(dist) > 1e-8 * scale:
        bad = ffacets[int(np.argmax(dist))]
        raise ValueError(f"unmatched interface facet {bad}")
    if len(np.unique(j)) != len(j):
        raise ValueError("interface pairing is not a bijection")
    sfacets = sfacets[j]
    sx = sx[j]
    same = np.linalg.norm(fx[:, 0] - sx[:, 0], axis=1) <= 1e-8 * scale
    rev = np.linalg.norm(fx[:, 0] - sx[:, 1], axis=1) <= 1e-8 * scale
    if not np.all(same | rev):
        raise ValueError("paired facets do not share endpoints")
    return InterfacePairing(ffacets, sfacets, flip=rev)


def _tng_tab(tab: np.ndarray, n: np.ndarray) -> np.ndarray:
    an = ein("fbqi,fqi->fbq", tab, n)
    return tab - an[..., None] * n[:, None, :, :]


_SENTINEL = [100000]


def _param_rule(params: np.ndarray) -> refelem.QuadratureRule:
    # unique order key so cached basis tables never collide with real rules
    _SENTINEL[0] += 1
    return refelem.QuadratureRule(1, _SENTINEL[0], np.asarray(params)[:, None],
                                  np.zeros(len(params)))


class InterfaceCoupler:
    """Static interface tables plus per-step assembly into fluid batches.

    The solid-side tables live on the reference configuration and are built
    once: T_U holds the tangential trace of the solid velocity edge modes,
    T_W the normal skeleton modes, both reordered to the fluid facet
    parameterization. Fluid-side geometry is taken from the current
    FluidCache each step.
    """

    def __init__(self, fdisc: FluidDiscrete, sdisc: SolidDiscrete,
                 pairing: InterfacePairing):
        if fdisc.k != sdisc.k:
            raise ValueError("fluid and solid degrees must match")
        if fdisc.layout is not sdisc.layout:
            raise ValueError("coupling requires a shared field layout")
        self.fdisc, self.sdisc, self.pairing = fdisc, sdisc, pairing
        k = fdisc.k
        ne1 = k + 1
        ftri, stri = fdisc.tri, sdisc.tri
        fr = refelem.quad_rule(1, fdisc.fac_order)
        self.rule = fr
        npair = len(pairing.ffacets)

        sfg = meshmod.facet_geometry(stri, fr, pairing.sfacets, both=False)
        n0 = sfg.normal
        sdm = sdisc.dms["us"]
        cells = sfg.sides[0].cells
        slots = stri.facet_local[pairing.sfacets, 0]
        tab = trace_tables(sdisc.spaces["us"], sfg, 0).val \
            * sdm.cell_signs[cells][..., None, None]
        tng = _tng_tab(tab, n0)
        T_U = np.empty((npair, ne1, len(fr.weights), 2))
        for l in range(3):
            sel = np.flatnonzero(slots == l)
            T_U[sel] = tng[sel, l * ne1:(l + 1) * ne1]
            tng[sel, l * ne1:(l + 1) * ne1] = 0.0
        if np.max(np.abs(tng)) > 1e-12 * (1.0 + np.max(np.abs(T_U))):
            raise ValueError("tangential trace leaks outside facet modes")
        T_W = skeleton_tables(sdisc.spaces["uts"], sfg).val
        sx = sfg.x
        flip = pairing.flip
        T_U[flip] = T_U[flip, :, ::-1]
        T_W[flip] = T_W[flip, :, ::-1]
        sx = np.where(flip[:, None, None], sx[:, ::-1], sx)
        self.T_U, self.T_W = T_U, T_W

        ffg0 = meshmod.facet_geometry(ftri, fr, pairing.ffacets, both=False)
        scale = max(float(np.max(np.abs(ffg0.x))), 1.0)
        mis = float(np.max(np.linalg.norm(ffg0.x - sx, axis=-1)))
        if mis > 1e-8 * scale:
            raise ValueError(f"interface quadrature points mismatch by {mis:.2e}")

        lo = fdisc.layout
        self.U_dofs = lo.off("us") + facet_support_dofs(
            sdm, pairing.sfacets).reshape(npair, ne1)
        self.W_dofs = lo.off("uts") + sdisc.dms["uts"].facet_dofs[pairing.sfacets]

        # fluid-side bookkeeping: adjacent cell, local slot, position in the
        # boundary facet group, and the widened global-column map
        self.fcells = ftri.facet_cells[pairing.ffacets, 0]
        self.fslots = ftri.facet_local[pairing.ffacets, 0]
        bf = ftri.boundary_facets()
        pos = np.full(ftri.nf, -1, dtype=np.int64)
        pos[bf] = np.arange(len(bf))
        self.bg_pos = pos[pairing.ffacets]
        if np.any(self.bg_pos < 0):
            raise ValueError("interface facets must lie on the fluid boundary")
        self.sels = [np.flatnonzero(self.fslots == l) for l in range(3)]

        pad = lo.off("sig")
        self.extra_gdofs = np.full((ftri.nc, 6 * ne1), pad, dtype=np.int64)
        for i in range(npair):
            c, l = self.fcells[i], self.fslots[i]
            j0 = 2 * ne1 * l
            self.extra_gdofs[c, j0:j0 + ne1] = self.U_dofs[i]
            self.extra_gdofs[c, j0 + ne1:j0 + 2 * ne1] = self.W_dofs[i]
        self.cols_U = [fdisc.ng + 2 * ne1 * l + np.arange(ne1) for l in range(3)]
        self.cols_W = [c + ne1 for c in self.cols_U]

    def _facet_data(self, fcache: FluidCache):
        bg = next(g for g in fcache.groups if g.boundary)
        i = self.bg_pos
        sd = bg.sides[0]
        return SimpleNamespace(
            n=bg.fg.normal[i], wf=bg.wf[i], x=bg.fg.x[i],
            sk_s=bg.sk_s[i], sk_t=bg.sk_t[i],
            tab_e=sd.tab_e[i], tab_u=sd.tab_u[i],
            sig_dofs=bg.sig_dofs[i], ut_dofs=bg.ut_dofs[i])

    def velocity_gap(self, fcache: FluidCache, x: np.ndarray):
        """(normal, tangential) L2 gaps between fluid and structure traces.

        normal: |(u - ubar).n|^2 integrated over the moved interface, the
        mortar constraint residual; tangential: |tng(ut - ubar)|^2, the
        quantity damped by the penalty.
        """
        fd = self.fdisc
        g = self._facet_data(fcache)
        u = ein("fb,fbqi->fqi",
                      x[fd.layout.slc("u")][fd.dms["u"].cell_dofs[self.fcells]],
                      g.tab_u)
        ubar = ein("fb,fbqi->fqi", x[self.U_dofs], self.T_U) \
            + ein("fb,fbqi->fqi", x[self.W_dofs], self.T_W)
        ut = ein("fb,fbqi->fqi", x[g.ut_dofs], g.sk_t)
        gapn = ein("fqi,fqi->fq", u - ubar, g.n)
        t = ut - ubar
        tt = t - ein("fqi,fqi->fq", t, g.n)[..., None] * g.n
        return (float(ein("fq,fq,fq->", gapn, gapn, g.wf)),
                float(ein("fqi,fqi,fq->", tt, tt, g.wf)))

    def penalty_energy(self, fcache: FluidCache, x: np.ndarray) -> float:
        """alpha^f | tng(ut - ubar) |^2 over the moved interface."""
        return self.fdisc.params.alpha * self.velocity_gap(fcache, x)[1]

    def displacement_trace(self, d: np.ndarray, dtil: np.ndarray,
                           params: np.ndarray) -> np.ndarray:
        """Structure interface displacement at fluid facet parameters.

        Evaluates dbar = tng0(d) + nrm0(dtil) on each paired solid facet at
        the given fluid-side parameters, returning (npair, len(params), 2).
        Used as boundary data for the mesh motion solve.
        """
        sdisc = self.sdisc
        sdm = sdisc.dms["us"]
        params = np.asarray(params, dtype=float)
        out = np.empty((len(self.pairing.sfacets), len(params), 2))
        # flipped pairs walk the solid facet at the mirrored parameter
        for sel, p in ((np.flatnonzero(~self.pairing.flip), params),
                       (np.flatnonzero(self.pairing.flip), 1.0 - params)):
            if not len(sel):
                continue
            sfg = meshmod.facet_geometry(sdisc.tri, _param_rule(p),
                                         self.pairing.sfacets[sel], both=False)
            n0 = sfg.normal
            cells = sfg.sides[0].cells
            tab = trace_tables(sdisc.spaces["us"], sfg, 0).val \
                * sdm.cell_signs[cells][..., None, None]
            dv = ein("fb,fbqi->fqi", d[sdm.cell_dofs[cells]], tab)
            dv -= ein("fqi,fqi->fq", dv, n0)[..., None] * n0
            sk = skeleton_tables(sdisc.spaces["uts"], sfg).val
            fd = sdisc.dms["uts"].facet_dofs[self.pairing.sfacets[sel]]
            out[sel] = dv + ein("fb,fbqi->fqi", dtil[fd], sk)
        return out


def assemble_interface(coup: InterfaceCoupler, fcache: FluidCache,
                       x: np.ndarray, batch: ElemBatch) -> None:
    """Add the coupling terms at state x into the widened fluid batch.

    All blocks are linear in the unknowns (the interface geometry is frozen
    within the step), so the residual contribution is just B x. The batch
    must have been assembled with extra_gdofs=coup.extra_gdofs.
    """
    fd = coup.fdisc
    mu, alpha = fd.params.mu, fd.params.alpha
    g = coup._facet_data(fcache)
    n, wf = g.n, g.wf
    E = fd.rows_e
    dme = fd.dms["eps"]

    tngT = _tng_tab(g.sk_t, n)
    tngU = _tng_tab(coup.T_U, n)
    tngW = _tng_tab(coup.T_W, n)
    Gn = ein("fbqij,fqj->fbqi", g.tab_e, n)
    Un = ein("fbqi,fqi->fbq", coup.T_U, n)
    Wn = ein("fbqi,fqi->fbq", coup.T_W, n)

    def dot(a, b):
        return ein(f"fbq{'i' if a.ndim == 4 else ''},"
                         f"faq{'i' if b.ndim == 4 else ''},fq->fba",
                         a, b, wf)

    B = {}
    B["SU"], B["SW"] = -dot(g.sk_s, Un), -dot(g.sk_s, Wn)
    B["US"], B["WS"] = dot(Un, g.sk_s), dot(Wn, g.sk_s)
    B["TE"] = -2.0 * mu * dot(tngT, Gn)
    B["UE"] = 2.0 * mu * dot(tngU, Gn)
    B["WE"] = 2.0 * mu * dot(tngW, Gn)
    B["ET"] = 2.0 * mu * dot(Gn, tngT)
    B["EU"] = -2.0 * mu * dot(Gn, tngU)
    B["EW"] = -2.0 * mu * dot(Gn, tngW)
    B["TT"] = alpha * dot(tngT, tngT)
    B["TU"], B["TW"] = -alpha * dot(tngT, tngU), -alpha * dot(tngT, tngW)
    B["UT"], B["WT"] = -alpha * dot(tngU, tngT), -alpha * dot(tngW, tngT)
    B["UU"], B["UW"] = alpha * dot(tngU, tngU), alpha * dot(tngU, tngW)
    B["WU"], B["WW"] = alpha * dot(tngW, tngU), alpha * dot(tngW, tngW)

    # the mortar pair must stay exactly skew or the coupled energy identity
    # breaks; cheap to verify on the element blocks every assembly
    tol = 1e-12 * (1.0 + max(np.max(np.abs(B["SU"])), np.max(np.abs(B["SW"]))))
    assert np.max(np.abs(B["US"] + B["SU"].transpose(0, 2, 1))) <= tol
    assert np.max(np.abs(B["WS"] + B["SW"].transpose(0, 2, 1))) <= tol

    vals = {"E": x[fd.layout.slc("eps")][dme.cell_dofs[coup.fcells]],
            "S": x[g.sig_dofs], "T": x[g.ut_dofs],
            "U": x[coup.U_dofs], "W": x[coup.W_dofs]}
    rows = {name: sum(ein("fba,fa->fb", B[name + c], vals[c])
                      for c in "ESTUW" if name + c in B)
            for name in "ESTUW"}

    for l in range(3):
        sel = coup.sels[l]
        if not len(sel):
            continue
        b = coup.fcells[sel]
        C = {"E": E, "S": fd.cols_sig[l], "T": fd.cols_ut[l],
             "U": coup.cols_U[l], "W": coup.cols_W[l]}
        batch.r_l[np.ix_(b, E)] += rows["E"][sel]
        for name in "STUW":
            batch.r_g[np.ix_(b, C[name])] += rows[name][sel]

        def put(A, R, Cc, Bk):
            A[b[:, None, None], R[None, :, None], Cc[None, None, :]] += Bk[sel]

        for key, Bk in B.items():
            r, c = key
            tgt = batch.A_lg if r == "E" else (
                batch.A_gl if c == "E" else batch.A_gg)
            put(tgt, C[r], C[c], Bk)
