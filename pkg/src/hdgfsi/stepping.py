"""Coupled time integration of the fluid-structure system.

One step advances four pieces in sequence:

  1. extrapolate the interface displacement trace from the stored history
     (2 d1 - d2, or d1 on the startup step) and solve one linearized mesh
     motion problem about the previous map;
  2. form the mesh velocity with the same BDF stencil that advances the
     physics, and freeze the deformed-configuration quadrature data;
  3. solve the coupled fluid / structure / mortar system by Newton with
     static condensation, all unknowns in one flat vector;
  4. recover displacements from the velocity update and rotate histories.

The first step runs backward Euler because only one history level exists;
every later step runs BDF2. Geometry is explicit within the step (the fluid
domain moves with the extrapolated structure displacement), so each Newton
solve works on a fixed mesh and all interface blocks stay linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

from functools import partial
import numpy as np

# BLAS-friendly contraction paths; the 4-operand forms are hot
ein = partial(np.einsum, optimize=True)

from . import mesh_motion as mmod
from .fluid import FluidCache, assemble_fluid
from .interface import assemble_interface
from .mesh_motion import AleState, ale_data, mesh_velocity
from .solid import (SolidCache, SolidHistory, assemble_solid,
                    displacement_update, initial_state as solid_rest,
                    solid_energy_terms)
from .fluid import fluid_energy_terms
from .system import NewtonConfig, newton_solve

BDF1 = (1.0, -1.0, 0.0)
BDF2 = (1.5, -2.0, 0.5)


class NewtonStalledError(RuntimeError):
    """Raised when the coupled Newton loop fails to converge."""


@dataclass
class FsiState:
    """Everything one time level hands to the next.

    x is the full layout vector at level n, xp the one at n-1 (None before
    the first step). d/dtil are the structure displacement coefficients at
    level n, dp/dtilp one level back. ale stores the last three mesh maps.
    """

    t: float
    n: int
    x: np.ndarray
    xp: np.ndarray | None
    d: np.ndarray
    dtil: np.ndarray
    dp: np.ndarray
    dtilp: np.ndarray
    ale: AleState


@dataclass
class StepReport:
    """Per-step diagnostics; fcache is kept so observables can reuse it."""

    t: float
    iterations: int
    residuals: list
    min_jac: float
    gap_normal: float
    gap_tangent: float
    fcache: FluidCache


class FsiDriver:
    """Owns the discretizations and advances one coupled step at a time.

    bc_at(t) must return a FluidBC with time-independent tag sets (only the
    data values may change); the Dirichlet mask is frozen at construction.
    force_f/force_s are accelerations f(x, t) entering the momentum balance
    scaled by the respective density.
    """

    def __init__(self, fdisc, sdisc, coup, mm, bc_at, clamp_facets, *,
                 convection: str = "implicit",
                 newton: NewtonConfig | None = None,
                 force_f=None, force_s=None):
        if sdisc.layout is not fdisc.layout:
            raise ValueError("driver requires one shared field layout")
        self.fdisc, self.sdisc, self.coup, self.mm = fdisc, sdisc, coup, mm
        self.bc_at = bc_at
        self.convection = convection
        self.newton = newton or NewtonConfig(tol=1e-8, maxit=20)
        self.force_f, self.force_s = force_f, force_s
        self.layout = fdisc.layout
        self.scache = SolidCache(sdisc)
        self.fixed = fdisc.fixed_mask(bc_at(0.0)) | sdisc.clamp_mask(clamp_facets)
        if coup is not None:
            dofs, params = mm.facet_node_dofs(coup.pairing.ffacets)
            self.mm_dofs = dofs
            self.mm_params = params
            self.mm_base = mm.x0[dofs]

    def initial_state(self) -> FsiState:
        """Rest state: zero velocities, identity map, F = I."""
        x = solid_rest(self.sdisc)
        nd = self.sdisc.dms["us"].ndofs
        nt = self.sdisc.dms["uts"].ndofs
        z = np.zeros(nd)
        zt = np.zeros(nt)
        return FsiState(0.0, 0, x, None, z, zt, z.copy(), zt.copy(),
                        self.mm.initial_state())

    def _mesh_data(self, st: FsiState):
        """Dirichlet targets for the mesh solve: X0 + extrapolated trace."""
        if self.coup is None:
            return None, None
        if st.n == 0:
            g = self.coup.displacement_trace(st.d, st.dtil, self.mm_params)
        else:
            g = self.coup.displacement_trace(2.0 * st.d - st.dp,
                                             2.0 * st.dtil - st.dtilp,
                                             self.mm_params)
        return self.mm_dofs, self.mm_base + g

    def step(self, st: FsiState, dt: float) -> tuple[FsiState, StepReport]:
        bdf = BDF1 if st.n == 0 else BDF2
        t_new = st.t + dt

        bdofs, bvals = self._mesh_data(st)
        phi = self.mm.solve(st.ale.phi, bdofs, bvals)
        ale = st.ale.advanced(phi)
        om = mesh_velocity(ale, dt, bdf)
        fcache = FluidCache(self.fdisc, ale_data(self.mm, phi, om))

        bc = self.bc_at(t_new)
        dofs, vals, gn = fcache.boundary_data(bc)
        hist = SolidHistory(u1=st.x, d1=st.d, dt1=st.dtil,
                            u2=st.xp, d2=None if st.xp is None else st.dp,
                            dt2=None if st.xp is None else st.dtilp)
        ff = None if self.force_f is None else (
            lambda xx: self.force_f(xx, t_new))
        fs = None if self.force_s is None else (
            lambda xx: self.force_s(xx, t_new))
        extra = None if self.coup is None else self.coup.extra_gdofs

        mfac = None if self.coup is None else self.coup.pairing.ffacets

        def asm(xx):
            sysb = self.layout.new_system(self.fixed)
            fb = assemble_fluid(self.fdisc, fcache, xx, sysb, dt=dt,
                                hist=(st.x, st.xp), bdf=bdf,
                                convection=self.convection, force=ff,
                                gn=gn, extra_gdofs=extra,
                                material_facets=mfac)
            if self.coup is not None:
                assemble_interface(self.coup, fcache, xx, fb)
            assemble_solid(self.sdisc, self.scache, xx, sysb, dt=dt,
                           hist=hist, bdf=bdf, force=fs)
            return sysb

        x0 = st.x.copy()
        x0[dofs] = vals
        res = newton_solve(asm, x0, self.newton)
        if not res.converged:
            raise NewtonStalledError(
                f"newton stalled at t = {t_new:.6g}: residuals {res.residuals}")

        d, dtil = displacement_update(self.sdisc, res.x, hist, dt, bdf)
        new = FsiState(t_new, st.n + 1, res.x, st.x, d, dtil, st.d, st.dtil,
                       ale)
        if self.coup is not None:
            gn2, gt2 = self.coup.velocity_gap(fcache, res.x)
        else:
            gn2 = gt2 = 0.0
        rep = StepReport(t_new, res.iterations, res.residuals,
                         self.mm.jacobian_range(phi)[0],
                         float(np.sqrt(gn2)), float(np.sqrt(gt2)), fcache)
        return new, rep

    def energies(self, st: FsiState, fcache: FluidCache):
        """(fluid kinetic, solid kinetic, elastic strain, solid penalty)."""
        fk, _, _ = fluid_energy_terms(self.fdisc, fcache, st.x)
        sk, se, sp = solid_energy_terms(self.sdisc, self.scache, st.x,
                                        st.d, st.dtil)
        return fk, sk, se, sp


def boundary_traction_force(fdisc, fcache: FluidCache, x: np.ndarray,
                            facets) -> np.ndarray:
    """Force the fluid exerts on a boundary patch, from the numerical flux.

    The transmitted traction is sig n in the normal direction plus
    2 mu tng(eps n) - alpha tng(u - ut) tangentially, with n the outward
    fluid normal. The load on the obstacle flips the normal, hence the
    leading minus sign on the integral.
    """
    mu, alpha = fdisc.params.mu, fdisc.params.alpha
    lay = fdisc.layout
    bg = next(g for g in fcache.groups if g.boundary)
    pos = np.full(fdisc.tri.nf, -1, dtype=np.int64)
    pos[bg.fg.facets] = np.arange(len(bg.fg.facets))
    idx = pos[np.asarray(facets, dtype=np.int64)]
    if np.any(idx < 0):
        raise ValueError("traction facets must lie on the fluid boundary")
    sd = bg.sides[0]
    cells = sd.cells[idx]
    n = sd.n[idx]
    wf = bg.wf[idx]
    sig = ein("fb,fbq->fq", x[bg.sig_dofs[idx]], bg.sk_s[idx])
    ut = ein("fb,fbqi->fqi", x[bg.ut_dofs[idx]], bg.sk_t[idx])
    utr = ein("fb,fbqi->fqi",
                    x[lay.slc("u")][fdisc.dms["u"].cell_dofs[cells]],
                    sd.tab_u[idx])
    etr = ein("fb,fbqij->fqij",
                    x[lay.slc("eps")][fdisc.dms["eps"].cell_dofs[cells]],
                    sd.tab_e[idx])
    en = ein("fqij,fqj->fqi", etr, n)

    def tng(v):
        return v - ein("fqi,fqi->fq", v, n)[..., None] * n

    trac = sig[..., None] * n + 2.0 * mu * tng(en) - alpha * tng(utr - ut)
    return -ein("fqi,fq->i", trac, wf)


def volume_dual_force(fdisc, fcache: FluidCache, x: np.ndarray,
                      w, gradw) -> np.ndarray:
    """Steady-Stokes force on an obstacle via a volume dual function.

    w is a smooth lifting equal to the requested unit direction on the
    obstacle and zero on the remaining boundary; gradw its gradient. Then
    - int(2 mu eps : grad w - p div w) reproduces the force component along
    that direction up to the consistency error of the discrete solution,
    without touching the numerical flux. Returns one float per call.
    """
    mu = fdisc.params.mu
    lay = fdisc.layout
    xp = x[lay.slc("p")][fdisc.dms["p"].cell_dofs]
    xe = x[lay.slc("eps")][fdisc.dms["eps"].cell_dofs]
    p = ein("cb,cbq->cq", xp, fcache.tab_p)
    eps = ein("cb,cbqij->cqij", xe, fcache.tab_e)
    gw = np.asarray(gradw(fcache.geom.x), dtype=float)
    divw = gw[..., 0, 0] + gw[..., 1, 1]
    val = (2.0 * mu * ein("cqij,cqij,cq->", eps, gw, fcache.wv)
           - ein("cq,cq,cq->", p, divw, fcache.wv))
    return -val


def run_transient(driver: FsiDriver, dt: float, nsteps: int,
                  state: FsiState | None = None, observer=None):
    """March nsteps from the given (or rest) state; returns the final state.

    observer(state, report), when given, runs after every accepted step.
    """
    st = state if state is not None else driver.initial_state()
    for _ in range(nsteps):
        st, rep = driver.step(st, dt)
        if observer is not None:
            observer(st, rep)
    return st
