"""Steady manufactured problems for order-of-convergence studies.

Both fields vanish on the unit-square boundary, so the discrete problems
run with homogeneous strong data and the measured error is purely
interior.  Forcing terms are derived symbolically and enter the
assemblers as accelerations (the momentum residuals carry the density).
"""

from __future__ import annotations

import numpy as np
import sympy as sp

from . import mesh as meshmod
from .fluid import (FluidBC, FluidCache, FluidDiscrete, FluidParams,
                    assemble_fluid, static_ale)
from .solid import (SolidCache, SolidDiscrete, SolidParams, assemble_solid,
                    initial_state)
from .spaces import eval_volume
from .system import NewtonConfig, newton_solve

_X, _Y = sp.symbols("x y")


def _vec(fns):
    def f(p):
        px, py = p[..., 0], p[..., 1]
        return np.stack([np.broadcast_to(fn(px, py), px.shape)
                         for fn in fns], -1)
    return f


def _lam(expr):
    return sp.lambdify((_X, _Y), expr, "numpy")


def fluid_fields(rho: float, mu: float):
    """(u, p, f): a divergence-free swirl and the steady NS forcing."""
    psi = sp.sin(sp.pi * _X) ** 2 * sp.sin(sp.pi * _Y) ** 2 / sp.pi
    u = sp.Matrix([sp.diff(psi, _Y), -sp.diff(psi, _X)])
    p = sp.cos(sp.pi * _X) * sp.cos(sp.pi * _Y)
    gradu = u.jacobian([_X, _Y])
    eps = (gradu + gradu.T) / 2
    diveps = sp.Matrix([sum(sp.diff(eps[i, j], (_X, _Y)[j])
                            for j in range(2)) for i in range(2)])
    gradp = sp.Matrix([sp.diff(p, _X), sp.diff(p, _Y)])
    f = gradu * u - (2 * mu * diveps - gradp) / rho
    return _vec([_lam(u[0]), _lam(u[1])]), _lam(p), \
        _vec([_lam(f[0]), _lam(f[1])])


def solid_fields(lam: float, mu: float, rho: float,
                 amp=(0.06, -0.04)):
    """(d, f): a clamped displacement bubble and its SVK body force."""
    s = sp.sin(sp.pi * _X) * sp.sin(sp.pi * _Y)
    d = sp.Matrix([amp[0] * s, amp[1] * sp.sin(sp.pi * _X) * sp.sin(2 * sp.pi * _Y)])
    F = sp.eye(2) + d.jacobian([_X, _Y])
    E = (F.T * F - sp.eye(2)) / 2
    S = lam * sp.trace(E) * sp.eye(2) + 2 * mu * E
    P = F * S
    divP = sp.Matrix([sum(sp.diff(P[i, j], (_X, _Y)[j]) for j in range(2))
                      for i in range(2)])
    f = -divP / rho
    return _vec([_lam(d[0]), _lam(d[1])]), _vec([_lam(f[0]), _lam(f[1])])


def solve_fluid(n: int, k: int, rho=1.0, mu=1.0) -> float:
    """Velocity L2 error of the steady NS solve on unit_square(n)."""
    u_ex, _, f = fluid_fields(rho, mu)
    tri = meshmod.unit_square(n)
    disc = FluidDiscrete(tri, k, FluidParams(rho=rho, mu=mu))
    cache = FluidCache(disc, static_ale(tri))
    bc = FluidBC(velocity={t: None for t in ("left", "right", "bottom",
                                             "top")})
    fixed = disc.fixed_mask(bc)
    fixed[disc.pressure_pin()] = True
    dofs, vals, gn = cache.boundary_data(bc)
    x0 = np.zeros(disc.layout.ndofs)
    x0[dofs] = vals

    def asm(x):
        s = disc.layout.new_system(fixed)
        assemble_fluid(disc, cache, x, s, convection="implicit",
                       force=f, gn=gn)
        return s

    res = newton_solve(asm, x0, NewtonConfig(tol=1e-11, maxit=25))
    if not res.converged:
        raise RuntimeError("steady fluid solve stalled")
    uh = eval_volume(disc.spaces["u"], disc.dms["u"],
                     res.x[disc.layout.slc("u")], cache.geom).val
    du = uh - u_ex(cache.geom.x)
    return float(np.sqrt(np.einsum("cqi,cqi,cq->", du, du, cache.wv)))


def solve_solid(n: int, k: int, rho=1.0, lam=3.0, mu=2.0) -> float:
    """Displacement L2 error of the static SVK solve on unit_square(n)."""
    d_ex, f = solid_fields(lam, mu, rho)
    tri = meshmod.unit_square(n)
    disc = SolidDiscrete(tri, k, SolidParams(rho=rho, lam=lam, mu=mu))
    cache = SolidCache(disc)
    fixed = disc.clamp_mask(tri.boundary_facets())
    x0 = initial_state(disc)

    def asm(x):
        s = disc.layout.new_system(fixed)
        assemble_solid(disc, cache, x, s, force=f)
        return s

    res = newton_solve(asm, x0, NewtonConfig(tol=1e-11, maxit=30))
    if not res.converged:
        raise RuntimeError("static solid solve stalled")
    dh = eval_volume(disc.spaces["us"], disc.dms["us"],
                     res.x[disc.layout.slc("us")], cache.geom).val
    dd = dh - d_ex(cache.geom.x)
    return float(np.sqrt(np.einsum("cqi,cqi,cq->", dd, dd, cache.wv)))


def convergence_study(which: str, k: int = 2, ns=(4, 8, 16)):
    """Errors on a refinement sequence plus observed orders between levels."""
    solver = {"manufactured-fluid": solve_fluid,
              "manufactured-solid": solve_solid}[which]
    errs = [solver(n, k) for n in ns]
    orders = [float(np.log2(errs[i] / errs[i + 1])
                    / np.log2(ns[i + 1] / ns[i]))
              for i in range(len(errs) - 1)]
    return list(map(float, errs)), orders
