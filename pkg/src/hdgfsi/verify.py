"""Machine-checked invariants of the discretization, runnable on demand.

Every check recomputes its expected value through an independent route
(quadrature of a closed-form identity, finite differences, a second solver
path, a combinatorial count) and reports the measured deviation next to the
bound it must stay under. `run_all` returns the full list of records; the
CLI prints them as a table and exits nonzero if any record fails.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import mesh as meshmod
from .bench_mesh import (POINT_A, bar_partition, exact_fluid_area,
                         fluid_mesh, solid_mesh)
from .fluid import (FluidBC, FluidCache, FluidDiscrete, FluidParams,
                    ale_from_maps, assemble_fluid, divergence_report,
                    static_ale, stream_velocity)
from .interface import InterfaceCoupler, assemble_interface, build_pairing
from .solid import (SolidCache, SolidDiscrete, SolidHistory, SolidParams,
                    assemble_solid, initial_state, svk_stress)
from .spaces import (Space, SpaceKind, build_dofmap, eval_volume,
                     facet_support_dofs)
from .system import (ElemBatch, FieldLayout, NewtonConfig, condense_and_solve,
                     dense_jacobian, monolithic_solve, newton_solve)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""


def format_results(results) -> str:
    lines = []
    for r in results:
        mark = "pass" if r.passed else "FAIL"
        line = f"[{mark}] {r.name:44s} {r.value:10.3e} <= {r.bound:.1e}"
        if r.detail:
            line += f"  ({r.detail})"
        lines.append(line)
    return "\n".join(lines)


# ----------------------------------------------------------------- fixtures

def _warp(X):
    """Smooth warp of the unit square, identity on the boundary."""
    x, y = X[..., 0], X[..., 1]
    b = 0.07 * np.sin(np.pi * x) * np.sin(np.pi * y)
    return np.stack([x + b * (1 - 0.5 * y), y - b * (1 - 0.5 * x)], -1)


def _swirl(X):
    x, y = X[..., 0], X[..., 1]
    return np.stack([0.3 * y * y + 0.1 * x, -0.4 * x + 0.2 * x * y], -1)


def _lid_bc():
    lid = lambda X: np.stack([np.sin(np.pi * X[..., 0]) ** 2,
                              0.0 * X[..., 0]], -1)
    return FluidBC(velocity={"left": None, "right": None, "bottom": None,
                             "top": lid})


def _solve_cavity(tri, ale, k, dt, convection, seed=0):
    rng = np.random.default_rng(seed)
    disc = FluidDiscrete(tri, k, FluidParams(rho=1.0, mu=0.05))
    cache = FluidCache(disc, ale)
    fixed = disc.fixed_mask(_lid_bc())
    fixed[disc.pressure_pin()] = True
    dofs, vals, gn = cache.boundary_data(_lid_bc())
    n = disc.layout.ndofs
    x0 = np.zeros(n)
    x0[dofs] = vals
    hist = (rng.standard_normal(n) * 0.1, rng.standard_normal(n) * 0.1)

    def asm(x):
        s = disc.layout.new_system(fixed)
        assemble_fluid(disc, cache, x, s, dt=dt, hist=hist,
                       convection=convection, gn=gn)
        return s

    res = newton_solve(asm, x0, NewtonConfig(tol=1e-10))
    if not res.converged:
        raise RuntimeError("cavity solve did not converge")
    return disc, cache, res.x


def _geometry_configs():
    """Affine/curved meshes at rest and under a moving map, all four cases."""
    affine = meshmod.unit_square(3)
    curved = meshmod.raise_degree(meshmod.unit_square(3), 3)
    warped = dataclasses.replace(
        curved, geom_coeffs=_warp(curved.geom_coeffs))
    yield "static affine", affine, static_ale(affine), None, "none"
    yield "static curved", warped, static_ale(warped), None, "none"
    yield ("moving affine", affine, ale_from_maps(affine, 1, _warp, _swirl),
           0.05, "implicit")
    yield ("moving curved", curved, ale_from_maps(curved, 3, _warp, _swirl),
           0.05, "implicit")


def _facet_fields(disc, cache, x):
    """Per facet-group/side tuples (velocity trace, tangential jump)."""
    out = []
    for g in cache.groups:
        utv = np.einsum("fb,fbqi->fqi", x[g.ut_dofs], g.sk_t)
        for sd in g.sides:
            u_tr = np.einsum(
                "fb,fbqi->fqi",
                x[disc.layout.slc("u")][disc.dms["u"].cell_dofs[sd.cells]],
                sd.tab_u)
            d = u_tr - utv
            d = d - np.einsum("fqi,fqi->fq", d, sd.n)[..., None] * sd.n
            out.append((g, sd, u_tr, d))
    return out


def _coupled_pair(n=2, k=2):
    """Unit-square fluid over a clamped elastic strip, joined along y=0."""
    ftri = meshmod.rectangle(0, 0, 1, 1, n, n,
                             tags=("left", "right", "interface", "top"))
    stri = meshmod.rectangle(0, -0.4, 1, 0, n, max(1, n // 2),
                             tags=("sleft", "sright", "sbottom",
                                   "sinterface"))
    lo = FieldLayout()
    fd = FluidDiscrete(ftri, k, FluidParams(1.0, 0.7), layout=lo)
    sd = SolidDiscrete(stri, k, SolidParams(2.0, 50.0, 30.0), layout=lo)
    pairing = build_pairing(ftri, stri, ftri.facets_by_tag("interface"),
                            stri.facets_by_tag("sinterface"))
    coup = InterfaceCoupler(fd, sd, pairing)
    fc = FluidCache(fd, ale_from_maps(ftri, 3, _warp, _swirl))
    return lo, fd, sd, coup, fc


# ------------------------------------------------------------------- checks

def check_divergence():
    """Cellwise divergence and normal jumps of solved cavity flows.

    Exact solenoidality is a structural property of the velocity space, so
    the measured values must sit at solver precision relative to |u|_inf
    on every geometry, not merely converge with h.
    """
    out = []
    for name, tri, ale, dt, conv in _geometry_configs():
        disc, cache, x = _solve_cavity(tri, ale, k=3, dt=dt, convection=conv)
        md, mj = divergence_report(disc, cache, x)
        umax = np.max(np.abs(
            eval_volume(disc.spaces["u"], disc.dms["u"],
                        x[disc.layout.slc("u")], cache.geom).val))
        rel = max(md, mj) / max(umax, 1e-12)
        out.append(CheckResult(f"divergence-free ({name})", rel <= 1e-9,
                               rel, 1e-9))
    return out


def check_energy_identities(nstates=20, seed=5):
    """Quadratic forms of the assembled operators against quadrature.

    Viscous rows contracted with the state must equal 2 mu |eps|^2 plus the
    tangential penalty; convective rows on solenoidal states with vanishing
    boundary traces reduce to the mesh-dilation term plus the upwind facet
    term; the interface block with trial = test collapses to the tangential
    penalty on the moved interface.
    """
    rng = np.random.default_rng(seed)
    out = []

    tri = meshmod.raise_degree(meshmod.unit_square(2), 2)
    disc = FluidDiscrete(tri, 3, FluidParams(rho=2.1, mu=0.37, alpha=1.9))
    cache = FluidCache(disc, ale_from_maps(tri, 2, _warp, _swirl))
    mu, alpha = disc.params.mu, disc.params.alpha
    worst = 0.0
    for _ in range(nstates):
        x = rng.standard_normal(disc.layout.ndofs)
        s = disc.layout.new_system()
        assemble_fluid(disc, cache, x, s, convection="none")
        lhs = x @ s.residual()
        eps = np.einsum("cb,cbqij->cqij",
                        x[disc.layout.slc("eps")][disc.dms["eps"].cell_dofs],
                        cache.tab_e)
        rhs = 2 * mu * np.einsum("cqij,cqij,cq->", eps, eps, cache.wv)
        for g, sd, u_tr, d in _facet_fields(disc, cache, x):
            rhs += alpha * np.einsum("fqi,fqi,fq->", d, d, g.wf)
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    out.append(CheckResult("energy identity (viscous + penalty)",
                           worst <= 1e-10, worst, 1e-10))

    tri = meshmod.unit_square(3)
    k = 3
    disc = FluidDiscrete(tri, k, FluidParams(rho=2.1, mu=0.37))
    cache = FluidCache(disc, ale_from_maps(tri, 1, lambda X: X, _swirl))
    rho = disc.params.rho
    psp = Space(SpaceKind.SCALAR_H1, k + 1, tri)
    pdm = build_dofmap(psp)
    bpsi = facet_support_dofs(pdm, tri.boundary_facets())
    but = (disc.layout.off("ut")
           + disc.dms["ut"].facet_dofs[tri.boundary_facets()].ravel())
    worst = 0.0
    for _ in range(nstates):
        psi = rng.standard_normal(pdm.ndofs)
        psi[bpsi] = 0.0
        x = rng.standard_normal(disc.layout.ndofs)
        x[disc.layout.slc("u")] = stream_velocity(disc, psi)
        x[but] = 0.0
        s = disc.layout.new_system()
        assemble_fluid(disc, cache, x, s, convection="implicit",
                       include_a=False)
        lhs = x @ s.residual()
        u = np.einsum("cb,cbqi->cqi",
                      x[disc.layout.slc("u")][disc.dms["u"].cell_dofs],
                      cache.tab_u)
        rhs = 0.5 * rho * np.einsum("cq,cqi,cqi,cq->",
                                    cache.om_div, u, u, cache.wv)
        for g, sd, u_tr, d in _facet_fields(disc, cache, x):
            sn = np.abs(np.einsum("fqi,fqi->fq", u_tr - g.om, sd.n))
            rhs += 0.5 * rho * np.einsum("fq,fqi,fqi,fq->", sn, d, d, g.wf)
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    out.append(CheckResult("energy identity (convective, solenoidal)",
                           worst <= 1e-10, worst, 1e-10))

    # same operator with generic boundary traces (u.n and ut free) and the
    # facets left of x = 0.5 marked material: those facets must exchange no
    # convective power at all, the rest contribute their boundary terms
    bfac = tri.boundary_facets()
    mid = tri.vertices[tri.facet_vertices[bfac]].mean(axis=1)
    mat = bfac[mid[:, 0] < 0.5]
    worst = 0.0
    for _ in range(nstates):
        psi = rng.standard_normal(pdm.ndofs)
        x = rng.standard_normal(disc.layout.ndofs)
        x[disc.layout.slc("u")] = stream_velocity(disc, psi)
        s = disc.layout.new_system()
        assemble_fluid(disc, cache, x, s, convection="implicit",
                       include_a=False, material_facets=mat)
        lhs = x @ s.residual()
        u = np.einsum("cb,cbqi->cqi",
                      x[disc.layout.slc("u")][disc.dms["u"].cell_dofs],
                      cache.tab_u)
        rhs = 0.5 * rho * np.einsum("cq,cqi,cqi,cq->",
                                    cache.om_div, u, u, cache.wv)
        for g, sd, u_tr, d in _facet_fields(disc, cache, x):
            chi = rho * np.einsum("fqi,fqi->fq", u_tr - g.om, sd.n)
            keep = (~np.isin(g.fg.facets, mat)).astype(float)[:, None] \
                if g.boundary else 1.0
            rhs += 0.5 * np.einsum("fq,fqi,fqi,fq->",
                                   keep * np.abs(chi), d, d, g.wf)
            if g.boundary:
                un = np.einsum("fqi,fqi->fq", u_tr, sd.n)
                utv = u_tr - d - un[..., None] * sd.n
                rhs += 0.5 * np.einsum("fq,fq,fq->", keep * chi,
                                       un ** 2 - np.einsum(
                                           "fqi,fqi->fq", utv, utv), g.wf)
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    out.append(CheckResult("energy identity (convective, material facets)",
                           worst <= 1e-10, worst, 1e-10))

    lo, fd, sd, coup, fc = _coupled_pair()
    x0 = rng.standard_normal(lo.ndofs)
    gd = np.hstack([fd.gdofs, coup.extra_gdofs])
    nl, ng, nc = fd.nl, gd.shape[1], fd.tri.nc
    batch = ElemBatch(fd.ldofs, gd, np.zeros((nc, nl, nl)),
                      np.zeros((nc, nl, ng)), np.zeros((nc, ng, nl)),
                      np.zeros((nc, ng, ng)), np.zeros((nc, nl)),
                      np.zeros((nc, ng)))
    sys = lo.new_system(np.zeros(lo.ndofs, bool))
    sys.batches.append(batch)
    assemble_interface(coup, fc, x0, batch)
    K = dense_jacobian(sys)
    worst = 0.0
    for _ in range(nstates):
        y = rng.standard_normal(lo.ndofs)
        pen = coup.penalty_energy(fc, y)
        worst = max(worst, abs(y @ K @ y - pen) / abs(pen))
    out.append(CheckResult("energy identity (interface penalty)",
                           worst <= 1e-10, worst, 1e-10))
    return out


def check_material_gradient(seed=2):
    """First Piola-Kirchhoff stress against central differences of Psi."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        F = np.eye(2) + 0.4 * rng.standard_normal((2, 2))
        lam, mu = 10.0 ** rng.uniform(-1, 2, 2)
        _, P = svk_stress(F, lam, mu)
        h = 1e-6
        scale = max(1.0, np.max(np.abs(P)))
        for i in range(2):
            for j in range(2):
                Fp, Fm = F.copy(), F.copy()
                Fp[i, j] += h
                Fm[i, j] -= h
                pp, _ = svk_stress(Fp, lam, mu)
                pm, _ = svk_stress(Fm, lam, mu)
                worst = max(worst, abs((pp - pm) / (2 * h) - P[i, j]) / scale)
    return [CheckResult("stress = dPsi/dF (finite differences)",
                        worst <= 1e-7, worst, 1e-7)]


def check_coupled_jacobian(seed=7, nprobe=8):
    """Assembled coupled Jacobian against directional finite differences.

    Fluid + interface + solid rows at a random transient state, the same
    wiring the time stepper uses; probes J v for random directions v.
    """
    rng = np.random.default_rng(seed)
    lo, fd, sd, coup, fc = _coupled_pair()
    sc = SolidCache(sd)
    n = lo.ndofs
    x0 = rng.standard_normal(n) * 0.3
    fhist = (rng.standard_normal(n) * 0.2, rng.standard_normal(n) * 0.2)
    shist = SolidHistory(u1=rng.standard_normal(n) * 0.2,
                         d1=rng.standard_normal(sd.dms["us"].ndofs) * 0.05,
                         dt1=rng.standard_normal(sd.dms["uts"].ndofs) * 0.05,
                         u2=None, d2=None, dt2=None)
    dt = 0.05

    def asm(x):
        s = lo.new_system()
        fb = assemble_fluid(fd, fc, x, s, dt=dt, hist=fhist,
                            convection="implicit",
                            extra_gdofs=coup.extra_gdofs,
                            material_facets=coup.pairing.ffacets)
        assemble_interface(coup, fc, x, fb)
        assemble_solid(sd, sc, x, s, dt=dt, hist=shist)
        return s

    s0 = asm(x0)
    J = dense_jacobian(s0)
    r0 = s0.residual()
    h = 1e-6
    worst = 0.0
    for _ in range(nprobe):
        v = rng.standard_normal(n)
        v /= np.max(np.abs(v))
        fdiff = (asm(x0 + h * v).residual()
                 - asm(x0 - h * v).residual()) / (2 * h)
        ref = J @ v
        scale = max(1.0, np.max(np.abs(ref)), np.max(np.abs(r0)))
        worst = max(worst, np.max(np.abs(fdiff - ref)) / scale)
    return [CheckResult("coupled Jacobian vs finite differences",
                        worst <= 1e-6, worst, 1e-6)]


def check_condensation():
    """Static condensation against the monolithic solve of the same system."""
    out = []

    tri = meshmod.unit_square(2)
    disc = FluidDiscrete(tri, 2, FluidParams(rho=1.0, mu=0.3))
    cache = FluidCache(disc, static_ale(tri))
    bc = _lid_bc()
    fixed = disc.fixed_mask(bc)
    fixed[disc.pressure_pin()] = True
    dofs, vals, gn = cache.boundary_data(bc)
    x = np.zeros(disc.layout.ndofs)
    x[dofs] = vals
    s = disc.layout.new_system(fixed)
    assemble_fluid(disc, cache, x, s, convection="none", gn=gn)
    dc, dm = condense_and_solve(s), monolithic_solve(s)
    rel = np.max(np.abs(dc - dm)) / max(np.max(np.abs(dm)), 1.0)
    out.append(CheckResult("condensed = monolithic (Stokes)", rel <= 1e-10,
                           rel, 1e-10))

    stri = meshmod.unit_square(2)
    sd = SolidDiscrete(stri, 2, SolidParams(rho=1.0, lam=50.0, mu=20.0))
    sc = SolidCache(sd)
    fixed = sd.clamp_mask(stri.facets_by_tag("bottom"))
    s = sd.layout.new_system(fixed)
    assemble_solid(sd, sc, initial_state(sd), s,
                   force=lambda p: np.broadcast_to([0.0, -1.0], p.shape))
    dc, dm = condense_and_solve(s), monolithic_solve(s)
    rel = np.max(np.abs(dc - dm)) / max(np.max(np.abs(dm)), 1.0)
    out.append(CheckResult("condensed = monolithic (elastic)", rel <= 1e-10,
                           rel, 1e-10))
    return out


def check_dof_accounting(include_bench=True):
    """Globally coupled unknowns against the combinatorial count.

    After condensation each domain keeps two skeleton fields with k+1
    moments per facet and two components, so the global system must hold
    exactly 2 (k+1) nfacets unknowns per domain, whatever the mesh.
    """
    cases = [("unit square n=2, k=2", meshmod.unit_square(2), None, 2),
             ("unit square n=3, k=3", meshmod.unit_square(3), None, 3)]
    if include_bench:
        cases.append(("benchmark meshes, k=3", fluid_mesh(0, degree=3),
                      solid_mesh(0), 3))
    out = []
    for name, ftri, stri, k in cases:
        lo = FieldLayout()
        FluidDiscrete(ftri, k, FluidParams(1.0, 1.0), layout=lo)
        expected = 2 * (k + 1) * ftri.nf
        if stri is not None:
            SolidDiscrete(stri, k, SolidParams(1.0, 1.0, 1.0), layout=lo)
            expected += 2 * (k + 1) * stri.nf
        ng = int(np.sum(~lo.local_mask()))
        detail = f"{ng} global dofs"
        if stri is not None:
            detail += " (495-cell reference mesh has 6188)"
        out.append(CheckResult(f"dof count ({name})", ng == expected,
                               float(ng - expected), 0.0, detail))
    return out


def check_geometry():
    """Benchmark mesh audit: curved area versus the closed-form value."""
    tri = fluid_mesh(0, degree=3)
    area = np.sum(meshmod.cell_areas(tri))
    exact = exact_fluid_area()
    rel = abs(area - exact) / exact

    stri = solid_mesh(0)
    sarea = np.sum(meshmod.cell_areas(stri))
    xs = bar_partition(0)
    sexact = (xs[-1] - xs[0]) * 0.02
    rel = max(rel, abs(sarea - sexact) / sexact)

    ok = (rel <= 1e-4 and abs(POINT_A[0] - xs[-1]) < 1e-12
          and abs(POINT_A[1] - 0.2) < 1e-12)
    return [CheckResult("benchmark geometry area audit", ok, rel, 1e-4,
                        f"{tri.nc} fluid cells, {stri.nc} solid cells")]


def run_all(include_bench=True):
    out = []
    out += check_divergence()
    out += check_energy_identities()
    out += check_material_gradient()
    out += check_coupled_jacobian()
    out += check_condensation()
    out += check_dof_accounting(include_bench=include_bench)
    if include_bench:
        out += check_geometry()
    return out
