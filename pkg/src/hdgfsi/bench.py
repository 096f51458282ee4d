"""Benchmark scenarios: configuration, problem assembly, outputs.

A scenario is a flat `key = value` config file.  Presets fill in the two
standard parameter sets (fsi2/fsi3); explicit keys override presets.  The
fluid-structure problem built from a config is the channel-with-bar
geometry from bench_mesh, a ramped parabolic inflow, no-slip walls and
cylinder, natural outflow, and the bar clamped where it meets the circle.

Outputs: one CSV row of observables per step (17 significant digits, so
reruns can be compared bitwise), plus legacy-VTK ASCII snapshots of the
deformed fields every `snapshot_every` steps.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import bench_mesh, mesh as meshmod
from .fluid import FluidBC, FluidDiscrete, FluidParams
from .interface import InterfaceCoupler
from .mesh_motion import MeshMotion, ale_data
from .solid import SolidDiscrete, SolidParams
from .spaces import eval_volume
from .stepping import FsiDriver, StepReport, FsiState, boundary_traction_force
from .system import FieldLayout, NewtonConfig

SCENARIOS = ("fsi2", "fsi3", "manufactured-fluid", "manufactured-solid",
             "custom")


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    scenario: str
    mesh: str = "bench:0"       # "bench:<refine>" or a mesh file path
    k: int = 3
    dt: float = 0.02
    t_end: float = 15.0
    newton_tol: float = 1e-8
    newton_maxit: int = 20
    convection: str = "implicit"
    rho_f: float = 1e3
    mu_f: float = 1.0
    rho_s: float = 1e4
    lam_s: float = 2e6
    mu_s: float = 0.5e6
    ubar: float = 1.0
    outdir: str = "out"
    snapshot_every: int = 10


# scenario presets; "custom" inherits the dataclass defaults untouched
_PRESETS: dict[str, dict] = {
    "fsi2": dict(rho_s=1e4, lam_s=2e6, mu_s=0.5e6, rho_f=1e3, mu_f=1.0,
                 ubar=1.0, dt=0.02, t_end=15.0),
    "fsi3": dict(rho_s=1e3, lam_s=8e6, mu_s=2e6, rho_f=1e3, mu_f=1.0,
                 ubar=2.0, dt=0.01, t_end=7.0),
    "manufactured-fluid": {},
    "manufactured-solid": {},
    "custom": {},
}

_FIELDS = {f.name: f.type for f in dataclasses.fields(BenchConfig)}


def _parse_value(key: str, raw: str, lineno: int):
    typ = _FIELDS[key]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad {typ} for {key!r}: {raw!r}") \
            from None


def load_config(path: str) -> BenchConfig:
    pairs: dict[str, object] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}: expected key = value, "
                                  f"got {body!r}")
            key, raw = (s.strip() for s in body.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in pairs:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            pairs[key] = _parse_value(key, raw, lineno)
    if "scenario" not in pairs:
        raise ConfigError("missing required key: scenario")
    scenario = str(pairs.pop("scenario"))
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; "
                          f"choose from {', '.join(SCENARIOS)}")
    cfg = BenchConfig(scenario=scenario)
    for key, val in _PRESETS[scenario].items():
        setattr(cfg, key, val)
    for key, val in pairs.items():
        setattr(cfg, key, val)
    if cfg.convection not in ("implicit", "extrapolated", "none"):
        raise ConfigError(f"bad convection mode {cfg.convection!r}")
    if cfg.k < 1:
        raise ConfigError(f"bad polynomial degree k={cfg.k}")
    if cfg.dt <= 0 or cfg.t_end <= 0:
        raise ConfigError("dt and t_end must be positive")
    return cfg


def save_config(cfg: BenchConfig, path: str) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(BenchConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


def inflow_profile(ubar: float, t: float):
    """Ramped parabolic inflow; full profile from t = 2 on."""
    ramp = (1.0 - np.cos(np.pi * t / 2.0)) / 2.0 if t < 2.0 else 1.0
    coef = ramp * 1.5 * ubar / (bench_mesh.H / 2.0) ** 2

    def g(p, coef=coef):
        ux = coef * p[..., 1] * (bench_mesh.H - p[..., 1])
        return np.stack([ux, np.zeros_like(ux)], -1)

    return g


@dataclass
class BenchProblem:
    cfg: BenchConfig
    ftri: meshmod.Triangulation
    stri: meshmod.Triangulation
    layout: FieldLayout
    fdisc: FluidDiscrete
    sdisc: SolidDiscrete
    coup: InterfaceCoupler
    mm: MeshMotion
    drv: FsiDriver
    obstacle: np.ndarray        # fluid facets of S: cylinder plus interface
    a_mask: np.ndarray          # interface trace nodes sitting at A(0)


def _meshes(cfg: BenchConfig):
    spec = cfg.mesh
    if spec.startswith("bench:"):
        refine = int(spec.split(":", 1)[1])
        return bench_mesh.fluid_mesh(refine, degree=3), \
            bench_mesh.solid_mesh(refine)
    ftri = meshmod.read_mesh(spec)
    n_int = len(ftri.facets_by_tag("interface"))
    refine = 0
    while 32 * 2**refine < n_int:
        refine += 1
    if 32 * 2**refine != n_int:
        raise ConfigError(f"mesh {spec!r}: interface facet count {n_int} "
                          "matches no refinement of the bar partition")
    return ftri, bench_mesh.solid_mesh(refine)


def build_problem(cfg: BenchConfig) -> BenchProblem:
    ftri, stri = _meshes(cfg)
    lo = FieldLayout()
    fd = FluidDiscrete(ftri, cfg.k, FluidParams(cfg.rho_f, cfg.mu_f),
                       layout=lo)
    sd = SolidDiscrete(stri, cfg.k, SolidParams(cfg.rho_s, cfg.lam_s,
                                                cfg.mu_s), layout=lo)
    coup = InterfaceCoupler(fd, sd, bench_mesh.bench_pairing(ftri, stri))
    mm = MeshMotion(ftri, cfg.k)

    def bc_at(t, ubar=cfg.ubar):
        return FluidBC(velocity={"inflow": inflow_profile(ubar, t),
                                 "walls": None, "cylinder": None},
                       outflow=("outflow",),
                       coupled=("interface",))

    drv = FsiDriver(fd, sd, coup, mm, bc_at, stri.facets_by_tag("clamp"),
                    convection=cfg.convection,
                    newton=NewtonConfig(tol=cfg.newton_tol,
                                        maxit=cfg.newton_maxit))
    obstacle = np.concatenate([ftri.facets_by_tag("cylinder"),
                               ftri.facets_by_tag("interface")])
    a_mask = np.linalg.norm(drv.mm_base - bench_mesh.POINT_A,
                            axis=-1) <= 1e-8
    if not np.any(a_mask):
        raise ValueError("control point A is not an interface node")
    return BenchProblem(cfg, ftri, stri, lo, fd, sd, coup, mm, drv,
                        obstacle, a_mask)


@dataclass
class Observables:
    t: float
    ax: float
    ay: float
    drag: float
    lift: float
    newton_iters: int
    min_jac: float
    kin_energy: float
    elastic_energy: float


CSV_HEADER = "t,ax,ay,drag,lift,newton_iters,min_jac,kin_energy," \
             "elastic_energy"


def compute_observables(prob: BenchProblem, st: FsiState,
                        rep: StepReport) -> Observables:
    g = prob.coup.displacement_trace(st.d, st.dtil, prob.drv.mm_params)
    a_disp = g[prob.a_mask].mean(axis=0)
    force = boundary_traction_force(prob.fdisc, rep.fcache, st.x,
                                    prob.obstacle)
    f_kin, s_kin, strain, penalty = prob.drv.energies(st, rep.fcache)
    return Observables(t=st.t, ax=float(a_disp[0]), ay=float(a_disp[1]),
                       drag=float(force[0]), lift=float(force[1]),
                       newton_iters=rep.iterations, min_jac=rep.min_jac,
                       kin_energy=f_kin + s_kin,
                       elastic_energy=strain + penalty)


def csv_row(o: Observables) -> str:
    vals = [o.t, o.ax, o.ay, o.drag, o.lift]
    tail = [o.min_jac, o.kin_energy, o.elastic_energy]
    return ",".join([format(v, ".17g") for v in vals]
                    + [str(o.newton_iters)]
                    + [format(v, ".17g") for v in tail])


def _lattice(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Degree-k lattice of the reference triangle and its sub-triangles."""
    pts, idx = [], {}
    for j in range(k + 1):
        for i in range(k + 1 - j):
            idx[(i, j)] = len(pts)
            pts.append((i / k, j / k))
    tris = []
    for j in range(k):
        for i in range(k - j):
            tris.append((idx[(i, j)], idx[(i + 1, j)], idx[(i, j + 1)]))
            if i + j < k - 1:
                tris.append((idx[(i + 1, j)], idx[(i + 1, j + 1)],
                             idx[(i, j + 1)]))
    return np.array(pts), np.array(tris, dtype=np.int64)


def write_fields(prob: BenchProblem, st: FsiState, path: str) -> None:
    """Deformed-configuration snapshot, fluid and solid as one grid.

    Each cell carries its own copy of the degree-k lattice points (fields
    are element-wise polynomials, so no averaging across cells), deformed
    by the ALE map on the fluid side and by the displacement on the solid
    side.  Region marker: 0 fluid, 1 solid.
    """
    k = prob.cfg.k
    lat, sub = _lattice(k)
    lo = prob.layout

    ale = ale_data(prob.mm, st.ale.phi)
    fgeom = meshmod.cell_geometry(prob.ftri, lat, ale.coeffs, ale.degree)
    fgeom0 = meshmod.cell_geometry(prob.ftri, lat)
    fd = prob.fdisc
    u = eval_volume(fd.spaces["u"], fd.dms["u"], st.x[lo.slc("u")], fgeom).val
    p = eval_volume(fd.spaces["p"], fd.dms["p"], st.x[lo.slc("p")], fgeom).val

    sd = prob.sdisc
    sgeom = meshmod.cell_geometry(prob.stri, lat)
    dval = eval_volume(sd.spaces["us"], sd.dms["us"], st.d, sgeom).val
    usval = eval_volume(sd.spaces["us"], sd.dms["us"], st.x[lo.slc("us")],
                        sgeom).val

    fx = fgeom.x.reshape(-1, 2)
    fdisp = (fgeom.x - fgeom0.x).reshape(-1, 2)
    sx = (sgeom.x + dval).reshape(-1, 2)
    npt = len(lat)
    nf, ns = prob.ftri.nc, prob.stri.nc

    points = np.vstack([fx, sx])
    vel = np.vstack([u.reshape(-1, 2), usval.reshape(-1, 2)])
    pres = np.concatenate([p.reshape(-1), np.zeros(ns * npt)])
    disp = np.vstack([fdisp, dval.reshape(-1, 2)])
    cells = np.vstack([(sub[None, :, :] + npt * np.arange(nf)[:, None, None])
                       .reshape(-1, 3),
                       (sub[None, :, :] + npt * np.arange(ns)[:, None, None]
                        + nf * npt).reshape(-1, 3)])
    region = np.concatenate([np.zeros(nf * len(sub), dtype=int),
                             np.ones(ns * len(sub), dtype=int)])

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("coupled fields on the deformed configuration\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(points)} double\n")
        for x, y in points:
            fh.write(f"{x:.12g} {y:.12g} 0\n")
        fh.write(f"CELLS {len(cells)} {4 * len(cells)}\n")
        for a, b, c in cells:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("5\n" * len(cells))
        fh.write(f"POINT_DATA {len(points)}\n")
        fh.write("VECTORS velocity double\n")
        for x, y in vel:
            fh.write(f"{x:.12g} {y:.12g} 0\n")
        fh.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        for v in pres:
            fh.write(f"{v:.12g}\n")
        fh.write("VECTORS displacement double\n")
        for x, y in disp:
            fh.write(f"{x:.12g} {y:.12g} 0\n")
        fh.write(f"CELL_DATA {len(cells)}\n")
        fh.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
        for r in region:
            fh.write(f"{r}\n")


def run_benchmark(cfg: BenchConfig, observer=None) -> str:
    """Time-march the scenario; returns the CSV path."""
    os.makedirs(cfg.outdir, exist_ok=True)
    prob = build_problem(cfg)
    save_config(cfg, os.path.join(cfg.outdir, "config.cfg"))
    csv_path = os.path.join(cfg.outdir, f"{cfg.scenario}.csv")
    nsteps = int(round(cfg.t_end / cfg.dt))
    st = prob.drv.initial_state()
    with open(csv_path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for n in range(nsteps):
            st, rep = prob.drv.step(st, cfg.dt)
            obs = compute_observables(prob, st, rep)
            fh.write(csv_row(obs) + "\n")
            fh.flush()
            if cfg.snapshot_every > 0 and (n + 1) % cfg.snapshot_every == 0:
                write_fields(prob, st, os.path.join(
                    cfg.outdir, f"fields_{n + 1:05d}.vtk"))
            if observer is not None:
                observer(st, rep, obs)
    return csv_path
