"""Benchmark geometry: channel with a cylinder and an attached elastic bar.

The fluid domain is a 2.5 x 0.41 channel minus a rigid disk at (0.2, 0.2)
of radius 0.05 and minus the bar [0.2, 0.6] x [0.19, 0.21].  The wetted
obstacle boundary splits into the cylinder arc (tag "cylinder") and the
bar's top/bottom/right faces (tag "interface").  The bar meets the circle
where y = 0.19 / 0.21 cut it, at x_t = 0.2 + sqrt(0.05^2 - 0.01^2); the
elastic solid is meshed on [x_t, 0.6] x [0.19, 0.21] with its left face
clamped, so fluid and solid share the interface partition edge for edge.

Point generation is deterministic: boundary polylines first, then
structured layers hugging the obstacle, then a graded background governed
by a distance-to-obstacle size field, relaxed by a few fixed-boundary
smoothing sweeps before the final Delaunay pass.  No randomness anywhere,
so meshes are reproducible across runs.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from . import mesh as meshmod
from .interface import InterfacePairing, build_pairing

L, H = 2.5, 0.41
CENTER = np.array([0.2, 0.2])
RADIUS = 0.05
BAR_YB, BAR_YT = 0.19, 0.21
BAR_XE = 0.6
# half-angle subtended by the bar where it enters the cylinder
_TH0 = np.arcsin(0.01 / RADIUS)
BAR_XT = CENTER[0] + RADIUS * np.cos(_TH0)

POINT_A = np.array([BAR_XE, 0.2])

# offsets of the structured point layers wrapped around the obstacle
_LAYER = np.array([0.016, 0.036, 0.061])
_N_ARC = 26
_N_BAR = 15


def exact_fluid_area() -> float:
    """Channel area minus disk and bar, counting their lens overlap once."""
    def seg(t):
        return 0.5 * (t * np.sqrt(RADIUS**2 - t**2)
                      + RADIUS**2 * np.arcsin(t / RADIUS))
    overlap = 0.4 * 0.02 - 2 * seg(0.01)
    return L * H - np.pi * RADIUS**2 - overlap


def _snap(p: np.ndarray) -> np.ndarray:
    # 1e-9 grid so points shared between the two meshes compare equal
    return np.round(np.asarray(p, dtype=float) * 1e9) / 1e9


def bar_partition(refine: int = 0) -> np.ndarray:
    n = _N_BAR * 2**refine
    return _snap(BAR_XT + (BAR_XE - BAR_XT) * np.arange(n + 1) / n)


def _hole_dist(p: np.ndarray) -> np.ndarray:
    """Distance to the obstacle (disk plus bar strip); negative inside."""
    p = np.atleast_2d(p)
    dd = np.linalg.norm(p - CENTER, axis=-1) - RADIUS
    dx = np.maximum.reduce([0.2 - p[:, 0], p[:, 0] - BAR_XE,
                            np.zeros(len(p))])
    dy = np.maximum(np.abs(p[:, 1] - 0.2) - 0.01, 0.0)
    return np.minimum(dd, np.hypot(dx, dy))


def _size_at(p: np.ndarray, grow=0.30, hmin=0.034, hmax=0.165) -> np.ndarray:
    d = np.maximum(_hole_dist(p), 0.0)
    return np.clip(hmin + grow * d, hmin, hmax)


def _walk(a, b, size) -> np.ndarray:
    """Subdivide segment a->b with local step `size`, rescaled to land on b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    length = np.linalg.norm(b - a)
    t = [0.0]
    while t[-1] < length:
        p = a + (b - a) * min(t[-1] / length, 1.0)
        t.append(t[-1] + float(size(np.atleast_2d(p))[0]))
    arr = np.array(t) * (length / t[-1])
    return a + (b - a) * (arr / length)[:, None]


def _boundary_points() -> np.ndarray:
    th = _TH0 + (2 * np.pi - 2 * _TH0) * np.arange(_N_ARC + 1) / _N_ARC
    arc = CENTER + RADIUS * np.stack([np.cos(th), np.sin(th)], -1)
    xs = bar_partition()
    top = np.stack([xs, np.full_like(xs, BAR_YT)], -1)
    bot = np.stack([xs, np.full_like(xs, BAR_YB)], -1)
    right = np.array([[BAR_XE, 0.2]])
    wall_b = _walk([0, 0], [L, 0], _size_at)
    wall_t = _walk([0, H], [L, H], _size_at)
    inflow = _walk([0, 0], [0, H], _size_at)[1:-1]
    outflow = _walk([L, 0], [L, H], _size_at)[1:-1]
    pts = np.concatenate([arc, top, bot, right, wall_b, wall_t,
                          inflow, outflow])
    return np.unique(_snap(pts), axis=0)


def _layer_points() -> np.ndarray:
    lay = []
    for li, dr in enumerate(_LAYER):
        off = 0.5 * (li % 2)    # stagger alternate layers
        tt = _TH0 + (2 * np.pi - 2 * _TH0) \
            * (np.arange(_N_ARC) + off + 0.5) / _N_ARC
        ring = CENTER + (RADIUS + dr) * np.stack([np.cos(tt), np.sin(tt)], -1)
        keep = ~((ring[:, 0] > BAR_XT - dr)
                 & (np.abs(ring[:, 1] - 0.2) < 0.011 + dr))
        lay.append(ring[keep])
        xb = BAR_XT + (BAR_XE - BAR_XT) * (np.arange(_N_BAR) + off + 0.5) / _N_BAR
        xb = xb[xb > BAR_XT + 0.3 * dr]
        for yy in (BAR_YT + dr, BAR_YB - dr):
            sheet = np.stack([xb, np.full_like(xb, yy)], -1)
            keep = np.linalg.norm(sheet - CENTER, axis=-1) > RADIUS + 0.75 * dr
            lay.append(sheet[keep])
        ny = 3 + 2 * li
        yy = 0.2 + (0.011 + dr) * np.linspace(-1, 1, ny)
        lay.append(np.stack([np.full_like(yy, BAR_XE + dr), yy], -1))
    lay = np.concatenate(lay)
    tree = cKDTree(lay)
    drop: set[int] = set()
    for a, b in sorted(tree.query_pairs(0.009)):
        if a not in drop:
            drop.add(b)
    lay = lay[[i for i in range(len(lay)) if i not in drop]]
    keep = ((lay[:, 0] > 0.01) & (lay[:, 0] < L - 0.01)
            & (lay[:, 1] > 0.016) & (lay[:, 1] < H - 0.016))
    return lay[keep]


def _background_points(bpts: np.ndarray, lay: np.ndarray) -> np.ndarray:
    def colsize(x):
        # column points nearest the obstacle sit just outside the layers
        d = max(float(_hole_dist(np.array([[x, 0.2]]))[0]), _LAYER[-1] + 0.016)
        return float(np.clip(0.034 + 0.30 * d, 0.034, 0.165))

    gx = [0.0]
    while gx[-1] < L:
        gx.append(gx[-1] + colsize(gx[-1]))
    gx = np.array(gx) * (L / gx[-1])
    cols = [_walk([x, 0], [x, H], _size_at)[1:-1] for x in gx[1:-1]]
    bg = np.concatenate(cols)
    bg = bg[_hole_dist(bg) > _LAYER[-1] + 0.016]
    tree = cKDTree(np.concatenate([bpts, lay]))
    d, _ = tree.query(bg)
    return bg[d > 0.55 * _size_at(bg).clip(max=0.10)]


def _smooth(verts: np.ndarray, nb: int, sweeps: int = 5) -> np.ndarray:
    for _ in range(sweeps):
        cells = Delaunay(verts).simplices
        cells = cells[_hole_dist(verts[cells].mean(1)) > 1e-12]
        acc = np.zeros_like(verts)
        cnt = np.zeros(len(verts))
        for i, j in ((0, 1), (1, 2), (2, 0)):
            np.add.at(acc, cells[:, i], verts[cells[:, j]])
            np.add.at(cnt, cells[:, i], 1.0)
            np.add.at(acc, cells[:, j], verts[cells[:, i]])
            np.add.at(cnt, cells[:, j], 1.0)
        new = acc / np.maximum(cnt, 1)[:, None]
        new[:nb] = verts[:nb]
        sl = new[nb:]
        bad = _hole_dist(sl) < 0.012
        bad |= (sl[:, 0] < 0.012) | (sl[:, 0] > L - 0.012)
        bad |= (sl[:, 1] < 0.012) | (sl[:, 1] > H - 0.012)
        new[nb:][bad] = verts[nb:][bad]
        verts = new
    return verts


def _classify_boundary(verts: np.ndarray, cells: np.ndarray
                       ) -> dict[str, list[tuple[int, int]]]:
    count: dict[tuple[int, int], int] = {}
    for tri in cells:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(int(a), int(b)), max(int(a), int(b)))
            count[key] = count.get(key, 0) + 1
    tol = 1e-7
    tags: dict[str, list[tuple[int, int]]] = {
        "inflow": [], "outflow": [], "walls": [],
        "cylinder": [], "interface": []}

    def on_bar(p):
        if abs(p[0] - BAR_XE) <= tol:
            return BAR_YB - tol <= p[1] <= BAR_YT + tol
        if abs(p[1] - BAR_YB) <= tol or abs(p[1] - BAR_YT) <= tol:
            return BAR_XT - tol <= p[0] <= BAR_XE + tol
        return False

    for (a, b), c in count.items():
        if c != 1:
            continue
        pa, pb = verts[a], verts[b]
        if pa[0] <= tol and pb[0] <= tol:
            tags["inflow"].append((a, b))
        elif pa[0] >= L - tol and pb[0] >= L - tol:
            tags["outflow"].append((a, b))
        elif (pa[1] <= tol and pb[1] <= tol) or \
                (pa[1] >= H - tol and pb[1] >= H - tol):
            tags["walls"].append((a, b))
        elif abs(np.linalg.norm(pa - CENTER) - RADIUS) <= tol \
                and abs(np.linalg.norm(pb - CENTER) - RADIUS) <= tol:
            tags["cylinder"].append((a, b))
        elif on_bar(pa) and on_bar(pb):
            tags["interface"].append((a, b))
        else:
            raise ValueError(f"boundary edge {pa}-{pb} fits no tag")
    return tags


def fluid_mesh(refine: int = 0, degree: int = 3) -> meshmod.Triangulation:
    """Benchmark fluid mesh; `refine` red-refinements, cylinder curved."""
    bpts = _boundary_points()
    lay = _layer_points()
    bg = _background_points(bpts, lay)
    verts = _smooth(np.concatenate([bpts, lay, bg]), nb=len(bpts))
    cells = Delaunay(verts).simplices
    cells = cells[_hole_dist(verts[cells].mean(1)) > 1e-12]
    # triangulation() verifies every boundary chord shows up as a facet
    tri = meshmod.triangulation(verts, cells, _classify_boundary(verts, cells))
    for _ in range(refine):
        tri = meshmod.refine_uniform(tri)
    if degree > 1:
        tri = meshmod.curve_to_circle(tri, CENTER, RADIUS, "cylinder", degree)
    return tri


def solid_mesh(refine: int = 0) -> meshmod.Triangulation:
    """Bar mesh on [x_t, 0.6] x [0.19, 0.21] sharing the fluid partition."""
    xs = bar_partition(refine)
    ny = 2 * 2**refine
    ys = _snap(BAR_YB + (BAR_YT - BAR_YB) * np.arange(ny + 1) / ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    nx = len(xs) - 1

    def vid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            cells += [(a, b, c), (a, c, d)]
    tags: dict[str, list[tuple[int, int]]] = {"clamp": [], "interface": []}
    for j in range(ny):
        tags["clamp"].append((vid(0, j), vid(0, j + 1)))
        tags["interface"].append((vid(nx, j), vid(nx, j + 1)))
    for i in range(nx):
        tags["interface"].append((vid(i, 0), vid(i + 1, 0)))
        tags["interface"].append((vid(i, ny), vid(i + 1, ny)))
    return meshmod.triangulation(verts, np.array(cells, dtype=np.int64), tags)


def bench_pairing(ftri: meshmod.Triangulation,
                  stri: meshmod.Triangulation) -> InterfacePairing:
    return build_pairing(ftri, stri, ftri.facets_by_tag("interface"),
                         stri.facets_by_tag("interface"))
