"""Conforming triangle meshes with optional curved per-cell geometry.

A Triangulation stores straight connectivity plus a per-cell nodal map of
uniform degree m (affine meshes have m=1 and coefficients equal to the cell
vertices). Facets carry both sides' (cell, local index, direction) records;
the global facet parameterization runs from the lower to the higher vertex
index, and `flip` says whether a side walks against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import refelem


@dataclass
class Triangulation:
    vertices: np.ndarray        # (nv, 2)
    cells: np.ndarray           # (nc, 3) CCW
    geom_degree: int
    geom_coeffs: np.ndarray     # (nc, nnodes(m), 2) lattice-ordered map nodes
    facet_vertices: np.ndarray  # (nf, 2) ascending vertex ids
    facet_cells: np.ndarray     # (nf, 2) cell ids, -1 for missing side
    facet_local: np.ndarray     # (nf, 2) local facet index per side
    facet_flip: np.ndarray      # (nf, 2) bool, side walks against global param
    facet_tag: np.ndarray       # (nf,) index into tag_names, -1 interior
    cell_facets: np.ndarray = None  # (nc, 3) facet id opposite each vertex
    tag_names: list[str] = field(default_factory=list)

    @property
    def nv(self) -> int:
        return len(self.vertices)

    @property
    def nc(self) -> int:
        return len(self.cells)

    @property
    def nf(self) -> int:
        return len(self.facet_vertices)

    def tag_id(self, name: str) -> int:
        return self.tag_names.index(name)

    def facets_by_tag(self, *names: str) -> np.ndarray:
        ids = [self.tag_id(n) for n in names]
        return np.flatnonzero(np.isin(self.facet_tag, ids))

    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] >= 0)

    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] < 0)


_LOCAL_FACETS = np.array([[1, 2], [2, 0], [0, 1]])


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _straight_coeffs(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    return vertices[cells].astype(float)


def triangulation(vertices, cells, boundary_tags: dict[str, list[tuple[int, int]]]) -> Triangulation:
    """Build connectivity from raw arrays; validates orientation and tags.

    boundary_tags maps tag name -> list of unordered vertex pairs; every
    boundary facet must be covered exactly once.
    """
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64).copy()
    v = vertices[cells]
    sign = _cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    if np.any(sign == 0):
        raise ValueError("degenerate cell (zero area)")
    flipidx = sign < 0
    cells[flipidx] = cells[flipidx][:, [0, 2, 1]]

    sides: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for c in range(len(cells)):
        for l in range(3):
            a, b = cells[c, _LOCAL_FACETS[l]]
            key = (min(a, b), max(a, b))
            sides.setdefault(key, []).append((c, l))
    keys = sorted(sides)
    nf = len(keys)
    facet_vertices = np.array(keys, dtype=np.int64)
    facet_cells = np.full((nf, 2), -1, dtype=np.int64)
    facet_local = np.zeros((nf, 2), dtype=np.int64)
    facet_flip = np.zeros((nf, 2), dtype=bool)
    cell_facets = np.full((len(cells), 3), -1, dtype=np.int64)
    for f, key in enumerate(keys):
        rec = sorted(sides[key])
        if len(rec) > 2:
            raise ValueError(f"facet {key} shared by {len(rec)} cells")
        for s, (c, l) in enumerate(rec):
            facet_cells[f, s] = c
            facet_local[f, s] = l
            facet_flip[f, s] = cells[c, _LOCAL_FACETS[l, 0]] != key[0]
            cell_facets[c, l] = f

    tag_names = sorted(boundary_tags)
    facet_tag = np.full(nf, -1, dtype=np.int64)
    lookup = {key: f for f, key in enumerate(keys)}
    for t, name in enumerate(tag_names):
        for a, b in boundary_tags[name]:
            key = (min(int(a), int(b)), max(int(a), int(b)))
            f = lookup.get(key)
            if f is None:
                raise ValueError(f"tag {name!r}: {key} is not a facet")
            if facet_cells[f, 1] >= 0:
                raise ValueError(f"tag {name!r}: {key} is an interior facet")
            if facet_tag[f] >= 0:
                raise ValueError(f"facet {key} tagged twice")
            facet_tag[f] = t
    untagged = np.flatnonzero((facet_cells[:, 1] < 0) & (facet_tag < 0))
    if len(untagged):
        raise ValueError(f"{len(untagged)} boundary facets missing a tag, e.g. "
                         f"{tuple(facet_vertices[untagged[0]])}")

    return Triangulation(vertices, cells, 1, _straight_coeffs(vertices, cells),
                         facet_vertices, facet_cells, facet_local, facet_flip,
                         facet_tag, cell_facets, tag_names)


def raise_degree(tri: Triangulation, degree: int) -> Triangulation:
    """Reinterpolate the geometric map on the degree-`degree` lattice."""
    nodes = refelem.lattice(degree)
    tab = refelem.eval_basis("lagrange", tri.geom_degree, nodes)
    coeffs = np.einsum("cnd,nq->cqd", tri.geom_coeffs, tab.values)
    return replace(tri, geom_degree=degree, geom_coeffs=coeffs)


def _facet_node_slots(loc: int, degree: int) -> np.ndarray:
    """Lattice indices lying on local facet `loc` (endpoints + edge nodes)."""
    a, b = _LOCAL_FACETS[loc]
    edge = [3 + loc * (degree - 1) + i for i in range(degree - 1)]
    return np.array([a, b] + edge, dtype=np.int64)


def curve_to_circle(tri: Triangulation, center, radius: float, tag: str,
                    degree: int) -> Triangulation:
    """Snap facets tagged `tag` onto the circle and curve the map to `degree`.

    Requires a straight input mesh. Vertices of tagged facets are projected
    radially (a global move, so neighbouring cells stay conforming); then the
    map degree is raised everywhere and only the tagged facets' lattice nodes
    are projected, keeping all other facets straight.
    """
    if tri.geom_degree != 1:
        raise ValueError("curve_to_circle needs a straight mesh")
    center = np.asarray(center, dtype=float)
    tagged = tri.facets_by_tag(tag)

    def proj(p):
        r = p - center
        return center + radius * r / np.linalg.norm(r, axis=-1, keepdims=True)

    vertices = tri.vertices.copy()
    vids = np.unique(tri.facet_vertices[tagged])
    vertices[vids] = proj(vertices[vids])
    out = replace(tri, vertices=vertices,
                  geom_coeffs=_straight_coeffs(vertices, tri.cells))
    out = raise_degree(out, degree)
    coeffs = out.geom_coeffs.copy()
    for f in tagged:
        c, loc = tri.facet_cells[f, 0], tri.facet_local[f, 0]
        slots = _facet_node_slots(loc, degree)
        coeffs[c, slots] = proj(coeffs[c, slots])
    return replace(out, geom_coeffs=coeffs)


def refine_uniform(tri: Triangulation) -> Triangulation:
    """Four-way red refinement of a straight mesh; boundary tags inherited."""
    if tri.geom_degree != 1:
        raise ValueError("refine before curving")
    mid_of = {}
    midpts = []
    for f in range(tri.nf):
        a, b = tri.facet_vertices[f]
        mid_of[(a, b)] = tri.nv + f
        midpts.append(0.5 * (tri.vertices[a] + tri.vertices[b]))
    vertices = np.vstack([tri.vertices, np.array(midpts)])

    def mid(a, b):
        return mid_of[(min(a, b), max(a, b))]

    cells = []
    for a, b, c in tri.cells:
        m0, m1, m2 = mid(b, c), mid(c, a), mid(a, b)
        cells += [(a, m2, m1), (b, m0, m2), (c, m1, m0), (m0, m1, m2)]

    tags: dict[str, list[tuple[int, int]]] = {n: [] for n in tri.tag_names}
    for f in np.flatnonzero(tri.facet_tag >= 0):
        a, b = tri.facet_vertices[f]
        m = mid(a, b)
        name = tri.tag_names[tri.facet_tag[f]]
        tags[name] += [(a, m), (m, b)]
    return triangulation(vertices, np.array(cells, dtype=np.int64), tags)


# -- geometry evaluation ------------------------------------------------------


def det2(F: np.ndarray) -> np.ndarray:
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def inv2(F: np.ndarray, J: np.ndarray | None = None) -> np.ndarray:
    if J is None:
        J = det2(F)
    out = np.empty_like(F)
    out[..., 0, 0] = F[..., 1, 1]
    out[..., 0, 1] = -F[..., 0, 1]
    out[..., 1, 0] = -F[..., 1, 0]
    out[..., 1, 1] = F[..., 0, 0]
    return out / J[..., None, None]


@dataclass
class CellGeom:
    """Map data at reference points, batched over cells."""

    ref_points: np.ndarray
    x: np.ndarray      # (nc, nq, 2)
    F: np.ndarray      # (nc, nq, 2, 2) dx_i/dxhat_j
    J: np.ndarray      # (nc, nq)
    Finv: np.ndarray
    H: np.ndarray | None = None  # (nc, nq, 2, 2, 2) d2 x_i / dxhat_a dxhat_b


def cell_geometry(tri: Triangulation, ref_points: np.ndarray,
                  coeffs: np.ndarray | None = None, degree: int | None = None,
                  hessian: bool = False, cells: np.ndarray | None = None) -> CellGeom:
    """Evaluate the (possibly overridden) geometric map on all/some cells.

    Passing `coeffs`/`degree` evaluates an alternative map with the same
    lattice layout, e.g. a deformed configuration.
    """
    if coeffs is None:
        coeffs, degree = tri.geom_coeffs, tri.geom_degree
    if cells is not None:
        coeffs = coeffs[cells]
    tab = refelem.eval_basis("lagrange", degree, ref_points)
    x = np.einsum("cnd,nq->cqd", coeffs, tab.values)
    F = np.einsum("cnd,nqe->cqde", coeffs, tab.grads)
    J = det2(F)
    H = None
    if hessian:
        ht = refelem.eval_hess("lagrange", degree, ref_points)
        H = np.einsum("cnd,nqab->cqdab", coeffs, ht)
    return CellGeom(ref_points, x, F, J, inv2(F, J), H)


@dataclass
class FacetSide:
    cells: np.ndarray       # (nf,)
    combo: np.ndarray       # (nf,) = local*2 + flip
    ref_points: np.ndarray  # (nf, nq, 2)
    F: np.ndarray           # (nf, nq, 2, 2)
    J: np.ndarray           # (nf, nq)
    Finv: np.ndarray


@dataclass
class FacetGeom:
    facets: np.ndarray
    rule: refelem.QuadratureRule
    x: np.ndarray        # (nf, nq, 2) physical quad points
    tangent: np.ndarray  # (nf, nq, 2) dx/ds in the global parameter
    jac: np.ndarray      # (nf, nq) |tangent|
    normal: np.ndarray   # (nf, nq, 2) unit, outward from the side-0 cell
    sides: list          # [FacetSide, FacetSide | None]


def _side_geometry(tri, facets, side, rule, coeffs, degree) -> FacetSide:
    ref = refelem.RefSimplex(2)
    s = rule.points[:, 0]
    nf, nq = len(facets), len(s)
    cells = tri.facet_cells[facets, side]
    combo = tri.facet_local[facets, side] * 2 + tri.facet_flip[facets, side]
    ref_points = np.empty((nf, nq, 2))
    F = np.empty((nf, nq, 2, 2))
    for loc in range(3):
        for flip in (False, True):
            sel = np.flatnonzero(combo == loc * 2 + flip)
            if not len(sel):
                continue
            pts = ref.facet_points(loc, 1.0 - s if flip else s)
            tab = refelem.eval_basis("lagrange", degree, pts)
            ref_points[sel] = pts[None]
            F[sel] = np.einsum("cnd,nqe->cqde", coeffs[cells[sel]], tab.grads)
    J = det2(F)
    return FacetSide(cells, combo, ref_points, F, J, inv2(F, J))


def facet_geometry(tri: Triangulation, rule: refelem.QuadratureRule,
                   facets: np.ndarray, coeffs: np.ndarray | None = None,
                   degree: int | None = None, both: bool = True) -> FacetGeom:
    """Facet quadrature geometry in the global facet parameterization."""
    if coeffs is None:
        coeffs, degree = tri.geom_coeffs, tri.geom_degree
    facets = np.asarray(facets, dtype=np.int64)
    side0 = _side_geometry(tri, facets, 0, rule, coeffs, degree)
    side1 = None
    if both and np.all(tri.facet_cells[facets, 1] >= 0):
        side1 = _side_geometry(tri, facets, 1, rule, coeffs, degree)

    ref = refelem.RefSimplex(2)
    loc = tri.facet_local[facets, 0]
    sgn = np.where(tri.facet_flip[facets, 0], -1.0, 1.0)
    tau = ref.facet_tangents[loc] * sgn[:, None]          # (nf, 2) ref direction
    tangent = np.einsum("fqde,fe->fqd", side0.F, tau)
    jac = np.linalg.norm(tangent, axis=-1)
    nref = ref.facet_normals[loc]                          # (nf, 2)
    normal = np.einsum("fqed,fe->fqd", side0.Finv, nref)   # F^-T nhat
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)

    x = np.empty_like(tangent)
    for combo in range(6):
        sel = np.flatnonzero(side0.combo == combo)
        if not len(sel):
            continue
        pts = side0.ref_points[sel[0]]
        vt = refelem.eval_basis("lagrange", degree, pts)
        x[sel] = np.einsum("cnd,nq->cqd", coeffs[side0.cells[sel]], vt.values)
    return FacetGeom(facets, rule, x, tangent, jac, normal, [side0, side1])


# -- areas and point location -------------------------------------------------


def cell_areas(tri: Triangulation, coeffs: np.ndarray | None = None,
               degree: int | None = None) -> np.ndarray:
    if degree is None:
        degree = tri.geom_degree
    rule = refelem.quad_rule(2, max(2 * (degree - 1), 1))
    geom = cell_geometry(tri, rule.points, coeffs, degree)
    return geom.J @ rule.weights


def shoelace_areas(tri: Triangulation) -> np.ndarray:
    v = tri.vertices[tri.cells]
    return 0.5 * _cross2(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def locate_point(tri: Triangulation, x, tol: float = 1e-10) -> tuple[int, np.ndarray]:
    """Find (cell, reference coords) containing x; straight geometry only."""
    x = np.asarray(x, dtype=float)
    v = tri.vertices[tri.cells]
    A = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=-1)
    lam = np.einsum("cde,ce->cd", inv2(A), x[None, :] - v[:, 0])
    ok = (lam[:, 0] >= -tol) & (lam[:, 1] >= -tol) & (lam.sum(1) <= 1 + tol)
    hits = np.flatnonzero(ok)
    if not len(hits):
        raise ValueError(f"point {x} outside mesh")
    return int(hits[0]), lam[hits[0]]


# -- plain text file format ---------------------------------------------------


def write_mesh(tri: Triangulation, path: str) -> None:
    """Plain text format.

    Header `dim ncells nverts nfacets` (nfacets counts tagged boundary
    facets); then vertex lines `x y`; then cell lines `v0 v1 v2` with an
    optional `m c0x c0y c1x c1y ...` curved-map block; then boundary lines
    `v0 v1 tagname`.
    """
    tagged = np.flatnonzero(tri.facet_tag >= 0)
    lines = [f"2 {tri.nc} {tri.nv} {len(tagged)}"]
    for p in tri.vertices:
        lines.append(f"{float(p[0])!r} {float(p[1])!r}")
    curved = tri.geom_degree > 1
    for c in range(tri.nc):
        parts = [str(v) for v in tri.cells[c]]
        if curved:
            parts.append(str(tri.geom_degree))
            parts += [repr(float(val)) for val in tri.geom_coeffs[c].ravel()]
        lines.append(" ".join(parts))
    for f in tagged:
        a, b = tri.facet_vertices[f]
        lines.append(f"{a} {b} {tri.tag_names[tri.facet_tag[f]]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path: str) -> Triangulation:
    with open(path) as fh:
        toks = [ln.split("#", 1)[0].split() for ln in fh]
    toks = [t for t in toks if t]
    dim, nc, nv, nbf = (int(v) for v in toks[0])
    if dim != 2:
        raise ValueError(f"unsupported mesh dimension {dim}")
    at = 1
    vertices = np.array([[float(v) for v in toks[at + i]] for i in range(nv)])
    at += nv
    cells = np.empty((nc, 3), dtype=np.int64)
    degree = 1
    coeff_rows = []
    for i in range(nc):
        row = toks[at + i]
        cells[i] = [int(v) for v in row[:3]]
        if len(row) > 3:
            m = int(row[3])
            vals = [float(v) for v in row[4:]]
            if len(vals) != 2 * len(refelem.lattice(m)):
                raise ValueError(f"cell {i}: bad curved block length")
            degree = m
            coeff_rows.append(np.array(vals).reshape(-1, 2))
        else:
            coeff_rows.append(None)
    at += nc
    tags: dict[str, list[tuple[int, int]]] = {}
    for i in range(nbf):
        a, b, name = toks[at + i][0], toks[at + i][1], toks[at + i][2]
        tags.setdefault(name, []).append((int(a), int(b)))
    tri = triangulation(vertices, cells, tags)
    if degree > 1:
        tri = raise_degree(tri, degree)
        coeffs = tri.geom_coeffs.copy()
        for i, row in enumerate(coeff_rows):
            if row is not None:
                coeffs[i] = row
        tri = replace(tri, geom_coeffs=coeffs)
    return tri


# -- structured generator -----------------------------------------------------


def rectangle(x0: float, y0: float, x1: float, y1: float, nx: int, ny: int,
              tags: tuple[str, str, str, str] = ("left", "right", "bottom", "top"),
              ) -> Triangulation:
    """Structured rectangle mesh, 2 triangles per quad, fixed diagonal."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            cells += [(a, b, c), (a, c, d)]
    left, right, bottom, top = tags
    bt: dict[str, list[tuple[int, int]]] = {left: [], right: [], bottom: [], top: []}
    for j in range(ny):
        bt[left].append((vid(0, j), vid(0, j + 1)))
        bt[right].append((vid(nx, j), vid(nx, j + 1)))
    for i in range(nx):
        bt[bottom].append((vid(i, 0), vid(i + 1, 0)))
        bt[top].append((vid(i, ny), vid(i + 1, ny)))
    return triangulation(vertices, np.array(cells, dtype=np.int64), bt)


def unit_square(n: int) -> Triangulation:
    return rectangle(0.0, 0.0, 1.0, 1.0, n, n)
