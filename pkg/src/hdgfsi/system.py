"""Block linear systems, static condensation, and the Newton driver.

All unknowns live in one flat dof vector. A boolean partition marks
element-local (condensable) dofs; element contributions come in homogeneous
batches of dense blocks, purely-global couplings go straight to sparse
triplets. Condensation eliminates the local blocks with batched dense solves
and hands the Schur complement to a sparse direct factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu


@dataclass
class ElemBatch:
    """Dense blocks for a batch of elements sharing one dof layout.

    ldofs/gdofs hold flat dof ids; the four blocks follow the [local | global]
    partition of the element stiffness.
    """

    ldofs: np.ndarray  # (ne, nl)
    gdofs: np.ndarray  # (ne, ng)
    A_ll: np.ndarray   # (ne, nl, nl)
    A_lg: np.ndarray   # (ne, nl, ng)
    A_gl: np.ndarray   # (ne, ng, nl)
    A_gg: np.ndarray   # (ne, ng, ng)
    r_l: np.ndarray    # (ne, nl)
    r_g: np.ndarray    # (ne, ng)


@dataclass
class BlockSystem:
    ndofs: int
    is_local: np.ndarray            # bool (ndofs,)
    fixed: np.ndarray               # bool (ndofs,) Dirichlet-masked dofs
    batches: list[ElemBatch] = field(default_factory=list)
    coo_rows: list = field(default_factory=list)
    coo_cols: list = field(default_factory=list)
    coo_vals: list = field(default_factory=list)
    r_extra: np.ndarray | None = None  # residual terms outside element batches

    def add_coo(self, rows, cols, vals):
        self.coo_rows.append(np.asarray(rows, dtype=np.int64).ravel())
        self.coo_cols.append(np.asarray(cols, dtype=np.int64).ravel())
        self.coo_vals.append(np.asarray(vals, dtype=float).ravel())

    def add_residual(self, dofs, vals):
        if self.r_extra is None:
            self.r_extra = np.zeros(self.ndofs)
        np.add.at(self.r_extra, np.asarray(dofs, dtype=np.int64).ravel(),
                  np.asarray(vals, dtype=float).ravel())

    def residual(self) -> np.ndarray:
        """Assembled residual over all dofs (masked entries zeroed)."""
        r = np.zeros(self.ndofs)
        if self.r_extra is not None:
            r += self.r_extra
        for b in self.batches:
            np.add.at(r, b.ldofs.ravel(), b.r_l.ravel())
            np.add.at(r, b.gdofs.ravel(), b.r_g.ravel())
        r[self.fixed] = 0.0
        return r


class FieldLayout:
    """Named contiguous dof blocks inside one flat vector.

    Each block records its dofmap and whether it is element-local
    (condensable); `local` may also be a per-dof boolean array for spaces
    that mix conforming and interior dofs. Offsets are assigned in
    registration order.
    """

    def __init__(self):
        self.entries: dict[str, tuple[int, object, object]] = {}
        self.ndofs = 0

    def add(self, name: str, dm, local) -> int:
        if name in self.entries:
            raise ValueError(f"duplicate field {name!r}")
        off = self.ndofs
        if not np.isscalar(local):
            local = np.asarray(local, dtype=bool)
            if local.shape != (dm.ndofs,):
                raise ValueError("local mask length mismatch")
        self.entries[name] = (off, dm, local)
        self.ndofs += dm.ndofs
        return off

    def off(self, name: str) -> int:
        return self.entries[name][0]

    def dm(self, name: str):
        return self.entries[name][1]

    def slc(self, name: str) -> slice:
        off, dm, _ = self.entries[name]
        return slice(off, off + dm.ndofs)

    def local_mask(self) -> np.ndarray:
        m = np.zeros(self.ndofs, dtype=bool)
        for off, dm, local in self.entries.values():
            m[off:off + dm.ndofs] = local
        return m

    def new_system(self, fixed: np.ndarray | None = None) -> BlockSystem:
        if fixed is None:
            fixed = np.zeros(self.ndofs, dtype=bool)
        return BlockSystem(self.ndofs, self.local_mask(), fixed)


def _compact_map(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Map flat ids -> compact indices over True entries, -1 elsewhere."""
    idx = np.full(len(mask), -1, dtype=np.int64)
    n = int(mask.sum())
    idx[mask] = np.arange(n)
    return idx, n


def condense_and_solve(system: BlockSystem) -> np.ndarray:
    """Newton direction -J^{-1} r via Schur complement on global dofs.

    Returns the update over all dofs; masked dofs get zero. Equals the
    monolithic solve up to factorization roundoff.
    """
    free_g = (~system.is_local) & (~system.fixed)
    gmap, ng = _compact_map(free_g)
    rows, cols, vals = [], [], []
    rhs = np.zeros(ng)

    if system.r_extra is not None:
        rhs -= system.r_extra[free_g]
    for r_, c_, v_ in zip(system.coo_rows, system.coo_cols, system.coo_vals):
        rr, cc = gmap[r_], gmap[c_]
        keep = (rr >= 0) & (cc >= 0)
        rows.append(rr[keep])
        cols.append(cc[keep])
        vals.append(v_[keep])

    # per-batch elimination data kept for back-substitution
    elim = []
    for b in system.batches:
        ne, nl = b.r_l.shape
        if nl:
            A_ll, A_lg, A_gl, r_l = b.A_ll, b.A_lg, b.A_gl, b.r_l
            fixed_l = system.fixed[b.ldofs]
            if fixed_l.any():
                # fixed local dofs: identity rows, dropped couplings
                A_ll, A_lg, A_gl = A_ll.copy(), A_lg.copy(), A_gl.copy()
                r_l = np.where(fixed_l, 0.0, r_l)
                A_ll[fixed_l, :] = 0.0
                A_ll.transpose(0, 2, 1)[fixed_l, :] = 0.0
                e, i = np.nonzero(fixed_l)
                A_ll[e, i, i] = 1.0
                A_lg[fixed_l, :] = 0.0
                A_gl.transpose(0, 2, 1)[fixed_l, :] = 0.0
            X = np.linalg.solve(A_ll, np.concatenate(
                [A_lg, r_l[:, :, None]], axis=2))
            Xlg, xr = X[:, :, :-1], X[:, :, -1]
            S = b.A_gg - np.einsum("egl,elh->egh", A_gl, Xlg)
            rg = b.r_g - np.einsum("egl,el->eg", A_gl, xr)
        else:
            Xlg = xr = None
            S, rg = b.A_gg, b.r_g
        elim.append((Xlg, xr))
        gm = gmap[b.gdofs]
        rr = np.broadcast_to(gm[:, :, None], S.shape)
        cc = np.broadcast_to(gm[:, None, :], S.shape)
        keep = (rr >= 0) & (cc >= 0)
        rows.append(rr[keep])
        cols.append(cc[keep])
        vals.append(S[keep])
        ok = gm >= 0
        np.subtract.at(rhs, gm[ok], rg[ok])

    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(ng, ng)).tocsc()
    dg = splu(K).solve(rhs)

    delta = np.zeros(system.ndofs)
    delta[free_g] = dg
    for b, (Xlg, xr) in zip(system.batches, elim):
        if xr is None:
            continue
        dge = delta[b.gdofs]
        dl = -(xr + np.einsum("elg,eg->el", Xlg, dge))
        delta[b.ldofs.ravel()] = dl.ravel()
    return delta


def monolithic_solve(system: BlockSystem) -> np.ndarray:
    """Direct sparse solve over all free dofs; condensation oracle."""
    free = ~system.fixed
    fmap, nfree = _compact_map(free)
    rows, cols, vals = [], [], []
    rhs = np.zeros(nfree)
    if system.r_extra is not None:
        rhs -= system.r_extra[free]
    for r_, c_, v_ in zip(system.coo_rows, system.coo_cols, system.coo_vals):
        rr, cc = fmap[r_], fmap[c_]
        keep = (rr >= 0) & (cc >= 0)
        rows.append(rr[keep]); cols.append(cc[keep]); vals.append(v_[keep])
    for b in system.batches:
        for (di, dj, A) in ((b.ldofs, b.ldofs, b.A_ll), (b.ldofs, b.gdofs, b.A_lg),
                            (b.gdofs, b.ldofs, b.A_gl), (b.gdofs, b.gdofs, b.A_gg)):
            if 0 in A.shape[1:]:
                continue
            rr = np.broadcast_to(fmap[di][:, :, None], A.shape)
            cc = np.broadcast_to(fmap[dj][:, None, :], A.shape)
            keep = (rr >= 0) & (cc >= 0)
            rows.append(rr[keep]); cols.append(cc[keep]); vals.append(A[keep])
        for (di, rv) in ((b.ldofs, b.r_l), (b.gdofs, b.r_g)):
            if rv.shape[1] == 0:
                continue
            fm = fmap[di]
            ok = fm >= 0
            np.subtract.at(rhs, fm[ok], rv[ok])
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nfree, nfree)).tocsc()
    delta = np.zeros(system.ndofs)
    delta[free] = splu(K).solve(rhs)
    return delta


def dense_jacobian(system: BlockSystem) -> np.ndarray:
    """All assembled blocks scattered into one dense matrix; fixtures only."""
    n = system.ndofs
    K = np.zeros((n, n))
    for b in system.batches:
        for (di, dj, A) in ((b.ldofs, b.ldofs, b.A_ll), (b.ldofs, b.gdofs, b.A_lg),
                            (b.gdofs, b.ldofs, b.A_gl), (b.gdofs, b.gdofs, b.A_gg)):
            if 0 in A.shape[1:]:
                continue
            rr = np.broadcast_to(di[:, :, None], A.shape)
            cc = np.broadcast_to(dj[:, None, :], A.shape)
            np.add.at(K, (rr.ravel(), cc.ravel()), A.ravel())
    for r_, c_, v_ in zip(system.coo_rows, system.coo_cols, system.coo_vals):
        np.add.at(K, (r_, c_), v_)
    return K


@dataclass
class NewtonConfig:
    tol: float = 1e-8
    maxit: int = 20
    verbose: bool = False


@dataclass
class NewtonResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residuals: list[float]


def newton_solve(assemble, x0: np.ndarray, cfg: NewtonConfig = NewtonConfig()) -> NewtonResult:
    """Full-step Newton; convergence on the freshly assembled residual norm.

    `assemble(x)` returns a BlockSystem linearized at x. The initial guess is
    used as-is (time stepping passes the previous level). No line search.
    """
    x = x0.copy()
    residuals = []
    for it in range(cfg.maxit + 1):
        system = assemble(x)
        rn = float(np.linalg.norm(system.residual()))
        residuals.append(rn)
        if cfg.verbose:
            print(f"  newton {it}: |r| = {rn:.3e}")
        if rn <= cfg.tol:
            return NewtonResult(x, True, it, residuals)
        if it == cfg.maxit:
            break
        x = x + condense_and_solve(system)
    return NewtonResult(x, False, cfg.maxit, residuals)
