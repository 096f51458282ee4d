"""Linearized neo-Hookean mesh motion with inverse-Jacobian stiffening.

The fluid mesh follows the coupling boundary through a deformation map phi
in VectorH1(k) over the reference configuration, advanced once per step by
a single linearized solve of

  sum_K (1/J0) (P_a(grad phi), grad psi)_K = 0,
  P_a(F) = mu_a F + (lam_a ln(det F) - mu_a) F^(-T),

about the previous map, with phi = x0 + g on the coupling boundary and
phi = x0 on the rest (no Newton loop: the extrapolated boundary data is
itself first-order in dt). The pointwise 1/J0 weight stiffens small cells,
so refined regions deform nearly rigidly while coarse cells absorb the
distortion. ln(det) blows up as a cell degenerates, which the linearized
operator inherits through its state dependence.

The deformed configuration handed to the fluid is phi composed with the
reference geometry map, stored as the lattice interpolant of the
composition; the mesh velocity is the BDF stencil applied to the phi
coefficients, so it lives in the same space and its nodal values ride on
the deformed nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from . import mesh as meshmod
from . import refelem
from .fluid import AleData
from .spaces import (Space, SpaceKind, build_dofmap, eval_volume,
                     facet_support_dofs, interpolate, volume_tables)


class MeshTangledError(RuntimeError):
    """Mesh motion produced a nonpositive Jacobian; the step must halt."""


@dataclass
class AleState:
    """Deformation map and its two predecessors (flat VectorH1 coefficients)."""

    phi: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray

    def advanced(self, phi_new: np.ndarray) -> "AleState":
        return AleState(phi_new, self.phi, self.phi1)


class MeshMotion:
    """Mesh-motion operator for one fluid mesh: tables, masks, solver."""

    def __init__(self, tri: meshmod.Triangulation, k: int,
                 lam_a: float = 1.5, mu_a: float = 1.0,
                 vol_order: int | None = None):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.tri, self.k = tri, k
        self.lam_a, self.mu_a = float(lam_a), float(mu_a)
        self.space = Space(SpaceKind.VECTOR_H1, k, tri)
        self.dm = build_dofmap(self.space)
        self.ndofs = self.dm.ndofs

        rule = refelem.quad_rule(2, vol_order if vol_order is not None
                                 else 3 * k + 2)
        geom = meshmod.cell_geometry(tri, rule.points)
        self.geom = geom
        # the 1/J0 stiffening cancels the reference volume element J0 w_q
        self.wq = np.broadcast_to(rule.weights, geom.J.shape)
        self.tab_g = volume_tables(self.space, geom, ("grad",)).grad

        self.x0 = interpolate(self.space, self.dm, lambda p: p)
        self.fixed = np.zeros(self.ndofs, dtype=bool)
        self.fixed[facet_support_dofs(self.dm, tri.boundary_facets())] = True

    def identity(self) -> np.ndarray:
        return self.x0.copy()

    def initial_state(self) -> AleState:
        return AleState(self.identity(), self.identity(), self.identity())

    def facet_node_dofs(self, facets):
        """((nf, k+1, 2) dof array, (k+1,) facet parameters) walking each
        facet from its first to its second stored vertex."""
        tri, k = self.tri, self.k
        facets = np.asarray(facets, dtype=np.int64)
        nodes = np.empty((len(facets), k + 1), dtype=np.int64)
        nodes[:, 0] = tri.facet_vertices[facets, 0]
        nodes[:, -1] = tri.facet_vertices[facets, 1]
        for i in range(k - 1):
            nodes[:, 1 + i] = tri.nv + facets * (k - 1) + i
        dofs = nodes[:, :, None] * 2 + np.arange(2)[None, None, :]
        return dofs, np.arange(k + 1) / k

    def gradient(self, phi: np.ndarray) -> np.ndarray:
        """Deformation gradient of phi at the volume quadrature points."""
        return np.einsum("cb,cbqij->cqij", phi[self.dm.cell_dofs], self.tab_g)

    def jacobian_range(self, phi: np.ndarray) -> tuple[float, float]:
        J = meshmod.det2(self.gradient(phi))
        return float(J.min()), float(J.max())

    def solve(self, phi_prev: np.ndarray, bdofs=None, bvals=None) -> np.ndarray:
        """One linearized step about phi_prev.

        bdofs/bvals pin target phi values on coupling-boundary dofs
        (duplicate entries are averaged, which settles corner nodes shared
        by facets with different normals); every other boundary dof is held
        at the reference position. Raises MeshTangledError if the updated
        map has a nonpositive Jacobian anywhere.
        """
        lam, mu = self.lam_a, self.mu_a
        F = self.gradient(phi_prev)
        J = meshmod.det2(F)
        if J.min() <= 0.0:
            raise MeshTangledError(f"previous map tangled: min J = {J.min():.3e}")
        Ft = np.swapaxes(meshmod.inv2(F, J), -1, -2)   # F^(-T)
        lnJ = np.log(J)
        P = mu * F + (lam * lnJ - mu)[..., None, None] * Ft

        G = self.tab_g
        r = np.einsum("cq,cqij,caqij->ca", self.wq, P, G)
        S = np.einsum("cqij,cbqij->cbq", Ft, G)
        T = np.einsum("cqik,cbqlk,cqlj->cbqij", Ft, G, Ft, optimize=True)
        coef = self.wq * (lam * lnJ - mu)
        A = mu * np.einsum("cq,caqij,cbqij->cab", self.wq, G, G, optimize=True)
        A += lam * np.einsum("cq,caq,cbq->cab", self.wq, S, S)
        A -= np.einsum("cq,caqij,cbqij->cab", coef, G, T, optimize=True)

        cd = self.dm.cell_dofs
        nb = cd.shape[1]
        K = coo_matrix((A.ravel(),
                        (np.repeat(cd, nb, axis=1).ravel(),
                         np.tile(cd, (1, nb)).ravel())),
                       shape=(self.ndofs, self.ndofs)).tocsr()

        target = self.x0.copy()
        if bdofs is not None:
            bdofs = np.asarray(bdofs, dtype=np.int64).ravel()
            acc = np.zeros(self.ndofs)
            cnt = np.zeros(self.ndofs)
            np.add.at(acc, bdofs, np.asarray(bvals, dtype=float).ravel())
            np.add.at(cnt, bdofs, 1.0)
            hit = cnt > 0
            target[hit] = acc[hit] / cnt[hit]
            if not self.fixed[bdofs].all():
                raise ValueError("coupling data on a non-boundary dof")

        rg = np.zeros(self.ndofs)
        np.add.at(rg, cd.ravel(), r.ravel())
        dlt = np.zeros(self.ndofs)
        dlt[self.fixed] = target[self.fixed] - phi_prev[self.fixed]
        free = ~self.fixed
        rhs = -rg - K @ dlt
        Kff = K[free][:, free]
        dlt[free] = spsolve(Kff, rhs[free])
        phi = phi_prev + dlt
        jmin = self.jacobian_range(phi)[0]
        if jmin <= 0.0:
            raise MeshTangledError(f"mesh motion tangled: min J = {jmin:.3e}")
        return phi

    def cell_distortion(self, phi: np.ndarray) -> np.ndarray:
        """Per-cell max singular-value ratio of the deformation gradient."""
        F = self.gradient(phi)
        s = np.linalg.svd(F, compute_uv=False)
        return (s[..., 0] / s[..., 1]).max(axis=1)


def mesh_velocity(state: AleState, dt: float, bdf=(1.5, -2.0, 0.5)) -> np.ndarray:
    """BDF stencil on the map coefficients: same-space nodal mesh velocity."""
    a0, a1, a2 = bdf
    return (a0 * state.phi + a1 * state.phi1 + a2 * state.phi2) / dt


def ale_data(mm: MeshMotion, phi: np.ndarray, omega: np.ndarray | None = None,
             degree: int | None = None) -> AleData:
    """Deformed-configuration data for the fluid assembler.

    Lattice coefficients are the degree-`degree` interpolant of the
    composition of phi with the reference geometry map (exact when the
    reference map has degree <= `degree` and phi is affine on the cell;
    otherwise a high-order geometric interpolation). omega, when given,
    is re-expressed in the same-degree nodal space.
    """
    tri = mm.tri
    if degree is None:
        degree = max(tri.geom_degree, mm.k)
    lat = refelem.lattice(degree)
    geom = meshmod.cell_geometry(tri, lat)
    coeffs = eval_volume(mm.space, mm.dm, phi, geom).val
    om = None
    if omega is not None:
        if degree == mm.k:
            om = omega
        else:
            dm2 = build_dofmap(Space(SpaceKind.VECTOR_H1, degree, tri))
            om = np.zeros(dm2.ndofs)
            om[dm2.cell_dofs] = eval_volume(mm.space, mm.dm, omega,
                                            geom).val.reshape(tri.nc, -1)
    return AleData(np.ascontiguousarray(coeffs), degree, om)
