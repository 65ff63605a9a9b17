"""Hyperelastic myocardial mechanics on the coarse mesh.

Transversely orthotropic exponential (Guccione-type) passive energy with a
convex volumetric penalization, an additive active stress along the fiber
direction, Robin conditions on the epicardium with a normal/tangential
split, a follower pressure load on the endocardium, and an energy-consistent
base traction built from the net endocardial thrust.

All assembly routines take an optional `coords` array so the same operators
can be evaluated on candidate reference configurations whose vertex
positions differ from the stored mesh.

Displacements are stored as (n_dofs, 3); the flattened ordering used by the
sparse operators is component-major per node, index = 3 * dof + comp.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fem
from .geometry import ENDO, EPI, BASE


class DivergedStateError(RuntimeError):
    """Raised when the exponential energy overflows; Newton line searches
    catch this and backtrack."""


@dataclass
class MechParams:
    bulk: float = 50e3        # Pa, volumetric penalization coefficient
    c_pass: float = 0.88e3    # Pa, exponential stress scale
    b_ff: float = 8.0
    b_ss: float = 6.0
    b_nn: float = 3.0
    b_fs: float = 12.0
    b_fn: float = 3.0
    b_sn: float = 3.0
    rho: float = 1e3          # kg/m^3
    k_perp_epi: float = 2e5   # Pa/m
    k_par_epi: float = 2e4    # Pa/m
    c_perp_epi: float = 2e4   # Pa s/m
    c_par_epi: float = 2e3    # Pa s/m

    def __post_init__(self):
        vals = [self.bulk, self.c_pass, self.b_ff, self.b_ss, self.b_nn,
                self.b_fs, self.b_fn, self.b_sn, self.rho, self.k_perp_epi,
                self.k_par_epi, self.c_perp_epi, self.c_par_epi]
        if any(v <= 0 for v in vals):
            raise ValueError("all mechanics parameters must be positive")

    def exponent_matrix(self):
        return np.array([[self.b_ff, self.b_fs, self.b_fn],
                         [self.b_fs, self.b_ss, self.b_sn],
                         [self.b_fn, self.b_sn, self.b_nn]])


class MechState:
    """Displacement history d^n, d^{n-1} (m) and the cavity pressure (Pa)
    exchanged with the circulation."""

    def __init__(self, d_n, d_nm1, p_lv=0.0):
        self.d_n = np.asarray(d_n, dtype=float)
        self.d_nm1 = np.asarray(d_nm1, dtype=float)
        self.p_lv = float(p_lv)


_Q_OVERFLOW = 120.0


def _strain_energy(F, f0, s0, n0, params):
    """Passive + volumetric energy density at batched deformation
    gradients (for finite-difference verification of the stress)."""
    R = np.stack([f0, s0, n0], axis=-1)
    C = np.einsum("...ki,...kj->...ij", F, F)
    E = 0.5 * (C - np.eye(3))
    Et = np.einsum("...ka,...kl,...lb->...ab", R, E, R, optimize=True)
    bhat = params.exponent_matrix()
    Q = np.einsum("ab,...ab->...", bhat, Et ** 2)
    J = np.linalg.det(F)
    return (0.5 * params.c_pass * (np.exp(Q) - 1.0)
            + 0.5 * params.bulk * (J - 1.0) * np.log(J))


def second_pk(F, f0, s0, n0, ta, params, with_tangent=False):
    """Second Piola-Kirchhoff stress S (passive + volumetric + active) at
    batched points; optionally also the material tangent dS/dE.

    F: (..., 3, 3); f0, s0, n0: (..., 3); ta: (...) active tension in Pa.
    """
    I3 = np.eye(3)
    R = np.stack([f0, s0, n0], axis=-1)           # columns are the frame
    C = np.einsum("...ki,...kj->...ij", F, F)
    E = 0.5 * (C - I3)
    Et = np.einsum("...ka,...kl,...lb->...ab", R, E, R, optimize=True)
    bhat = params.exponent_matrix()
    Q = np.einsum("ab,...ab->...", bhat, Et ** 2)
    if np.any(Q > _Q_OVERFLOW):
        raise DivergedStateError(
            f"strain exponent {float(np.max(Q)):.1f} overflows")
    expQ = params.c_pass * np.exp(Q)
    bE = bhat * Et                                # elementwise, fiber frame
    S_pass = np.einsum("...ak,...kl,...bl->...ab", R, expQ[..., None, None] * bE, R, optimize=True)

    J = np.linalg.det(F)
    Cinv = np.linalg.inv(C)
    lnJ = np.log(J)
    wp = 0.5 * params.bulk * (lnJ + 1.0 - 1.0 / J)
    S_vol = (J * wp)[..., None, None] * Cinv

    ta = np.asarray(ta, dtype=float)
    I4 = np.einsum("...i,...ij,...j->...", f0, C, f0)
    ff = np.einsum("...i,...j->...ij", f0, f0)
    S_act = (ta / np.sqrt(I4))[..., None, None] * ff

    S = S_pass + S_vol + S_act
    if not with_tangent:
        return S

    # passive tangent in the fiber frame, then rotated
    sym4 = 0.5 * (np.einsum("ac,bd->abcd", I3, I3)
                  + np.einsum("ad,bc->abcd", I3, I3))
    Dt = expQ[..., None, None, None, None] * (
        2.0 * np.einsum("...ab,...cd->...abcd", bE, bE)
        + bhat[..., :, :, None, None] * sym4)
    D_pass = np.einsum("...Aa,...Bb,...abcd,...Cc,...Dd->...ABCD",
                       R, R, Dt, R, R, optimize=True)

    wpp = 0.5 * params.bulk * (1.0 / J + 1.0 / J ** 2)
    CiCi = np.einsum("...ab,...cd->...abcd", Cinv, Cinv)
    Cisym = 0.5 * (np.einsum("...ac,...bd->...abcd", Cinv, Cinv)
                   + np.einsum("...ad,...bc->...abcd", Cinv, Cinv))
    D_vol = ((J * (wp + J * wpp))[..., None, None, None, None] * CiCi
             - (2.0 * J * wp)[..., None, None, None, None] * Cisym)

    D_act = -(ta / I4 ** 1.5)[..., None, None, None, None] \
        * np.einsum("...ab,...cd->...abcd", ff, ff)
    return S, D_pass + D_vol + D_act


def piola_stress(F, frame, ta, params):
    """First Piola-Kirchhoff stress P = F S for a single point or batch.
    frame: object with f0, s0, n0 (each (..., 3))."""
    S = second_pk(F, frame.f0, frame.s0, frame.n0, ta, params)
    return np.einsum("...ik,...kj->...ij", F, S)


def _vector_dof_map(dof_map):
    """Flattened (cell, 3*nloc) global indices, component-major per node."""
    return (3 * dof_map[:, :, None] + np.arange(3)).reshape(dof_map.shape[0], -1)


def _scatter_vec(dof_map, elem, n_dofs):
    """Assemble (nc, nloc, 3, nloc, 3) element blocks into a 3n x 3n CSR."""
    vd = _vector_dof_map(dof_map)
    nc, nv = vd.shape
    rows = np.repeat(vd, nv, axis=1).ravel()
    cols = np.tile(vd, (1, nv)).ravel()
    A = sp.coo_matrix((elem.reshape(nc, nv, nv).ravel(), (rows, cols)),
                      shape=(3 * n_dofs, 3 * n_dofs))
    return A.tocsr()


class _ScatterPattern:
    """Reusable sparsity for repeated _scatter_vec assemblies: the COO
    entry -> unique-slot map is computed once, after which an assembly is a
    single bincount."""

    def __init__(self, dof_map, n_dofs):
        vd = _vector_dof_map(dof_map)
        nc, nv = vd.shape
        rows = np.repeat(vd, nv, axis=1).ravel()
        cols = np.tile(vd, (1, nv)).ravel()
        keys = rows * np.int64(3 * n_dofs) + cols
        uniq, inv = np.unique(keys, return_inverse=True)
        self.inv = inv
        self.n_slots = uniq.size
        proto = sp.csr_matrix(
            (np.zeros(uniq.size),
             (uniq // (3 * n_dofs), uniq % (3 * n_dofs))),
            shape=(3 * n_dofs, 3 * n_dofs))
        proto.sort_indices()
        self.proto = proto

    def assemble(self, elem):
        data = np.bincount(self.inv, weights=elem.ravel(),
                           minlength=self.n_slots)
        A = self.proto.copy()
        A.data[:] = data
        return A


class _Surface:
    """Precomputed quadrature, basis values and physical basis gradients on
    one tagged boundary surface (in a given coordinate configuration)."""

    def __init__(self, space, tag, n_gauss, coords):
        mesh = space.mesh
        facets = mesh.facets_by_tag(tag)
        if not facets:
            raise ValueError(f"mesh has no boundary facets with tag {tag}")
        q = fem.facet_quadrature(mesh, facets, n_gauss=n_gauss, coords=coords)
        self.cells = q["cells"]
        self.area_vec = q["area_vectors"]          # (nf, nq, 3), ref config
        self.weights = q["weights"]
        self.points = q["points"]
        nf, nq, _ = q["ref"].shape
        flat = q["ref"].reshape(-1, 3)
        N, dN = space.eval_basis(flat)
        self.N = N.reshape(nf, nq, -1)
        xyz = (coords if coords is not None else mesh.vertices)[mesh.cells]
        # geometric Jacobian per facet point (facets have differing ref pts)
        grads = np.empty((nf, nq, self.N.shape[2], 3))
        dN = dN.reshape(nf, nq, -1, 3)
        for k in range(nf):
            Jg, _ = fem.geometry_at(xyz[self.cells[k]][None], q["ref"][k])
            Jinv = np.linalg.inv(Jg[0])
            grads[k] = np.einsum("qid,qdj->qij", dN[k], Jinv)
        self.grads = grads
        self.dofs = space.dof_map[self.cells]       # (nf, nloc)

    def deformation(self, d):
        """F = I + grad d at every surface quadrature point, (nf, nq, 3, 3)."""
        dloc = d[self.dofs]                         # (nf, nloc, 3)
        G = np.einsum("fqij,fia->fqaj", self.grads, dloc)
        F = G + np.eye(3)
        J = np.linalg.det(F)
        if np.any(J <= 0.0):
            raise fem.InvertedElementError("inverted element on boundary")
        return F, J


def _cofactor(F, J=None):
    if J is None:
        J = np.linalg.det(F)
    return J[..., None, None] * np.swapaxes(np.linalg.inv(F), -1, -2)


def _dcof(F, J):
    """d(cof F)_iA / dF_jB, batched (..., 3, 3, 3, 3)."""
    Fi = np.linalg.inv(F)
    return J[..., None, None, None, None] * (
        np.einsum("...Ai,...Bj->...iAjB", Fi, Fi)
        - np.einsum("...Aj,...Bi->...iAjB", Fi, Fi))


class MechAssembler:
    """All mechanics operators for one space, fiber field and coordinate
    configuration.

    frames_qp must be evaluated at this space's quadrature points (the
    mechanics quadrature is one order above the mass/stiffness default, for
    the exponential integrand).
    """

    def __init__(self, space, frames_qp, params=None, coords=None):
        self.space = space
        self.params = params or MechParams()
        self.coords = coords
        nc = space.mesh.n_cells
        nq = space.qp_ref.shape[0]
        self.f0 = frames_qp.f0.reshape(nc, nq, 3)
        self.s0 = frames_qp.s0.reshape(nc, nq, 3)
        self.n0 = frames_qp.n0.reshape(nc, nq, 3)

        self.grads, detJ = space.phys_grads(coords)
        self.wq = space.qp_w[None, :] * detJ

        ng = space.degree + 2
        self.endo = _Surface(space, ENDO, ng, coords)
        self.epi = _Surface(space, EPI, ng, coords)
        self.base = _Surface(space, BASE, ng, coords)
        if self.base.weights.sum() <= 0.0:
            raise ValueError("zero base area")

        self.mass = self._vector_mass() * self.params.rho
        self.robin_stiffness = self._robin_matrix(self.params.k_perp_epi,
                                                  self.params.k_par_epi)
        self.robin_damping = self._robin_matrix(self.params.c_perp_epi,
                                                self.params.c_par_epi)
        self.n_dofs = space.n_dofs
        self._vol_pattern = _ScatterPattern(space.dof_map, space.n_dofs)
        self._endo_pattern = _ScatterPattern(self.endo.dofs, space.n_dofs)
        self._base_pattern = _ScatterPattern(self.base.dofs, space.n_dofs)

    def _vector_mass(self):
        elem = np.einsum("cq,qi,qj->cij", self.wq, self.space.N, self.space.N)
        nloc = elem.shape[1]
        big = np.einsum("cij,ml->cimjl", elem, np.eye(3))
        return _scatter_vec(self.space.dof_map, big, self.space.n_dofs)

    def _robin_matrix(self, coef_perp, coef_par):
        s = self.epi
        n_hat = s.area_vec / s.weights[..., None]
        A = (coef_perp * np.einsum("fqm,fql->fqml", n_hat, n_hat)
             + coef_par * (np.eye(3) - np.einsum("fqm,fql->fqml", n_hat, n_hat)))
        elem = np.einsum("fq,fqi,fqj,fqml->fimjl", s.weights, s.N, s.N, A, optimize=True)
        return _scatter_vec(s.dofs, elem, self.space.n_dofs)

    def deformation(self, d):
        return fem.compute_deformation(self.space, d, coords=self.coords)

    def internal_force(self, d, ta_qp):
        """Volume term: integral of P(d, Ta) : grad(phi), returned (n, 3)."""
        F, _ = self.deformation(d)
        S = second_pk(F, self.f0, self.s0, self.n0, ta_qp, self.params)
        P = np.einsum("cqik,cqkj->cqij", F, S)
        elem = np.einsum("cq,cqmA,cqiA->cim", self.wq, P, self.grads, optimize=True)
        out = np.zeros((self.space.n_dofs, 3))
        np.add.at(out, self.space.dof_map.ravel(),
                  elem.reshape(-1, 3))
        return out

    def internal_tangent(self, d, ta_qp):
        F, _ = self.deformation(d)
        S, D = second_pk(F, self.f0, self.s0, self.n0, ta_qp, self.params,
                         with_tangent=True)
        g = self.grads
        geo = np.einsum("cq,cqiA,cqAB,cqjB->cij", self.wq, g, S, g, optimize=True)
        elem = np.einsum("cij,ml->cimjl", geo, np.eye(3))
        elem = elem + self._material_block(F, D, g)
        return self._vol_pattern.assemble(elem)

    def _material_block(self, F, D, g):
        """sum_q wq g_iA (F D F)_mAlB g_jB as batched matmuls; einsum picks
        slow paths for this contraction on small per-cell blocks."""
        nc, nq, nloc = g.shape[:3]
        N = nc * nq
        # T_mAlB = F_mC D_CADB F_lD
        Df = D.reshape(N, 3, 27)
        T1 = (F.reshape(N, 3, 3) @ Df).reshape(N, 3, 3, 3, 3)  # m A D B
        T1 = T1.transpose(0, 1, 2, 4, 3).reshape(N, 27, 3)     # (mAB), D
        T = T1 @ np.swapaxes(F.reshape(N, 3, 3), 1, 2)         # (mAB), l
        T = T.reshape(N, 3, 3, 3, 3).transpose(0, 2, 1, 4, 3)  # A m l B
        # contract with the weighted gradients
        gw = (self.wq[..., None, None] * g).reshape(N, nloc, 3)  # i A
        gf = g.reshape(N, nloc, 3)
        Tr = T.reshape(N, 3, 9, 3)                              # A (ml) B
        Tr = Tr.transpose(0, 1, 3, 2).reshape(N, 3, 3, 9)       # A B (ml)
        U = gw @ Tr.reshape(N, 3, 27)                           # i, (B ml)
        U = U.reshape(N, nloc, 3, 9)                            # i B (ml)
        V = U.transpose(0, 1, 3, 2).reshape(N, nloc * 9, 3) @ \
            gf.swapaxes(1, 2)                                   # (i ml) j
        V = V.reshape(nc, nq, nloc, 3, 3, nloc).sum(axis=1)     # c i m l j
        return V.transpose(0, 1, 2, 4, 3)                       # c i m j l

    def compute_vbase(self, d):
        """Nonlocal base direction: net endocardial thrust divided by the
        deformed base area, recomputed at the current displacement."""
        Fe, Je = self.endo.deformation(d)
        ge = np.einsum("fqiA,fqA->fqi", _cofactor(Fe, Je), self.endo.area_vec)
        Fb, Jb = self.base.deformation(d)
        gb = np.einsum("fqiA,fqA->fqi", _cofactor(Fb, Jb), self.base.area_vec)
        denom = np.linalg.norm(gb, axis=2).sum()
        if denom <= 0.0:
            raise ValueError("zero deformed base area")
        return ge.sum(axis=(0, 1)) / denom

    def pressure_vector(self, d):
        """p(d): unit-pressure generalized load, endocardial follower part
        plus the base traction carrying the net thrust; (n, 3)."""
        out = np.zeros((self.space.n_dofs, 3))
        Fe, Je = self.endo.deformation(d)
        ge = np.einsum("fqiA,fqA->fqi", _cofactor(Fe, Je), self.endo.area_vec)
        elem = -np.einsum("fqi,fqm->fim", ge, self.endo.N)
        np.add.at(out, self.endo.dofs.ravel(),
                  elem.transpose(0, 2, 1).reshape(-1, 3))
        Fb, Jb = self.base.deformation(d)
        gb = np.einsum("fqiA,fqA->fqi", _cofactor(Fb, Jb), self.base.area_vec)
        vb = self.compute_vbase(d)
        elem_b = np.einsum("fq,i,fqm->fim",
                           np.linalg.norm(gb, axis=2), vb, self.base.N)
        np.add.at(out, self.base.dofs.ravel(),
                  elem_b.transpose(0, 2, 1).reshape(-1, 3))
        return out

    def pressure_tangent(self, d):
        """d(p(d))/dd as a 3n x 3n matrix, with the derivative of the
        nonlocal base direction dropped (quasi-Newton approximation)."""
        n = self.space.n_dofs
        s = self.endo
        Fe, Je = s.deformation(d)
        Dc = _dcof(Fe, Je)
        dg = np.einsum("fqiAjB,fqA->fqijB", Dc, s.area_vec)
        elem = -np.einsum("fqijB,fqa,fqbB->faibj", dg, s.N, s.grads, optimize=True)
        A = self._endo_pattern.assemble(elem)
        s = self.base
        Fb, Jb = s.deformation(d)
        gb = np.einsum("fqiA,fqA->fqi", _cofactor(Fb, Jb), s.area_vec)
        vb = self.compute_vbase(d)
        ghat = gb / np.linalg.norm(gb, axis=2)[..., None]
        dg = np.einsum("fqkAjB,fqA->fqkjB", _dcof(Fb, Jb), s.area_vec)
        dnorm = np.einsum("fqk,fqkjB->fqjB", ghat, dg)
        elem = np.einsum("fqjB,i,fqa,fqbB->faibj", dnorm, vb, s.N, s.grads, optimize=True)
        return A + self._base_pattern.assemble(elem)

    # --- residuals -----------------------------------------------------

    def residual_static(self, d, ta_qp, p_lv):
        """Quasi-static residual: internal forces + epicardial springs
        - p_lv * p(d); (n, 3)."""
        r = self.internal_force(d, ta_qp)
        r = r + (self.robin_stiffness @ d.ravel()).reshape(-1, 3)
        if p_lv != 0.0:
            r = r - p_lv * self.pressure_vector(d)
        return r

    def jacobian_static(self, d, ta_qp, p_lv):
        J = self.internal_tangent(d, ta_qp) + self.robin_stiffness
        if p_lv != 0.0:
            J = J - p_lv * self.pressure_tangent(d)
        return J

    def dynamic_residual(self, d_trial, p_trial, state, ta_qp, dt):
        """Time-discrete momentum residual with backward-difference inertia
        and epicardial damping on the velocity (d - d^n)/dt."""
        acc = (d_trial - 2.0 * state.d_n + state.d_nm1).ravel() / dt ** 2
        vel = (d_trial - state.d_n).ravel() / dt
        r = ((self.mass @ acc + self.robin_damping @ vel
              + self.robin_stiffness @ d_trial.ravel()).reshape(-1, 3)
             + self.internal_force(d_trial, ta_qp))
        return r - p_trial * self.pressure_vector(d_trial)

    def dynamic_jacobian(self, d, ta_qp, p_lv, dt):
        """(J_dd, J_dp) of the dynamic residual at (d, p_lv)."""
        J_dd = (self.mass / dt ** 2 + self.robin_damping / dt
                + self.internal_tangent(d, ta_qp) + self.robin_stiffness
                - p_lv * self.pressure_tangent(d))
        J_dp = -self.pressure_vector(d)
        return J_dd, J_dp


def quasi_static_solve(assembler, p_lv, ta_qp, d0=None, rel_tol=1e-10,
                       abs_tol=1e-8, max_iter=50, gmres_tol=1e-8):
    """Full-Newton solve of the steady mechanics at fixed pressure and
    active tension.  Returns (converged, d); failures are reported through
    the flag, never raised (continuation drivers react to the flag)."""
    n = assembler.space.n_dofs
    d = np.zeros((n, 3)) if d0 is None else d0.copy()
    try:
        r = assembler.residual_static(d, ta_qp, p_lv)
    except (fem.InvertedElementError, DivergedStateError):
        return False, d
    rnorm0 = max(np.linalg.norm(r), 1e-30)
    for it in range(max_iter):
        rnorm = np.linalg.norm(r)
        if rnorm <= max(rel_tol * rnorm0, abs_tol):
            return True, d
        J = assembler.jacobian_static(d, ta_qp, p_lv)
        try:
            delta, _ = fem.solve_gmres(J.tocsc(), r.ravel(),
                                       abs_tol=gmres_tol * max(rnorm, 1.0))
        except fem.SolverError:
            return False, d
        delta = delta.reshape(-1, 3)
        step = 1.0
        for _ in range(11):
            d_try = d - step * delta
            try:
                r_try = assembler.residual_static(d_try, ta_qp, p_lv)
                if np.linalg.norm(r_try) < rnorm:
                    break
            except (fem.InvertedElementError, DivergedStateError):
                pass
            step *= 0.5
        else:
            return False, d
        d, r = d_try, r_try
        if step == 1.0 and np.max(np.abs(delta)) <= abs_tol * 1e-3:
            return True, d
    return False, d


def pressure_ramp_init(assembler, ta_qp, p_ed, n_steps=10, min_frac=1e-3):
    """End-diastolic displacement by a quasi-static pressure ramp with
    adaptive step halving; raises on persistent failure."""
    if p_ed < 0:
        raise ValueError("ramp pressure must be nonnegative")
    n = assembler.space.n_dofs
    d = np.zeros((n, 3))
    if p_ed == 0.0:
        return d
    p = 0.0
    dp = p_ed / n_steps
    while p < p_ed - 1e-12 * p_ed:
        dp = min(dp, p_ed - p)
        ok, d_new = quasi_static_solve(assembler, p + dp, ta_qp, d0=d)
        if ok:
            p += dp
            d = d_new
        else:
            dp *= 0.5
            if dp < min_frac * p_ed:
                raise RuntimeError(
                    f"pressure ramp stalled at {p:.1f} Pa of {p_ed:.1f} Pa")
    return d
