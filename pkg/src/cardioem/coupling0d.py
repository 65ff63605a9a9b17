"""Closed-loop 0D circulation and its volumetric coupling to the 3D wall.

The 0D side works in clinical units (mmHg, mL, s), the 3D side in SI; unit
conversion happens only at the interface of this module.

The circulation is a closed network: elastance chambers LA, RA, RV, diode
valves (mitral, aortic, tricuspid, pulmonary), and RLC systemic/pulmonary
arterial and venous compartments.  The left ventricle is special: its
pressure is not given by an elastance but supplied externally, and its
volume is constrained to match the 3D cavity volume.  The constrained
problem is solved per time step by quasi-Newton iterations on the
saddle-point system with a scalar Schur complement, with the Jacobian and
the Schur direction w frozen at the start of the step.
"""

from dataclasses import dataclass

import numpy as np

from . import fem
from .geometry import ENDO, BASE, FACE_VERTS
from .mechanics import DivergedStateError

PA_PER_MMHG = 133.322
ML_PER_M3 = 1e6

# state vector layout
V_LA, V_RA, V_RV, V_LV = 0, 1, 2, 3
P_AR_SYS, P_VEN_SYS, P_AR_PUL, P_VEN_PUL = 4, 5, 6, 7
Q_AR_SYS, Q_VEN_SYS, Q_AR_PUL, Q_VEN_PUL = 8, 9, 10, 11
STATE_NAMES = ["V_LA", "V_RA", "V_RV", "V_LV",
               "p_AR_SYS", "p_VEN_SYS", "p_AR_PUL", "p_VEN_PUL",
               "Q_AR_SYS", "Q_VEN_SYS", "Q_AR_PUL", "Q_VEN_PUL"]


@dataclass
class CircParams:
    """Closed-loop parameters, clinical units (mmHg, mL, s)."""
    r_ar_sys: float = 0.8
    r_ven_sys: float = 0.26
    r_ar_pul: float = 0.1625
    r_ven_pul: float = 0.1625
    c_ar_sys: float = 1.2
    c_ven_sys: float = 60.0
    c_ar_pul: float = 10.0
    c_ven_pul: float = 16.0
    l_ar_sys: float = 5e-3
    l_ven_sys: float = 5e-4
    l_ar_pul: float = 5e-4
    l_ven_pul: float = 5e-4
    e_pass_la: float = 0.09
    e_pass_ra: float = 0.07
    e_pass_rv: float = 0.05
    e_act_max_la: float = 0.07
    e_act_max_ra: float = 0.06
    e_act_max_rv: float = 0.55
    v0_la: float = 4.0
    v0_ra: float = 4.0
    v0_rv: float = 10.0
    r_min: float = 0.0075
    r_max: float = 75006.2
    period: float = 0.8
    p_ex: float = 0.0
    # chamber activation timing (s within the beat); substituted values,
    # configurable: atria fire late in the beat, ahead of the next
    # ventricular systole
    atrial_onset: float = 0.65
    atrial_duration: float = 0.17
    rv_onset: float = 0.10
    rv_duration: float = 0.40

    def __post_init__(self):
        pos = [self.r_ar_sys, self.r_ven_sys, self.r_ar_pul, self.r_ven_pul,
               self.c_ar_sys, self.c_ven_sys, self.c_ar_pul, self.c_ven_pul,
               self.l_ar_sys, self.l_ven_sys, self.l_ar_pul, self.l_ven_pul,
               self.r_min, self.r_max, self.period]
        if any(v <= 0 for v in pos):
            raise ValueError("resistances, capacitances, inductances and the"
                             " period must be positive")
        if self.r_min >= self.r_max:
            raise ValueError("r_min must be below r_max")


class CircState:
    """12-component circulation state plus time."""

    def __init__(self, vec, t=0.0):
        self.vec = np.asarray(vec, dtype=float)
        if self.vec.shape != (12,):
            raise ValueError("circulation state must have 12 components")
        self.t = float(t)

    @classmethod
    def physiological(cls, v_lv=120.0, t=0.0):
        vec = np.zeros(12)
        vec[V_LA], vec[V_RA], vec[V_RV], vec[V_LV] = 65.0, 65.0, 145.0, v_lv
        vec[P_AR_SYS], vec[P_VEN_SYS] = 80.0, 30.0
        vec[P_AR_PUL], vec[P_VEN_PUL] = 25.0, 15.0
        return cls(vec, t)

    def copy(self):
        return CircState(self.vec.copy(), self.t)

    def total_volume(self, params):
        """Chamber volumes plus stressed compartment volumes C p (mL)."""
        p = params
        return (self.vec[:4].sum()
                + p.c_ar_sys * self.vec[P_AR_SYS]
                + p.c_ven_sys * self.vec[P_VEN_SYS]
                + p.c_ar_pul * self.vec[P_AR_PUL]
                + p.c_ven_pul * self.vec[P_VEN_PUL])


def chamber_activation(t, onset, duration, period):
    """Raised-cosine activation pulse in [0, 1], wrapping at the period."""
    tau = (t - onset) % period
    if tau >= duration:
        return 0.0
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * tau / duration))


def valve_flux(dp, params):
    """Diode valve: low resistance forward, high resistance backward."""
    return dp / (params.r_min if dp > 0 else params.r_max)


def chamber_pressures(t, vec, params):
    """Elastance pressures of LA, RA, RV (mmHg)."""
    p = params
    a_at = chamber_activation(t, p.atrial_onset, p.atrial_duration, p.period)
    a_rv = chamber_activation(t, p.rv_onset, p.rv_duration, p.period)
    p_la = p.p_ex + (p.e_pass_la + p.e_act_max_la * a_at) * (vec[V_LA] - p.v0_la)
    p_ra = p.p_ex + (p.e_pass_ra + p.e_act_max_ra * a_at) * (vec[V_RA] - p.v0_ra)
    p_rv = p.p_ex + (p.e_pass_rv + p.e_act_max_rv * a_rv) * (vec[V_RV] - p.v0_rv)
    return p_la, p_ra, p_rv


def circulation_rhs(t, vec, p_lv, params):
    """Network right-hand side; p_lv in mmHg, supplied externally."""
    p = params
    p_la, p_ra, p_rv = chamber_pressures(t, vec, p)
    q_mv = valve_flux(p_la - p_lv, p)
    q_av = valve_flux(p_lv - vec[P_AR_SYS], p)
    q_tv = valve_flux(p_ra - p_rv, p)
    q_pv = valve_flux(p_rv - vec[P_AR_PUL], p)

    d = np.empty(12)
    d[V_LA] = vec[Q_VEN_PUL] - q_mv
    d[V_LV] = q_mv - q_av
    d[V_RA] = vec[Q_VEN_SYS] - q_tv
    d[V_RV] = q_tv - q_pv
    d[P_AR_SYS] = (q_av - vec[Q_AR_SYS]) / p.c_ar_sys
    d[P_VEN_SYS] = (vec[Q_AR_SYS] - vec[Q_VEN_SYS]) / p.c_ven_sys
    d[P_AR_PUL] = (q_pv - vec[Q_AR_PUL]) / p.c_ar_pul
    d[P_VEN_PUL] = (vec[Q_AR_PUL] - vec[Q_VEN_PUL]) / p.c_ven_pul
    d[Q_AR_SYS] = (-p.r_ar_sys * vec[Q_AR_SYS]
                   + vec[P_AR_SYS] - vec[P_VEN_SYS]) / p.l_ar_sys
    d[Q_VEN_SYS] = (-p.r_ven_sys * vec[Q_VEN_SYS]
                    + vec[P_VEN_SYS] - p_ra) / p.l_ven_sys
    d[Q_AR_PUL] = (-p.r_ar_pul * vec[Q_AR_PUL]
                   + vec[P_AR_PUL] - vec[P_VEN_PUL]) / p.l_ar_pul
    d[Q_VEN_PUL] = (-p.r_ven_pul * vec[Q_VEN_PUL]
                    + vec[P_VEN_PUL] - p_la) / p.l_ven_pul
    return d


def rk4_step(state, tau, p_lv, params, rhs=None):
    """Classical 4th-order Runge-Kutta update of the circulation with the
    ventricular pressure frozen across all stages; returns a new state."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    f = rhs if rhs is not None else circulation_rhs
    c, t = state.vec, state.t
    k1 = f(t, c, p_lv, params)
    k2 = f(t + 0.5 * tau, c + 0.5 * tau * k1, p_lv, params)
    k3 = f(t + 0.5 * tau, c + 0.5 * tau * k2, p_lv, params)
    k4 = f(t + tau, c + tau * k3, p_lv, params)
    new = c + (tau / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(new)):
        raise RuntimeError("non-finite circulation state")
    return CircState(new, t + tau)


# --- 3D cavity volume ---------------------------------------------------


def _base_ring(mesh):
    """Ordered vertex loop of the endocardial rim: edges shared by ENDO and
    BASE boundary facets, chained into a closed cycle."""

    def facet_edges(cell, face):
        vs = [mesh.cells[cell][k] for k in FACE_VERTS[face]]
        return {frozenset((vs[i], vs[(i + 1) % 4])) for i in range(4)}

    endo_edges = set()
    base_edges = set()
    for c, f, tag in mesh.boundary_facets:
        if tag == ENDO:
            endo_edges |= facet_edges(c, f)
        elif tag == BASE:
            base_edges |= facet_edges(c, f)
    ring = [e for e in endo_edges & base_edges if len(e) == 2]
    if not ring:
        raise ValueError("no closed endocardial rim found at the base")
    nxt = {}
    for e in ring:
        a, b = tuple(e)
        nxt.setdefault(a, []).append(b)
        nxt.setdefault(b, []).append(a)
    if any(len(v) != 2 for v in nxt.values()):
        raise ValueError("endocardial rim is not a simple closed loop")
    start = next(iter(nxt))
    loop = [start, nxt[start][0]]
    while True:
        a, b = loop[-2], loop[-1]
        c = nxt[b][0] if nxt[b][0] != a else nxt[b][1]
        if c == start:
            break
        loop.append(c)
    if len(loop) != len(ring):
        raise ValueError("endocardial rim is not a single closed loop")
    return np.array(loop, dtype=np.int64)


def _vertex_dofs(space, vertex_ids):
    """Global dof ids of the given mesh vertices."""
    return fem.vertex_dofs(space)[vertex_ids]


class CavityGeometry:
    """Precomputed endocardial quadrature and base-rim data for cavity
    volume evaluation on a fixed coordinate configuration."""

    def __init__(self, space, coords=None):
        mesh = space.mesh
        self.space = space
        q = fem.facet_quadrature(mesh, mesh.facets_by_tag(ENDO),
                                 n_gauss=space.degree + 2, coords=coords)
        self.cells = q["cells"]
        self.area_vec = q["area_vectors"]
        nf, nq, _ = q["ref"].shape
        flat = q["ref"].reshape(-1, 3)
        N, dN = space.eval_basis(flat)
        self.N = N.reshape(nf, nq, -1)
        xyz = (coords if coords is not None else mesh.vertices)[mesh.cells]
        grads = np.empty((nf, nq, self.N.shape[2], 3))
        for k in range(nf):
            Jg, _ = fem.geometry_at(xyz[self.cells[k]][None], q["ref"][k])
            grads[k] = np.einsum("qid,qdj->qij", dN.reshape(nf, nq, -1, 3)[k],
                                 np.linalg.inv(Jg[0]))
        self.grads = grads
        self.dofs = space.dof_map[self.cells]
        # reference positions of the quadrature points
        Ng, _ = fem.trilinear_shapes(flat)
        self.x0 = np.einsum("fqk,fka->fqa",
                            Ng.reshape(nf, nq, -1), xyz[self.cells])
        ring = _base_ring(mesh)
        self.ring_dofs = _vertex_dofs(space, ring)
        verts = coords if coords is not None else mesh.vertices
        self.ring_x0 = verts[ring]
        # orient the ring so the cap closes the cavity from outside (fan
        # normals pointing away from the wall, toward +z for the LV)
        y = self.ring_x0 - self.ring_x0.mean(axis=0)
        nrm = np.cross(y, np.roll(y, -1, axis=0)).sum(axis=0)
        if nrm[2] < 0:
            self.ring_dofs = self.ring_dofs[::-1]
            self.ring_x0 = self.ring_x0[::-1]

    def _surface_cof(self, d):
        dloc = d[self.dofs]
        G = np.einsum("fqij,fia->fqaj", self.grads, dloc)
        F = G + np.eye(3)
        J = np.linalg.det(F)
        if np.any(J <= 0.0):
            raise fem.InvertedElementError("inverted element on endocardium")
        cof = J[..., None, None] * np.swapaxes(np.linalg.inv(F), -1, -2)
        return np.einsum("fqiA,fqA->fqi", cof, self.area_vec), F, J

    def volume(self, d):
        """Deformed cavity volume in mL (divergence theorem over the
        deformed endocardium plus a triangle fan closing the base rim)."""
        g, _, _ = self._surface_cof(d)
        xq = self.x0 + np.einsum("fqi,fia->fqa", self.N, d[self.dofs])
        v = -np.einsum("fqa,fqa->", xq, g) / 3.0
        # close the base rim with a triangle fan from the deformed rim
        # centroid (moves with the ring, so the surface stays closed)
        y = self.ring_x0 + d[self.ring_dofs]
        cen = y.mean(axis=0)
        v += cen @ np.cross(y, np.roll(y, -1, axis=0)).sum(axis=0) / 6.0
        return v * ML_PER_M3

    def volume_gradient(self, d):
        """dV/dd as an (n_dofs, 3) array, mL per meter of displacement."""
        g, F, J = self._surface_cof(d)
        xq = self.x0 + np.einsum("fqi,fia->fqa", self.N, d[self.dofs])
        out = np.zeros((self.space.n_dofs, 3))
        # direct dependence through x
        elem = -np.einsum("fqa,fqi->fia", g, self.N) / 3.0
        np.add.at(out, self.dofs.ravel(), elem.reshape(-1, 3))
        # dependence through the cofactor
        Fi = np.linalg.inv(F)
        dcof = J[..., None, None, None, None] * (
            np.einsum("fqAi,fqBj->fqiAjB", Fi, Fi)
            - np.einsum("fqAj,fqBi->fqiAjB", Fi, Fi))
        dg = np.einsum("fqiAjB,fqA->fqijB", dcof, self.area_vec)
        elem = -np.einsum("fqi,fqijB,fqbB->fbj", xq, dg, self.grads) / 3.0
        np.add.at(out, self.dofs.ravel(), elem.reshape(-1, 3))
        # base fan with centroid apex: product rule over centroid and edges
        y = self.ring_x0 + d[self.ring_dofs]
        cen = y.mean(axis=0)
        cross_sum = np.cross(y, np.roll(y, -1, axis=0)).sum(axis=0)
        grad_ring = (cross_sum / len(y)
                     + np.cross(cen, np.roll(y, 1, axis=0)
                                - np.roll(y, -1, axis=0))) / 6.0
        np.add.at(out, self.ring_dofs, grad_ring)
        return out * ML_PER_M3


def cavity_volume_3d(space, d, coords=None, cavity=None):
    """Deformed left-ventricular cavity volume (mL)."""
    cav = cavity if cavity is not None else CavityGeometry(space, coords)
    return cav.volume(np.asarray(d, dtype=float))


def volume_residual(cavity, d, c1_vec):
    """r_p = V_3D(d) - V_0D (mL); positive when the wall encloses more
    volume than the circulation carries."""
    return cavity.volume(d) - c1_vec[V_LV]


# --- saddle-point step --------------------------------------------------


class SaddleWorkspace:
    """Frozen per-step blocks of the quasi-Newton saddle system."""

    def __init__(self, J_dd, J_dp, J_pd, gmres_tol=1e-10):
        self.J_dd = J_dd.tocsc()
        self.J_dp = np.asarray(J_dp, dtype=float).ravel()
        self.J_pd = np.asarray(J_pd, dtype=float).ravel()
        self.ilu = fem.make_ilu_preconditioner(self.J_dd)
        self.gmres_tol = gmres_tol
        scale = max(np.linalg.norm(self.J_dp), 1.0)
        w, _ = fem.solve_gmres(self.J_dd, self.J_dp, abs_tol=gmres_tol * scale,
                               M=self.ilu)
        self.w = w
        self.n_w_solves = 1
        self.n_linear_solves = 1
        self.n_newton_iters = 0
        denom = float(self.J_pd @ self.w)
        if abs(denom) < 1e-14 * max(np.abs(self.J_pd).max()
                                    * np.abs(self.w).max(), 1e-30):
            raise RuntimeError("singular Schur complement: cavity volume "
                               "insensitive to pressure")
        self.denom = denom


def schur_solve(workspace, r_d, r_p):
    """One quasi-Newton correction via the scalar Schur complement:
    solve J_dd v = r_d, then
    dp = (r_p - J_pd v) / (J_pd w),  dd = -(v + w dp)."""
    ws = workspace
    r_d = np.asarray(r_d, dtype=float).ravel()
    scale = max(np.linalg.norm(r_d), 1e-30)
    v, _ = fem.solve_gmres(ws.J_dd, r_d, abs_tol=ws.gmres_tol * scale,
                           M=ws.ilu)
    ws.n_linear_solves += 1
    dp = (r_p - float(ws.J_pd @ v)) / ws.denom
    dd = -(v + ws.w * dp)
    return dd, dp


def coupled_step(assembler, cavity, state, ta_qp, v0d_target, dt,
                 rel_tol=1e-10, abs_tol_d=1e-4, abs_tol_p=1e-8, max_iter=80):
    """Advance the wall displacement and cavity pressure to the new time
    level under the volumetric constraint V_3D(d) = v0d_target.

    state: MechState with d^n, d^{n-1} and p_lv (Pa).  Returns
    (d_new, p_new, workspace); raises on Newton failure.
    """
    # Jacobian and Schur direction frozen at (d^n, p^n) for the whole step
    d = state.d_n.copy()
    p = state.p_lv
    J_dd, J_dp_field = assembler.dynamic_jacobian(d, ta_qp, state.p_lv, dt)
    J_pd = cavity.volume_gradient(d).ravel()
    # J_dp in N per Pa; J_pd in mL per m -- consistent with r_d in N (per
    # Pa of pressure increment) and r_p in mL
    ws = SaddleWorkspace(J_dd, J_dp_field.ravel(), J_pd)
    r_d = assembler.dynamic_residual(d, p, state, ta_qp, dt)
    r_p = cavity.volume(d) - v0d_target
    rd0 = max(np.linalg.norm(r_d), 1e-30)
    rp0 = max(abs(r_p), 1e-30)

    def merit(r_d, r_p):
        return np.linalg.norm(r_d) / rd0 + abs(r_p) / rp0

    for it in range(max_iter):
        if (np.linalg.norm(r_d) <= max(rel_tol * rd0, abs_tol_d)
                and abs(r_p) <= max(rel_tol * rp0, abs_tol_p)):
            ws.n_newton_iters = it
            return d, p, ws
        dd, dp = schur_solve(ws, r_d.ravel(), r_p)
        # damped update: halve the step on element inversion or a large
        # residual increase (frozen-Jacobian steps can overshoot in systole)
        m0 = merit(r_d, r_p)
        alpha = 1.0
        for _ in range(12):
            d_try = d + alpha * dd.reshape(-1, 3)
            p_try = p + alpha * dp
            try:
                r_d_try = assembler.dynamic_residual(d_try, p_try, state,
                                                     ta_qp, dt)
                r_p_try = cavity.volume(d_try) - v0d_target
            except (fem.InvertedElementError, DivergedStateError,
                    FloatingPointError, OverflowError):
                alpha *= 0.5
                continue
            if np.all(np.isfinite(r_d_try)) and \
                    (merit(r_d_try, r_p_try) < 2.0 * m0 or alpha <= 1.0 / 64):
                break
            alpha *= 0.5
        else:
            raise RuntimeError("coupled step: no admissible damped step")
        d, p, r_d, r_p = d_try, p_try, r_d_try, r_p_try
        import os
        if os.environ.get("CARDIOEM_DEBUG"):
            print(f"    it={it} |r_d|={np.linalg.norm(r_d):.3e} "
                  f"|r_p|={abs(r_p):.3e} alpha={alpha}", flush=True)
    raise RuntimeError(
        f"coupled step failed: |r_d| = {np.linalg.norm(r_d):.3e} N, "
        f"|r_p| = {abs(r_p):.3e} mL after {max_iter} iterations")
