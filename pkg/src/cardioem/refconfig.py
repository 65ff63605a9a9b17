"""Stress-free reference configuration recovery.

The acquired geometry is a loaded equilibrium (pressurized, possibly with
residual active tension).  The reference (unloaded) coordinates are found by
fixed-point iterations on x0 = x_loaded - d(x0), optionally relaxed and
wrapped in a load continuation ramp, plus a projection utility that maps a
displacement computed on an independent (non-nested) auxiliary mesh onto a
target mesh.

All solvers here report failure through flags instead of exceptions; the
continuation logic reacts to the flags.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import fem, mechanics


@dataclass
class RecoveryParams:
    k_max: int = 100
    eps_tol_ramp: float = 1e-2
    eps_tol_final: float = 1e-4
    gamma_omega_plus: float = 2.0
    gamma_omega_minus: float = 0.5
    domega_max: float = 0.25
    alpha_min: float = 1e-3
    alpha_max: float = 1.0
    gamma_alpha_plus: float = 1.5
    gamma_alpha_minus: float = 0.5
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.gamma_omega_minus < 1 < self.gamma_omega_plus):
            raise ValueError("need 0 < gamma_omega- < 1 < gamma_omega+")
        if not (0 < self.gamma_alpha_minus < 1 < self.gamma_alpha_plus):
            raise ValueError("need 0 < gamma_alpha- < 1 < gamma_alpha+")
        if not (0 < self.alpha_min <= self.alpha_max <= 1):
            raise ValueError("need 0 < alpha_min <= alpha_max <= 1")
        if not (0 < self.domega_max <= 1):
            raise ValueError("need 0 < domega_max <= 1")


def _solve_on(space, frames_qp, mech_params, coords, p_lv, ta_qp, d0=None):
    """Steady mechanics on candidate reference coordinates `coords`."""
    try:
        asm = mechanics.MechAssembler(space, frames_qp, mech_params,
                                      coords=coords)
    except (ValueError, fem.InvertedElementError):
        return False, None
    return mechanics.quasi_static_solve(asm, p_lv, ta_qp, d0=d0)


def reference_configuration_base(space, frames_qp, mech_params, p_load,
                                 ta_qp, params=None):
    """Plain fixed point x0 <- x_loaded - d(x0); no relaxation, no ramp.
    Returns (converged, x0)."""
    params = params or RecoveryParams()
    vdofs = fem.vertex_dofs(space)
    x_t = space.mesh.vertices
    x0 = x_t.copy()
    d_guess = None
    for _ in range(params.k_max):
        ok, d = _solve_on(space, frames_qp, mech_params, x0, p_load, ta_qp,
                          d0=d_guess)
        if not ok:
            return False, x0
        dv = d[vdofs]
        err = np.max(np.abs(x0 + dv - x_t))
        if err <= params.eps_tol_final * max(np.max(np.abs(dv)), 0.0):
            return True, x0
        x0 = x_t - dv
        d_guess = d
    return False, x0


def fixed_point(space, frames_qp, mech_params, x_tilde, p_lv, ta_qp, x0,
                eps_tol, params):
    """Relaxed inner fixed-point loop with adaptive relaxation alpha.

    On a failed mechanics solve the step is retried from the previous
    accepted configuration with a smaller alpha and the displacement guess
    reset to the last converged solution.  Returns (converged, x0).
    """
    vdofs = fem.vertex_dofs(space)
    x0 = x0.copy()
    ok, d = _solve_on(space, frames_qp, mech_params, x0, p_lv, ta_qp)
    if not ok:
        return False, x0
    alpha = params.alpha_max
    alphas = params.history.setdefault("alpha", [])
    for _ in range(params.k_max):
        dv = d[vdofs]
        xk = x0 + dv
        err = np.max(np.abs(xk - x_tilde))
        if err <= eps_tol * np.max(np.abs(dv)):
            return True, x0
        while True:
            x0_try = x0 + alpha * (x_tilde - xk)
            ok, d_try = _solve_on(space, frames_qp, mech_params, x0_try,
                                  p_lv, ta_qp, d0=d)
            if ok:
                x0, d = x0_try, d_try
                alpha = min(params.gamma_alpha_plus * alpha, params.alpha_max)
                alphas.append(alpha)
                break
            if alpha <= params.alpha_min:
                return False, x0
            alpha = max(params.gamma_alpha_minus * alpha, params.alpha_min)
            alphas.append(alpha)
    return False, x0


def reference_configuration(space, frames_qp, mech_params, p_load, ta_qp,
                            params=None):
    """Load-continuation recovery: ramp omega from 0 to 1, running the
    relaxed fixed point at loads (omega p, omega Ta) with a loose tolerance
    during the ramp and the final tolerance at omega = 1."""
    params = params or RecoveryParams()
    x_t = space.mesh.vertices
    x0 = x_t.copy()
    omega = 0.0
    domega = params.domega_max
    omegas = params.history.setdefault("omega", [])
    ta_qp = np.asarray(ta_qp, dtype=float)
    for _ in range(params.k_max):
        omega_try = min(omega + domega, 1.0)
        eps = params.eps_tol_final if omega_try >= 1.0 else params.eps_tol_ramp
        ok, x0_try = fixed_point(space, frames_qp, mech_params, x_t,
                                 omega_try * p_load, omega_try * ta_qp,
                                 x0, eps, params)
        if ok:
            omega, x0 = omega_try, x0_try
            omegas.append(omega)
            if omega >= 1.0:
                return True, x0
            domega = min(params.gamma_omega_plus * domega, params.domega_max)
        else:
            domega *= params.gamma_omega_minus
            if domega < 1e-8:
                return False, x0
    return False, x0


# --- projection between independent meshes ------------------------------


def _inverse_trilinear(corner_xyz, x, tol=1e-12, max_iter=30):
    """Newton solve for reference coordinates of point x in a trilinear
    hex; returns (ref, converged)."""
    ref = np.full(3, 0.5)
    for _ in range(max_iter):
        N, _ = fem.trilinear_shapes(ref[None, :])
        r = N[0] @ corner_xyz - x
        if np.dot(r, r) < tol ** 2:
            return ref, True
        _, dN = fem.trilinear_shapes(ref[None, :])
        J = np.einsum("kd,ka->da", dN[0], corner_xyz).T
        try:
            ref = ref - np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            return ref, False
        if np.any(np.abs(ref - 0.5) > 5.0):
            return ref, False
    return ref, False


def _closest_point_on_cell(corner_xyz, x, n_iter=60):
    """Clipped Gauss-Newton for the reference coordinates in [0,1]^3 that
    minimize the distance to x; returns (ref, distance)."""
    ref = np.full(3, 0.5)
    for _ in range(n_iter):
        N, dN = fem.trilinear_shapes(ref[None, :])
        r = N[0] @ corner_xyz - x
        J = np.einsum("kd,ka->ad", dN[0], corner_xyz)
        g = J.T @ r
        H = J.T @ J + 1e-14 * np.eye(3)
        step = np.linalg.solve(H, g)
        ref_new = np.clip(ref - step, 0.0, 1.0)
        if np.max(np.abs(ref_new - ref)) < 1e-13:
            ref = ref_new
            break
        ref = ref_new
    N, _ = fem.trilinear_shapes(ref[None, :])
    return ref, np.linalg.norm(N[0] @ corner_xyz - x)


REF_TOL = 1e-9


def project_displacement(source_space, d_source, target_points,
                         n_candidates=12):
    """Evaluate a displacement field from an independent (non-nested) mesh
    at the given target points.

    Interior points are located by candidate search over nearby cells plus
    an inverse trilinear map; points outside the source mesh receive the
    field value at the closest point of the closest cell.  Returns
    (values (n, 3 or field ncomp), interior mask).
    """
    mesh = source_space.mesh
    if mesh.n_cells == 0:
        raise ValueError("empty source mesh")
    d = np.asarray(d_source, dtype=float)
    pts = np.atleast_2d(np.asarray(target_points, dtype=float))
    centroids = mesh.cell_coords().mean(axis=1)
    tree = cKDTree(centroids)
    k = min(n_candidates, mesh.n_cells)
    _, cand = tree.query(pts, k=k)
    cand = np.atleast_2d(cand)
    xyz = mesh.cell_coords()

    out = np.empty((pts.shape[0],) + d.shape[1:])
    interior = np.zeros(pts.shape[0], dtype=bool)
    for n, x in enumerate(pts):
        hit = None
        for c in cand[n]:
            ref, ok = _inverse_trilinear(xyz[c], x)
            if ok and np.all(ref > -REF_TOL) and np.all(ref < 1.0 + REF_TOL):
                hit = (c, np.clip(ref, 0.0, 1.0))
                break
        if hit is None:
            best = (np.inf, None, None)
            for c in cand[n]:
                ref, dist = _closest_point_on_cell(xyz[c], x)
                if dist < best[0]:
                    best = (dist, c, ref)
            hit = (best[1], best[2])
        else:
            interior[n] = True
        c, ref = hit
        N, _ = source_space.eval_basis(ref[None, :])
        out[n] = N[0] @ d[source_space.dof_map[c]]
    return out, interior
