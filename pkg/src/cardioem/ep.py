"""Monodomain electrophysiology on the fine mesh.

Semi-implicit IMEX stepping: gating variables are updated implicitly (closed
form, the gate dynamics are linear in w at fixed u), concentrations
explicitly, and the potential by a single CG solve per substep.  The ionic
reaction term is assembled with ionic current interpolation (nodal
evaluation, then interpolation to quadrature points).

The default ionic model is a reduced cubic excitable model with one gate and
one calcium-like concentration; it is a structural stand-in exposing the
same interface contract as a full human ventricular model.
"""

from dataclasses import dataclass, field

import numpy as np

from . import fem


class StateBlowUpError(RuntimeError):
    pass


@dataclass
class ConductivityParams:
    """Fiber/sheet/normal conductivities, m^2/s."""
    sigma_l: float = 0.7643e-3
    sigma_t: float = 0.3494e-3
    sigma_n: float = 0.1125e-3

    def __post_init__(self):
        if not (self.sigma_l >= self.sigma_t >= self.sigma_n > 0.0):
            raise ValueError("conductivities must satisfy sigma_l >= sigma_t"
                             " >= sigma_n > 0")


@dataclass
class StimulusParams:
    """Spatially Gaussian applied current, gated in time each heartbeat."""
    peak: float = 35.0            # V/s
    duration: float = 3e-3        # s
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sigma: float = 2.5e-3         # m, spatial width
    period: float = 0.8           # s

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if self.peak < 0 or self.duration <= 0:
            raise ValueError("stimulus peak must be >= 0 and duration > 0")


def default_stimulus_centers(geom, n_sites=3):
    """Endocardial stimulation sites, evenly spaced in azimuth at the
    mid apex-base height."""
    a, c = geom["r_endo_short"], geom["r_endo_long"]
    h = geom["base_truncation_height"]
    z_mid = 0.5 * (h - c)
    rho = a * np.sqrt(max(0.0, 1.0 - (z_mid / c) ** 2))
    phis = 2.0 * np.pi * np.arange(n_sites) / n_sites
    return np.stack([rho * np.cos(phis), rho * np.sin(phis),
                     np.full(n_sites, z_mid)], axis=1)


def applied_current(params, t, points):
    """Value of the applied current at time t and the given points."""
    pts = np.atleast_2d(points)
    t_mod = t % params.period
    if t_mod > params.duration or params.centers.shape[0] == 0:
        return np.zeros(pts.shape[0])
    d2 = ((pts[:, None, :] - params.centers[None, :, :]) ** 2).sum(axis=2)
    return params.peak * np.exp(-d2 / (2.0 * params.sigma ** 2)).sum(axis=1)


class ReducedIonicModel:
    """Cubic excitable model with one implicit gate and one calcium-like
    concentration.

    du/dt = -[g u (u - a)(u - 1) + c_z z u] + stimulus
    dw/dt = (w_inf(u) - w) / tau_w(u)
    dz/dt = (ca_amp w - z) / tau_ca

    The current splits as I_ion = i_ion_u(u_prev, z) u + i_ion_rem(u_prev)
    with i_ion_u = c_z z >= 0, which keeps the potential system symmetric
    positive definite.
    """

    n_w = 1
    n_z = 1
    calcium_index = 0

    # tau_ca must let the calcium surrogate decay within one beat: residual
    # z adds a repolarizing leak c_z z u that blocks re-excitation at the
    # next stimulus once z exceeds a few percent
    def __init__(self, g=2000.0, a=0.05, c_z=500.0, tau_ca=0.08,
                 ca_amp=1.0, w_gate_center=0.3, w_gate_width=0.05):
        self.g = g
        self.a = a
        self.c_z = c_z
        self.tau_ca = tau_ca
        self.ca_amp = ca_amp
        self.w_gate_center = w_gate_center
        self.w_gate_width = w_gate_width

    def w_inf(self, u):
        return 1.0 / (1.0 + np.exp(-(u - self.w_gate_center) / self.w_gate_width))

    def tau_w(self, u):
        # faster opening at depolarized potentials, slower closing at rest
        return 0.06 - 0.04 / (1.0 + np.exp(-(u - self.w_gate_center)
                                           / self.w_gate_width))

    def H(self, u, w):
        return ((self.w_inf(u) - w[:, 0]) / self.tau_w(u))[:, None]

    def G(self, u, w, z):
        return ((self.ca_amp * w[:, 0] - z[:, 0]) / self.tau_ca)[:, None]

    def i_ion_u(self, u_prev, z):
        """Coefficient of the implicitly treated, linear-in-u current."""
        return self.c_z * z[:, 0]

    def i_ion_rem(self, u_prev, z):
        """Explicitly treated remainder of the ionic current."""
        u = u_prev
        return self.g * u * (u - self.a) * (u - 1.0)

    def i_ion(self, u, w, z):
        return self.i_ion_u(u, z) * u + self.i_ion_rem(u, z)

    def resting_state(self):
        u0 = 0.0
        w0 = self.w_inf(np.array([u0]))[0]
        z0 = self.ca_amp * w0
        return u0, np.array([w0]), np.array([z0])


def default_ionic_model():
    return ReducedIonicModel()


class EpState:
    """Nodal transmembrane potential, gates and concentrations at time t."""

    def __init__(self, u, w, z, t=0.0):
        self.u = np.asarray(u, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.z = np.asarray(z, dtype=float)
        self.t = float(t)
        self.clamp_count = 0

    @classmethod
    def resting(cls, model, n_dofs, t=0.0):
        u0, w0, z0 = model.resting_state()
        return cls(np.full(n_dofs, u0), np.tile(w0, (n_dofs, 1)),
                   np.tile(z0, (n_dofs, 1)), t)


def conductivity_tensor(frames, sigma):
    """Orthotropic diffusion tensor at each point from the fiber frame."""
    return (sigma.sigma_l * np.einsum("pi,pj->pij", frames.f0, frames.f0)
            + sigma.sigma_t * np.einsum("pi,pj->pij", frames.s0, frames.s0)
            + sigma.sigma_n * np.einsum("pi,pj->pij", frames.n0, frames.n0))


def assemble_stiffness_deformed(space, d_values, frames_qp, sigma, D0=None):
    """K(d): stiffness with the orthotropic conductivity pulled back through
    the interpolated deformation, J F^-1 D_M F^-T.  D0 may carry the
    precomputed undeformed tensor at quadrature points."""
    nc = space.mesh.n_cells
    nq = space.qp_ref.shape[0]
    if D0 is None:
        D0 = conductivity_tensor(frames_qp, sigma).reshape(nc, nq, 3, 3)
    D = D0
    if d_values is not None and np.any(d_values):
        F, J = fem.compute_deformation(space, d_values)
        Finv = np.linalg.inv(F)
        D = J[..., None, None] * np.einsum(
            "cqik,cqkl,cqjl->cqij", Finv, D, Finv, optimize=True)
    return fem.assemble_stiffness(space, D)


def assemble_ionic_current_ici(space, nodal_values):
    """Reaction vector by ionic current interpolation: nodal values are
    interpolated at the quadrature points by the shape functions and tested
    against the basis (equals M @ nodal for matching quadrature)."""
    _, detJ = space.phys_grads()
    w = space.qp_w[None, :] * detJ
    vq = space.at_quadrature(np.asarray(nodal_values, dtype=float))
    elem = np.einsum("cq,cq,qi->ci", w, vq, space.N)
    out = np.zeros(space.n_dofs)
    np.add.at(out, space.dof_map.ravel(), elem.ravel())
    return out


class MonodomainSolver:
    """Fine-mesh EP block of the staggered scheme.

    The stiffness K(d) is rebuilt only when a new displacement is supplied
    (once per coarse time step); each substep then performs the closed-form
    gate update, the explicit concentration update, and one CG solve for the
    potential.
    """

    def __init__(self, space, frames_qp, sigma=None, model=None,
                 stimulus=None, cg_tol=1e-10):
        self.space = space
        self.frames_qp = frames_qp
        self.sigma = sigma or ConductivityParams()
        self.model = model or default_ionic_model()
        self.stimulus = stimulus or StimulusParams()
        self.cg_tol = cg_tol
        self.M = fem.assemble_mass(space)
        nc, nq = space.mesh.n_cells, space.qp_ref.shape[0]
        self._D0 = conductivity_tensor(frames_qp, self.sigma).reshape(
            nc, nq, 3, 3)
        self.K = assemble_stiffness_deformed(space, None, frames_qp,
                                             self.sigma, D0=self._D0)
        self.n_linear_solves = 0
        self.n_stiffness_builds = 1

    def set_displacement(self, d_values):
        """Rebuild K(d) from the interpolated displacement (call once per
        mechanics time step)."""
        self.K = assemble_stiffness_deformed(self.space, d_values,
                                             self.frames_qp, self.sigma,
                                             D0=self._D0)
        self.n_stiffness_builds += 1

    def ionic_step(self, state, tau):
        """Implicit gate update (closed form) and explicit concentration
        update; modifies state in place and returns (w_new, z_new)."""
        if tau <= 0:
            raise ValueError("tau must be positive")
        m = self.model
        u = state.u
        winf = m.w_inf(u)
        tw = m.tau_w(u)
        w_new = (state.w + (tau * winf / tw)[:, None]) / (1.0 + tau / tw)[:, None]
        z_new = state.z + tau * m.G(u, state.w, state.z)
        if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(z_new))):
            bad = int(np.argmax(~np.isfinite(w_new.sum(axis=1)
                                             + z_new.sum(axis=1))))
            raise StateBlowUpError(f"non-finite ionic state at dof {bad}")
        clipped = np.clip(w_new, 0.0, 1.0)
        state.clamp_count += int(np.count_nonzero(clipped != w_new))
        state.w = clipped
        state.z = z_new
        return state.w, state.z

    def monodomain_step(self, state, tau, t_new):
        """One semi-implicit potential update to time t_new; (w, z) must
        already be at the new sublevel."""
        m = self.model
        u_old = state.u
        c = m.i_ion_u(u_old, state.z)
        A = self.M / tau + self.K + fem.assemble_mass(self.space, c)
        rhs = (self.M @ (u_old / tau)
               - self.M @ m.i_ion_rem(u_old, state.z)
               + self.M @ applied_current(self.stimulus, t_new,
                                          self.space.dof_points))
        u_new, _ = fem.solve_cg(A, rhs, abs_tol=self.cg_tol)
        self.n_linear_solves += 1
        if not np.all(np.isfinite(u_new)):
            raise StateBlowUpError("non-finite potential")
        state.u = u_new
        state.t = t_new
        return u_new

    def substep(self, state, tau, t_new):
        """Full EP substep in the mandated order: gates/concentrations
        first, then the potential."""
        self.ionic_step(state, tau)
        return self.monodomain_step(state, tau, t_new)


class ActivationMap:
    """Online upward-threshold-crossing detector; nodes that never activate
    stay NaN."""

    def __init__(self, n_dofs, threshold=0.5):
        self.threshold = threshold
        self.times = np.full(n_dofs, np.nan)
        self._prev_u = None
        self._prev_t = None

    def update(self, t, u):
        if self._prev_u is not None:
            crossed = (np.isnan(self.times) & (self._prev_u < self.threshold)
                       & (u >= self.threshold))
            if np.any(crossed):
                # linear interpolation of the crossing instant
                frac = ((self.threshold - self._prev_u[crossed])
                        / (u[crossed] - self._prev_u[crossed]))
                self.times[crossed] = self._prev_t + frac * (t - self._prev_t)
        self._prev_u = u.copy()
        self._prev_t = t
