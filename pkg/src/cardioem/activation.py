"""Active-force state on the coarse mesh.

Three pieces: an explicit pointwise kinetics update for the activation
state s driven by calcium and sarcomere length, a screened-Laplacian solve
that regularizes the sarcomere length field at the mesh scale, and the
algebraic map from s to active tension.

The kinetics model is a scalar first-order relaxation toward a smooth
sigmoidal target in calcium, modulated affinely by sarcomere length
(length-dependent activation).  It is a stand-in behind the same interface
as data-driven surrogates: s is driven by (Ca, SL) and Ta = Ta_max * G(s).
"""

from dataclasses import dataclass

import numpy as np

from . import fem


@dataclass
class ActivationParams:
    ta_max: float = 180e3     # Pa
    sl0: float = 2.0          # um, slack sarcomere length
    delta_sl: float = None    # m, regularization length; default: coarse h
    tau_act: float = 0.06     # s, activation relaxation time
    ca50: float = 0.5         # calcium at half target activation
    ca_width: float = 0.1     # sigmoid width in calcium
    k_sl: float = 0.5         # per um, length-dependence slope
    gmres_tol: float = 1e-10

    def __post_init__(self):
        if self.ta_max <= 0 or self.sl0 <= 0 or self.tau_act <= 0:
            raise ValueError("ta_max, sl0 and tau_act must be positive")


class ActivationState:
    """Nodal activation state s, sarcomere length SL (um) and active
    tension Ta (Pa) on the coarse mesh."""

    def __init__(self, s, sl, ta):
        self.s = np.asarray(s, dtype=float)
        self.sl = np.asarray(sl, dtype=float)
        self.ta = np.asarray(ta, dtype=float)

    @classmethod
    def resting(cls, n_dofs, params):
        return cls(np.zeros(n_dofs), np.full(n_dofs, params.sl0),
                   np.zeros(n_dofs))


def fiber_stretch(space, d_values, f0_qp, coords=None):
    """sqrt(I_4f) = |F f0| at every quadrature point, shape (nc, nq)."""
    if d_values is None or not np.any(d_values):
        nc = space.mesh.n_cells
        return np.ones((nc, space.qp_ref.shape[0]))
    F, _ = fem.compute_deformation(space, d_values, coords=coords)
    nc, nq = F.shape[:2]
    f = f0_qp.reshape(nc, nq, 3)
    Ff = np.einsum("cqij,cqj->cqi", F, f)
    return np.sqrt(np.einsum("cqi,cqi->cq", Ff, Ff))


def sl_solve(space, d_values, f0_qp, params, coords=None):
    """Regularized sarcomere length: solve
    (M + delta_sl^2 K) SL = integral of sl0 sqrt(I_4f) against the basis,
    with natural boundary conditions.  Constant loads are reproduced
    exactly (K annihilates constants)."""
    delta = params.delta_sl
    if delta is None:
        delta = space.mesh.mean_diameter()
    M = fem.assemble_mass(space, coords=coords)
    K = fem.assemble_stiffness(space, coords=coords)
    load = params.sl0 * fiber_stretch(space, d_values, f0_qp, coords=coords)
    _, detJ = space.phys_grads(coords=coords)
    w = space.qp_w[None, :] * detJ
    elem = np.einsum("cq,cq,qi->ci", w, load, space.N)
    rhs = np.zeros(space.n_dofs)
    np.add.at(rhs, space.dof_map.ravel(), elem.ravel())
    sl, _ = fem.solve_gmres(M + delta ** 2 * K, rhs, abs_tol=params.gmres_tol)
    if np.any(sl <= 0.0):
        raise fem.SolverError("nonpositive sarcomere length", 0.0, 0)
    return sl


def activation_target(ca, sl, params):
    """Steady-state activation a(Ca, SL): sigmoid in calcium rescaled to
    vanish at Ca = 0, scaled by the length-dependence factor."""
    sig = lambda x: 1.0 / (1.0 + np.exp(-(x - params.ca50) / params.ca_width))
    s0 = sig(0.0)
    base = np.maximum(0.0, (sig(ca) - s0) / (1.0 - s0))
    length = np.maximum(0.0, 1.0 + params.k_sl * (sl - params.sl0))
    return base * length


def activation_step(s, ca, sl, tau, params):
    """Explicit update s_new = s + tau (a(Ca, SL) - s)/tau_act; pointwise,
    no system is assembled or solved."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s_new = s + (tau / params.tau_act) * (activation_target(ca, sl, params) - s)
    if not np.all(np.isfinite(s_new)):
        raise RuntimeError("non-finite activation state")
    return s_new


def saturation(s):
    """G(s): clamp into [0, 1]."""
    return np.clip(s, 0.0, 1.0)


def compute_ta(s, params):
    """Active tension Ta = Ta_max G(s), nodally (Pa)."""
    return params.ta_max * saturation(s)
