import numpy as np
import pytest
import scipy.sparse as sp

from cardioem import coupling0d, fem, geometry, mechanics

GEOM = dict(r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
            base_truncation_height=18.0)
RES = dict(n_transmural=1, n_circumferential=4, n_longitudinal=3)


@pytest.fixture(scope="module")
def model():
    mesh = geometry.generate_idealized_lv(GEOM, RES)
    space = fem.FeSpace(mesh, 1, quad_points=3)
    frames = geometry.generate_fibers(
        mesh, space.quadrature_points().reshape(-1, 3))
    assembler = mechanics.MechAssembler(space, frames)
    cavity = coupling0d.CavityGeometry(space)
    return assembler, cavity


def test_params_and_state_validation():
    with pytest.raises(ValueError):
        coupling0d.CircParams(r_min=-1.0)
    with pytest.raises(ValueError):
        coupling0d.CircState(np.zeros(5))


def test_chamber_activation_pulse():
    act = lambda t: coupling0d.chamber_activation(t, 0.1, 0.2, 0.8)
    assert act(0.05) == 0.0
    assert act(0.2) == pytest.approx(1.0)
    assert act(0.35) == 0.0
    assert act(0.2 + 0.8) == pytest.approx(1.0)  # periodic


def test_valve_flux_diode():
    p = coupling0d.CircParams()
    assert coupling0d.valve_flux(10.0, p) == pytest.approx(10.0 / p.r_min)
    assert coupling0d.valve_flux(-10.0, p) == pytest.approx(-10.0 / p.r_max)


def test_total_blood_volume_conserved_under_rk4():
    p = coupling0d.CircParams()
    state = coupling0d.CircState.physiological(v_lv=120.0)
    v0 = state.total_volume(p)
    for _ in range(2000):
        state = coupling0d.rk4_step(state, 2.5e-4, 12.0, p)
    assert abs(state.total_volume(p) - v0) < 1e-9 * v0


def test_rk4_matches_scipy_reference_on_smooth_phase():
    # hold the system away from valve switching and compare against a tiny
    # reference step integration
    p = coupling0d.CircParams()
    state = coupling0d.CircState.physiological(v_lv=120.0)
    tau = 1e-3
    coarse = state.copy()
    for k in range(50):
        coarse = coupling0d.rk4_step(coarse, tau, 12.0, p)
    fine = state.copy()
    for k in range(800):
        fine = coupling0d.rk4_step(fine, tau / 16, 12.0, p)
    assert np.max(np.abs(coarse.vec - fine.vec)) < 1e-6 * np.max(
        np.abs(fine.vec))


def test_cavity_volume_converges_to_analytic():
    a = GEOM["r_endo_short"] * 1e-3
    c = GEOM["r_endo_long"] * 1e-3
    h = GEOM["base_truncation_height"] * 1e-3
    exact = np.pi * a ** 2 * (h - h ** 3 / (3 * c ** 2) + 2 * c / 3) * 1e6
    errs = []
    for nt, nc, nl in ((1, 4, 3), (1, 8, 5), (2, 12, 8)):
        res = dict(n_transmural=nt, n_circumferential=nc, n_longitudinal=nl)
        mesh = geometry.generate_idealized_lv(GEOM, res)
        space = fem.FeSpace(mesh, 1)
        cav = coupling0d.CavityGeometry(space)
        v = cav.volume(np.zeros((space.n_dofs, 3)))
        errs.append(abs(v - exact) / exact)
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.06


def test_cavity_volume_scales_with_uniform_dilation(model):
    _, cavity = model
    n = cavity.space.n_dofs
    v0 = cavity.volume(np.zeros((n, 3)))
    c = 1.05
    d = (c - 1.0) * cavity.space.dof_points
    assert cavity.volume(d) == pytest.approx(c ** 3 * v0, rel=1e-10)


def test_volume_gradient_matches_finite_differences(model):
    _, cavity = model
    rng = np.random.default_rng(0)
    n = cavity.space.n_dofs
    d = 1e-4 * rng.standard_normal((n, 3))
    g = cavity.volume_gradient(d)
    h = 1e-7
    for _ in range(4):
        v = rng.standard_normal((n, 3))
        v /= np.max(np.abs(v))
        fd = (cavity.volume(d + h * v) - cavity.volume(d - h * v)) / (2 * h)
        assert np.sum(g * v) == pytest.approx(fd, rel=1e-6, abs=1e-10)


def test_schur_solve_matches_dense_on_random_systems():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = 30
        B = rng.standard_normal((n, n))
        A = sp.csr_matrix(B @ B.T + n * np.eye(n))
        b = rng.standard_normal(n)
        c = rng.standard_normal(n)
        ws = coupling0d.SaddleWorkspace(A, b, c, gmres_tol=1e-13)
        r_d = rng.standard_normal(n)
        r_p = rng.standard_normal()
        dd, dp = coupling0d.schur_solve(ws, r_d, r_p)
        # dense block elimination of [[A, b], [c^T, 0]] [dd; dp] = -[r_d; r_p]
        K = np.block([[A.toarray(), b[:, None]], [c[None, :], np.zeros((1, 1))]])
        ref = np.linalg.solve(K, -np.concatenate([r_d, [r_p]]))
        assert np.max(np.abs(dd - ref[:n])) < 1e-10 * max(
            1.0, np.max(np.abs(ref)))
        assert abs(dp - ref[n]) < 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_coupled_step_stationary_at_equilibrium(model):
    assembler, cavity = model
    space = assembler.space
    nqp = (space.mesh.n_cells, space.qp_ref.shape[0])
    ta = np.zeros(nqp)
    p_lv = 400.0
    d_eq = mechanics.pressure_ramp_init(assembler, ta, p_lv, n_steps=4)
    state = mechanics.MechState(d_eq, d_eq.copy(), p_lv)
    v_target = cavity.volume(d_eq)
    d_new, p_new, ws = coupling0d.coupled_step(
        assembler, cavity, state, ta, v_target, 2.5e-4)
    assert ws.n_w_solves == 1
    assert abs(cavity.volume(d_new) - v_target) <= 1e-8
    assert np.max(np.abs(d_new - d_eq)) < 1e-6
    assert abs(p_new - p_lv) < 0.02 * p_lv


def test_coupled_step_tracks_volume_target(model):
    assembler, cavity = model
    space = assembler.space
    nqp = (space.mesh.n_cells, space.qp_ref.shape[0])
    ta = np.zeros(nqp)
    p_lv = 400.0
    d_eq = mechanics.pressure_ramp_init(assembler, ta, p_lv, n_steps=4)
    state = mechanics.MechState(d_eq, d_eq.copy(), p_lv)
    v0 = cavity.volume(d_eq)
    # ask for a slightly larger cavity: pressure must rise
    d_new, p_new, ws = coupling0d.coupled_step(
        assembler, cavity, state, ta, v0 + 0.05, 2.5e-4)
    assert abs(cavity.volume(d_new) - (v0 + 0.05)) <= 1e-8
    assert p_new > p_lv
    assert ws.n_w_solves == 1
