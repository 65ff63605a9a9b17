"""End-to-end acceptance suite.

Each test checks one acceptance criterion of the solver and records a
single pass/fail line (echoed in the terminal summary).  The heavy
fixtures (a three-beat baseline run and the six scenario variants) are
shared across the tests that need them.
"""

import inspect
import time

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cardioem import (coupling0d, driver, ep, fem, geometry, intergrid,
                      mechanics, refconfig)
from cardioem.coupling0d import PA_PER_MMHG
from conftest import record
from test_fem import box_mesh

GEOM = dict(r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
            base_truncation_height=18.0)
RES_SMALL = dict(n_transmural=1, n_circumferential=4, n_longitudinal=3)


def small_lv():
    mesh = geometry.generate_idealized_lv(GEOM, RES_SMALL)
    space = fem.FeSpace(mesh, 1, quad_points=3)
    frames = geometry.generate_fibers(
        mesh, space.quadrature_points().reshape(-1, 3))
    return mesh, space, frames


@pytest.fixture(scope="module")
def baseline():
    cfg = driver.RunConfig(n_beats=3)
    model = driver.Model(cfg)
    t0 = time.time()
    series, info = driver.run_heartbeat(cfg, model=model)
    info["wall"] = time.time() - t0
    return cfg, model, series, info


@pytest.fixture(scope="module")
def scenarios(baseline):
    cfg, model, series, info = baseline
    results = {"baseline": driver.summarize(series)}
    wall = info["wall"]
    for name in driver.SCENARIOS:
        for direction in (+1, -1):
            c = driver.apply_scenario(cfg, name, direction)
            t0 = time.time()
            s, _ = driver.run_heartbeat(c, model=model)
            wall += time.time() - t0
            results[c.label] = driver.summarize(s)
    results["_wall_time"] = wall
    return results


def test_01_reference_recovery_round_trip():
    # inflate a known unloaded shape quasi-statically, hand the deformed
    # coordinates to the recovery, and compare with the original vertices
    t0 = time.time()
    mesh, space, frames = small_lv()
    params = mechanics.MechParams()
    nqp = (mesh.n_cells, space.qp_ref.shape[0])
    ta = np.zeros(nqp)
    p = 10.0 * PA_PER_MMHG
    asm = mechanics.MechAssembler(space, frames, params)
    d = mechanics.pressure_ramp_init(asm, ta, p, n_steps=10)
    x_loaded = mesh.vertices + d[fem.vertex_dofs(space)]
    loaded = geometry.HexMesh(x_loaded, mesh.cells, mesh.boundary_facets,
                              geom=mesh.geom)
    lspace = fem.FeSpace(loaded, 1, quad_points=3)
    # the material frames are data of the problem, shared with the forward
    # inflation (dof numbering depends only on the connectivity)
    ok, x0 = refconfig.reference_configuration(lspace, frames, params, p, ta)
    err = np.max(np.abs(x0 - mesh.vertices))
    bound = 1e-4 * np.max(np.abs(d))
    elapsed = time.time() - t0
    passed = ok and err <= bound and elapsed <= 600.0
    assert record(1, passed,
                  f"reference recovery at 10 mmHg: error {err:.2e} m "
                  f"<= {bound:.2e} m, {elapsed:.0f} s")


def test_02_fixed_point_robustness_separation():
    # a pressure at which the plain fixed point diverges but the
    # load-continuation variant converges on the same mesh
    mesh, space, frames = small_lv()
    params = mechanics.MechParams()
    ta = np.zeros((mesh.n_cells, space.qp_ref.shape[0]))
    p_mmhg = 60.0
    p = p_mmhg * PA_PER_MMHG
    ok_base, _ = refconfig.reference_configuration_base(space, frames,
                                                       params, p, ta)
    ok_ramp, _ = refconfig.reference_configuration(space, frames, params,
                                                  p, ta)
    passed = (not ok_base) and ok_ramp
    assert record(2, passed,
                  f"at {p_mmhg:.0f} mmHg plain fixed point fails "
                  f"({ok_base}) while continuation succeeds ({ok_ramp})")


def test_03_volumetric_constraint_over_heartbeat(baseline):
    cfg, model, series, info = baseline
    t = np.asarray(series.t)
    last = t >= (cfg.n_beats - 1) * cfg.period - 1e-9
    dv = np.abs(np.asarray(series.v_lv_3d)[last]
                - np.asarray(series.v_lv_0d)[last])
    # all four beat phases go through the same coupled step (structural)
    src = inspect.getsource(driver.run_heartbeat)
    single_path = src.count("coupled_step(") == 1
    passed = dv.max() <= 1e-3 and single_path
    assert record(3, passed,
                  f"max |V_3D - V_0D| = {dv.max():.2e} mL <= 1e-3 over the "
                  f"final beat, single coupling path: {single_path}")


def test_04_schur_reduction_and_single_w_solve(baseline):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(10, 51))
        B = rng.standard_normal((n, n))
        A = B @ B.T + n * np.eye(n)
        b = rng.standard_normal(n)
        c = rng.standard_normal(n)
        rd = rng.standard_normal(n)
        rp = rng.standard_normal()
        ws = coupling0d.SaddleWorkspace(sp.csc_matrix(A), b, c,
                                        gmres_tol=1e-13)
        dd, dp = coupling0d.schur_solve(ws, rd, rp)
        K = np.block([[A, b[:, None]], [c[None, :], np.zeros((1, 1))]])
        ref = np.linalg.solve(K, -np.concatenate([rd, [rp]]))
        err = np.linalg.norm(np.concatenate([dd, [dp]]) - ref) \
            / np.linalg.norm(ref)
        worst = max(worst, err)
    counters = baseline[3]["counters"]
    one_w = counters["n_w_solves"] == counters["n_steps"]
    passed = worst <= 1e-10 and one_w
    assert record(4, passed,
                  f"Schur vs dense: worst relative error {worst:.2e} "
                  f"<= 1e-10; one w-solve per step in full runs: {one_w}")


def test_05_rk4_convergence_order():
    # valve-free RLC subnetwork: chamber volumes and the activation clock
    # are frozen so every valve keeps its branch and the system is a
    # smooth linear network
    params = coupling0d.CircParams()
    state0 = coupling0d.CircState.physiological(v_lv=60.0)
    chambers = state0.vec[:4].copy()

    def rlc_rhs(t, vec, p_lv, prm):
        v = vec.copy()
        v[:4] = chambers
        dvec = coupling0d.circulation_rhs(0.3, v, p_lv, prm)
        dvec[:4] = 0.0
        return dvec

    def integrate(tau):
        s = coupling0d.CircState(state0.vec.copy())
        for _ in range(int(round(0.05 / tau))):
            s = coupling0d.rk4_step(s, tau, 40.0, params, rhs=rlc_rhs)
        return s.vec

    tau = 1e-3
    ref = integrate(tau / 16)
    e1 = np.linalg.norm(integrate(tau) - ref)
    e2 = np.linalg.norm(integrate(tau / 2) - ref)
    order = np.log2(e1 / e2)
    passed = abs(order - 4.0) <= 0.2
    assert record(5, passed, f"RK4 observed order {order:.2f} in 4 +- 0.2")


def _bar_conduction_velocity(tau, transverse, t_end):
    # 20 mm bar, 0.5 mm cells; a plane wave started at one end, velocity
    # measured between activation times of two interior cross sections
    lx, w = 20e-3, 1e-3
    mesh = box_mesh(40, 2, 2, lx=lx, ly=w, lz=w)
    space = fem.FeSpace(mesh, 1)
    nq = mesh.n_cells * space.qp_ref.shape[0]
    f0, s0, n0 = np.zeros((nq, 3)), np.zeros((nq, 3)), np.zeros((nq, 3))
    if transverse:
        # propagation along the sheet axis (conductivity sigma_t)
        f0[:, 1], s0[:, 0], n0[:, 2] = 1.0, 1.0, 1.0
    else:
        f0[:, 0], s0[:, 1], n0[:, 2] = 1.0, 1.0, 1.0
    frames = geometry.FiberFrame(f0, s0, n0)
    stim = ep.StimulusParams(peak=300.0, duration=3e-3, sigma=3e-3,
                             centers=np.array([[0.0, w / 2, w / 2]]),
                             period=10.0)
    solver = ep.MonodomainSolver(space, frames, stimulus=stim)
    state = ep.EpState.resting(solver.model, space.n_dofs)
    amap = ep.ActivationMap(space.n_dofs)
    x = space.dof_points[:, 0]
    probes = [np.abs(x - 8e-3) < 1e-6, np.abs(x - 16e-3) < 1e-6]
    t = 0.0
    while t < t_end - 0.5 * tau:
        t += tau
        solver.substep(state, tau, t)
        amap.update(t, state.u)
        if not np.any(np.isnan(amap.times[probes[1]])):
            break
    t1 = np.mean(amap.times[probes[0]])
    t2 = np.mean(amap.times[probes[1]])
    assert np.isfinite(t1) and np.isfinite(t2)
    return 8e-3 / (t2 - t1)


def test_06_ep_rest_stability_and_conduction_velocity():
    # zero-stimulus rest stability over 0.8 s
    space = fem.FeSpace(box_mesh(4, 2, 2, lx=4e-3, ly=2e-3, lz=2e-3), 1)
    nq = space.mesh.n_cells * space.qp_ref.shape[0]
    f0, s0, n0 = np.zeros((nq, 3)), np.zeros((nq, 3)), np.zeros((nq, 3))
    f0[:, 0], s0[:, 1], n0[:, 2] = 1.0, 1.0, 1.0
    solver = ep.MonodomainSolver(space, geometry.FiberFrame(f0, s0, n0),
                                 stimulus=ep.StimulusParams(peak=0.0))
    state = ep.EpState.resting(solver.model, space.n_dofs)
    u0 = state.u.copy()
    tau_rest = 1e-3
    for k in range(int(round(0.8 / tau_rest))):
        solver.substep(state, tau_rest, (k + 1) * tau_rest)
    drift = np.max(np.abs(state.u - u0))

    # anisotropic conduction velocity ratio and tau convergence
    sig = ep.ConductivityParams()
    target = np.sqrt(sig.sigma_l / sig.sigma_t)
    cv_l = {tau: _bar_conduction_velocity(tau, False, 0.06)
            for tau in (2e-4, 1e-4, 5e-5)}
    cv_t = _bar_conduction_velocity(1e-4, True, 0.09)
    ratio = cv_l[1e-4] / cv_t
    order = np.log2((cv_l[2e-4] - cv_l[1e-4]) / (cv_l[1e-4] - cv_l[5e-5]))
    passed = (drift <= 1e-8 and abs(ratio / target - 1.0) <= 0.10
              and order >= 0.8)
    assert record(6, passed,
                  f"rest drift {drift:.1e} <= 1e-8; CV ratio {ratio:.3f} "
                  f"within 10% of {target:.3f}; CV(tau) order {order:.2f} "
                  f">= 0.8")


def test_07_mechanics_tangents_and_quasi_newton():
    rng = np.random.default_rng(11)
    params = mechanics.MechParams()
    # stress vs central differences of the energy density at random states
    f0 = rng.standard_normal((5, 3))
    f0 /= np.linalg.norm(f0, axis=1, keepdims=True)
    s0 = rng.standard_normal((5, 3))
    s0 -= (s0 * f0).sum(axis=1, keepdims=True) * f0
    s0 /= np.linalg.norm(s0, axis=1, keepdims=True)
    n0 = np.cross(f0, s0)
    F = np.eye(3) + 0.1 * rng.standard_normal((5, 3, 3))
    F *= np.sign(np.linalg.det(F))[:, None, None]
    S = mechanics.second_pk(F, f0, s0, n0, np.zeros(5), params)
    P = np.einsum("pik,pkj->pij", F, S)
    h = 1e-7
    err_p = 0.0
    for i in range(3):
        for j in range(3):
            dF = np.zeros((3, 3))
            dF[i, j] = h
            fd = (mechanics._strain_energy(F + dF, f0, s0, n0, params)
                  - mechanics._strain_energy(F - dF, f0, s0, n0, params)) \
                / (2 * h)
            err_p = max(err_p, np.max(np.abs(P[:, i, j] - fd)))
    rel_p = err_p / max(1.0, np.max(np.abs(P)))

    # assembled Jacobian vs directional differences at 5 random states
    mesh, space, frames = small_lv()
    asm = mechanics.MechAssembler(space, frames, params)
    n = space.n_dofs
    nqp = (mesh.n_cells, space.qp_ref.shape[0])
    ta = np.zeros(nqp)
    rel_j = 0.0
    for _ in range(5):
        d = 1e-4 * rng.standard_normal((n, 3))
        J = asm.jacobian_static(d, ta, 0.0)
        v = rng.standard_normal((n, 3))
        v /= np.max(np.abs(v))
        fd = (asm.residual_static(d + h * v, ta, 0.0)
              - asm.residual_static(d - h * v, ta, 0.0)).ravel() / (2 * h)
        Jv = J @ v.ravel()
        rel_j = max(rel_j, np.max(np.abs(Jv - fd))
                    / max(1.0, np.max(np.abs(Jv))))

    # frozen-Jacobian iteration vs full Newton on the same inflation
    p = 4.0 * PA_PER_MMHG
    ok, d_full = mechanics.quasi_static_solve(asm, p, ta, gmres_tol=1e-10,
                                              abs_tol=1e-9)
    d_qn = np.zeros((n, 3))
    lu = spla.splu(asm.jacobian_static(d_qn, ta, p).tocsc())
    for _ in range(200):
        r = asm.residual_static(d_qn, ta, p)
        if np.linalg.norm(r) <= 1e-9:
            break
        d_qn = d_qn - lu.solve(r.ravel()).reshape(-1, 3)
    diff = np.max(np.abs(d_qn - d_full))
    passed = rel_p <= 1e-6 and rel_j <= 1e-5 and ok and diff <= 1e-7
    assert record(7, passed,
                  f"stress FD {rel_p:.1e} <= 1e-6; Jacobian FD {rel_j:.1e} "
                  f"<= 1e-5; quasi-Newton vs Newton {diff:.1e} m <= 1e-7")


def test_08_intergrid_exactness():
    coarse = geometry.generate_idealized_lv(GEOM, RES_SMALL)
    nested = geometry.refine_octree(coarse, 1)
    sc = fem.FeSpace(nested.coarse, 1)
    sf = fem.FeSpace(nested.fine, 1)
    T = intergrid.build_transfer(sc, sf, nested)
    R = intergrid.build_transfer(sf, sc, nested)
    rng = np.random.default_rng(3)
    u = rng.standard_normal(sc.n_dofs)
    err_p = np.max(np.abs(R.apply(T.apply(u)) - u))
    # pointwise exactness of the prolongation for a trilinear-in-cell field
    x = sf.dof_points
    v = T.apply(sc.dof_points[:, 0] * 2.0 - sc.dof_points[:, 2])
    err_e = np.max(np.abs(v - (x[:, 0] * 2.0 - x[:, 2])))
    # cross-degree transfer (coarse Q2 -> fine Q1) is linear and exact on
    # fields shared by both spaces
    s2 = fem.FeSpace(nested.coarse, 2)
    T21 = intergrid.build_transfer(s2, sf, nested)
    a = rng.standard_normal(s2.n_dofs)
    b = rng.standard_normal(s2.n_dofs)
    lin = np.max(np.abs(T21.apply(2.0 * a - 3.0 * b)
                        - (2.0 * T21.apply(a) - 3.0 * T21.apply(b))))
    err_x = np.max(np.abs(T21.apply(s2.dof_points[:, 1])
                          - sf.dof_points[:, 1]))
    passed = max(err_p, err_e) <= 1e-12 and max(lin, err_x) <= 1e-12
    assert record(8, passed,
                  f"transfer exact to {max(err_p, err_e):.1e} <= 1e-12, "
                  f"round trip identity, cross-degree linear "
                  f"({max(lin, err_x):.1e})")


def test_09_projection_exactness():
    source = geometry.generate_idealized_lv(GEOM, dict(
        n_transmural=1, n_circumferential=6, n_longitudinal=4))
    target = geometry.generate_idealized_lv(GEOM, dict(
        n_transmural=2, n_circumferential=5, n_longitudinal=4))
    space = fem.FeSpace(source, 1)
    A = np.array([[0.1, 0.02, 0.0], [0.0, -0.05, 0.01], [0.03, 0.0, 0.08]])
    d = space.dof_points @ A.T
    pts = target.vertices
    vals, interior = refconfig.project_displacement(space, d, pts)
    err_in = np.max(np.abs(vals[interior] - pts[interior] @ A.T))
    # exterior points against a brute-force closest point over all cells
    xyz = source.cell_coords()
    err_out = 0.0
    n_out = 0
    for k in np.flatnonzero(~interior)[:500]:
        best = (np.inf, None, None)
        for c in range(source.n_cells):
            ref, dist = refconfig._closest_point_on_cell(xyz[c], pts[k])
            if dist < best[0]:
                best = (dist, c, ref)
        N, _ = space.eval_basis(best[2][None, :])
        ref_val = N[0] @ d[space.dof_map[best[1]]]
        err_out = max(err_out, np.max(np.abs(vals[k] - ref_val)))
        n_out += 1
    passed = err_in <= 1e-12 and err_out <= 1e-6 and n_out > 0
    assert record(9, passed,
                  f"interior projection error {err_in:.1e} <= 1e-12; "
                  f"{n_out} exterior points match the brute-force "
                  f"closest-point oracle to {err_out:.1e}")


def test_10_physiology_scenario_directions(scenarios):
    r = scenarios
    # last completed beat: the closest to the periodic regime
    sv = {k: r[k]["stroke_volume"] for k in r if k != "_wall_time"}
    pmax = {k: r[k]["p_max"] for k in r if k != "_wall_time"}
    ok_pre = sv["preload-"] < sv["baseline"] < sv["preload+"]
    ok_aft = pmax["afterload-"] < pmax["baseline"] < pmax["afterload+"]
    ok_con = (sv["contractility-"] < sv["baseline"] < sv["contractility+"]
              and pmax["contractility-"] < pmax["baseline"]
              < pmax["contractility+"])
    edp = {k: r[k]["p_ed"] for k in ("baseline", "contractility+",
                                     "contractility-")}
    edp_shift = max(abs(edp["contractility+"] / edp["baseline"] - 1.0),
                    abs(edp["contractility-"] / edp["baseline"] - 1.0))
    wall = r["_wall_time"]
    passed = (ok_pre and ok_aft and ok_con and edp_shift <= 0.02
              and wall <= 4 * 3600)
    assert record(10, passed,
                  f"preload SV {sv['preload-']:.1f}<{sv['baseline']:.1f}<"
                  f"{sv['preload+']:.1f} mL; afterload p_max "
                  f"{pmax['afterload-']:.0f}<{pmax['baseline']:.0f}<"
                  f"{pmax['afterload+']:.0f} mmHg; contractility monotone "
                  f"{ok_con}, EDP shift {100 * edp_shift:.1f}% <= 2%; "
                  f"suite {wall / 60:.0f} min <= 240 min")


def test_11_conservation(baseline):
    cfg, model, series, info = baseline
    tv = [coupling0d.CircState(np.asarray(v)).total_volume(cfg.circ_params)
          for v in series.circ]
    drift = abs(tv[-1] - tv[0]) / tv[0] / cfg.n_beats
    n = model.mech_space.n_dofs
    nqp = (model.coarse.n_cells, model.mech_space.qp_ref.shape[0])
    r0 = model.assembler.residual_static(np.zeros((n, 3)), np.zeros(nqp),
                                         0.0)
    rest = np.linalg.norm(r0)
    passed = drift <= 1e-3 and rest <= 1e-6
    assert record(11, passed,
                  f"blood volume drift {100 * drift:.2e} %/beat <= 0.1%; "
                  f"stress-free rest residual {rest:.1e} N <= 1e-6")


def test_12_splitting_order(baseline):
    cfg, model, _, _ = baseline
    ys = []
    for dt in (1e-3, 5e-4, 2.5e-4):
        c = cfg.copy()
        c.dt = dt       # n_sub fixed: tau is halved jointly with dt
        c.n_beats = 1
        _, info = driver.run_heartbeat(c, model=model, t_end=0.05)
        ys.append(np.concatenate([info["mech_state"].d_n.ravel(),
                                  info["ep_state"].u,
                                  info["circ"].vec]))
    scale = np.abs(ys[2]) + 1e-3 * np.max(np.abs(ys[2]))
    e1 = np.linalg.norm((ys[0] - ys[1]) / scale)
    e2 = np.linalg.norm((ys[1] - ys[2]) / scale)
    order = np.log2(e1 / e2)
    passed = order >= 0.8
    assert record(12, passed,
                  f"staggered-loop observed order {order:.2f} >= 0.8 on a "
                  f"50 ms horizon under joint (dt, tau) halving")
