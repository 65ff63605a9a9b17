import numpy as np
import pytest

from cardioem import coupling0d, driver, fem, geometry, mechanics


def test_run_config_validation():
    with pytest.raises(driver.ConfigError):
        driver.RunConfig(dt=-1.0)
    with pytest.raises(driver.ConfigError):
        driver.RunConfig(n_sub=0)
    cfg = driver.RunConfig(dt=1e-3, n_sub=4)
    assert cfg.tau == pytest.approx(2.5e-4)


def test_config_copy_is_deep():
    cfg = driver.RunConfig()
    cp = cfg.copy()
    cp.circ_params.r_ar_sys *= 2.0
    cp.geometry["wall_thickness"] = 1.0
    assert cfg.circ_params.r_ar_sys != cp.circ_params.r_ar_sys
    assert cfg.geometry["wall_thickness"] != 1.0


def test_load_config_with_unit_suffixes(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("""
[run]
dt_us = 500
n_sub = 2
n_beats = 3
period_ms = 700
label = tuned

[geometry]
wall_thickness = 10.0

[resolution]
n_circumferential = 6

[mechanics]
bulk_kpa = 40

[circulation]
r_ar_sys = 0.9

[activation]
tau_act_ms = 50
""")
    cfg = driver.load_config(str(path))
    assert cfg.dt == pytest.approx(500e-6)
    assert cfg.n_sub == 2 and cfg.n_beats == 3
    assert cfg.period == pytest.approx(0.7)
    assert cfg.label == "tuned"
    assert cfg.geometry["wall_thickness"] == 10.0
    assert cfg.resolution["n_circumferential"] == 6
    assert cfg.mech_params.bulk == pytest.approx(40e3)
    assert cfg.circ_params.r_ar_sys == pytest.approx(0.9)
    assert cfg.act_params.tau_act == pytest.approx(0.05)


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[mechanics]\nnot_a_parameter = 1\n")
    with pytest.raises(driver.ConfigError):
        driver.load_config(str(path))
    with pytest.raises(driver.ConfigError):
        driver.load_config(str(tmp_path / "missing.ini"))


def test_apply_scenario_directions():
    base = driver.RunConfig()
    up = driver.apply_scenario(base, "preload", +1)
    dn = driver.apply_scenario(base, "preload", -1)
    assert up.circ_params.e_act_max_la == pytest.approx(
        1.5 * base.circ_params.e_act_max_la)
    assert dn.circ_params.e_act_max_la == pytest.approx(
        0.5 * base.circ_params.e_act_max_la)
    after = driver.apply_scenario(base, "afterload", +1)
    assert after.circ_params.r_ar_sys == pytest.approx(
        1.15 * base.circ_params.r_ar_sys)
    # R C product preserved
    assert after.circ_params.r_ar_sys * after.circ_params.c_ar_sys == \
        pytest.approx(base.circ_params.r_ar_sys * base.circ_params.c_ar_sys)
    cont = driver.apply_scenario(base, "contractility", +1)
    assert cont.act_params.ta_max == pytest.approx(1.35 * base.act_params.ta_max)
    assert cont.label == "contractility+"
    with pytest.raises(driver.ConfigError):
        driver.apply_scenario(base, "nonsense", +1)


def test_series_csv_round_trip(tmp_path):
    s = driver.TimeSeries()
    rng = np.random.default_rng(0)
    for k in range(5):
        s.t.append(k * 1e-3)
        s.p_lv_mmhg.append(rng.standard_normal())
        s.v_lv_3d.append(60.0 + k)
        s.v_lv_0d.append(60.0 + k + 1e-9)
        s.solid_volume.append(100.0)
        s.circ.append(rng.standard_normal(12))
    path = tmp_path / "series.csv"
    driver.export_series(s, str(path))
    header, rows = driver.read_series_csv(str(path))
    assert header[:2] == ["t", "p_lv_mmhg"]
    assert len(rows) == 5
    for i, row in enumerate(rows):
        assert row[1] == s.p_lv_mmhg[i]  # repr round trip is exact
        assert np.array_equal(row[5:], s.circ[i])


def test_export_fields_writes_legacy_vtk(tmp_path):
    GEOM = dict(r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
                base_truncation_height=18.0)
    RES = dict(n_transmural=1, n_circumferential=4, n_longitudinal=3)
    mesh = geometry.generate_idealized_lv(GEOM, RES)
    path = tmp_path / "fields.vtk"
    disp = np.zeros((mesh.n_vertices, 3))
    driver.export_fields(str(path), mesh, point_data={"displacement": disp},
                         cell_data={"stress": np.zeros(mesh.n_cells)})
    text = path.read_text()
    assert text.startswith("# vtk DataFile Version 3.0")
    assert f"POINTS {mesh.n_vertices} float" in text
    assert f"CELLS {mesh.n_cells} {9 * mesh.n_cells}" in text
    assert "VECTORS displacement float" in text
    assert "SCALARS stress float 1" in text


def test_solid_volume_of_undeformed_wall():
    GEOM = dict(r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
                base_truncation_height=18.0)
    RES = dict(n_transmural=1, n_circumferential=8, n_longitudinal=5)
    mesh = geometry.generate_idealized_lv(GEOM, RES)
    space = fem.FeSpace(mesh, 1)
    v0 = driver.compute_solid_volume(space, None)
    # uniform dilation scales the wall volume by c^3
    c = 1.02
    d = (c - 1.0) * space.dof_points
    v = driver.compute_solid_volume(space, d)
    assert v == pytest.approx(c ** 3 * v0, rel=1e-10)
    assert v0 > 0


def test_stress_indicator_zero_at_rest():
    GEOM = dict(r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
                base_truncation_height=18.0)
    RES = dict(n_transmural=1, n_circumferential=4, n_longitudinal=3)
    mesh = geometry.generate_idealized_lv(GEOM, RES)
    space = fem.FeSpace(mesh, 1, quad_points=3)
    frames = geometry.generate_fibers(
        mesh, space.quadrature_points().reshape(-1, 3))
    nqp = (mesh.n_cells, space.qp_ref.shape[0])
    d = np.zeros((space.n_dofs, 3))
    s = driver.stress_indicator(space, frames, d, np.zeros(nqp),
                                mechanics.MechParams())
    assert np.max(np.abs(s)) < 1e-12
    # pure active tension shows up as a fiber-axial stress
    s_act = driver.stress_indicator(space, frames, d, np.full(nqp, 10e3),
                                    mechanics.MechParams())
    assert np.min(s_act) > 9e3
    with pytest.raises(ValueError):
        driver.stress_indicator(space, frames, d, np.zeros(nqp),
                                mechanics.MechParams(), a="x")


def test_short_run_counter_contract():
    # a few steps of the full staggered loop on a tiny model: one EP solve
    # per substep, one sarcomere solve, one w-solve and one stiffness
    # rebuild per step
    cfg = driver.RunConfig(dt=1e-3, n_sub=3, resolution=dict(
        n_transmural=1, n_circumferential=4, n_longitudinal=3))
    series, info = driver.run_heartbeat(cfg, t_end=5e-3)
    c = info["counters"]
    assert c["n_steps"] == 5
    assert c["n_ep_solves"] == 15 and c["n_rk4_steps"] == 15
    assert c["n_sl_solves"] == 5 and c["n_w_solves"] == 5
    assert c["n_stiffness_builds"] == 5
    assert len(series.t) == 5
    # the coupled step keeps the 3D volume on the 0D target
    assert abs(series.v_lv_3d[-1] - series.v_lv_0d[-1]) < 1e-6


def test_beat_tracker_detects_valve_closures():
    params = coupling0d.CircParams()
    tracker = driver._BeatTracker(params)
    vec = coupling0d.CircState.physiological(v_lv=120.0).vec
    # diastole (p_lv below atrial pressure), then systole, then diastole
    p_la0 = coupling0d.chamber_pressures(0.0, vec, params)[0]
    seq = [p_la0 - 2.0] * 3 + [150.0] * 3 + [p_la0 - 2.0] * 3 \
        + [150.0] * 3 + [p_la0 - 2.0] * 2
    for k, p in enumerate(seq):
        tracker.update(k * 1e-3, vec, p)
    assert len(tracker.completed) >= 1
    beat = tracker.completed[0]
    assert beat["edv"] == pytest.approx(vec[coupling0d.V_LV])
    assert "stroke_volume" in beat
