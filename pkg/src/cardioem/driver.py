"""Orchestration: build the model from a configuration, run the staggered
heartbeat loop, compute summaries, and export results.

Time stepping follows the segregated-staggered scheme: within each
mechanics step of size dt the electrophysiology, activation kinetics and
circulation advance through n_sub substeps of size tau = dt / n_sub (with
the displacement and ventricular pressure frozen at the step start), after
which the sarcomere-length solve, the active tension and the coupled
mechanics-pressure step bring the wall to the new time level.
"""

import configparser
import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import (activation, coupling0d, ep, fem, geometry, intergrid,
               mechanics)
from .coupling0d import PA_PER_MMHG


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # geometry (mm) and discretization
    geometry: dict = field(default_factory=lambda: dict(
        r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
        base_truncation_height=18.0))
    resolution: dict = field(default_factory=lambda: dict(
        n_transmural=1, n_circumferential=8, n_longitudinal=5))
    refine_k: int = 1
    ep_degree: int = 1
    mech_degree: int = 1
    # time discretization
    dt: float = 250e-6
    n_sub: int = 5
    period: float = 0.8
    n_beats: int = 1
    # fibers
    alpha_endo: float = 60.0
    alpha_epi: float = -60.0
    beta_endo: float = -20.0
    beta_epi: float = 20.0
    # stimulus; the spatial width defaults to a value resolved by the
    # coarse desk meshes (element size 5-8 mm)
    stimulus_sigma: float = 7.5e-3
    stimulus_peak: float = 35.0
    stimulus_duration: float = 3e-3
    # initialization
    p_ed_mmhg: float = 10.0
    ramp_steps: int = 10
    # parameter records
    conductivity: ep.ConductivityParams = field(
        default_factory=ep.ConductivityParams)
    # desk-scale defaults: on the coarse wall the cavity is stiffer than at
    # convergence, so the staggered valve coupling needs a larger effective
    # valve resistance and a peak tension that ejects to a physiological
    # end-systolic volume; the library records keep their nominal defaults
    act_params: activation.ActivationParams = field(
        default_factory=lambda: activation.ActivationParams(ta_max=40e3))
    mech_params: mechanics.MechParams = field(
        default_factory=mechanics.MechParams)
    circ_params: coupling0d.CircParams = field(
        default_factory=lambda: coupling0d.CircParams(r_min=0.03))
    ionic: dict = field(default_factory=dict)   # overrides for the model
    # output
    output_dir: str = "out"
    output_every: float = 1e-3     # s between time-series samples
    field_output_every: float = 0.0  # 0 disables field dumps
    label: str = "baseline"

    def __post_init__(self):
        if self.dt <= 0 or self.n_sub < 1:
            raise ConfigError("dt must be positive and n_sub >= 1")
        if self.period <= 0 or self.n_beats < 1:
            raise ConfigError("period and n_beats must be positive")

    @property
    def tau(self):
        return self.dt / self.n_sub

    def copy(self):
        import copy
        return copy.deepcopy(self)


_SCALE = {"mm": 1e-3, "ms": 1e-3, "um": 1e-6, "us": 1e-6, "kpa": 1e3}


def _parse_value(raw):
    raw = raw.strip()
    try:
        v = float(raw)
        return int(v) if v == int(v) and "." not in raw and "e" not in raw.lower() else v
    except ValueError:
        return raw


def load_config(path):
    """Read a flat sectioned key-value configuration file.

    Keys may carry a unit suffix (_mm, _ms, _us, _um, _kpa) which converts
    the value into the internal unit (m, s, Pa); keys matching dataclass
    fields of the parameter records are applied to those records.
    """
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"cannot read config file: {path}")
    cfg = RunConfig()
    section_targets = {
        "ep": cfg.conductivity,
        "activation": cfg.act_params,
        "mechanics": cfg.mech_params,
        "circulation": cfg.circ_params,
    }
    for section in cp.sections():
        for key, raw in cp.items(section):
            val = _parse_value(raw)
            base = key
            for suf, scale in _SCALE.items():
                if key.endswith("_" + suf):
                    base = key[: -len(suf) - 1]
                    val = float(val) * scale
                    break
            if section == "geometry":
                # the geometry dict keeps mm, so no unit rescale here
                cfg.geometry[key] = float(_parse_value(raw))
            elif section == "resolution":
                cfg.resolution[base] = int(val)
            elif section == "ionic":
                cfg.ionic[base] = val
            elif section in section_targets:
                tgt = section_targets[section]
                if not hasattr(tgt, base):
                    raise ConfigError(f"unknown key [{section}] {key}")
                setattr(tgt, base, val)
            elif hasattr(cfg, base):
                cur = getattr(cfg, base)
                setattr(cfg, base, type(cur)(val) if cur is not None
                        and not isinstance(cur, (dict,)) else val)
            else:
                raise ConfigError(f"unknown key [{section}] {key}")
    return cfg


@dataclass
class TimeSeries:
    t: list = field(default_factory=list)
    p_lv_mmhg: list = field(default_factory=list)
    v_lv_3d: list = field(default_factory=list)
    v_lv_0d: list = field(default_factory=list)
    solid_volume: list = field(default_factory=list)
    circ: list = field(default_factory=list)       # 12-vectors
    beats: list = field(default_factory=list)      # per-beat summaries

    def as_rows(self):
        header = (["t", "p_lv_mmhg", "v_lv_3d_ml", "v_lv_0d_ml",
                   "solid_volume_ml"] + coupling0d.STATE_NAMES)
        rows = [[self.t[i], self.p_lv_mmhg[i], self.v_lv_3d[i],
                 self.v_lv_0d[i], self.solid_volume[i]] + list(self.circ[i])
                for i in range(len(self.t))]
        return header, rows


class Model:
    """All discrete operators for one configuration."""

    def __init__(self, config):
        c = config
        coarse = geometry.generate_idealized_lv(c.geometry, c.resolution)
        self.nested = geometry.refine_octree(coarse, c.refine_k)
        self.coarse, self.fine = self.nested.coarse, self.nested.fine
        ang = dict(alpha_endo=c.alpha_endo, alpha_epi=c.alpha_epi,
                   beta_endo=c.beta_endo, beta_epi=c.beta_epi)

        self.mech_space = fem.FeSpace(self.coarse, c.mech_degree,
                                      quad_points=c.mech_degree + 2)
        qp_c = self.mech_space.quadrature_points().reshape(-1, 3)
        self.frames_coarse = geometry.generate_fibers(self.coarse, qp_c, **ang)

        self.ep_space = fem.FeSpace(self.fine, c.ep_degree)
        qp_f = self.ep_space.quadrature_points().reshape(-1, 3)
        frames_fine = geometry.generate_fibers(self.fine, qp_f, **ang)

        model = ep.ReducedIonicModel(**c.ionic)
        centers = ep.default_stimulus_centers(self.fine.geom)
        stim = ep.StimulusParams(peak=c.stimulus_peak,
                                 duration=c.stimulus_duration,
                                 centers=centers, sigma=c.stimulus_sigma,
                                 period=c.period)
        self.ep_solver = ep.MonodomainSolver(self.ep_space, frames_fine,
                                             sigma=c.conductivity,
                                             model=model, stimulus=stim)
        self.assembler = mechanics.MechAssembler(self.mech_space,
                                                 self.frames_coarse,
                                                 c.mech_params)
        self.cavity = coupling0d.CavityGeometry(self.mech_space)
        self.d_to_fine = intergrid.build_transfer(self.mech_space,
                                                  self.ep_space, self.nested)
        self.ca_to_coarse = intergrid.build_transfer(self.ep_space,
                                                     self.mech_space,
                                                     self.nested)
        nc = self.coarse.n_cells
        nq = self.mech_space.qp_ref.shape[0]
        self.f0_coarse_qp = self.frames_coarse.f0.reshape(nc * nq, 3)
        if c.act_params.delta_sl is None:
            c.act_params.delta_sl = self.coarse.mean_diameter()
        self.config = c


def stress_indicator(space, frames_qp, d, ta_qp, params, a="f", b="f",
                     coords=None):
    """Cell-averaged stress component (P a0) . F b0 / |F b0| (Pa); axial
    for a == b, shear otherwise.  No projection system is solved."""
    axes = {"f": "f0", "s": "s0", "n": "n0"}
    if a not in axes or b not in axes:
        raise ValueError("directions must be in {f, s, n}")
    F, _ = fem.compute_deformation(space, d, coords=coords)
    nc, nq = F.shape[:2]
    f0 = frames_qp.f0.reshape(nc, nq, 3)
    s0 = frames_qp.s0.reshape(nc, nq, 3)
    n0 = frames_qp.n0.reshape(nc, nq, 3)
    S = mechanics.second_pk(F, f0, s0, n0, ta_qp, params)
    P = np.einsum("cqik,cqkj->cqij", F, S)
    dirs = {"f0": f0, "s0": s0, "n0": n0}
    a0 = dirs[axes[a]]
    b0 = dirs[axes[b]]
    Fb = np.einsum("cqij,cqj->cqi", F, b0)
    Fb = Fb / np.linalg.norm(Fb, axis=2, keepdims=True)
    Pa = np.einsum("cqiA,cqA->cqi", P, a0)
    return np.einsum("cqi,cqi->cq", Pa, Fb).mean(axis=1)


def compute_solid_volume(space, d, coords=None):
    """Deformed myocardial volume, integral of J over the reference
    domain (mL)."""
    _, detJ = space.phys_grads(coords=coords)
    if d is None or not np.any(d):
        J = np.ones_like(detJ)
    else:
        _, J = fem.compute_deformation(space, d, coords=coords)
    return float(np.einsum("cq,q,cq->", detJ, space.qp_w, J)) \
        * coupling0d.ML_PER_M3


class _BeatTracker:
    """Detects valve closures from the 0D state and accumulates per-beat
    summaries (EDV at mitral closure, ESV at aortic closure)."""

    def __init__(self, params):
        self.params = params
        self.prev_q_mv = None
        self.prev_q_av = None
        self.current = dict(edv=None, esv=None, p_max=-np.inf, p_ed=None)
        self.completed = []

    def update(self, t, circ_vec, p_lv_mmhg):
        p = self.params
        p_la, _, _ = coupling0d.chamber_pressures(t, circ_vec, p)
        q_mv = coupling0d.valve_flux(p_la - p_lv_mmhg, p)
        q_av = coupling0d.valve_flux(p_lv_mmhg - circ_vec[coupling0d.P_AR_SYS], p)
        cur = self.current
        cur["p_max"] = max(cur["p_max"], p_lv_mmhg)
        if self.prev_q_mv is not None and self.prev_q_mv > 0 >= q_mv:
            # mitral closure: end of diastole, start of a new beat summary
            if cur["edv"] is not None and cur["esv"] is not None:
                cur["stroke_volume"] = cur["edv"] - cur["esv"]
                self.completed.append(cur)
            self.current = cur = dict(edv=circ_vec[coupling0d.V_LV],
                                      esv=None, p_max=p_lv_mmhg,
                                      p_ed=p_lv_mmhg)
        if self.prev_q_av is not None and self.prev_q_av > 0 >= q_av:
            cur["esv"] = circ_vec[coupling0d.V_LV]
        self.prev_q_mv, self.prev_q_av = q_mv, q_av


def run_heartbeat(config, model=None, progress=None, t_end=None):
    """Run the configured number of beats; returns (TimeSeries, info dict).

    info carries solver counters and the final states for chaining runs.
    t_end overrides the simulated horizon (n_beats * period otherwise).
    """
    c = config if isinstance(config, RunConfig) else load_config(config)
    m = model if model is not None else Model(c)
    dt, tau, n_sub = c.dt, c.tau, c.n_sub

    nqp = (m.coarse.n_cells, m.mech_space.qp_ref.shape[0])
    ta_zero = np.zeros(nqp)
    p_ed = c.p_ed_mmhg * PA_PER_MMHG
    d0 = mechanics.pressure_ramp_init(m.assembler, ta_zero, p_ed,
                                      n_steps=c.ramp_steps)
    mech_state = mechanics.MechState(d0, d0.copy(), p_ed)
    v_lv0 = m.cavity.volume(d0)
    circ = coupling0d.CircState.physiological(v_lv=v_lv0)

    ep_state = ep.EpState.resting(m.ep_solver.model, m.ep_space.n_dofs)
    act_state = activation.ActivationState.resting(m.mech_space.n_dofs,
                                                   c.act_params)
    sl = act_state.sl

    series = TimeSeries()
    tracker = _BeatTracker(c.circ_params)
    counters = dict(n_steps=0, n_ep_solves=0, n_rk4_steps=0, n_sl_solves=0,
                    n_w_solves=0, n_newton_iters=0, n_stiffness_builds=0)
    horizon = c.n_beats * c.period if t_end is None else t_end
    n_steps = int(round(horizon / dt))
    next_sample = 0.0
    t_wall = time.time()

    for n in range(n_steps):
        t_n = n * dt
        # displacement to the fine grid, once per step
        d_fine = m.d_to_fine.apply(mech_state.d_n)
        m.ep_solver.set_displacement(d_fine)
        counters["n_stiffness_builds"] += 1
        for s in range(n_sub):
            t_sub = t_n + (s + 1) * tau
            m.ep_solver.ionic_step(ep_state, tau)
            m.ep_solver.monodomain_step(ep_state, tau, t_sub)
            counters["n_ep_solves"] += 1
            ca = intergrid.transfer_calcium(
                m.ca_to_coarse, ep_state.z, m.ep_solver.model.calcium_index)
            act_state.s = activation.activation_step(
                act_state.s, ca, sl, tau, c.act_params)
            circ = coupling0d.rk4_step(circ, tau,
                                       mech_state.p_lv / PA_PER_MMHG,
                                       c.circ_params)
            counters["n_rk4_steps"] += 1
        sl = activation.sl_solve(m.mech_space, mech_state.d_n,
                                 m.f0_coarse_qp, c.act_params)
        act_state.sl = sl
        counters["n_sl_solves"] += 1
        act_state.ta = activation.compute_ta(act_state.s, c.act_params)
        ta_qp = m.mech_space.at_quadrature(act_state.ta)
        d_new, p_new, ws = coupling0d.coupled_step(
            m.assembler, m.cavity, mech_state, ta_qp,
            circ.vec[coupling0d.V_LV], dt)
        counters["n_w_solves"] += ws.n_w_solves
        counters["n_newton_iters"] += ws.n_newton_iters
        mech_state = mechanics.MechState(d_new, mech_state.d_n, p_new)
        counters["n_steps"] += 1

        t_new = t_n + dt
        tracker.update(t_new, circ.vec, p_new / PA_PER_MMHG)
        if t_new + 1e-12 >= next_sample:
            series.t.append(t_new)
            series.p_lv_mmhg.append(p_new / PA_PER_MMHG)
            series.v_lv_3d.append(m.cavity.volume(d_new))
            series.v_lv_0d.append(circ.vec[coupling0d.V_LV])
            series.solid_volume.append(
                compute_solid_volume(m.mech_space, d_new))
            series.circ.append(circ.vec.copy())
            next_sample += c.output_every
        if progress and (n + 1) % max(1, n_steps // 20) == 0:
            progress(t_new, n + 1, n_steps)

    series.beats = tracker.completed
    info = dict(counters=counters, mech_state=mech_state, circ=circ,
                ep_state=ep_state, act_state=act_state, model=m,
                wall_time=time.time() - t_wall)
    return series, info


# --- scenarios ----------------------------------------------------------


SCENARIOS = ("preload", "afterload", "contractility")


def apply_scenario(config, name, direction):
    """Return a modified copy of the configuration; direction is +1/-1."""
    c = config.copy()
    s = 1.0 if direction >= 0 else -1.0
    if name == "preload":
        f = 1.0 + s * 0.5
        c.circ_params.e_act_max_la *= f
        c.circ_params.e_act_max_ra *= f
    elif name == "afterload":
        f = 1.0 + s * 0.15
        c.circ_params.r_ar_sys *= f
        c.circ_params.c_ar_sys /= f   # preserve the R C product
    elif name == "contractility":
        f = 1.0 + s * 0.35
        c.act_params.ta_max *= f
        c.circ_params.e_act_max_la *= f
        c.circ_params.e_act_max_ra *= f
        c.circ_params.e_act_max_rv *= f
    else:
        raise ConfigError(f"unknown scenario: {name}")
    c.label = f"{name}{'+' if s > 0 else '-'}"
    return c


def summarize(series):
    """Last-beat summary of a time series."""
    out = dict(p_lv_max=max(series.p_lv_mmhg),
               v_lv_min=min(series.v_lv_3d), v_lv_max=max(series.v_lv_3d))
    if series.beats:
        out.update(series.beats[-1])
    return out


def run_scenario(base_config, name, directions=(+1, -1), progress=None):
    """Run baseline plus scenario variants; returns {label: (series,
    summary)}."""
    results = {}
    series, _ = run_heartbeat(base_config, progress=progress)
    results[base_config.label] = (series, summarize(series))
    for direction in directions:
        cfg = apply_scenario(base_config, name, direction)
        s, _ = run_heartbeat(cfg, progress=progress)
        results[cfg.label] = (s, summarize(s))
    return results


# --- export -------------------------------------------------------------


def export_series(series, path):
    header, rows = series.as_rows()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def read_series_csv(path):
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, rows


def export_fields(path, mesh, point_data=None, cell_data=None):
    """Legacy-text unstructured-grid dump (hexahedra, type 12)."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\ncardioem fields\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.n_vertices} float\n")
        for p in mesh.vertices:
            f.write(f"{p[0]:.9e} {p[1]:.9e} {p[2]:.9e}\n")
        f.write(f"CELLS {mesh.n_cells} {9 * mesh.n_cells}\n")
        for cell in mesh.cells:
            f.write("8 " + " ".join(str(v) for v in cell) + "\n")
        f.write(f"CELL_TYPES {mesh.n_cells}\n")
        f.write("12\n" * mesh.n_cells)
        if point_data:
            f.write(f"POINT_DATA {mesh.n_vertices}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 2 and arr.shape[1] == 3:
                    f.write(f"VECTORS {name} float\n")
                    for v in arr:
                        f.write(f"{v[0]:.9e} {v[1]:.9e} {v[2]:.9e}\n")
                else:
                    f.write(f"SCALARS {name} float 1\nLOOKUP_TABLE default\n")
                    for v in arr:
                        f.write(f"{float(v):.9e}\n")
        if cell_data:
            f.write(f"CELL_DATA {mesh.n_cells}\n")
            for name, arr in cell_data.items():
                f.write(f"SCALARS {name} float 1\nLOOKUP_TABLE default\n")
                for v in np.asarray(arr):
                    f.write(f"{float(v):.9e}\n")


def export_metadata(config, counters, path, extra=None):
    doc = dict(config=_to_plain(config), counters=counters,
               substitutions=[
                   "reduced ionic model in place of a full human "
                   "ventricular cell model",
                   "first-order kinetics activation model in place of a "
                   "data-driven surrogate",
                   "closed-loop network wiring and chamber activation "
                   "timing supplied by this implementation",
               ])
    if extra:
        doc.update(extra)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, default=str)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _to_plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.ndarray, list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
