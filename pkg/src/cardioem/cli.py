"""Command-line interface.

Subcommands: mesh-gen, fibers, unload, run, scenario, check.  Exit codes:
0 success, 2 configuration error, 3 solver failure, 4 IO error.
"""

import argparse
import os
import sys

import numpy as np

from . import (activation, coupling0d, driver, ep, fem, geometry, mechanics,
               refconfig, report)

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

SOLVER_ERRORS = (fem.SolverError, fem.InvertedElementError,
                 mechanics.DivergedStateError, ep.StateBlowUpError,
                 RuntimeError)


def _add_config_arg(p):
    p.add_argument("--config", help="configuration file (sectioned "
                   "key-value); omitted keys take defaults")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--beats", type=int, default=None)
    p.add_argument("--dt-us", type=float, default=None)
    p.add_argument("--n-sub", type=int, default=None)
    p.add_argument("--stimulus-sigma-mm", type=float, default=None)


def _load(args):
    cfg = driver.load_config(args.config) if args.config else driver.RunConfig()
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "beats", None):
        cfg.n_beats = args.beats
    if getattr(args, "dt_us", None):
        cfg.dt = args.dt_us * 1e-6
    if getattr(args, "n_sub", None):
        cfg.n_sub = args.n_sub
    if getattr(args, "stimulus_sigma_mm", None):
        cfg.stimulus_sigma = args.stimulus_sigma_mm * 1e-3
    return cfg


def cmd_mesh_gen(args):
    cfg = _load(args)
    mesh = geometry.generate_idealized_lv(cfg.geometry, cfg.resolution)
    if args.refine > 0:
        mesh = geometry.refine_octree(mesh, args.refine).fine
    geometry.write_mesh(mesh, args.out)
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, "
          f"{mesh.n_cells} cells")
    return 0


def cmd_fibers(args):
    mesh = geometry.read_mesh(args.mesh)
    frames = geometry.generate_fibers(
        mesh, mesh.vertices, alpha_endo=args.alpha_endo,
        alpha_epi=args.alpha_epi, beta_endo=args.beta_endo,
        beta_epi=args.beta_epi)
    driver.export_fields(args.out, mesh,
                         point_data=dict(fiber=frames.f0, sheet=frames.s0,
                                         normal=frames.n0))
    print(f"wrote {args.out}: fiber frames at {mesh.n_vertices} vertices")
    return 0


def cmd_unload(args):
    cfg = _load(args)
    mesh = geometry.read_mesh(args.mesh) if args.mesh else \
        geometry.generate_idealized_lv(cfg.geometry, cfg.resolution)
    space = fem.FeSpace(mesh, cfg.mech_degree,
                        quad_points=cfg.mech_degree + 2)
    qp = space.quadrature_points().reshape(-1, 3)
    frames = geometry.generate_fibers(
        mesh, qp, alpha_endo=cfg.alpha_endo, alpha_epi=cfg.alpha_epi,
        beta_endo=cfg.beta_endo, beta_epi=cfg.beta_epi)
    nqp = (mesh.n_cells, space.qp_ref.shape[0])
    p_load = args.pressure_mmhg * coupling0d.PA_PER_MMHG
    ok, x0 = refconfig.reference_configuration(
        space, frames, cfg.mech_params, p_load, np.zeros(nqp))
    if not ok:
        print("reference recovery did not converge", file=sys.stderr)
        return EXIT_SOLVER
    out = geometry.HexMesh(x0, mesh.cells, mesh.boundary_facets,
                           level=mesh.level, geom=mesh.geom)
    geometry.write_mesh(out, args.out)
    shift = np.max(np.abs(x0 - mesh.vertices))
    print(f"wrote {args.out}: max coordinate shift {shift * 1e3:.3f} mm")
    return 0


def cmd_run(args):
    cfg = _load(args)
    out = cfg.output_dir
    series, info = driver.run_heartbeat(
        cfg, progress=(None if args.quiet else _progress))
    m = info["model"]
    driver.export_series(series, os.path.join(out, "series.csv"))
    driver.export_metadata(cfg, info["counters"],
                           os.path.join(out, "metadata.json"),
                           extra=dict(beats=series.beats))
    d = info["mech_state"].d_n
    vdofs = fem.vertex_dofs(m.mech_space)
    ta_qp = m.mech_space.at_quadrature(info["act_state"].ta)
    s_ff = driver.stress_indicator(m.mech_space, m.frames_coarse, d, ta_qp,
                                   cfg.mech_params, "f", "f")
    driver.export_fields(os.path.join(out, "final_coarse.vtk"), m.coarse,
                         point_data=dict(displacement=d[vdofs]),
                         cell_data=dict(stress_ff=s_ff))
    u = info["ep_state"].u
    vdofs_f = fem.vertex_dofs(m.ep_space)
    driver.export_fields(os.path.join(out, "final_fine.vtk"), m.fine,
                         point_data=dict(potential=u[vdofs_f]))
    report.pv_loop(series, os.path.join(out, "pv_loop.png"))
    report.time_series(series, os.path.join(out, "time_series.png"))
    for b in series.beats:
        print("beat: EDV %.1f mL  ESV %.1f mL  SV %.1f mL  max p %.1f mmHg"
              % (b["edv"], b["esv"], b["stroke_volume"], b["p_max"]))
    print(f"wrote {out}/series.csv, pv_loop.png, time_series.png, "
          f"metadata.json, final_*.vtk")
    return 0


def cmd_scenario(args):
    cfg = _load(args)
    out = cfg.output_dir
    results = driver.run_scenario(cfg, args.name,
                                  progress=(None if args.quiet else _progress))
    for label, (series, summary) in results.items():
        driver.export_series(series, os.path.join(out, f"{label}.csv"))
        line = "  ".join(f"{k}={v:.2f}" for k, v in summary.items()
                         if isinstance(v, float))
        print(f"{label}: {line}")
    report.scenario_comparison(results,
                               os.path.join(out, f"{args.name}.png"))
    print(f"wrote per-variant CSV and {out}/{args.name}.png")
    return 0


def cmd_check(args):
    """Fast invariant suite: transfer exactness, Schur correctness, RK4
    order, EP rest stability, 0D volume conservation."""
    failures = 0

    def check(name, ok, detail=""):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")
        failures += 0 if ok else 1

    from . import intergrid
    geom = dict(r_endo_short=17.0, r_endo_long=45.0, wall_thickness=9.0,
                base_truncation_height=18.0)
    res = dict(n_transmural=1, n_circumferential=6, n_longitudinal=4)
    nested = geometry.refine_octree(
        geometry.generate_idealized_lv(geom, res), 1)
    cs = fem.FeSpace(nested.coarse, 1)
    fs = fem.FeSpace(nested.fine, 1)
    f = lambda x: 1.0 + 2 * x[:, 0] - x[:, 1] + 3 * x[:, 2]
    up = intergrid.build_transfer(cs, fs, nested).apply(f(cs.dof_points))
    err = np.max(np.abs(up - f(fs.dof_points)))
    check("intergrid exactness", err < 1e-12, f"err={err:.1e}")

    rng = np.random.default_rng(7)
    import scipy.sparse as sp
    ok = True
    worst = 0.0
    for _ in range(5):
        n = 30
        A = rng.standard_normal((n, n))
        A = sp.csr_matrix(A @ A.T + n * np.eye(n))
        b = rng.standard_normal(n)
        c = rng.standard_normal(n)
        rd = rng.standard_normal(n)
        rp = rng.standard_normal()
        ws = coupling0d.SaddleWorkspace(A, b, c)
        dd, dp = coupling0d.schur_solve(ws, rd, rp)
        K = np.block([[A.toarray(), b[:, None]], [c[None, :], np.zeros((1, 1))]])
        # the reduction solves K [dd; dp] = -[rd; rp]
        ref = np.linalg.solve(K, -np.concatenate([rd, [rp]]))
        e = np.linalg.norm(np.concatenate([dd, [dp]]) - ref) \
            / np.linalg.norm(ref)
        worst = max(worst, e)
        ok = ok and e < 1e-8
    check("Schur reduction vs dense solve", ok, f"err={worst:.1e}")

    p = coupling0d.CircParams()
    rhs = lambda t, v, plv, pp: coupling0d.circulation_rhs(t, v, plv, pp)
    s0 = coupling0d.CircState.physiological()
    errs = []
    for tau in (1e-3, 5e-4):
        s = s0.copy()
        for _ in range(int(round(8e-3 / tau))):
            s = coupling0d.rk4_step(s, tau, 10.0, p, rhs=rhs)
        errs.append(s.vec.copy())
    sref = s0.copy()
    for _ in range(int(round(8e-3 / 6.25e-5))):
        sref = coupling0d.rk4_step(sref, 6.25e-5, 10.0, p, rhs=rhs)
    e1 = np.linalg.norm(errs[0] - sref.vec)
    e2 = np.linalg.norm(errs[1] - sref.vec)
    order = np.log2(e1 / e2)
    check("RK4 observed order ~4", 3.0 < order < 5.0, f"order={order:.2f}")

    drift = abs(s.total_volume(p) - s0.total_volume(p))
    check("0D total volume conservation", drift < 1e-9,
          f"drift={drift:.1e} mL")

    model = ep.default_ionic_model()
    u0, w0, z0 = model.resting_state()
    st = ep.EpState.resting(model, 4)
    space1 = fem.FeSpace(nested.coarse, 1)
    qp1 = space1.quadrature_points().reshape(-1, 3)
    fr = geometry.generate_fibers(nested.coarse, qp1)
    solver = ep.MonodomainSolver(space1, fr,
                                 stimulus=ep.StimulusParams(peak=0.0))
    st = ep.EpState.resting(model, space1.n_dofs)
    for k in range(20):
        solver.substep(st, 1e-3, (k + 1) * 1e-3)
    check("EP rest stability", np.max(np.abs(st.u - u0)) < 1e-8,
          f"max|u-u0|={np.max(np.abs(st.u - u0)):.1e}")

    print(f"{failures} failure(s)")
    return 0 if failures == 0 else EXIT_SOLVER


def _progress(t, n, total):
    print(f"  t = {t:.3f} s  ({n}/{total} steps)", flush=True)


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="cardioem",
        description="desk-scale cardiac electromechanics with a closed-loop "
                    "circulation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh-gen", help="generate the idealized ventricle")
    _add_config_arg(p)
    p.add_argument("--refine", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh_gen)

    p = sub.add_parser("fibers", help="rule-based fiber frames on a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha-endo", type=float, default=60.0)
    p.add_argument("--alpha-epi", type=float, default=-60.0)
    p.add_argument("--beta-endo", type=float, default=-20.0)
    p.add_argument("--beta-epi", type=float, default=20.0)
    p.set_defaults(func=cmd_fibers)

    p = sub.add_parser("unload", help="recover the stress-free reference")
    _add_config_arg(p)
    p.add_argument("--mesh", default=None,
                   help="loaded-configuration mesh file (default: generate)")
    p.add_argument("--pressure-mmhg", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unload)

    p = sub.add_parser("run", help="run heartbeats and export results")
    _add_config_arg(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("scenario", help="baseline plus scenario variants")
    _add_config_arg(p)
    p.add_argument("--name", required=True, choices=driver.SCENARIOS)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("check", help="fast invariant suite")
    p.set_defaults(func=cmd_check)

    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except driver.ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"IO error: {e}", file=sys.stderr)
        return EXIT_IO
    except SOLVER_ERRORS as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
