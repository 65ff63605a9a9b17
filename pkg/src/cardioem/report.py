"""Figure rendering for simulation output: pressure-volume loops, time
series, and scenario comparisons, written to image files next to the CSV
output."""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import coupling0d


def _save(fig, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def pv_loop(series, path, label=None):
    """LV pressure-volume loop from a TimeSeries."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(series.v_lv_3d, series.p_lv_mmhg, "-", lw=1.2, label=label)
    ax.set_xlabel("LV volume (mL)")
    ax.set_ylabel("LV pressure (mmHg)")
    ax.set_title("pressure-volume loop")
    if label:
        ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def time_series(series, path):
    """Pressure, volumes and chamber state traces against time."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    t = series.t
    axes[0].plot(t, series.p_lv_mmhg, label="p_LV")
    axes[0].plot(t, [c[coupling0d.P_AR_SYS] for c in series.circ],
                 label="p_AR_SYS")
    axes[0].set_ylabel("pressure (mmHg)")
    axes[0].legend(loc="upper right", fontsize=8)

    axes[1].plot(t, series.v_lv_3d, label="V_LV (3D)")
    axes[1].plot(t, series.v_lv_0d, "--", label="V_LV (0D)")
    axes[1].plot(t, [c[coupling0d.V_LA] for c in series.circ], label="V_LA")
    axes[1].set_ylabel("volume (mL)")
    axes[1].legend(loc="upper right", fontsize=8)

    axes[2].plot(t, series.solid_volume, label="wall volume")
    axes[2].set_ylabel("volume (mL)")
    axes[2].set_xlabel("time (s)")
    axes[2].legend(loc="upper right", fontsize=8)
    for ax in axes:
        ax.grid(alpha=0.3)
    return _save(fig, path)


def scenario_comparison(results, path):
    """Overlay the PV loops of scenario variants; results is the mapping
    returned by driver.run_scenario."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for label, (series, summary) in results.items():
        ax.plot(series.v_lv_3d, series.p_lv_mmhg, lw=1.2, label=label)
    ax.set_xlabel("LV volume (mL)")
    ax.set_ylabel("LV pressure (mmHg)")
    ax.set_title("scenario comparison")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)
