"""Figure renderers: exploration curves, termination boxes, regret
curves with the 1/tau guide, and environment overlays.

Rendering is pure: fixed styles, no timestamps, deterministic bytes for
identical inputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .schemas import EmptyLog, read_environment, read_runlog, read_summary, rle_decode

FIGURE_KINDS = ("explored_fraction", "termination_box", "regret_curve",
                "env_overlay")


def _new_axes(figsize=(5.0, 3.4)):
    fig, ax = plt.subplots(figsize=figsize, dpi=120)
    return fig, ax


def _save(fig, out_path):
    fig.savefig(out_path, format="png", metadata={"Software": "sageplots"})
    plt.close(fig)


def render_explored_fraction(log_paths, out_path):
    """Fraction-of-area-explored curves over physical time."""
    fig, ax = _new_axes()
    plotted = 0
    for path in sorted(str(p) for p in log_paths):
        log = read_runlog(path)
        pts = log["metrics"].get("explored") or []
        if not pts:
            continue
        t = [row[1] for row in pts]
        f = [row[2] for row in pts]
        label = f"{log['header']['variant']} seed {log['header']['seed']}"
        ax.plot(t, f, lw=1.2, label=label)
        plotted += 1
    if plotted == 0:
        raise EmptyLog("no exploration curves in the given logs")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("fraction of area explored")
    ax.set_ylim(0.0, 1.05)
    if plotted <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, out_path)


def render_termination_box(summary_path, out_path):
    """Box plot of physical termination times per variant."""
    rows = read_summary(summary_path)
    groups: dict = {}
    for row in rows:
        groups.setdefault(row["variant"], []).append(float(row["time"]))
    if not groups:
        raise EmptyLog(f"{summary_path} has no rows")
    fig, ax = _new_axes()
    names = sorted(groups)
    ax.boxplot([groups[n] for n in names], tick_labels=names)
    ax.set_ylabel("termination time [s]")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right", fontsize=7)
    fig.tight_layout()
    _save(fig, out_path)


def render_regret_curve(log_paths, out_path):
    """Time-averaged regret curves plus a 1/tau guide."""
    fig, ax = _new_axes()
    taus_all = []
    peak = 0.0
    plotted = 0
    for path in sorted(str(p) for p in log_paths):
        log = read_runlog(path)
        avr = log["metrics"].get("avr") or []
        if not avr:
            continue
        taus = [row[0] for row in avr]
        vals = [row[1] for row in avr]
        taus_all.extend(taus)
        peak = max(peak, max(abs(v) for v in vals))
        ax.plot(taus, vals, marker="o", ms=2.5, lw=1.0,
                label=f"seed {log['header']['seed']}")
        plotted += 1
    if plotted == 0:
        raise EmptyLog("no regret curves in the given logs")
    t0, t1 = min(taus_all), max(taus_all)
    guide = np.linspace(max(t0, 1e-9), t1, 64)
    ax.plot(guide, max(peak, 1e-9) * guide[0] / guide, "k--", lw=1.0,
            label="1/tau guide")
    ax.set_xlabel("tau [s]")
    ax.set_ylabel("average regret")
    if plotted <= 8:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, out_path)


def render_env_overlay(log_path, env_path, out_path, snapshot_index=-1):
    """Ground-truth unsafe region, trajectory, samples, goals, and the
    pessimistic-set boundary of one snapshot."""
    log = read_runlog(log_path)
    env = read_environment(env_path)
    fig, ax = _new_axes(figsize=(4.6, 4.2))
    (x0, x1), (y0, y1) = env["domain_box"]
    vals = env["values"]
    unsafe = np.ma.masked_where(vals >= 0.0, np.ones_like(vals))
    ax.imshow(unsafe, extent=(x0, x1, y0, y1), origin="lower",
              cmap="gray_r", vmin=0, vmax=1, alpha=0.9, zorder=1)
    snaps = log["snapshots"]
    if snaps:
        snap = snaps[snapshot_index]
        dims = snap["grid"]["dims"]
        mask = rle_decode(snap["masks"]["pessimistic"], (dims[1], dims[0]))
        gx0, gy0 = snap["grid"]["origin"]
        sx, sy = snap["grid"]["spacing"]
        extent = (gx0, gx0 + sx * dims[0], gy0, gy0 + sy * dims[1])
        ax.contour(mask.astype(float), levels=[0.5], colors=["#e6b800"],
                   linewidths=1.6, extent=extent, zorder=3)
    knots = []
    for rec in log["rounds"]:
        knots.extend(rec["knots"])
    if knots:
        knots = np.asarray(knots)
        ax.plot(knots[:, 0], knots[:, 1], color="#1f77b4", lw=1.4, zorder=4)
    samples = [rec["sample"]["position"] for rec in log["rounds"]
               if rec.get("sample")]
    if samples:
        samples = np.asarray(samples)
        ax.plot(samples[:, 0], samples[:, 1], "o", color="#d62728", ms=3.5,
                zorder=5)
    start = log["header"]["env"].get("start")
    goal = log["header"]["env"].get("goal")
    if start is not None:
        ax.plot(start[0], start[1], "*", color="#d62728", ms=11, zorder=6)
    if goal is not None:
        ax.plot(goal[0], goal[1], "*", color="#2ca02c", ms=11, zorder=6)
    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    ax.set_aspect("equal")
    fig.tight_layout()
    _save(fig, out_path)


def render(kind, inputs, out_path, env_path=None, snapshot_index=-1):
    """Dispatch on the figure kind; inputs is a list of file paths."""
    from .schemas import SchemaMismatch

    if kind == "explored_fraction":
        return render_explored_fraction(inputs, out_path)
    if kind == "termination_box":
        if len(inputs) != 1:
            raise SchemaMismatch("termination_box needs one summary CSV")
        return render_termination_box(inputs[0], out_path)
    if kind == "regret_curve":
        return render_regret_curve(inputs, out_path)
    if kind == "env_overlay":
        if len(inputs) != 1 or env_path is None:
            raise SchemaMismatch("env_overlay needs one log and --env")
        return render_env_overlay(inputs[0], env_path, out_path,
                                  snapshot_index=snapshot_index)
    raise SchemaMismatch(f"unknown figure kind {kind!r}")
