"""Matplotlib renderings written next to the delimited reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "carleman-mfg"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130, metadata=_PNG_META)
    plt.close(fig)


def sweep_figure(sweep_result, path):
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    for lam in sweep_result.lam_values:
        row = sweep_result.row(lam)
        ax.plot([p.s for p in row], [p.ratio for p in row], "o-",
                label=f"lam={lam:g}")
    ax.set_xlabel("s")
    ax.set_ylabel("LHS / RHS")
    ax.set_title(f"{sweep_result.estimate_id} ratio over s")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def estimate_figure(report, path):
    fig, ax = plt.subplots(figsize=(6.2, 3.8))
    names = [f"lhs:{k}" for k in sorted(report.lhs_terms)] + [
        f"rhs:{k}" for k in sorted(report.rhs_terms)
    ]
    values = [report.lhs_terms[k] for k in sorted(report.lhs_terms)] + [
        report.rhs_terms[k] for k in sorted(report.rhs_terms)
    ]
    floor = max(max(values), 1e-300) * 1e-18
    ax.bar(range(len(values)), [max(v, floor) for v in values],
           color=["tab:blue"] * len(report.lhs_terms)
           + ["tab:orange"] * len(report.rhs_terms))
    ax.set_yscale("log")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=75, fontsize=6)
    ax.set_title(f"{report.estimate_id} terms at s={report.s:g}, lam={report.lam:g}")
    _save(fig, path)


def stability_figure(run, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    d = np.array([pt[0] for pt in run.points])
    e = np.array([pt[1] for pt in run.points])
    ax.loglog(d, e, "o", label="measured")
    dd = np.logspace(math.log10(d.min()), math.log10(d.max()), 50)
    ax.loglog(dd, run.c * dd**run.p, "-",
              label=f"fit p={run.p:.3f}, R2={run.r2:.4f}")
    if run.theta_pred is not None:
        c_cal = e[0] / d[0] ** run.theta_pred
        ax.loglog(dd, c_cal * dd**run.theta_pred, "--",
                  label=f"bound slope {run.theta_pred:.3f}")
    ax.set_xlabel("data size D")
    ax.set_ylabel("error E")
    ax.set_title(run.experiment_id)
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def verify_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    names = [r[0] for r in rows]
    values = [max(abs(r[1]), 1e-18) for r in rows]
    thresholds = [r[2] for r in rows]
    xs = range(len(rows))
    ax.bar(xs, values, color="tab:blue", label="measured")
    ax.plot(xs, thresholds, "r_", markersize=16, label="threshold")
    ax.set_yscale("log")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=60, fontsize=6, ha="right")
    ax.set_title("verification defects")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def reconstruct_figure(deltas, errors, noiseless_error, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    if deltas:
        ax.loglog(deltas, errors, "o-", label="noisy data")
    ax.axhline(noiseless_error, color="gray", linestyle="--",
               label=f"noiseless {noiseless_error:.2e}")
    ax.set_xlabel("noise level")
    ax.set_ylabel("relative error on the trusted window")
    ax.set_title("quasi-reversibility reconstruction")
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)
