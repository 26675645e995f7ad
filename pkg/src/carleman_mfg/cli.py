"""Command-line orchestration: config in, bit-stable reports out.

    carleman-mfg <subcommand> --config <path> --out <dir> [--threads N]

Subcommands: verify, estimate, sweep, holder, lipschitz, corollary,
reconstruct.  Exit codes: 0 success, 1 validation error, 2 numerical failure
(partial outputs preserved), 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import figures, reporting
from .config import (
    SUBCOMMANDS,
    config_hash,
    load_config,
    resolve_config,
    resolved_text,
)
from .errors import (
    ConfigError,
    ConstructionError,
    ContractViolation,
    DivergenceError,
    StagnationError,
)
from .functionals import (
    check_w1_identities,
    eval_est22_bound,
    eval_thm32,
    make_evaluator,
    sweep as run_sweep,
    time_reversal_defect,
)
from .grids import (
    ScalarField,
    SpaceTimeGrid,
    SubdomainMask,
    gradient_neumann,
    integrate_q,
    laplacian_neumann,
)
from .stability import (
    QRProblem,
    conditional_corollary_experiment,
    holder_experiment,
    lipschitz_experiment,
    make_observation,
    masked_h21,
    reconstruct_qr,
)
from .system import (
    CoefficientSet,
    ModeSpec,
    manufactured_pair,
    solve_coupled,
)
from .weights import SpaceTimeWeight, TimeWeight, build_eta


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="carleman-mfg",
        description="numerical laboratory for Carleman-weighted stability "
        "of a coupled forward-backward parabolic system",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument(
            "--threads",
            type=int,
            default=int(os.environ.get("CARLEMAN_MFG_THREADS", "1")),
        )
    args = parser.parse_args(argv)

    try:
        raw = load_config(args.config)
        cfg = resolve_config(raw, args.subcommand)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3

    meta = reporting.make_meta(cfg["seed"], config_hash(cfg, args.subcommand),
                               args.subcommand)
    try:
        os.makedirs(args.out, exist_ok=True)
        reporting.write_resolved_config(
            os.path.join(args.out, "resolved_config.txt"), meta,
            resolved_text(cfg, args.subcommand),
        )
        handler = _HANDLERS[args.subcommand]
        return handler(cfg, meta, args.out, args.threads)
    except (ConfigError, ContractViolation, ConstructionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, StagnationError) as exc:
        _write_failure(args.out, meta, exc)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


def _write_failure(out_dir, meta, exc):
    payload = {"error": str(exc)}
    if isinstance(exc, DivergenceError):
        payload["history"] = list(exc.history)
        partial = getattr(exc, "partial_points", None)
        if partial:
            payload["partial_points"] = [[d, e] for d, e in partial]
    if isinstance(exc, StagnationError) and exc.trace:
        payload["trace"] = exc.trace
    try:
        reporting.write_json(os.path.join(out_dir, "report.json"), meta, payload)
    except OSError:
        pass


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _build_grid(cfg):
    g = cfg["grid"]
    return SpaceTimeGrid(tuple(g["lengths"]), tuple(int(n) for n in g["nx"]),
                         g["T"], int(g["nt"]))


def _build_coeffs(cfg, grid):
    c = cfg["coefficients"]
    if c["bound"] == 0.0:
        return CoefficientSet.zero(grid)
    q_box = None
    if c["q_box"] is not None:
        q_box = (tuple(c["q_box"][0]), tuple(c["q_box"][1]))
    return CoefficientSet.random(grid, c["bound"], c["rho0"], c["seed"],
                                 q_box=q_box, q_floor=c["q_floor"])


def _build_omega(cfg, grid):
    box = cfg["experiment"]["omega"]
    if box is None:
        raise ConfigError("missing config key: experiment.omega")
    return SubdomainMask.box(grid, tuple(box[0]), tuple(box[1]))


def _mode_spec(cfg):
    c = cfg["coefficients"]
    return ModeSpec(int(c["n_modes"]), c["amplitude"], c["rate_scale"],
                    int(c["seed"]))


def _seeded_slices(grid, seed, n_modes=3):
    rng = np.random.default_rng(seed)
    mesh = [np.squeeze(m, axis=-1) for m in grid.mesh()[: grid.dim]]
    u_T = np.zeros(grid.space_shape)
    v_0 = np.zeros(grid.space_shape)
    for m in range(n_modes):
        cu, cv = rng.uniform(-1, 1, 2)
        mode = np.cos(m * np.pi * mesh[0] / grid.lengths[0])
        for ax in range(1, grid.dim):
            mode = mode * np.cos(m * np.pi * mesh[ax] / grid.lengths[ax])
        u_T = u_T + cu * mode
        v_0 = v_0 + cv * mode
    return u_T, v_0


def _build_pair(cfg, grid, coeffs):
    """Pair + source-filled coefficients per the configured source mode."""
    e = cfg["experiment"]
    mode = e["pair"]
    if mode is None:
        mode = ("manufactured" if cfg["coefficients"]["sources"] == "manufactured"
                else "solved")
    if mode == "manufactured":
        return manufactured_pair(grid, _mode_spec(cfg), coeffs)
    picard = e["picard"]
    u_T, v_0 = _seeded_slices(grid, cfg["seed"], int(cfg["coefficients"]["n_modes"]))
    pair = solve_coupled(coeffs, u_T, v_0, tol=picard["tol"],
                         max_iter=int(picard["max_iter"]))
    return pair, coeffs


def _normalization_ref(cfg, grid):
    w = cfg["weights"]
    ref = w["normalization_ref"]
    if ref == "phi_max":
        return None
    if ref == "phi_half":
        probe = TimeWeight(w["lam"], w["s"], grid.T, sign=w["sign"])
        return probe.phi_ref / 2.0
    return float(ref)


def _estimate_inputs(cfg, grid, estimate_id, threads):
    coeffs = _build_coeffs(cfg, grid)
    inputs = {"normalization_ref": _normalization_ref(cfg, grid)}
    if estimate_id in ("THM21", "EST21"):
        pair, _ = _build_pair(cfg, grid, coeffs)
        inputs["pair"] = pair
    elif estimate_id == "THM32":
        pair, filled = manufactured_pair(grid, _mode_spec(cfg), coeffs)
        inputs["pair"] = pair
        inputs["coeffs"] = filled
        inputs["eta"] = build_eta(grid, _build_omega(cfg, grid))
    elif estimate_id in ("LEM31", "LEM32"):
        pair, filled = manufactured_pair(grid, _mode_spec(cfg), coeffs)
        inputs["field"] = pair.u if cfg["experiment"]["field"] == "u" else pair.v
        inputs["sign"] = int(cfg["experiment"]["sign"])
        inputs["eta"] = build_eta(grid, _build_omega(cfg, grid))
    else:  # EST42 / EST44
        pair, filled = manufactured_pair(grid, _mode_spec(cfg), coeffs)
        if estimate_id == "EST42":
            inputs["field"] = pair.v
            inputs["source"] = filled.G
        else:
            inputs["field"] = pair.u
            inputs["source"] = filled.F
    return inputs


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_verify(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    thr = cfg["experiment"]["thresholds"]
    rows = []

    const = ScalarField(grid, np.full(grid.shape, 3.0))
    rows.append(("laplacian_nullspace", laplacian_neumann(const).max_abs(),
                 thr["nullspace"]))

    def mode_err(g):
        freq = [np.pi / L for L in g.lengths]

        def fn(*c):
            out = np.cos(freq[0] * c[0]) + 0 * c[-1]
            for i in range(1, g.dim):
                out = out * np.cos(freq[i] * c[i])
            return out

        f = g.sample(fn)
        rate = sum(fr**2 for fr in freq)
        return np.max(np.abs(laplacian_neumann(f).values + rate * f.values))

    ratio = mode_err(grid) / mode_err(grid.refine(2))
    rows.append(("laplacian_richardson_low", ratio, thr["richardson_low"]))
    rows.append(("laplacian_richardson_high", ratio, thr["richardson_high"]))

    f = grid.sample(lambda *c: c[-1] ** 2 + 0 * c[0])
    exact = grid.T**3 / 3.0 * float(np.prod(grid.lengths))
    e1 = abs(integrate_q(f) - exact)
    f2 = grid.refine(2).sample(lambda *c: c[-1] ** 2 + 0 * c[0])
    e2 = abs(integrate_q(f2) - exact)
    rows.append(("quadrature_richardson", e1 / max(e2, 1e-300),
                 thr["richardson_low"]))

    def green_defect(g, seed):
        # self-pairing keeps the identity's scale at ||grad f||^2, away from
        # the accidental orthogonality a random (f, g) pair can produce
        pair, _ = manufactured_pair(g, ModeSpec(seed=seed))
        f = pair.u
        lhs = integrate_q(laplacian_neumann(f) * f)
        rhs = -sum(integrate_q(gf * gf) for gf in gradient_neumann(f))
        scale = abs(lhs) + abs(rhs) + 1e-30
        return abs(lhs - rhs) / scale

    gd1 = green_defect(grid, cfg["seed"])
    gd2 = green_defect(grid.refine(2), cfg["seed"])
    rows.append(("green_identity_ratio", gd1 / max(gd2, 1e-300),
                 thr["green_ratio"]))

    pair, filled = manufactured_pair(grid, _mode_spec(cfg))
    rows.append(("time_reversal", time_reversal_defect(pair.u, filled.F),
                 thr["time_reversal"]))

    w = cfg["weights"]
    tw = TimeWeight(w["lam"], w["s"], grid.T, sign=w["sign"])
    fine = grid.refine(2)
    pair_f, filled_f = manufactured_pair(fine, _mode_spec(cfg))
    tw_f = TimeWeight(w["lam"], w["s"], fine.T, sign=w["sign"])
    base = check_w1_identities(pair.u, filled.F, tw)
    half = check_w1_identities(pair_f.u, filled_f.F, tw_f)
    for name, check in base.checks.items():
        rows.append((f"w1_{name}", check.defect, thr["identity_defect"]))
        rows.append((f"w1_{name}_ratio",
                     check.defect / max(half.checks[name].defect, 1e-300),
                     thr["identity_ratio"]))

    table = []
    all_pass = True
    for name, value, threshold in rows:
        if name.endswith("_ratio") or name.endswith("_low") \
                or name == "quadrature_richardson":
            ok = value >= threshold
        elif name.endswith("_high"):
            ok = value <= threshold
        else:
            ok = value <= threshold
        all_pass &= ok
        table.append([name, value, threshold, "pass" if ok else "fail"])

    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["check", "value", "threshold", "status"], table,
                        cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta, {
        "checks": [
            {"check": r[0], "value": r[1], "threshold": r[2], "status": r[3]}
            for r in table
        ],
        "all_pass": bool(all_pass),
    })
    if cfg["report"]["figures"]:
        figures.verify_figure([(r[0], r[1], r[2]) for r in table],
                              os.path.join(out_dir, "report_defects.png"))
    return 0 if all_pass else 2


def _cmd_estimate(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    estimate_id = cfg["experiment"]["estimate_id"]
    inputs = _estimate_inputs(cfg, grid, estimate_id, threads)
    w = cfg["weights"]
    evaluator = make_evaluator(estimate_id, inputs)
    rep = evaluator(w["s"], w["lam"])
    payload = {"report": reporting.report_payload(rep)}

    if estimate_id == "THM32":
        stw = SpaceTimeWeight(inputs["eta"], w["s"], w["lam"], grid.T)
        full = eval_thm32(inputs["pair"], inputs["coeffs"], stw)
        payload["intermediate"] = {
            k: reporting.report_payload(v) for k, v in full.intermediate.items()
        }
        payload["absorbed_share"] = full.absorbed_share

    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["estimate_id", "lambda", "s", "side", "term", "value"],
                        reporting.estimate_rows([rep]),
                        cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta, payload)
    if cfg["report"]["figures"]:
        figures.estimate_figure(rep, os.path.join(out_dir, "report_terms.png"))
    return 0


def _cmd_sweep(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    estimate_id = cfg["experiment"]["estimate_id"]
    inputs = _estimate_inputs(cfg, grid, estimate_id, threads)
    w = cfg["weights"]
    lam_list = w["lam_list"] or [w["lam"]]
    eps = cfg["experiment"]["eps"] or w["eps"]
    result = run_sweep(estimate_id, inputs, w["s_list"], lam_list,
                       threads=threads, eps=eps)
    payload = {"sweep": reporting.sweep_payload(result)}

    if estimate_id in ("THM21", "EST21") and eps is not None:
        bound = eval_est22_bound(result, inputs["pair"], eps,
                                 cfg["experiment"]["M"])
        payload["two_branch_bound"] = {
            "c1_fit": bound.c1_fit,
            "amplitude": bound.amplitude,
            "d_eff": bound.d_eff,
            "d_measured": bound.d_measured,
            "mu0": bound.mu0,
            "m_bound": bound.m_bound,
            "s_star": bound.s_star,
            "balance_defect": bound.balance_defect,
            "c_fit": bound.c_fit,
            "bound_ok": bound.bound_ok,
        }

    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["estimate_id", "lambda", "s", "side", "term", "value"],
                        reporting.estimate_rows(result.points),
                        cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta, payload)
    if cfg["report"]["figures"]:
        figures.sweep_figure(result, os.path.join(out_dir, "report_ratio_vs_s.png"))
    return 0


def _run_payload(run):
    return run.to_dict()


def _cmd_holder(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    coeffs = _build_coeffs(cfg, grid)
    w = cfg["weights"]
    e = cfg["experiment"]
    eps = e["eps"] or w["eps"]

    # calibrate the data-branch growth rate on a solved homogeneous pair
    cal_pair, _ = _build_pair(
        {**cfg, "experiment": {**e, "pair": "solved"}}, grid,
        CoefficientSet.zero(grid) if coeffs.bound == 0.0 else coeffs,
    )
    s_list = w["s_list"] or [2.0, 4.0, 6.0, 8.0]
    cal = run_sweep("EST21", {"pair": cal_pair}, s_list, [w["lam"]],
                    threads=threads, eps=eps)
    run = holder_experiment(coeffs, e["M"], eps, e["D_list"], cfg["seed"],
                            lam=w["lam"], c1_fit=cal.c1_fit,
                            solver_tol=e["picard"]["tol"])

    c_cal = run.points[0][1] / run.points[0][0] ** run.theta_pred
    margins = [e_ / (c_cal * d**run.theta_pred) for d, e_ in run.points]
    payload = {
        "run": _run_payload(run),
        "bound": {
            "c_calibrated": c_cal,
            "margins": margins,
            "holds_within_20pct": bool(all(m <= 1.2 for m in margins)),
        },
    }
    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["D", "E", "log10_D", "log10_E"],
                        reporting.stability_rows(run),
                        cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta, payload)
    if cfg["report"]["figures"]:
        figures.stability_figure(run, os.path.join(out_dir,
                                                   "report_stability_fit.png"))
    return 0


def _cmd_lipschitz(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    coeffs = _build_coeffs(cfg, grid)
    omega = _build_omega(cfg, grid)
    e = cfg["experiment"]
    eps = e["eps"] or cfg["weights"]["eps"]
    run = lipschitz_experiment(coeffs, omega, eps, e["perturbation_list"],
                               cfg["seed"], mode_spec=_mode_spec(cfg),
                               paired_scaling=bool(e["paired_scaling"]))
    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["D", "E", "log10_D", "log10_E"],
                        reporting.stability_rows(run),
                        cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta,
                         {"run": _run_payload(run)})
    if cfg["report"]["figures"]:
        figures.stability_figure(run, os.path.join(out_dir,
                                                   "report_stability_fit.png"))
    return 0


def _cmd_corollary(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    coeffs = _build_coeffs(cfg, grid)
    omega = _build_omega(cfg, grid)
    e = cfg["experiment"]
    eps = e["eps"] or cfg["weights"]["eps"]
    run = conditional_corollary_experiment(coeffs, omega, eps,
                                           e["perturbation_list"], cfg["seed"],
                                           mode_spec=_mode_spec(cfg))
    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["D", "E", "log10_D", "log10_E"],
                        reporting.stability_rows(run),
                        cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta,
                         {"run": _run_payload(run)})
    if cfg["report"]["figures"]:
        figures.stability_figure(run, os.path.join(out_dir,
                                                   "report_stability_fit.png"))
    return 0


def _cmd_reconstruct(cfg, meta, out_dir, threads):
    grid = _build_grid(cfg)
    coeffs = _build_coeffs(cfg, grid)
    truth, filled = manufactured_pair(grid, _mode_spec(cfg), coeffs)
    w = cfg["weights"]
    e = cfg["experiment"]
    eps = e["eps"] or w["eps"]
    kind = e["kind"]

    omega = None
    if kind == "terminal":
        weight = TimeWeight(w["lam"], w["s"], grid.T, sign=w["sign"])
        window = (eps, grid.T)
    else:
        omega = _build_omega(cfg, grid)
        weight = SpaceTimeWeight(build_eta(grid, omega), w["s"], w["lam"], grid.T)
        window = (eps, grid.T - eps)
    solver = e["solver"]
    problem = QRProblem(kind, e["beta"], weight, omega, tol=solver["tol"],
                        atol=solver["atol"], btol=solver["btol"],
                        iter_lim=int(solver["iter_lim"]))

    den = (masked_h21(truth.u, *window) + masked_h21(truth.v, *window))

    def rel_err(rec):
        return (masked_h21(rec.u - truth.u, *window)
                + masked_h21(rec.v - truth.v, *window)) / den

    rows = []
    rec0, info0 = reconstruct_qr(problem, filled,
                                 make_observation(truth, kind, omega=omega))
    err0 = rel_err(rec0)
    rows.append([0.0, err0, info0["iterations"], info0["residual_norm"],
                 info0["optimality"]])
    deltas = [float(d) for d in (e["delta_list"] or [])]
    errors = []
    for delta in deltas:
        obs = make_observation(truth, kind, omega=omega, delta=delta,
                               seed=cfg["seed"])
        rec, info = reconstruct_qr(problem, filled, obs)
        err = rel_err(rec)
        errors.append(err)
        rows.append([delta, err, info["iterations"], info["residual_norm"],
                     info["optimality"]])

    payload = {
        "kind": kind,
        "beta": e["beta"],
        "noiseless_error": err0,
        "solver_tol": solver["tol"],
        "within_10x_tol": bool(err0 <= 10.0 * solver["tol"]),
        "noise": [[d, er] for d, er in zip(deltas, errors)],
        "window": list(window),
    }
    reporting.write_csv(os.path.join(out_dir, "report.csv"), meta,
                        ["delta", "error", "iterations", "residual_norm",
                         "optimality"], rows, cfg["report"]["precision"])
    reporting.write_json(os.path.join(out_dir, "report.json"), meta, payload)
    reporting.write_fields_csv(
        os.path.join(out_dir, "fields.csv"), meta, grid,
        {"u_reconstructed": rec0.u, "v_reconstructed": rec0.v,
         "u_truth": truth.u, "v_truth": truth.v},
        cfg["report"]["precision"],
    )
    if cfg["report"]["figures"]:
        figures.reconstruct_figure(deltas, errors, err0,
                                   os.path.join(out_dir,
                                                "report_reconstruction.png"))
    return 0


_HANDLERS = {
    "verify": _cmd_verify,
    "estimate": _cmd_estimate,
    "sweep": _cmd_sweep,
    "holder": _cmd_holder,
    "lipschitz": _cmd_lipschitz,
    "corollary": _cmd_corollary,
    "reconstruct": _cmd_reconstruct,
}


if __name__ == "__main__":
    sys.exit(main())
