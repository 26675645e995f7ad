"""Acceptance suite: one test per criterion, each printing a PASS line.

Calibrated constants (pinned here, measured on the meshes used below):
  * terminal-data estimates THM21/EST21: lam = 1, s0 = 2, sweep {2,4,6,8}
  * interior estimates LEM31/LEM32/THM32: lam = 1, s0 = 16, sweep {16,32,48,64}
  * terminal-data experiment: domain (0, pi), M = 5, eps = T/10
  * suite-wide slice constant bound: 0.25 (measured 0.153 with headroom)
"""

import math

import numpy as np
import pytest
import yaml

from carleman_mfg import (
    CoefficientSet,
    ModeSpec,
    SpaceTimeGrid,
    SpaceTimeWeight,
    SubdomainMask,
    TimeWeight,
    build_eta,
    laplacian_neumann,
    manufactured_pair,
    mu0,
    s_star,
    solve_coupled,
    theta_exponent,
)
from carleman_mfg.cli import main as cli_main
from carleman_mfg.functionals import (
    check_w1_identities,
    eval_lem31,
    eval_thm21,
    eval_thm32,
    sweep,
    time_reversal_defect,
)
from carleman_mfg.grids import ScalarField
from carleman_mfg.stability import (
    QRProblem,
    conditional_corollary_experiment,
    holder_experiment,
    lipschitz_experiment,
    make_observation,
    manufactured_suite,
    masked_h21,
    reconstruct_qr,
    standard_suite,
)

PI = math.pi


def _pass(n, detail):
    print(f"ACCEPTANCE {n}: PASS ({detail})")


def test_criterion_1_operator_correctness():
    g = SpaceTimeGrid(1.0, 31, 1.0, 5)
    const = ScalarField(g, np.full(g.shape, 2.5))
    null = laplacian_neumann(const).max_abs()
    assert null <= 1e-12

    ratios = []
    errs = []
    for nx in (101, 201):
        g1 = SpaceTimeGrid(1.0, nx, 1.0, 5)
        f = g1.sample(lambda x, t: np.cos(np.pi * x) + 0 * t)
        errs.append(np.max(np.abs(laplacian_neumann(f).values
                                  + np.pi**2 * f.values)))
    ratios.append(errs[0] / errs[1])

    errs2 = []
    for n in (33, 65):
        g2 = SpaceTimeGrid((1.0, 1.0), (n, n), 1.0, 3)
        f = g2.sample(
            lambda x, y, t: np.cos(np.pi * x) * np.cos(2 * np.pi * y) + 0 * t
        )
        errs2.append(np.max(np.abs(laplacian_neumann(f).values
                                   + 5 * np.pi**2 * f.values)))
    ratios.append(errs2[0] / errs2[1])

    assert all(3.4 <= r <= 4.6 for r in ratios)
    _pass(1, f"null space {null:.1e}, Richardson ratios "
             + ", ".join(f"{r:.3f}" for r in ratios))


def test_criterion_2_solver_correctness():
    g = SpaceTimeGrid(1.0, 51, 1.0, 101)
    cs = CoefficientSet.zero(g)
    x = g.space_axes()[0]
    pair = solve_coupled(cs, np.cos(PI * x), np.cos(PI * x), tol=1e-10)
    u_exact = g.sample(lambda x, t: np.exp(-PI**2 * (1 - t)) * np.cos(PI * x))
    v_exact = g.sample(lambda x, t: np.exp(-PI**2 * t) * np.cos(PI * x))
    err = max(
        np.max(np.abs(pair.u.values - u_exact.values)),
        np.max(np.abs(pair.v.values - v_exact.values)),
    )
    tol = 5.0 * (g.h[0] ** 2 + g.tau)
    assert err <= tol

    zero = solve_coupled(cs, np.zeros(g.space_shape), np.zeros(g.space_shape),
                         tol=1e-12)
    assert zero.u.max_abs() == 0.0 and zero.v.max_abs() == 0.0

    suite_grid = SpaceTimeGrid(1.0, 61, 1.0, 121)
    suite = standard_suite(suite_grid, n=10, seed0=100)
    for _, p in suite:
        ch = p.iterate_changes
        assert all(ch[i + 1] < ch[i] for i in range(1, len(ch) - 1))
    _pass(2, f"heat-mode error {err:.2e} <= {tol:.2e}, zero data exact, "
             f"10/10 Picard runs monotone")


def test_criterion_3_proof_identity_suite():
    defects = {}
    for factor, (nx, nt) in enumerate([(101, 201), (201, 401)]):
        g = SpaceTimeGrid(1.0, nx, 1.0, nt)
        pair, filled = manufactured_pair(g, ModeSpec(seed=1))
        rep = check_w1_identities(pair.u, filled.F, TimeWeight(1.0, 1.0, g.T))
        defects[factor] = {k: c.defect for k, c in rep.checks.items()}
        if factor == 0:
            tr = time_reversal_defect(pair.u, filled.F)

    for name, base in defects[0].items():
        assert base <= 1e-3, f"{name} base defect {base:.2e}"
        ratio = base / max(defects[1][name], 1e-300)
        assert ratio >= 3.0, f"{name} halving ratio {ratio:.2f}"
    assert tr <= 1e-12
    worst = max(defects[0].values())
    _pass(3, f"max identity defect {worst:.2e} <= 1e-3, all halving ratios "
             f">= 3, time reversal {tr:.1e}")


def test_criterion_4_exponent_bookkeeping():
    m = 0.7
    assert theta_exponent(2 * m, m) == pytest.approx(0.5, abs=1e-12)
    assert theta_exponent(1.0, 1.0) == pytest.approx(2.0 / 3.0, abs=1e-12)
    assert s_star(1.0, 0.5, math.e, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert s_star(1.0, 1.0, 10.0, 1.0) == pytest.approx(
        (2.0 / 3.0) * math.log(10.0), rel=1e-12
    )
    for c1, m0, M, D in [(3.3, 0.105, 5.0, 0.01), (1.0, 1.0, 10.0, 1.0),
                         (0.5, 0.25, 2.0, 0.3)]:
        s = s_star(c1, m0, M, D)
        lhs = math.exp(c1 * s) * D**2
        rhs = math.exp(-2.0 * s * m0) * M**2
        assert lhs == pytest.approx(rhs, rel=1e-12)
    _pass(4, "theta and s* formulas exact, branch balance to 1e-12")


def test_criterion_5_carleman_ratio_boundedness():
    g = SpaceTimeGrid(1.0, 101, 1.0, 201)
    omega = SubdomainMask.box(g, 0.35, 0.75)
    eta = build_eta(g, omega)
    solved = standard_suite(g, n=10, seed0=100)
    made = manufactured_suite(g, n=10, seed0=200)

    worst = {}
    for name, s_list in [("THM21", [2, 4, 6, 8]), ("EST21", [2, 4, 6, 8])]:
        w = 0.0
        for _, pair in solved:
            rr = sweep(name, {"pair": pair}, s_list, [1.0]).ratios(1.0)
            w = max(w, max(rr) / rr[0])
        worst[name] = w
    for name, s_list in [("LEM31", [16, 32, 48, 64]),
                         ("LEM32", [16, 32, 48, 64])]:
        w = 0.0
        for _, pair in made:
            rr = sweep(name, {"field": pair.u, "eta": eta, "sign": -1},
                       s_list, [1.0]).ratios(1.0)
            w = max(w, max(rr) / rr[0])
        worst[name] = w
    w = 0.0
    for coeffs, pair in made:
        rr = sweep("THM32", {"pair": pair, "coeffs": coeffs, "eta": eta},
                   [16, 32, 48, 64], [1.0]).ratios(1.0)
        w = max(w, max(rr) / rr[0])
    worst["THM32"] = w
    assert all(v <= 1.1 for v in worst.values()), worst

    # homogeneity invariance of ratios
    pair = solved[0][1]
    tw = TimeWeight(1.0, 4.0, g.T)
    r_base = eval_thm21(pair, tw).ratio
    r_scaled = eval_thm21(pair.scaled(10.0), tw).ratio
    assert r_scaled == pytest.approx(r_base, rel=1e-10)
    stw = SpaceTimeWeight(eta, 16.0, 1.0, g.T)
    coeffs0, pair0 = made[0]
    r31 = eval_lem31(pair0.u, stw).ratio
    r31s = eval_lem31(pair0.u * 10.0, stw).ratio
    assert r31s == pytest.approx(r31, rel=1e-10)

    # weight-normalization invariance
    tw_half = TimeWeight(1.0, 4.0, g.T, normalization_ref=tw.phi_ref / 2.0)
    assert eval_thm21(pair, tw_half).ratio == pytest.approx(r_base, rel=1e-12)

    detail = ", ".join(f"{k} {v:.3f}" for k, v in worst.items())
    _pass(5, f"max ratio growth over sweeps: {detail} (all <= 1.1)")


def test_criterion_6_holder_stability_shape():
    g = SpaceTimeGrid(PI, 101, 1.0, 201)
    eps, lam, M = 0.1, 1.0, 5.0
    x = g.space_axes()[0]
    cal_pair = solve_coupled(
        CoefficientSet.zero(g),
        np.cos(PI * x / PI) + 0.5 * np.cos(2 * x),
        np.cos(x) - 0.3 * np.cos(2 * x),
        tol=1e-10,
    )
    cal = sweep("EST21", {"pair": cal_pair}, [2, 4, 6, 8], [lam], eps=eps)
    assert cal.c1_fit is not None and cal.c1_fit > 0.0

    run = holder_experiment(CoefficientSet.zero(g), M=M, eps=eps,
                            D_list=[1e-1, 1e-2, 1e-3, 1e-4], seed=1,
                            lam=lam, c1_fit=cal.c1_fit)
    theta = run.theta_pred
    assert theta == pytest.approx(theta_exponent(cal.c1_fit, mu0(lam, eps)),
                                  rel=1e-14)
    assert 0.0 < theta < 1.0
    assert run.r2 >= 0.98
    c_cal = run.points[0][1] / run.points[0][0] ** theta
    margins = [e / (c_cal * d**theta) for d, e in run.points]
    assert all(m <= 1.2 for m in margins)
    assert run.p > 0.0
    _pass(6, f"theta_pred {theta:.4f}, fitted p {run.p:.4f}, R2 {run.r2:.4f}, "
             f"worst bound margin {max(margins):.3f} <= 1.2")


SLICE_CONSTANT_BOUND = 0.25  # frozen: seeded calibration measured 0.153


def test_criterion_7_lipschitz_stability_shape():
    g = SpaceTimeGrid(1.0, 61, 1.0, 121)
    omega = SubdomainMask.box(g, 0.3, 0.7)
    coeffs = CoefficientSet.random(g, 0.25, 0.3, seed=4)
    scales = [10.0 ** (-k) for k in range(5)]

    run = lipschitz_experiment(coeffs, omega, 0.1, scales, seed=9)
    assert 0.9 <= run.p <= 1.1
    assert run.r2 >= 0.98

    scaling = lipschitz_experiment(coeffs, omega, 0.1, scales, seed=9,
                                   paired_scaling=True)
    assert scaling.p == pytest.approx(1.0, abs=1e-10)

    c_suite = run.extras["slice_constant"]
    assert all(r <= c_suite * (1 + 1e-12) for r in run.extras["slice_ratios"])
    assert c_suite <= SLICE_CONSTANT_BOUND
    _pass(7, f"random p {run.p:.4f} (R2 {run.r2:.4f}), scaling p-1 "
             f"{abs(scaling.p - 1):.1e}, slice constant {c_suite:.4f} <= "
             f"{SLICE_CONSTANT_BOUND}")


def test_criterion_8_reconstruction():
    g = SpaceTimeGrid(PI, 41, 0.5, 81)
    truth, filled = manufactured_pair(
        g, ModeSpec(n_modes=2, rate_scale=1.5, seed=12), CoefficientSet.zero(g)
    )
    tw = TimeWeight(1.0, 1.0, g.T)
    window = (g.T / 10, g.T)
    den = masked_h21(truth.u, *window) + masked_h21(truth.v, *window)

    def rel_err(rec):
        return (masked_h21(rec.u - truth.u, *window)
                + masked_h21(rec.v - truth.v, *window)) / den

    problem = QRProblem("terminal", beta=1e-6, weight=tw, tol=1e-6)
    rec, _ = reconstruct_qr(problem, filled, make_observation(truth, "terminal"))
    err0 = rel_err(rec)
    assert err0 <= 10.0 * problem.tol

    deltas = [1e-1, 1e-2, 1e-3, 1e-4]
    errs = []
    noisy_problem = QRProblem("terminal", beta=1e-2, weight=tw)
    for delta in deltas:
        obs = make_observation(truth, "terminal", delta=delta, seed=77)
        recn, _ = reconstruct_qr(noisy_problem, filled, obs)
        errs.append(rel_err(recn))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    slope = np.polyfit(np.log(deltas), np.log(errs), 1)[0]
    assert slope > 0.0

    gc = SpaceTimeGrid(1.0, 61, 1.0, 121)
    omega = SubdomainMask.box(gc, 0.3, 0.7)
    cq = CoefficientSet.random(gc, 0.3, 0.2, seed=5, q_box=(0.25, 0.75))
    cor = conditional_corollary_experiment(cq, omega, 0.1,
                                           [10.0 ** (-k) for k in range(5)],
                                           seed=3)
    assert 0.8 <= cor.p <= 1.2
    _pass(8, f"noiseless error {err0:.2e} <= 1e-5, noise slope {slope:.3f} > 0, "
             f"u-only run p {cor.p:.4f} in [0.8, 1.2]")


def test_criterion_9_reproducibility(tmp_path):
    configs = {
        "sweep": {
            "seed": 3,
            "grid": {"dim": 1, "lengths": [1.0], "nx": [51], "nt": 101,
                     "T": 1.0},
            "weights": {"lam": 1.0, "s": 2.0, "s_list": [2.0, 4.0],
                        "eps": 0.1},
            "coefficients": {"bound": 0.25, "rho0": 0.3},
            "experiment": {"estimate_id": "EST21"},
            "report": {"figures": False},
        },
        "holder": {
            "seed": 11,
            "grid": {"dim": 1, "lengths": [PI], "nx": [61], "nt": 121,
                     "T": 1.0},
            "weights": {"lam": 1.0, "eps": 0.1},
            "coefficients": {"bound": 0.0},
            "experiment": {"M": 5.0, "D_list": [1e-1, 1e-2, 1e-3]},
            "report": {"figures": False},
        },
        "lipschitz": {
            "seed": 5,
            "grid": {"dim": 1, "lengths": [1.0], "nx": [41], "nt": 81,
                     "T": 1.0},
            "weights": {"lam": 1.0, "eps": 0.1},
            "coefficients": {"bound": 0.25, "rho0": 0.3},
            "experiment": {"omega": [[0.3], [0.7]],
                           "perturbation_list": [1.0, 0.1, 0.01]},
            "report": {"figures": False},
        },
        "reconstruct": {
            "seed": 12,
            "grid": {"dim": 1, "lengths": [PI], "nx": [21], "nt": 31,
                     "T": 0.5},
            "weights": {"lam": 1.0, "s": 1.0, "eps": 0.05},
            "coefficients": {"bound": 0.0, "n_modes": 2, "rate_scale": 1.5,
                             "sources": "manufactured"},
            "experiment": {"kind": "terminal", "beta": 1e-4},
            "report": {"figures": False},
        },
    }
    for name, cfg in configs.items():
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump(cfg))
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / f"{name}_{tag}"
            assert cli_main([name, "--config", str(path), "--out",
                             str(out)]) == 0
            outs.append(out)
        for fname in ("report.csv", "report.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), (
                f"{name}/{fname} differs between reruns"
            )
    _pass(9, "sweep, holder, lipschitz, reconstruct reruns byte-identical "
             "(CSV and JSON)")
