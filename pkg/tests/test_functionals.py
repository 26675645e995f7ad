import math

import numpy as np
import pytest

from carleman_mfg import (
    CoefficientSet,
    ContractViolation,
    ModeSpec,
    SolutionPair,
    SpaceTimeGrid,
    SpaceTimeWeight,
    SubdomainMask,
    TimeWeight,
    build_eta,
    manufactured_pair,
    solve_coupled,
    time_reverse,
    zeros_field,
)
from carleman_mfg.functionals import (
    calibrate_s0,
    check_w1_identities,
    eval_est21,
    eval_est22_bound,
    eval_est42,
    eval_est44,
    eval_lem31,
    eval_lem32,
    eval_thm21,
    eval_thm32,
    fit_exponential_rate,
    sweep,
    time_reversal_defect,
)


def grid_1d(nx=51, nt=101, L=1.0, T=1.0):
    return SpaceTimeGrid(L, nx, T, nt)


def heat_pair(g):
    x = g.space_axes()[0]
    return solve_coupled(CoefficientSet.zero(g), np.cos(np.pi * x),
                         np.cos(np.pi * x), tol=1e-10)


def eta_for(g, lo=0.35, hi=0.75):
    return build_eta(g, SubdomainMask.box(g, lo, hi))


# -- report structure ---------------------------------------------------------


def test_zero_pair_gives_zero_report():
    g = grid_1d(21, 41)
    pair = SolutionPair(zeros_field(g), zeros_field(g), 0.0, 0.0)
    rep = eval_thm21(pair, TimeWeight(1.0, 2.0, g.T))
    assert rep.lhs_total == 0.0
    assert rep.rhs_total == 0.0
    assert math.isnan(rep.ratio)
    assert not rep.violation_candidate


def test_violation_candidate_flagged_when_rhs_vanishes():
    # u with identically zero terminal slice and v = 0: every data term on
    # the right vanishes while the left keeps the du/dt mass
    g = grid_1d(31, 41)
    u = g.sample(lambda x, t: (1.0 - t) * np.cos(np.pi * x))
    pair = SolutionPair(u, zeros_field(g), 0.0, 0.0)
    rep = eval_thm21(pair, TimeWeight(1.0, 2.0, g.T))
    assert rep.rhs_total == 0.0
    assert rep.lhs_total > 0.0
    assert rep.violation_candidate
    assert math.isnan(rep.ratio)


def test_est22_bound_rejects_multi_lambda_sweeps():
    g = grid_1d(41, 81)
    pair = heat_pair(g)
    sw = sweep("EST21", {"pair": pair}, [2.0, 4.0], [1.0, 2.0])
    with pytest.raises(ContractViolation):
        eval_est22_bound(sw, pair, 0.1, M=5.0)


def test_report_terms_nonnegative_and_total_consistent():
    g = grid_1d()
    pair = heat_pair(g)
    rep = eval_thm21(pair, TimeWeight(2.0, 5.0, g.T))
    assert all(v >= 0.0 for v in rep.lhs_terms.values())
    assert all(v >= 0.0 for v in rep.rhs_terms.values())
    assert rep.lhs_total == pytest.approx(sum(rep.lhs_terms.values()), rel=1e-12)
    assert rep.rhs_total == pytest.approx(sum(rep.rhs_terms.values()), rel=1e-12)
    assert len(rep.lhs_terms) == 12 and len(rep.rhs_terms) == 4


def test_homogeneity_of_ratio():
    g = grid_1d()
    pair = heat_pair(g)
    tw = TimeWeight(2.0, 5.0, g.T)
    base = eval_thm21(pair, tw)
    scaled = eval_thm21(pair.scaled(10.0), tw)
    assert scaled.ratio == pytest.approx(base.ratio, rel=1e-10)
    for name in base.lhs_terms:
        assert scaled.lhs_terms[name] == pytest.approx(
            100.0 * base.lhs_terms[name], rel=1e-10
        )


def test_normalization_reference_invariance():
    g = grid_1d()
    pair = heat_pair(g)
    for builder in (eval_thm21, eval_est21):
        tw1 = TimeWeight(2.0, 5.0, g.T)
        tw2 = TimeWeight(2.0, 5.0, g.T, normalization_ref=tw1.phi_ref / 2.0)
        r1 = builder(pair, tw1)
        r2 = builder(pair, tw2)
        assert r1.ratio == pytest.approx(r2.ratio, rel=1e-12)


def test_thm21_ratio_mesh_stable():
    ratios = []
    for nx, nt in [(51, 101), (101, 201)]:
        g = grid_1d(nx, nt)
        rep = eval_thm21(heat_pair(g), TimeWeight(2.0, 5.0, g.T))
        ratios.append(rep.ratio)
    assert ratios[1] == pytest.approx(ratios[0], rel=0.2)


# -- fixed-lambda reduction and the two-branch bound --------------------------


def test_est21_sweep_and_two_branch_bound():
    g = grid_1d(101, 201)
    pair = heat_pair(g)
    eps = 0.1
    sw = sweep("EST21", {"pair": pair}, [2.0, 4.0, 6.0, 8.0], [1.0], eps=eps)
    assert sw.c1_fit is not None and sw.c1_fit >= 0.0
    # growth rate tracks 2*(phi(T) - phi(eps)) up to polynomial slack
    assert sw.c1_fit == pytest.approx(2 * (math.e - math.exp(0.1)), rel=0.15)
    bound = eval_est22_bound(sw, pair, eps, M=5.0)
    assert bound.balance_defect <= 0.05
    assert bound.bound_ok
    assert bound.c1_fit == sw.c1_fit
    assert bound.s_star > 0.0


def test_est22_zero_terminal_data_floor():
    # pair with (near-)zero terminal data: data branch collapses to the floor
    g = grid_1d(51, 201)
    x = g.space_axes()[0]
    v0 = np.cos(3 * np.pi * x)
    pair = solve_coupled(CoefficientSet.zero(g), np.zeros(g.space_shape), v0,
                         tol=1e-11)
    rep = eval_est21(pair, TimeWeight(1.0, 4.0, g.T))
    # terminal traces decay like exp(-9 pi^2): pure discretization floor
    assert rep.rhs_terms["terminal_data"] < 1e-20 * rep.rhs_terms["initial_grad_v"]


def test_fit_exponential_rate_exact():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    vals = 0.7 * np.exp(3.0 * s)
    rate, amp = fit_exponential_rate(s, vals)
    assert rate == pytest.approx(3.0, abs=1e-6)
    assert amp == pytest.approx(0.7, rel=1e-6)


def test_calibrate_s0():
    assert calibrate_s0([1, 2, 3, 4], [5.0, 4.0, 3.0, 2.9]) == 1.0
    assert calibrate_s0([1, 2, 3, 4], [1.0, 2.0, 2.05, 2.0]) == 2.0
    assert calibrate_s0([1, 2, 3, 4], [1.0, 2.0, 4.0, 8.0]) == 4.0


# -- interior-observation estimates -------------------------------------------


def test_lem31_zero_field():
    g = grid_1d(41, 81)
    eta = eta_for(g)
    rep = eval_lem31(zeros_field(g), SpaceTimeWeight(eta, 2.0, 1.0, g.T))
    assert rep.lhs_total == 0.0 and rep.rhs_total == 0.0


def test_lem31_heat_mode_ratio_bounded_and_mesh_stable():
    ratios = {}
    for nx, nt in [(51, 101), (101, 201)]:
        g = grid_1d(nx, nt)
        eta = eta_for(g)
        f = g.sample(lambda x, t: np.exp(-np.pi**2 * t) * np.cos(np.pi * x))
        sw = sweep("LEM31", {"field": f, "eta": eta, "sign": -1},
                   [2.0, 4.0, 6.0, 8.0], [1.0])
        rr = sw.ratios(1.0)
        assert max(rr) <= rr[0] * 1.1
        ratios[(nx, nt)] = rr[0]
    assert ratios[(101, 201)] == pytest.approx(ratios[(51, 101)], rel=0.2)


def test_lem31_time_reversal_term_agreement():
    g = grid_1d(81, 161)
    eta = eta_for(g)
    stw = SpaceTimeWeight(eta, 3.0, 1.0, g.T)
    pair, _ = manufactured_pair(g, ModeSpec(seed=6))
    f = pair.u
    plus = eval_lem31(f, stw, sign=1)
    minus = eval_lem31(time_reverse(f), stw, sign=-1)
    for side in ("lhs_terms", "rhs_terms"):
        for name, val in getattr(plus, side).items():
            assert getattr(minus, side)[name] == pytest.approx(val, rel=1e-9)


def test_lem32_mirrors_lem31_with_shifted_powers():
    g = grid_1d(81, 161)
    eta = eta_for(g)
    stw = SpaceTimeWeight(eta, 3.0, 1.0, g.T)
    pair, _ = manufactured_pair(g, ModeSpec(seed=6))
    plus = eval_lem32(pair.u, stw, sign=1)
    minus = eval_lem32(time_reverse(pair.u), stw, sign=-1)
    for name, val in plus.lhs_terms.items():
        assert minus.lhs_terms[name] == pytest.approx(val, rel=1e-9)
    rep = eval_lem32(zeros_field(g), stw)
    assert rep.lhs_total == 0.0


def test_lem32_heat_mode_bounded():
    g = grid_1d(51, 101)
    eta = eta_for(g)
    f = g.sample(lambda x, t: np.exp(-np.pi**2 * t) * np.cos(np.pi * x))
    sw = sweep("LEM32", {"field": f, "eta": eta, "sign": -1},
               [2.0, 4.0, 6.0, 8.0], [1.0])
    rr = sw.ratios(1.0)
    assert max(rr) <= rr[0] * 1.1


def test_thm32_zero_and_random_pair():
    g = grid_1d(81, 161)
    eta = eta_for(g)
    stw = SpaceTimeWeight(eta, 16.0, 1.0, g.T)
    zero = SolutionPair(zeros_field(g), zeros_field(g), 0.0, 0.0)
    zc = CoefficientSet.zero(g)
    rep = eval_thm32(zero, zc, stw)
    assert rep.main.lhs_total == 0.0

    coeffs = CoefficientSet.random(g, 0.25, 0.3, seed=5)
    pair, filled = manufactured_pair(g, ModeSpec(seed=5), coeffs)
    ratios = [
        eval_thm32(pair, filled, SpaceTimeWeight(eta, s, 1.0, g.T)).main.ratio
        for s in (16.0, 32.0, 48.0, 64.0)
    ]
    assert max(ratios) <= ratios[0] * 1.1
    assert set(eval_thm32(pair, filled, stw).intermediate) == {
        "EST33", "EST34", "EST35",
    }


def test_thm32_mesh_stability():
    vals = []
    for nx, nt in [(51, 101), (101, 201)]:
        g = grid_1d(nx, nt)
        eta = eta_for(g)
        coeffs = CoefficientSet.random(g, 0.25, 0.3, seed=5)
        pair, filled = manufactured_pair(g, ModeSpec(seed=5), coeffs)
        vals.append(eval_thm32(pair, filled,
                               SpaceTimeWeight(eta, 16.0, 1.0, g.T)).main.ratio)
    assert vals[1] == pytest.approx(vals[0], rel=0.2)


def test_thm32_absorption_share_decreases():
    g = grid_1d(81, 161)
    eta = eta_for(g)
    coeffs = CoefficientSet.random(g, 0.25, 0.3, seed=7)
    pair, filled = manufactured_pair(g, ModeSpec(seed=7), coeffs)
    shares = [
        eval_thm32(pair, filled, SpaceTimeWeight(eta, s, 1.0, g.T)).absorbed_share
        for s in (4.0, 8.0, 16.0, 32.0)
    ]
    assert all(b < a for a, b in zip(shares, shares[1:]))


# -- single-field estimates and conjugation identities -------------------------


def test_est42_est44_zero_and_bounded():
    g = grid_1d(51, 101)
    z = zeros_field(g)
    tw = TimeWeight(1.0, 2.0, g.T)
    assert eval_est42(z, z, tw).lhs_total == 0.0
    assert eval_est44(z, z, tw).lhs_total == 0.0

    v = g.sample(lambda x, t: np.exp(-np.pi**2 * t) * np.cos(np.pi * x))
    u = g.sample(lambda x, t: np.exp(-np.pi**2 * (1 - t)) * np.cos(np.pi * x))
    from carleman_mfg.grids import laplacian_neumann, time_derivative

    g_src = v.with_values(time_derivative(v).values - laplacian_neumann(v).values)
    f_src = u.with_values(time_derivative(u).values + laplacian_neumann(u).values)
    sw42 = sweep("EST42", {"field": v, "source": g_src}, [2, 4, 6, 8], [1.0])
    sw44 = sweep("EST44", {"field": u, "source": f_src}, [2, 4, 6, 8], [1.0])
    for sw_ in (sw42, sw44):
        rr = sw_.ratios(1.0)
        assert all(np.isfinite(r) for r in rr)
        assert max(rr) <= rr[0] * 1.1


def test_w1_identity_const_in_time():
    g = grid_1d(41, 81)
    u = g.sample(lambda x, t: np.cos(np.pi * x) + 0 * t)
    from carleman_mfg.grids import laplacian_neumann, time_derivative

    f_src = u.with_values(time_derivative(u).values + laplacian_neumann(u).values)
    # with s*phi frozen to a constant reference the envelope is constant in t:
    # both sides of the gradient-trace identity vanish identically
    tw = TimeWeight(1e-9, 1e-9, g.T)
    rep = check_w1_identities(u, f_src, tw)
    chk = rep.checks["i1_gradient_trace"]
    assert abs(chk.lhs) < 1e-8 and abs(chk.rhs) < 1e-13


def test_w1_identity_defects_and_refinement():
    defects = {}
    for factor in (1, 2):
        g = grid_1d(51 * factor - (factor - 1), 101 * factor - (factor - 1))
        pair, filled = manufactured_pair(g, ModeSpec(seed=1))
        tw = TimeWeight(1.0, 1.0, g.T)
        rep = check_w1_identities(pair.u, filled.F, tw)
        defects[factor] = {k: c.defect for k, c in rep.checks.items()}
    for name in defects[1]:
        assert defects[1][name] < 5e-3
        assert defects[1][name] / max(defects[2][name], 1e-300) >= 3.0


def test_conjugation_two_paths_disagreement_is_discretization_only():
    g = grid_1d(101, 201)
    pair, filled = manufactured_pair(g, ModeSpec(seed=1))
    rep = check_w1_identities(pair.u, filled.F, TimeWeight(1.0, 1.0, g.T))
    assert rep.checks["conjugation"].defect <= 1e-3
    assert rep.checks["substitution"].defect <= 1e-3


def test_time_reversal_defect_zero():
    g = grid_1d(41, 81)
    pair, filled = manufactured_pair(g, ModeSpec(seed=2))
    assert time_reversal_defect(pair.u, filled.F) <= 1e-12


# -- sweeps --------------------------------------------------------------------


def test_sweep_single_point_equals_report():
    g = grid_1d(41, 81)
    pair = heat_pair(g)
    tw = TimeWeight(1.0, 3.0, g.T)
    single = eval_thm21(pair, tw)
    sw = sweep("THM21", {"pair": pair}, [3.0], [1.0])
    assert len(sw.points) == 1
    assert sw.points[0].ratio == pytest.approx(single.ratio, rel=1e-14)


def test_sweep_ordering_and_validation():
    g = grid_1d(41, 81)
    pair = heat_pair(g)
    sw = sweep("THM21", {"pair": pair}, [1.0, 2.0], [2.0, 1.0])
    lams = [p.lam for p in sw.points]
    assert lams == sorted(lams)
    with pytest.raises(ContractViolation):
        sweep("THM21", {"pair": pair}, [2.0, 1.0], [1.0])
    with pytest.raises(ContractViolation):
        sweep("NOPE", {"pair": pair}, [1.0], [1.0])


def test_sweep_threads_deterministic():
    g = grid_1d(41, 81)
    pair = heat_pair(g)
    sw1 = sweep("THM21", {"pair": pair}, [1.0, 2.0, 3.0], [1.0], threads=1)
    sw4 = sweep("THM21", {"pair": pair}, [1.0, 2.0, 3.0], [1.0], threads=4)
    assert [p.ratio for p in sw1.points] == [p.ratio for p in sw4.points]


def test_sweep_ratios_finite():
    g = grid_1d(41, 81)
    pair = heat_pair(g)
    sw = sweep("THM21", {"pair": pair}, [2.0, 4.0, 8.0], [1.0])
    assert all(np.isfinite(r.ratio) for r in sw.points)
    assert np.isfinite(sw.max_ratio)


def test_estimates_run_in_2d():
    g = SpaceTimeGrid((1.0, 1.0), (21, 21), 1.0, 41)
    omega = SubdomainMask.box(g, (0.3, 0.3), (0.7, 0.7))
    eta = build_eta(g, omega)
    coeffs = CoefficientSet.random(g, 0.2, 0.2, seed=3)
    pair, filled = manufactured_pair(g, ModeSpec(seed=3), coeffs)
    rep31 = eval_lem31(pair.u, SpaceTimeWeight(eta, 8.0, 1.0, g.T))
    assert np.isfinite(rep31.ratio) and rep31.lhs_total > 0.0
    rep32 = eval_thm32(pair, filled, SpaceTimeWeight(eta, 8.0, 1.0, g.T))
    assert np.isfinite(rep32.main.ratio)
    tw = TimeWeight(1.0, 2.0, g.T)
    rep21 = eval_thm21(pair, tw)
    assert np.isfinite(rep21.ratio)
    w1 = check_w1_identities(pair.u, filled.F, tw)
    assert w1.max_defect() < 0.05  # coarse 2D mesh, just finiteness and sanity
