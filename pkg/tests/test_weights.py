import math

import numpy as np
import pytest

from carleman_mfg import (
    ContractViolation,
    SpaceTimeGrid,
    SpaceTimeWeight,
    SubdomainMask,
    TimeWeight,
    build_eta,
    mu0,
    s_star,
    theta_exponent,
)


def test_phi_values():
    tw = TimeWeight(lam=math.log(2.0), s=1.0, T=2.0)
    assert tw.phi(0.0) == pytest.approx(1.0, rel=1e-15)
    assert tw.phi(1.0) == pytest.approx(2.0, rel=1e-15)


def test_norm_weight_reference_and_range():
    tw = TimeWeight(lam=1.5, s=3.0, T=1.0)
    assert tw.norm_weight(1.0) == pytest.approx(1.0, rel=1e-15)
    ts = np.linspace(0.0, 1.0, 50)
    w = tw.weight_array(ts)
    assert np.all(w <= 1.0) and np.all(w > 0.0)
    assert np.all(np.diff(w) >= 0.0)  # nondecreasing in t
    assert tw.norm_weight(0.0) == pytest.approx(
        math.exp(2 * 3.0 * (1.0 - math.exp(1.5))), rel=1e-12
    )


def test_norm_weight_underflow_flushes():
    tw = TimeWeight(lam=3.0, s=50.0, T=2.0)
    assert tw.norm_weight(0.0) == 0.0  # flushed, not an exception


def test_decreasing_sign_variant():
    tw = TimeWeight(lam=2.0, s=1.0, T=1.0, sign=-1)
    assert tw.phi(1.0) == pytest.approx(math.exp(-2.0), rel=1e-14)
    # reference defaults to the peak, which now sits at t=0
    assert tw.norm_weight(0.0) == pytest.approx(1.0, rel=1e-15)
    assert tw.norm_weight(1.0) < 1.0


def test_mu0_values_and_monotonicity():
    assert mu0(math.log(2.0), 1.0) == pytest.approx(1.0, rel=1e-14)
    assert mu0(1.0, 0.5) == pytest.approx(0.6487212707, rel=1e-9)
    assert mu0(1.0, 1e-9) < 1e-8  # vanishes with eps
    assert mu0(2.0, 0.5) > mu0(1.0, 0.5)
    assert mu0(1.0, 0.6) > mu0(1.0, 0.5)
    with pytest.raises(ContractViolation):
        mu0(0.0, 0.5)
    with pytest.raises(ContractViolation):
        mu0(1.0, 0.0)


def test_theta_exponent_exact_cases():
    m = 0.7
    assert theta_exponent(2 * m, m) == pytest.approx(0.5, abs=1e-15)
    assert theta_exponent(1.0, 1.0) == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert theta_exponent(1.0, 1e6) > 0.999
    assert theta_exponent(1.0, 0.5) > theta_exponent(2.0, 0.5)
    assert 0.0 < theta_exponent(5.0, 0.01) < 1.0


def test_s_star_exact_cases():
    assert s_star(1.0, 0.5, math.e, 1.0) == pytest.approx(1.0, rel=1e-14)
    assert s_star(1.0, 1.0, 10.0, 1.0) == pytest.approx(2.0 / 3.0 * math.log(10.0),
                                                        rel=1e-12)
    assert s_star(1.0, 1.0, 1.0, 1.0 - 1e-12) < 1e-11  # D -> M limit
    with pytest.raises(ValueError):
        s_star(1.0, 1.0, 1.0, 2.0)
    with pytest.raises(ValueError):
        s_star(1.0, 1.0, 1.0, 1.0)


def test_branch_balance_identity():
    c1, m, M, D = 3.3, 0.105, 5.0, 0.01
    s = s_star(c1, m, M, D)
    lhs = math.exp(c1 * s) * D**2
    rhs = math.exp(-2.0 * s * m) * M**2
    assert lhs == pytest.approx(rhs, rel=1e-12)


def grid_1d(nx=101, nt=21, L=1.0, T=1.0):
    return SpaceTimeGrid(L, nx, T, nt)


def test_eta_symmetric_case():
    g = grid_1d()
    omega = SubdomainMask.box(g, 0.4, 0.6)
    eta = build_eta(g, omega)
    ax = eta.axes[0]
    assert ax.beta == pytest.approx(0.0, abs=1e-12)
    x = np.linspace(0, 1, 11)
    np.testing.assert_allclose(eta.value(x), x * (1 - x), atol=1e-14)
    assert eta.value(np.array([0.0, 1.0])) == pytest.approx([0.0, 0.0], abs=1e-15)
    assert 0.4 <= ax.c <= 0.6


def test_eta_off_center_case():
    g = grid_1d()
    omega = SubdomainMask.box(g, 0.6, 0.8)
    eta = build_eta(g, omega)
    ax = eta.axes[0]
    assert ax.c == pytest.approx(0.7, abs=g.h[0])
    assert ax.beta == pytest.approx((2 * ax.c - 1) / (ax.c * (1 - ax.c)), rel=1e-12)
    # derivative keeps one sign on each side segment
    left = np.linspace(0.0, 0.6, 200)
    right = np.linspace(0.8, 1.0, 200)
    assert np.all(ax.derivative(left) > 0.0)
    assert np.all(ax.derivative(right) < 0.0)


def test_eta_positive_inside_any_valid_omega():
    g = grid_1d()
    for lo, hi in [(0.1, 0.3), (0.45, 0.55), (0.7, 0.95)]:
        eta = build_eta(g, SubdomainMask.box(g, lo, hi))
        x = np.linspace(1e-3, 1 - 1e-3, 333)
        assert np.all(eta.value(x) > 0.0)


def test_eta_2d_product():
    g = SpaceTimeGrid((1.0, 2.0), (21, 21), 1.0, 5)
    omega = SubdomainMask.box(g, (0.3, 0.6), (0.7, 1.4))
    eta = build_eta(g, omega)
    assert eta.value(0.0, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert eta.value(0.5, 0.0) == pytest.approx(0.0, abs=1e-15)
    assert eta.value(0.5, 1.0) > 0.0
    gx, gy = eta.gradient(0.0, 1.0)
    assert abs(gx) > 0.0  # inward gradient on an edge


def test_alpha_varphi_pointwise():
    g = grid_1d()
    omega = SubdomainMask.box(g, 0.4, 0.6)
    eta = build_eta(g, omega)
    stw = SpaceTimeWeight(eta, s=1.0, lam=1.0, T=1.0)
    alpha, varphi = stw.alpha_varphi(0.0, 0.5)  # boundary point, eta=0
    assert varphi == pytest.approx(4.0, rel=1e-12)
    assert alpha < 0.0
    a_mid, v_mid = stw.alpha_varphi(0.5, 0.5)
    assert v_mid == pytest.approx(math.exp(0.25) / 0.25, rel=1e-10)
    a1, _ = stw.alpha_varphi(0.3, 0.25)
    a2, _ = stw.alpha_varphi(0.3, 0.75)
    assert a1 == a2  # exact time symmetry at dyadic points
    with pytest.raises(ValueError):
        stw.alpha_varphi(0.5, 0.0)
    with pytest.raises(ValueError):
        stw.alpha_varphi(0.5, 1.0)


def test_weight_array_bounds_and_endpoints():
    g = grid_1d(41, 41)
    omega = SubdomainMask.box(g, 0.3, 0.7)
    eta = build_eta(g, omega)
    for s in (0.5, 2.0, 8.0):
        stw = SpaceTimeWeight(eta, s=s, lam=1.0, T=1.0)
        w = stw.weight_array(g)
        assert np.all(w >= 0.0) and np.all(w <= 1.0)
        assert np.all(w[..., 0] == 0.0) and np.all(w[..., -1] == 0.0)


def test_c2_lower_bound():
    g = grid_1d(41, 81)
    omega = SubdomainMask.box(g, 0.3, 0.7)
    eta = build_eta(g, omega)
    stw = SpaceTimeWeight(eta, s=2.0, lam=1.0, T=1.0)
    eps = 0.125
    c2 = stw.c2_bound(eps)
    floor = math.exp(-2.0 * stw.s * c2)
    w = stw.weight_array(g)
    k_lo, k_hi = g.time_window(eps, 1.0 - eps)
    assert np.min(w[..., k_lo : k_hi + 1]) >= floor * (1 - 1e-12)


def test_weight_parameter_validation():
    g = grid_1d()
    omega = SubdomainMask.box(g, 0.4, 0.6)
    eta = build_eta(g, omega)
    with pytest.raises(ContractViolation):
        SpaceTimeWeight(eta, s=-1.0, lam=1.0, T=1.0)
    with pytest.raises(ContractViolation):
        TimeWeight(lam=-1.0, s=1.0, T=1.0)
    with pytest.raises(ContractViolation):
        TimeWeight(lam=1.0, s=1.0, T=1.0, sign=2)
