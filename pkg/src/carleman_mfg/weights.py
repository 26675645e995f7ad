"""Carleman weight families and the exponent bookkeeping built on them.

Two families are used:

* a time-only weight phi(t) = exp(lam*t) entering through the double
  exponential exp(2*s*phi(t)); evaluated in normalized form
  exp(2*s*(phi(t) - phi_ref)) so that large (s, lam) never overflow, and
* a space-time pair (varphi, alpha) built from an auxiliary function eta that
  vanishes on the boundary, is positive inside, and has a non-vanishing
  gradient outside the observation box omega:

      varphi(x,t) = exp(lam*eta(x)) / (t*(T-t))
      alpha(x,t)  = (exp(lam*eta(x)) - exp(2*lam*max eta)) / (t*(T-t))

alpha < 0 on the whole cylinder, so exp(2*s*alpha) <= 1 and degenerates to 0
at t -> 0, T.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConstructionError, ContractViolation

_EXP_CAP = 700.0  # exp argument cap; keeps misuse from overflowing to inf


def _safe_exp(x):
    return np.exp(np.minimum(x, _EXP_CAP))


class TimeWeight:
    """Time-only weight phi(t) = exp(sign*lam*t) with normalization reference.

    `norm_weight(t)` returns exp(2*s*(phi(t) - phi_ref)).  With the default
    reference phi_ref = max(phi(0), phi(T)) the normalized weight lies in
    (0, 1] and equals 1 where phi peaks; both sides of any weighted estimate
    are scaled by the same constant, leaving ratios invariant.
    """

    def __init__(self, lam, s, T, normalization_ref=None, sign=1):
        if lam <= 0 or s <= 0 or T <= 0:
            raise ContractViolation("lam, s, T must be positive")
        if sign not in (1, -1):
            raise ContractViolation("sign must be +1 or -1")
        self.lam = float(lam)
        self.s = float(s)
        self.T = float(T)
        self.sign = int(sign)
        if normalization_ref is None:
            normalization_ref = max(self.phi(0.0), self.phi(self.T))
        self.phi_ref = float(normalization_ref)

    def phi(self, t):
        return math.exp(self.sign * self.lam * t)

    def phi_array(self, times):
        return np.exp(self.sign * self.lam * np.asarray(times, dtype=float))

    def norm_weight(self, t):
        """exp(2*s*(phi(t) - phi_ref)); underflow flushes to 0."""
        return float(_safe_exp(2.0 * self.s * (self.phi(t) - self.phi_ref)))

    def weight_array(self, times):
        return _safe_exp(2.0 * self.s * (self.phi_array(times) - self.phi_ref))

    def exp_factor(self, t, power=1.0):
        """exp(power*s*(phi(t) - phi_ref)) for conjugation-style fields."""
        return float(_safe_exp(power * self.s * (self.phi(t) - self.phi_ref)))

    def exp_factor_array(self, times, power=1.0):
        return _safe_exp(power * self.s * (self.phi_array(times) - self.phi_ref))

    def with_parameters(self, s=None, lam=None, normalization_ref=None):
        return TimeWeight(
            self.lam if lam is None else lam,
            self.s if s is None else s,
            self.T,
            normalization_ref,
            self.sign,
        )


def mu0(lam, eps):
    """exp(lam*eps) - 1, the margin exponent of the truncated cylinder."""
    if lam <= 0:
        raise ContractViolation("lam must be positive")
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    return math.expm1(lam * eps)


def theta_exponent(c1, mu_0):
    """Stability exponent 2*mu0 / (c1 + 2*mu0), strictly inside (0, 1)."""
    if c1 <= 0 or mu_0 <= 0:
        raise ContractViolation("c1 and mu0 must be positive")
    return 2.0 * mu_0 / (c1 + 2.0 * mu_0)


def s_star(c1, mu_0, M, D):
    """Parameter balancing exp(c1*s)*D^2 against exp(-2*s*mu0)*M^2.

    Requires 0 < D < M; returns (2 / (c1 + 2*mu0)) * log(M / D) > 0.
    """
    if c1 <= 0 or mu_0 <= 0:
        raise ContractViolation("c1 and mu0 must be positive")
    if not (0.0 < D < M):
        raise ValueError(f"need 0 < D < M, got D={D}, M={M}")
    return 2.0 / (c1 + 2.0 * mu_0) * math.log(M / D)


class EtaAxis:
    """One factor eta_i(x) = x*(L-x)*exp(beta*x) of the auxiliary function.

    beta places the unique interior critical point at the omega-center c:
    beta = (2c - L) / (c*(L - c)).
    """

    __slots__ = ("L", "c", "beta")

    def __init__(self, L, c):
        if not (0.0 < c < L):
            raise ContractViolation("critical point must lie inside the axis")
        self.L = float(L)
        self.c = float(c)
        self.beta = (2.0 * c - L) / (c * (L - c))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return x * (self.L - x) * np.exp(self.beta * x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        bracket = (self.L - 2.0 * x) + self.beta * x * (self.L - x)
        return bracket * np.exp(self.beta * x)

    def max_value(self):
        return float(self.value(self.c))


class EtaFunction:
    """Product-form auxiliary function over the domain, tied to a box omega."""

    def __init__(self, axes, omega):
        self.axes = tuple(axes)
        self.omega = omega
        self.dim = len(self.axes)

    def value(self, *coords):
        out = self.axes[0].value(coords[0])
        for ax, x in zip(self.axes[1:], coords[1:]):
            out = out * ax.value(x)
        return out

    def gradient(self, *coords):
        values = [ax.value(x) for ax, x in zip(self.axes, coords)]
        derivs = [ax.derivative(x) for ax, x in zip(self.axes, coords)]
        grads = []
        for i in range(self.dim):
            g = derivs[i]
            for j in range(self.dim):
                if j != i:
                    g = g * values[j]
            grads.append(g)
        return tuple(grads)

    def sup_norm(self):
        """max over the closed domain; the product peaks at the per-axis critica."""
        out = 1.0
        for ax in self.axes:
            out *= ax.max_value()
        return out


def build_eta(grid, omega, oversample=10):
    """Construct and verify the auxiliary function for a given omega box.

    The three defining properties (zero on the boundary, positive inside,
    non-vanishing gradient outside omega) are verified by dense sampling at
    `oversample` times the grid resolution.  In 2D the four domain corners are
    excluded from the gradient check: the product form has an exact critical
    point there, a measure-zero degeneracy that no weighted integral sees.
    """
    if omega.grid != grid:
        raise ContractViolation("omega belongs to a different grid")
    center = omega.center()
    axes = [EtaAxis(L, c) for L, c in zip(grid.lengths, center)]
    eta = EtaFunction(axes, omega)

    fine = [
        np.linspace(0.0, L, (n - 1) * oversample + 1)
        for L, n in zip(grid.lengths, grid.nx)
    ]
    scale = eta.sup_norm()
    lo = [b[0] for b in omega.bounds]
    hi = [b[1] for b in omega.bounds]

    if grid.dim == 1:
        x = fine[0]
        vals = eta.value(x)
        if np.any(vals[1:-1] <= 0.0):
            bad = x[1:-1][vals[1:-1] <= 0.0][0]
            raise ConstructionError(f"eta not positive at x={bad}", point=(bad,))
        d = eta.gradient(x)[0]
        # check each contiguous segment flanking omega for zeros / sign changes
        for segment in (x <= lo[0], x >= hi[0]):
            d_seg = d[segment]
            x_seg = x[segment]
            if d_seg.size == 0:
                continue
            bad_idx = np.nonzero(
                (d_seg[:-1] * d_seg[1:] <= 0.0) | (d_seg[:-1] == 0.0)
            )[0]
            if bad_idx.size:
                bad = x_seg[bad_idx[0]]
                raise ConstructionError(
                    f"eta gradient vanishes outside omega near x={bad}", point=(bad,)
                )
        return eta

    X, Y = np.meshgrid(fine[0], fine[1], indexing="ij")
    vals = eta.value(X, Y)
    interior = (
        (X > 0.0) & (X < grid.lengths[0]) & (Y > 0.0) & (Y < grid.lengths[1])
    )
    if np.any(vals[interior] <= 0.0):
        idx = np.argwhere(interior & (vals <= 0.0))[0]
        bad = (X[tuple(idx)], Y[tuple(idx)])
        raise ConstructionError(f"eta not positive at {bad}", point=bad)
    gx, gy = eta.gradient(X, Y)
    gnorm = np.hypot(gx, gy)
    outside = (X <= lo[0]) | (X >= hi[0]) | (Y <= lo[1]) | (Y >= hi[1])
    x_bd = (X <= 0.0) | (X >= grid.lengths[0])
    y_bd = (Y <= 0.0) | (Y >= grid.lengths[1])
    corner = x_bd & y_bd
    check = outside & ~corner
    tol = 1e-12 * scale * max(1.0 / min(grid.lengths), 1.0)
    if np.any(gnorm[check] <= tol):
        idx = np.argwhere(check & (gnorm <= tol))[0]
        bad = (X[tuple(idx)], Y[tuple(idx)])
        raise ConstructionError(f"eta gradient vanishes outside omega at {bad}", point=bad)
    return eta


class SpaceTimeWeight:
    """The interior-observation weight pair (varphi, alpha) at fixed (s, lam).

    alpha < 0 on Omega x (0,T) and alpha -> -inf at both time endpoints, so
    exp(2*s*alpha) <= 1 everywhere and vanishes at t in {0, T}.  Grid arrays
    set the endpoint levels to exactly 0 (they are excluded from every
    functional built on this family).
    """

    def __init__(self, eta, s, lam, T):
        if s <= 0 or lam <= 0 or T <= 0:
            raise ContractViolation("s, lam, T must be positive")
        self.eta = eta
        self.s = float(s)
        self.lam = float(lam)
        self.T = float(T)
        self.eta_sup = eta.sup_norm()
        self._offset = math.exp(2.0 * self.lam * self.eta_sup)

    def alpha_varphi(self, coords, t):
        """Pointwise (alpha, varphi); requires 0 < t < T."""
        if not (0.0 < t < self.T):
            raise ValueError(f"t={t} outside (0, {self.T})")
        if not isinstance(coords, (tuple, list)):
            coords = (coords,)
        e = math.exp(self.lam * float(self.eta.value(*coords)))
        denom = t * (self.T - t)
        return (e - self._offset) / denom, e / denom

    def _space_exp(self, grid):
        mesh = [np.squeeze(m, axis=-1) for m in grid.mesh()[: grid.dim]]
        eta_vals = np.broadcast_to(self.eta.value(*mesh), grid.space_shape)
        return np.exp(self.lam * eta_vals)

    def _time_denom(self, grid):
        t = grid.times()
        denom = t * (self.T - t)
        denom[0] = denom[-1] = np.nan  # endpoint levels are excluded
        return denom

    def varphi_array(self, grid):
        """varphi over the full grid; endpoint time levels are set to 0."""
        e = self._space_exp(grid)
        denom = self._time_denom(grid)
        out = e[..., None] / denom
        out[..., 0] = 0.0
        out[..., -1] = 0.0
        return out

    def weight_array(self, grid):
        """exp(2*s*alpha) over the full grid; endpoint levels are exactly 0."""
        e = self._space_exp(grid)
        denom = self._time_denom(grid)
        alpha = (e[..., None] - self._offset) / denom
        out = _safe_exp(2.0 * self.s * alpha)
        out[..., 0] = 0.0
        out[..., -1] = 0.0
        return out

    def c2_bound(self, eps):
        """Uniform exponent bound: exp(2*s*alpha) >= exp(-2*s*C2) for
        eps <= t <= T - eps, with C2 = (exp(2*lam*max eta) - 1)/(eps*(T-eps))."""
        if not (0.0 < eps < 0.5 * self.T):
            raise ContractViolation("need 0 < eps < T/2")
        return (self._offset - 1.0) / (eps * (self.T - eps))
