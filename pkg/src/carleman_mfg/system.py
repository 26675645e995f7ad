"""The coupled forward-backward parabolic system, its residuals and solvers.

The system couples a backward-smoothing unknown u with a forward one v:

    du/dt + Lap(u) = Q1[u] + S[v] + F
    dv/dt - Lap(v) = Q2[u, v] + rho0 * Lap(u) + G

with homogeneous Neumann conditions.  Q1, Q2 are zeroth/first-order operators
with bounded coefficient fields, S[v] = q*v, and rho0 is a constant of either
sign.  The u-equation is anti-dissipative forward in time and is therefore
always integrated in reversed time, where it becomes an ordinary heat
equation; stepping is Crank-Nicolson, with the couplings lagged between
Picard iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import solve_banded

from .errors import ContractViolation, DivergenceError
from .grids import (
    ScalarField,
    SpaceTimeGrid,
    gradient_neumann,
    h21_norm,
    integrate_array,
    laplacian_neumann,
    time_derivative,
    zeros_field,
)

_BOUND_SLACK = 1.0 + 1e-12


@dataclass(frozen=True)
class CoefficientSet:
    """Concrete coefficient fields for the coupled system.

    Q1[u] = a0*u + sum_i a1[i]*du/dx_i
    Q2[u,v] = b0*u + sum_i b1[i]*du/dx_i + c0*v + sum_i c1[i]*dv/dx_i
    S[v] = q*v

    All coefficient fields are bounded by `bound` in sup norm, which realizes
    the structural bounds of the system with that constant.
    """

    grid: SpaceTimeGrid
    a0: ScalarField
    a1: tuple
    b0: ScalarField
    b1: tuple
    c0: ScalarField
    c1: tuple
    q: ScalarField
    rho0: float
    F: ScalarField
    G: ScalarField
    bound: float

    def __post_init__(self):
        fields = [self.a0, self.b0, self.c0, self.q, *self.a1, *self.b1, *self.c1]
        if len(self.a1) != self.grid.dim or len(self.b1) != self.grid.dim \
                or len(self.c1) != self.grid.dim:
            raise ContractViolation("first-order coefficient tuples must match dim")
        for f in fields:
            if f.grid != self.grid:
                raise ContractViolation("coefficient field on a different grid")
            if f.max_abs() > self.bound * _BOUND_SLACK:
                raise ContractViolation(
                    f"coefficient exceeds declared bound {self.bound}"
                )

    @classmethod
    def zero(cls, grid, rho0=0.0, bound=1.0):
        z = zeros_field(grid)
        zs = tuple(zeros_field(grid) for _ in range(grid.dim))
        return cls(grid, z, zs, z, zs, z, zs, z, float(rho0), z, z, float(bound))

    @classmethod
    def random(cls, grid, bound, rho0, seed, q_box=None, q_floor=0.0):
        """Smooth random coefficients with sup norm <= bound.

        Each field is a low-mode cosine combination (hence Neumann-compatible)
        rescaled to 0.95*bound.  With `q_box`, q is a plateau bump supported on
        that coordinate box with height bound and floor `q_floor` outside.
        """
        rng = np.random.default_rng(seed)

        def smooth():
            vals = _random_cosine_field(grid, rng, n_modes=3, rate_scale=1.0)
            m = np.max(np.abs(vals))
            if m == 0.0:
                return zeros_field(grid)
            return ScalarField(grid, vals * (0.95 * bound / m))

        a0, b0, c0 = smooth(), smooth(), smooth()
        a1 = tuple(smooth() for _ in range(grid.dim))
        b1 = tuple(smooth() for _ in range(grid.dim))
        c1 = tuple(smooth() for _ in range(grid.dim))
        if q_box is None:
            q = smooth()
        else:
            q = ScalarField(grid, _bump_field(grid, q_box, bound, q_floor))
        z = zeros_field(grid)
        return cls(grid, a0, a1, b0, b1, c0, c1, q, float(rho0), z, z, float(bound))

    def with_sources(self, F, G):
        return CoefficientSet(
            self.grid, self.a0, self.a1, self.b0, self.b1, self.c0, self.c1,
            self.q, self.rho0, F, G, self.bound,
        )


def _random_cosine_field(grid, rng, n_modes, rate_scale, amplitude=1.0):
    """Random finite cosine sum with smooth exponential-in-time profiles."""
    mesh = grid.mesh()
    t = mesh[-1]
    out = np.zeros(grid.shape)
    for _ in range(n_modes):
        term = np.ones(grid.shape)
        for ax in range(grid.dim):
            m = rng.integers(0, 4)
            term = term * np.cos(m * np.pi * mesh[ax] / grid.lengths[ax])
        rate = rng.uniform(-rate_scale, rate_scale)
        coef = rng.uniform(-1.0, 1.0) * amplitude
        out += coef * term * np.exp(rate * (t - 0.5 * grid.T))
    return out


def _bump_field(grid, box, height, floor=0.0):
    """Smooth plateau of the given height on a coordinate box."""
    lo, hi = box
    lo = (lo,) if np.isscalar(lo) else tuple(lo)
    hi = (hi,) if np.isscalar(hi) else tuple(hi)
    mesh = grid.mesh()
    out = np.ones(grid.shape)
    for ax in range(grid.dim):
        a, b = lo[ax], hi[ax]
        w = 0.25 * (b - a)
        x = mesh[ax]
        ramp_in = np.clip((x - a) / w, 0.0, 1.0)
        ramp_out = np.clip((b - x) / w, 0.0, 1.0)
        prof = 0.5 * (1 - np.cos(np.pi * ramp_in)) * 0.5 * (1 - np.cos(np.pi * ramp_out))
        out = out * prof
    return floor + (height - floor) * np.broadcast_to(out, grid.shape)


@dataclass(frozen=True)
class SolutionPair:
    """A (u, v) pair with the residual norms it was accepted at."""

    u: ScalarField
    v: ScalarField
    r_u: float
    r_v: float
    iterate_changes: tuple = dc_field(default_factory=tuple)

    @property
    def grid(self):
        return self.u.grid

    def scaled(self, factor):
        return SolutionPair(
            self.u * factor, self.v * factor,
            abs(factor) * self.r_u, abs(factor) * self.r_v,
            self.iterate_changes,
        )


def apply_q1(coeffs, u):
    out = coeffs.a0.values * u.values
    for a1_ax, g in zip(coeffs.a1, gradient_neumann(u)):
        out = out + a1_ax.values * g.values
    return u.with_values(out)


def apply_q2(coeffs, u, v):
    out = coeffs.b0.values * u.values + coeffs.c0.values * v.values
    for b1_ax, g in zip(coeffs.b1, gradient_neumann(u)):
        out = out + b1_ax.values * g.values
    for c1_ax, g in zip(coeffs.c1, gradient_neumann(v)):
        out = out + c1_ax.values * g.values
    return u.with_values(out)


def apply_s(coeffs, v):
    return v.with_values(coeffs.q.values * v.values)


def residual_u(pair, coeffs):
    """du/dt + Lap(u) - Q1[u] - S[v] - F, with the module stencils."""
    u, v = pair.u, pair.v
    out = (
        time_derivative(u).values
        + laplacian_neumann(u).values
        - (apply_q1(coeffs, u).values + apply_s(coeffs, v).values)
    ) - coeffs.F.values
    return u.with_values(out)


def residual_v(pair, coeffs):
    """dv/dt - Lap(v) - Q2[u,v] - rho0*Lap(u) - G."""
    u, v = pair.u, pair.v
    out = (
        time_derivative(v).values
        - laplacian_neumann(v).values
        - (apply_q2(coeffs, u, v).values + coeffs.rho0 * laplacian_neumann(u).values)
    ) - coeffs.G.values
    return v.with_values(out)


def interior_l2(field_or_values, grid=None):
    """L2 norm over the interior time levels (endpoint stencils are one-sided)."""
    if isinstance(field_or_values, ScalarField):
        grid = field_or_values.grid
        values = field_or_values.values
    else:
        values = field_or_values
    t_lo, t_hi = grid.tau, grid.T - grid.tau
    return float(np.sqrt(integrate_array(grid, values * values, t_lo, t_hi)))


def time_reverse(field):
    """w(x, t) = f(x, T - t) on the grid; an exact involution."""
    return field.with_values(field.values[..., ::-1])


# ---------------------------------------------------------------------------
# Implicit heat stepping (Crank-Nicolson) under the reflection stencil
# ---------------------------------------------------------------------------


class _HeatStepper:
    """Solves (I - gamma*Lap) x = rhs repeatedly on a fixed grid.

    1D uses banded elimination.  2D runs conjugate gradients in the
    quadrature-weighted inner product, in which the reflected Laplacian is
    self-adjoint and I - gamma*Lap is positive definite; the linear-solve
    residual is driven below 1e-12 relative.
    """

    def __init__(self, grid, gamma):
        self.grid = grid
        self.gamma = float(gamma)
        if grid.dim == 1:
            n = grid.nx[0]
            r = self.gamma / grid.h[0] ** 2
            ab = np.zeros((3, n))
            ab[1, :] = 1.0 + 2.0 * r
            ab[0, 1:] = -r          # superdiagonal
            ab[2, :-1] = -r         # subdiagonal
            ab[0, 1] = -2.0 * r     # reflected boundary rows
            ab[2, -2] = -2.0 * r
            self._ab = ab
        else:
            self._w = grid.space_weights()

    def _apply(self, x):
        out = x.copy()
        for ax in range(self.grid.dim):
            out -= self.gamma * _second_diff(x, ax, self.grid.h[ax])
        return out

    def solve(self, rhs):
        if self.grid.dim == 1:
            return solve_banded((1, 1), self._ab, rhs)
        return self._cg(rhs)

    def _cg(self, b):
        w = self._w
        x = np.zeros_like(b)
        r = b.copy()
        p = r.copy()
        rs = float(np.sum(w * r * r))
        b_norm = np.sqrt(float(np.sum(w * b * b)))
        if b_norm == 0.0:
            return x
        tol2 = (1e-13 * b_norm) ** 2
        for _ in range(4 * b.size):
            if rs <= tol2:
                break
            ap = self._apply(p)
            alpha = rs / float(np.sum(w * p * ap))
            x += alpha * p
            r -= alpha * ap
            rs_new = float(np.sum(w * r * r))
            p = r + (rs_new / rs) * p
            rs = rs_new
        return x


def _second_diff(values, axis, h):
    f = np.moveaxis(values, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    out[0] = 2.0 * (f[1] - f[0])
    out[-1] = 2.0 * (f[-2] - f[-1])
    return np.moveaxis(out, 0, axis) / (h * h)


def _march_heat(grid, initial, source_levels, stepper):
    """Crank-Nicolson march of dx/dt = Lap(x) + source from a spatial slice.

    `source_levels` has the full space-time shape; the step from level k to
    k+1 uses the trapezoidal average of the two source slices.
    """
    tau = grid.tau
    out = np.empty(grid.shape)
    out[..., 0] = initial
    gamma = 0.5 * tau
    for k in range(grid.nt - 1):
        x = out[..., k]
        rhs = (
            x
            + gamma * _second_diff_all(x, grid)
            + gamma * (source_levels[..., k] + source_levels[..., k + 1])
        )
        out[..., k + 1] = stepper.solve(rhs)
    return out


def _second_diff_all(x, grid):
    out = _second_diff(x, 0, grid.h[0])
    for ax in range(1, grid.dim):
        out = out + _second_diff(x, ax, grid.h[ax])
    return out


def solve_coupled(coeffs, u_terminal, v_initial, tol=1e-9, max_iter=60):
    """Picard iteration for the coupled system.

    Given the previous iterate (u, v), the u-equation is integrated in
    reversed time from u(., T) = u_terminal as a heat equation with lagged
    source -(Q1[u] + S[v] + F), then the v-equation forward from
    v(., 0) = v_initial with source Q2[u_new, v] + rho0*Lap(u_new) + G.
    Iterations stop when the combined H^{2,1} change of successive iterates
    drops below tol; a growing change raises DivergenceError with the history.
    """
    grid = coeffs.grid
    u_terminal = np.asarray(u_terminal, dtype=float)
    v_initial = np.asarray(v_initial, dtype=float)
    if u_terminal.shape != grid.space_shape or v_initial.shape != grid.space_shape:
        raise ContractViolation("data slices must have the spatial shape")
    if tol <= 0:
        raise ContractViolation("tol must be positive")

    stepper = _HeatStepper(grid, 0.5 * grid.tau)
    u = ScalarField(grid, np.repeat(u_terminal[..., None], grid.nt, axis=-1))
    v = ScalarField(grid, np.repeat(v_initial[..., None], grid.nt, axis=-1))

    changes = []
    for _ in range(max_iter):
        src_u = apply_q1(coeffs, u).values + apply_s(coeffs, v).values + coeffs.F.values
        rev_src = -src_u[..., ::-1]
        u_rev = _march_heat(grid, u_terminal, rev_src, stepper)
        u_new = ScalarField(grid, u_rev[..., ::-1])

        src_v = (
            apply_q2(coeffs, u_new, v).values
            + coeffs.rho0 * laplacian_neumann(u_new).values
            + coeffs.G.values
        )
        v_new = ScalarField(grid, _march_heat(grid, v_initial, src_v, stepper))

        change = h21_norm(u_new - u) + h21_norm(v_new - v)
        changes.append(change)
        u, v = u_new, v_new
        if change < tol:
            pair = SolutionPair(u, v, 0.0, 0.0, tuple(changes))
            r_u = interior_l2(residual_u(pair, coeffs))
            r_v = interior_l2(residual_v(pair, coeffs))
            return SolutionPair(u, v, r_u, r_v, tuple(changes))
        if len(changes) >= 2 and change > changes[-2] and change > tol:
            raise DivergenceError(
                "Picard iteration diverging (coefficient bound too large?)",
                history=changes,
            )
    raise DivergenceError(
        f"Picard iteration did not converge in {max_iter} iterations",
        history=changes,
    )


# ---------------------------------------------------------------------------
# Manufactured solutions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeSpec:
    """Recipe for a manufactured pair: cosine modes with smooth time profiles."""

    n_modes: int = 3
    amplitude: float = 1.0
    rate_scale: float = 2.0
    seed: int = 0


def manufactured_pair(grid, spec, coeffs=None):
    """Smooth (u, v) from finite cosine sums with sources back-filled.

    The fields are automatically Neumann-compatible; F and G are defined as
    the discrete residuals of the chosen pair, so the returned coefficients
    make the pair an exact solution of the discrete system (residual zero to
    rounding).  Same seed, same grid -> bit-identical output.
    """
    if coeffs is None:
        coeffs = CoefficientSet.zero(grid)
    rng = np.random.default_rng(spec.seed)
    u = ScalarField(
        grid, _random_cosine_field(grid, rng, spec.n_modes, spec.rate_scale,
                                   spec.amplitude)
    )
    v = ScalarField(
        grid, _random_cosine_field(grid, rng, spec.n_modes, spec.rate_scale,
                                   spec.amplitude)
    )
    draft = SolutionPair(u, v, 0.0, 0.0)
    zero_src = coeffs.with_sources(zeros_field(grid), zeros_field(grid))
    F = residual_u(draft, zero_src)
    G = residual_v(draft, zero_src)
    filled = coeffs.with_sources(F, G)
    return SolutionPair(u, v, 0.0, 0.0), filled
