"""Uniform space-time grids, dense fields, and Neumann finite-difference calculus.

The spatial domain is an interval (dim=1) or a rectangle (dim=2), discretized
with nodes on the boundary, x_i = i*h.  Homogeneous Neumann conditions are
realized by ghost-node reflection, which makes constants exact null vectors of
the discrete Laplacian and zeroes the discrete normal derivative at boundary
nodes.  Time is uniform, t_k = k*tau.

Fields are immutable after construction; every operator returns a new field.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

_SNAP = 1e-9  # relative tolerance when snapping coordinates to grid nodes


def _as_tuple(value):
    if np.isscalar(value):
        return (value,)
    return tuple(value)


class SpaceTimeGrid:
    """Tensor grid on Omega x (0,T) with Omega an interval or rectangle.

    Attributes:
        lengths: side lengths of Omega, one per spatial axis
        nx: node counts per spatial axis (boundary nodes included), each >= 3
        T: final time
        nt: number of time levels, >= 3
        h: spatial steps, h[i] = lengths[i] / (nx[i] - 1)
        tau: time step, T / (nt - 1)
    """

    def __init__(self, lengths, nx, T, nt):
        lengths = tuple(float(v) for v in _as_tuple(lengths))
        nx = tuple(int(v) for v in _as_tuple(nx))
        if len(lengths) != len(nx):
            raise ContractViolation(
                f"lengths ({len(lengths)}) and nx ({len(nx)}) must agree in dimension"
            )
        if len(lengths) not in (1, 2):
            raise ContractViolation("only dim 1 and dim 2 grids are supported")
        if any(L <= 0 for L in lengths) or float(T) <= 0:
            raise ContractViolation("domain lengths and T must be positive")
        if any(n < 3 for n in nx) or int(nt) < 3:
            raise ContractViolation("need at least 3 nodes per axis and 3 time levels")
        self.lengths = lengths
        self.nx = nx
        self.T = float(T)
        self.nt = int(nt)
        self.h = tuple(L / (n - 1) for L, n in zip(lengths, nx))
        self.tau = self.T / (self.nt - 1)

    @property
    def dim(self):
        return len(self.nx)

    @property
    def space_shape(self):
        return self.nx

    @property
    def shape(self):
        return self.nx + (self.nt,)

    def space_axes(self):
        """Node coordinates per spatial axis, x_i = i*h exactly."""
        return tuple(np.arange(n) * h for n, h in zip(self.nx, self.h))

    def times(self):
        """Time levels t_k = k*tau exactly."""
        return np.arange(self.nt) * self.tau

    def refine(self, factor=2):
        """Grid with each step divided by `factor` (same domain)."""
        nx = tuple((n - 1) * factor + 1 for n in self.nx)
        return SpaceTimeGrid(self.lengths, nx, self.T, (self.nt - 1) * factor + 1)

    def __eq__(self, other):
        return (
            isinstance(other, SpaceTimeGrid)
            and self.lengths == other.lengths
            and self.nx == other.nx
            and self.T == other.T
            and self.nt == other.nt
        )

    def __hash__(self):
        return hash((self.lengths, self.nx, self.T, self.nt))

    def __repr__(self):
        return (
            f"SpaceTimeGrid(lengths={self.lengths}, nx={self.nx}, "
            f"T={self.T}, nt={self.nt})"
        )

    # -- coordinate/index helpers -------------------------------------------------

    def time_index(self, t):
        """Index of the time level closest to t; t must sit on the grid."""
        k = int(round(t / self.tau))
        if k < 0 or k >= self.nt or abs(k * self.tau - t) > _SNAP * max(self.T, 1.0):
            raise ContractViolation(f"t={t} is not a grid time level")
        return k

    def time_window(self, t_lo=None, t_hi=None, min_levels=1):
        """Inclusive index range of time levels inside [t_lo, t_hi]."""
        t_lo = 0.0 if t_lo is None else float(t_lo)
        t_hi = self.T if t_hi is None else float(t_hi)
        if not (0.0 <= t_lo < t_hi <= self.T + _SNAP * max(self.T, 1.0)):
            raise ContractViolation(f"bad time window ({t_lo}, {t_hi})")
        tol = _SNAP * max(self.T, 1.0)
        k_lo = int(np.ceil((t_lo - tol) / self.tau))
        k_hi = int(np.floor((t_hi + tol) / self.tau))
        k_lo = max(k_lo, 0)
        k_hi = min(k_hi, self.nt - 1)
        if k_hi - k_lo + 1 < min_levels:
            raise ContractViolation(
                f"time window ({t_lo}, {t_hi}) holds {k_hi - k_lo + 1} levels, "
                f"need >= {min_levels}"
            )
        return k_lo, k_hi

    # -- quadrature weights -------------------------------------------------------

    def space_weights(self, mask=None):
        """Trapezoid quadrature weights over Omega (or over a box mask).

        Returns an array of the spatial shape.  With a mask, the weights are the
        trapezoid weights of the mask's box and zero outside it.
        """
        if mask is None:
            axes_w = [_trapezoid_weights(n, h) for n, h in zip(self.nx, self.h)]
        else:
            if mask.grid != self:
                raise ContractViolation("mask belongs to a different grid")
            axes_w = []
            for ax, (n, h) in enumerate(zip(self.nx, self.h)):
                lo, hi = mask.index_bounds[ax]
                w = np.zeros(n)
                w[lo : hi + 1] = _trapezoid_weights(hi - lo + 1, h)
                axes_w.append(w)
        if self.dim == 1:
            return axes_w[0]
        return np.multiply.outer(axes_w[0], axes_w[1])

    def time_weights(self, k_lo=0, k_hi=None):
        """Trapezoid weights over the time levels k_lo..k_hi inclusive."""
        if k_hi is None:
            k_hi = self.nt - 1
        return _trapezoid_weights(k_hi - k_lo + 1, self.tau)

    # -- sampling -----------------------------------------------------------------

    def mesh(self):
        """Broadcastable coordinate arrays (*space_axes, t) over the full shape."""
        arrays = []
        for ax, x in enumerate(self.space_axes()):
            shape = [1] * (self.dim + 1)
            shape[ax] = len(x)
            arrays.append(x.reshape(shape))
        arrays.append(self.times().reshape([1] * self.dim + [self.nt]))
        return tuple(arrays)

    def sample(self, fn):
        """Sample fn(*x, t) on the full grid and wrap it as a ScalarField."""
        values = np.broadcast_to(fn(*self.mesh()), self.shape).astype(float)
        return ScalarField(self, values.copy())

    def sample_space(self, fn):
        """Sample fn(*x) on the spatial grid; returns a plain array."""
        mesh = self.mesh()[: self.dim]
        mesh = [np.squeeze(m, axis=-1) for m in mesh]
        return np.broadcast_to(fn(*mesh), self.space_shape).astype(float).copy()


def _trapezoid_weights(n, step):
    w = np.full(n, step)
    w[0] = w[-1] = 0.5 * step
    return w


class ScalarField:
    """Dense real samples over a SpaceTimeGrid, indexed (space..., time)."""

    __slots__ = ("grid", "values")

    def __init__(self, grid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ContractViolation(
                f"field shape {values.shape} does not match grid shape {grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractViolation("field contains non-finite values")
        values = values.copy()
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    def at_time(self, k):
        """Spatial slice at time level k (read-only view)."""
        return self.values[..., k]

    def with_values(self, values):
        return ScalarField(self.grid, values)

    # minimal arithmetic, enough for building integrands and manufactured data
    def _binary(self, other, op):
        if isinstance(other, ScalarField):
            if other.grid != self.grid:
                raise ContractViolation("fields live on different grids")
            return ScalarField(self.grid, op(self.values, other.values))
        return ScalarField(self.grid, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.grid, -self.values)

    def max_abs(self):
        return float(np.max(np.abs(self.values)))


def zeros_field(grid):
    return ScalarField(grid, np.zeros(grid.shape))


class SubdomainMask:
    """Axis-aligned box omega inside Omega, as a boolean spatial indicator."""

    def __init__(self, grid, indicator, index_bounds, bounds):
        self.grid = grid
        indicator = np.asarray(indicator, dtype=bool)
        if indicator.shape != grid.space_shape:
            raise ContractViolation("indicator shape does not match grid")
        if not indicator.any():
            raise ContractViolation("subdomain mask is empty")
        self.indicator = indicator
        self.indicator.setflags(write=False)
        self.index_bounds = tuple(index_bounds)
        self.bounds = tuple(bounds)

    @classmethod
    def box(cls, grid, lo, hi, allow_boundary=False):
        """Mask of the box [lo, hi] (per-axis coordinate bounds)."""
        lo = _as_tuple(lo)
        hi = _as_tuple(hi)
        if len(lo) != grid.dim or len(hi) != grid.dim:
            raise ContractViolation("box bounds must match grid dimension")
        index_bounds = []
        for ax, (a, b) in enumerate(zip(lo, hi)):
            if not (0.0 <= a < b <= grid.lengths[ax]):
                raise ContractViolation(f"bad box bounds ({a}, {b}) on axis {ax}")
            x = grid.space_axes()[ax]
            tol = _SNAP * grid.lengths[ax]
            inside = np.nonzero((x >= a - tol) & (x <= b + tol))[0]
            if inside.size == 0:
                raise ContractViolation(f"box contains no grid nodes on axis {ax}")
            i_lo, i_hi = int(inside[0]), int(inside[-1])
            if not allow_boundary and (i_lo == 0 or i_hi == grid.nx[ax] - 1):
                raise ContractViolation(
                    "subdomain touches the boundary (pass allow_boundary=True to permit)"
                )
            index_bounds.append((i_lo, i_hi))
        indicator = np.zeros(grid.space_shape, dtype=bool)
        slices = tuple(slice(lo_i, hi_i + 1) for lo_i, hi_i in index_bounds)
        indicator[slices] = True
        return cls(grid, indicator, index_bounds, tuple(zip(lo, hi)))

    def center(self):
        """Coordinates of the box center (midpoint of the node bounds)."""
        out = []
        for ax, (i_lo, i_hi) in enumerate(self.index_bounds):
            h = self.grid.h[ax]
            out.append(0.5 * (i_lo + i_hi) * h)
        return tuple(out)

    def node_count(self):
        return int(self.indicator.sum())


# ---------------------------------------------------------------------------
# Discrete operators (ghost-node reflection for the Neumann condition)
# ---------------------------------------------------------------------------


def _second_diff_axis(values, axis, h):
    f = np.moveaxis(values, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    out[0] = 2.0 * (f[1] - f[0])          # ghost f[-1] = f[1]
    out[-1] = 2.0 * (f[-2] - f[-1])       # ghost f[n] = f[n-2]
    return np.moveaxis(out, 0, axis) / (h * h)


def _central_diff_axis(values, axis, h):
    f = np.moveaxis(values, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * h)
    out[0] = 0.0                          # reflection makes the normal derivative 0
    out[-1] = 0.0
    return np.moveaxis(out, 0, axis)


def laplacian_neumann(field):
    """Discrete Laplacian with reflected ghost nodes (2nd order)."""
    values = field.values
    out = _second_diff_axis(values, 0, field.grid.h[0])
    for ax in range(1, field.grid.dim):
        out = out + _second_diff_axis(values, ax, field.grid.h[ax])
    return field.with_values(out)


def gradient_neumann(field):
    """Per-axis central differences; boundary normal components are exactly 0."""
    return tuple(
        field.with_values(_central_diff_axis(field.values, ax, field.grid.h[ax]))
        for ax in range(field.grid.dim)
    )


def second_derivative(field, i, j):
    """Discrete d2/dxi dxj; pure second differences on the diagonal, iterated
    central differences off it."""
    grid = field.grid
    if not (0 <= i < grid.dim and 0 <= j < grid.dim):
        raise ContractViolation(f"axes ({i}, {j}) out of range for dim {grid.dim}")
    if i == j:
        return field.with_values(_second_diff_axis(field.values, i, grid.h[i]))
    tmp = _central_diff_axis(field.values, j, grid.h[j])
    return field.with_values(_central_diff_axis(tmp, i, grid.h[i]))


def time_derivative(field):
    """Central differences at interior levels, first-order one-sided at the ends."""
    values = field.values
    tau = field.grid.tau
    out = np.empty_like(values)
    out[..., 1:-1] = (values[..., 2:] - values[..., :-2]) / (2.0 * tau)
    out[..., 0] = (values[..., 1] - values[..., 0]) / tau
    out[..., -1] = (values[..., -1] - values[..., -2]) / tau
    return field.with_values(out)


# ---------------------------------------------------------------------------
# Quadrature and norms
# ---------------------------------------------------------------------------


def integrate_array(grid, values, t_lo=None, t_hi=None, mask=None, time_weight=None):
    """Trapezoid integral of a full-shape array over Omega x (t_lo, t_hi).

    `time_weight`, when given, is a per-level factor applied inside the time
    quadrature (used for Carleman-weighted integrals).
    """
    k_lo, k_hi = grid.time_window(t_lo, t_hi, min_levels=1)
    wt = grid.time_weights(k_lo, k_hi)
    if k_hi == k_lo:  # degenerate window: no time extent
        return 0.0
    if time_weight is not None:
        wt = wt * time_weight[k_lo : k_hi + 1]
    ws = grid.space_weights(mask)
    chunk = values[..., k_lo : k_hi + 1]
    spatial = np.tensordot(chunk, wt, axes=([-1], [0]))
    return float(np.sum(spatial * ws))


def integrate_q(field, t_lo=None, t_hi=None, mask=None):
    """Integral of a field over Omega x (t_lo, t_hi), optionally masked to omega."""
    return integrate_array(field.grid, field.values, t_lo, t_hi, mask)


def slice_integral(grid, spatial_values, mask=None):
    """Trapezoid integral of a spatial array over Omega (or a box mask)."""
    return float(np.sum(spatial_values * grid.space_weights(mask)))


def h21_seminorms(field, t_lo=None, t_hi=None):
    """Squared L2 contributions (value, gradient, second derivatives, d/dt)."""
    grid = field.grid
    grid.time_window(t_lo, t_hi, min_levels=2)

    def sq(values):
        return integrate_array(grid, values * values, t_lo, t_hi)

    parts = {"l2": sq(field.values)}
    grads = gradient_neumann(field)
    parts["grad"] = sum(sq(g.values) for g in grads)
    hess = 0.0
    for i in range(grid.dim):
        for j in range(grid.dim):
            if j < i:
                continue
            term = sq(second_derivative(field, i, j).values)
            hess += term if i == j else 2.0 * term
    parts["hess"] = hess
    parts["dt"] = sq(time_derivative(field).values)
    return parts


def h21_norm(field, t_lo=None, t_hi=None):
    """Space-time norm combining the field, its first and second spatial
    derivatives, and its time derivative over Omega x (t_lo, t_hi)."""
    parts = h21_seminorms(field, t_lo, t_hi)
    return float(np.sqrt(sum(parts.values())))


def spatial_norm_at(field, t, kind="l2"):
    """L2 or H1 norm of the time slice at t."""
    grid = field.grid
    k = grid.time_index(t)
    u = field.at_time(k)
    total = slice_integral(grid, u * u)
    kind = kind.lower()
    if kind == "h1":
        for ax in range(grid.dim):
            g = _central_diff_axis(field.values, ax, grid.h[ax])[..., k]
            total += slice_integral(grid, g * g)
    elif kind != "l2":
        raise ContractViolation(f"unknown norm kind {kind!r}")
    return float(np.sqrt(total))
