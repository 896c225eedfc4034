"""Uniform 1-D grids, nodal fields and the finite-difference / quadrature kernel.

Everything here is pure: operations take fields and return new arrays or
scalars.  The one numerically delicate routine is
:func:`weighted_exp_integral`, which evaluates integrals of ``w * exp(u/eps)``
in factored form so that desk-scale ``eps`` never overflows a double.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [x_min, x_max] with n_nodes nodes."""

    x_min: float
    x_max: float
    n_nodes: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"x_min={self.x_min} must be < x_max={self.x_max}")
        if self.n_nodes < 3:
            raise ValueError(f"n_nodes={self.n_nodes} must be >= 3")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_nodes - 1)

    @property
    def nodes(self) -> np.ndarray:
        x = np.linspace(self.x_min, self.x_max, self.n_nodes)
        x.flags.writeable = False
        return x

    def meets_concentration_resolution(self, eps: float) -> bool:
        # concentration width scales like sqrt(eps); resolving it needs h <= sqrt(eps)/8
        return self.h <= math.sqrt(eps) / 8.0


@dataclass
class Field:
    """Scalar function sampled on the nodes of a :class:`Grid1D`."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"field has {self.values.shape} values for a grid of {self.grid.n_nodes} nodes"
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise ValueError(f"non-finite field value at node {bad} (x={self.grid.nodes[bad]:g})")

    @classmethod
    def from_callable(cls, grid: Grid1D, fn) -> "Field":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float))

    @classmethod
    def constant(cls, grid: Grid1D, value: float) -> "Field":
        return cls(grid, np.full(grid.n_nodes, float(value)))

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())


def _trapz(values: np.ndarray, h: float) -> float:
    return h * (values.sum() - 0.5 * (values[0] + values[-1]))


def trapezoid(f: Field) -> float:
    """Composite trapezoid rule for the integral of ``f`` over its grid."""
    return _trapz(f.values, f.grid.h)


def _weighted_exp(u: np.ndarray, w: np.ndarray, h: float, eps: float) -> tuple[float, float]:
    m = float(u.max())
    t = _trapz(w * np.exp((u - m) / eps), h)
    log_i = m / eps + math.log(t)
    with np.errstate(over="ignore"):
        i_val = float(np.exp(log_i))
    return i_val, log_i


def weighted_exp_integral(u: Field, w: Field | np.ndarray, eps: float) -> tuple[float, float]:
    """Integral of ``w * exp(u/eps)`` together with its logarithm.

    Computed as ``exp(M/eps) * trapz(w * exp((u-M)/eps))`` with ``M = max u``,
    so no intermediate quantity overflows or underflows for ``|u|/eps`` up to
    about 1e5.  The returned integral itself may still round to 0 or inf at
    the very end; ``logI`` is always finite.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    wv = w.values if isinstance(w, Field) else np.asarray(w, dtype=float)
    if np.any(wv <= 0):
        raise ValueError("weight must be strictly positive")
    return _weighted_exp(u.values, wv, u.grid.h, eps)


def _one_sided(values: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward differences with zero-flux closure at the walls.

    D-[0] = 0 and D+[-1] = 0, matching a ghost node that copies the boundary
    value.
    """
    d = np.diff(values) / h
    d_minus = np.concatenate(([0.0], d))
    d_plus = np.concatenate((d, [0.0]))
    return d_minus, d_plus


def gradient(f: Field, scheme: str = "centered"):
    """Nodal derivative of ``f``.

    ``centered`` returns a single field: second-order interior differences and
    one-sided differences at the two boundary nodes.  ``upwind_godunov``
    returns the pair (D-, D+) of one-sided differences used to assemble
    monotone numerical Hamiltonians.
    """
    v, h = f.values, f.grid.h
    if scheme == "centered":
        g = np.empty_like(v)
        g[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
        g[0] = (v[1] - v[0]) / h
        g[-1] = (v[-1] - v[-2]) / h
        return Field(f.grid, g)
    if scheme == "upwind_godunov":
        d_minus, d_plus = _one_sided(v, h)
        return Field(f.grid, d_minus), Field(f.grid, d_plus)
    raise ValueError(f"unknown gradient scheme {scheme!r}")


def laplacian(f: Field) -> Field:
    """Three-point second difference; boundary nodes copy their neighbor's value."""
    v, h = f.values, f.grid.h
    lap = np.empty_like(v)
    lap[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    lap[0] = lap[1]
    lap[-1] = lap[-2]
    return Field(f.grid, lap)


def _sample_values(v: np.ndarray, grid: Grid1D, xs: np.ndarray, slope_cap: float) -> np.ndarray:
    out = np.interp(xs, grid.nodes, v)
    h = grid.h
    left = xs < grid.x_min
    if left.any():
        slope = float(np.clip((v[1] - v[0]) / h, -slope_cap, slope_cap))
        out[left] = v[0] + slope * (xs[left] - grid.x_min)
    right = xs > grid.x_max
    if right.any():
        slope = float(np.clip((v[-1] - v[-2]) / h, -slope_cap, slope_cap))
        out[right] = v[-1] + slope * (xs[right] - grid.x_max)
    return out


def sample(f: Field, xs: np.ndarray, slope_cap: float = math.inf) -> np.ndarray:
    """Piecewise-linear evaluation of ``f`` at arbitrary points.

    Points beyond the grid are extrapolated linearly with the boundary slope
    clamped to [-slope_cap, slope_cap], so a decaying profile keeps decaying
    and never fabricates growth.
    """
    return _sample_values(f.values, f.grid, np.asarray(xs, dtype=float), slope_cap)


def interpolate(f: Field, x: float, slope_cap: float = math.inf) -> float:
    """Scalar convenience wrapper around :func:`sample`."""
    return float(sample(f, np.array([x]), slope_cap)[0])
