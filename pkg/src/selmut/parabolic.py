"""Explicit solver for the diffusive selection-mutation model in log density.

With n = exp(u/eps) the density equation becomes

    du/dt = eps * lap(u) + |grad u|^2 + R(x, I(t)),      I = integral psi * exp(u/eps)

which is the only numerically viable form at desk-scale eps: the density
itself underflows doubles.  The gradient term uses the Godunov flux for
p -> p^2 (a Lax-Friedrichs flux is retained as a fallback), diffusion uses the
standard three-point stencil with zero-flux ghost nodes, and the resource I is
lagged by one step so no nonlinear solve is needed.  Time step policy:

    dt = min(dt_max, c_diff * h^2 / (2 eps), c_adv * h / (2 max|Du| + delta))

with both safety factors at most 0.9; the defaults (0.4, 0.25) keep the full
update monotone, which is what the comparison tests rely on.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .model import PARABOLIC, ModelSpec, NutrientRange, RangeDerivationError, derive_nutrient_range
from .numerics import Field, Grid1D, _one_sided, _weighted_exp
from .records import Trajectory

GODUNOV = "godunov"
LAX_FRIEDRICHS = "lax_friedrichs"


class InitializationError(Exception):
    """Initial mass cannot be realized on this grid under the envelope cap."""


class BlowUpError(Exception):
    """The state left the finite / physical regime; message names t and node."""


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping policy shared by the two epsilon-model solvers."""

    eps: float
    T: float
    cfl_diffusion: float = 0.4
    cfl_advection: float = 0.25
    cfl_kernel: float = 0.4
    dt_max: float = 0.01
    record_every: float = 0.25
    boundary: str = "neumann_zero_flux"
    hamiltonian: str = GODUNOV

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.T < 0:
            raise ValueError(f"T must be nonnegative, got {self.T}")
        for name in ("cfl_diffusion", "cfl_advection", "cfl_kernel"):
            v = getattr(self, name)
            if not 0 < v <= 0.9:
                raise ValueError(f"{name}={v} outside (0, 0.9]")
        if self.boundary != "neumann_zero_flux":
            raise ValueError(f"unsupported boundary {self.boundary!r}")
        if self.hamiltonian not in (GODUNOV, LAX_FRIEDRICHS):
            raise ValueError(f"unknown hamiltonian {self.hamiltonian!r}")


@dataclass
class SimState:
    t: float
    u: Field
    I: float
    step_count: int = 0

    def __post_init__(self):
        if self.I <= 0:
            raise ValueError(f"resource must stay positive, got I={self.I}")


def godunov_sq(d_minus: np.ndarray, d_plus: np.ndarray) -> np.ndarray:
    """Monotone Godunov flux for the convex Hamiltonian p -> p^2 on the right-hand side.

    Nondecreasing in D+ and nonincreasing in D-, exact for one-sided slopes.
    """
    return np.maximum(np.minimum(d_minus, 0.0) ** 2, np.maximum(d_plus, 0.0) ** 2)


def _lax_friedrichs_sq(d_minus: np.ndarray, d_plus: np.ndarray) -> np.ndarray:
    alpha = max(np.abs(d_minus).max(), np.abs(d_plus).max())
    avg = 0.5 * (d_minus + d_plus)
    return avg * avg + 0.5 * alpha * (d_plus - d_minus)


def _ghost_laplacian(u: np.ndarray, h: float) -> np.ndarray:
    lap = np.empty_like(u)
    lap[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (h * h)
    lap[0] = (u[1] - u[0]) / (h * h)
    lap[-1] = (u[-2] - u[-1]) / (h * h)
    return lap


def envelope_growth_constant(model: ModelSpec) -> float:
    """Growth rate C of the moving envelope -A|x - x0| + b0 + C t."""
    c = model.constants
    return c.A * c.A + c.K2


def build_initial_data(
    model: ModelSpec, grid: Grid1D, eps: float, target_I0: float, center: float = 1.0
) -> Field:
    """Tent profile u0 = -A|x - center| + b0 with b0 tuned to the requested mass.

    b0 is found by root finding on the log of the weighted mass integral and
    must stay below B - A|center| so the standing envelope bound on the
    initial data holds.
    """
    if target_I0 <= 0:
        raise ValueError(f"target_I0 must be positive, got {target_I0}")
    c = model.constants
    xs = grid.nodes
    tent = -c.A * np.abs(xs - center)
    psi = np.broadcast_to(np.asarray(model.psi(xs), dtype=float), xs.shape)
    log_target = math.log(target_I0)

    def g(b0: float) -> float:
        _, log_i = _weighted_exp(tent + b0, psi, grid.h, eps)
        return log_i - log_target

    b_cap = c.B - c.A * abs(center)
    est = -eps * g(0.0)
    lo, hi = est - 1.0, min(est + 1.0, b_cap)
    if hi <= lo or g(hi) < 0.0 or g(lo) > 0.0:
        raise InitializationError(
            f"mass {target_I0} not bracketed with intercept in [{lo:.4g}, {hi:.4g}]; "
            "grid too small or envelope constant B too tight"
        )
    b0 = brentq(g, lo, hi, xtol=1e-14, rtol=8.9e-16)
    u0 = Field(grid, tent + b0)
    i_val, _ = _weighted_exp(u0.values, psi, grid.h, eps)
    if abs(i_val - target_I0) > 1e-10 * target_I0:
        raise InitializationError(
            f"initial mass {i_val!r} misses target {target_I0!r} beyond 1e-10 relative"
        )
    return u0


def _dt_policy(config: SolverConfig, h: float, max_slope: float) -> float:
    dt_diff = config.cfl_diffusion * h * h / (2.0 * config.eps)
    dt_adv = config.cfl_advection * h / (2.0 * max_slope + 1e-12)
    return min(config.dt_max, dt_diff, dt_adv)


def step(state: SimState, model: ModelSpec, config: SolverConfig, dt_cap: float | None = None) -> SimState:
    """One explicit Euler update; the resource is evaluated at the incoming state."""
    grid = state.u.grid
    u = state.u.values
    h = grid.h
    d_minus, d_plus = _one_sided(u, h)
    max_slope = max(np.abs(d_minus).max(), np.abs(d_plus).max())
    dt = _dt_policy(config, h, max_slope)
    if dt_cap is not None:
        dt = min(dt, dt_cap)
    if config.hamiltonian == GODUNOV:
        grad_sq = godunov_sq(d_minus, d_plus)
    else:
        grad_sq = _lax_friedrichs_sq(d_minus, d_plus)
    rate = np.asarray(model.R(grid.nodes, state.I), dtype=float)
    u_new = u + dt * (config.eps * _ghost_laplacian(u, h) + grad_sq + rate)
    if not np.all(np.isfinite(u_new)):
        bad = int(np.flatnonzero(~np.isfinite(u_new))[0])
        raise BlowUpError(f"non-finite u at t={state.t + dt:.6g}, node {bad} (x={grid.nodes[bad]:g})")
    psi = np.broadcast_to(np.asarray(model.psi(grid.nodes), dtype=float), u_new.shape)
    i_new, _ = _weighted_exp(u_new, psi, grid.h, config.eps)
    return SimState(t=state.t + dt, u=Field(grid, u_new), I=i_new, step_count=state.step_count + 1)


def run(
    model: ModelSpec,
    grid: Grid1D,
    config: SolverConfig,
    u0: Field,
    nrange: NutrientRange | None = None,
) -> tuple[Trajectory, list[tuple[float, Field]]]:
    """Advance to t = T, recording the trajectory and u snapshots every record_every.

    Assumes the model assumptions were validated (or deliberately waived) by
    the caller.  Aborts with :class:`BlowUpError` on non-finite states or a
    runaway resource.
    """
    _resolution_warning(grid, config.eps)
    if nrange is None:
        try:
            nrange = derive_nutrient_range(model, PARABOLIC, grid.nodes)
        except RangeDerivationError:
            nrange = None

    psi = np.broadcast_to(np.asarray(model.psi(grid.nodes), dtype=float), (grid.n_nodes,))
    ones = np.ones(grid.n_nodes)
    i0, _ = _weighted_exp(u0.values, psi, grid.h, config.eps)
    state = SimState(t=0.0, u=u0.copy(), I=i0)

    recorder = _Recorder(grid, nrange)

    def rho_of(u: np.ndarray) -> float:
        return _weighted_exp(u, ones, grid.h, config.eps)[0]

    recorder.record(state.t, state.u, state.I, rho_of(state.u.values))
    if config.T == 0:
        return recorder.empty_trajectory(), recorder.snapshots

    dts: list[float] = []
    k_record = 1
    while state.t < config.T - 1e-12:
        target = min(k_record * config.record_every, config.T)
        t_old = state.t
        state = step(state, model, config, dt_cap=target - state.t)
        dts.append(state.t - t_old)
        recorder.check_runaway(state.I, state.t)
        if state.t >= target - 1e-12:
            state.t = target  # land exactly on the record grid
            recorder.record(state.t, state.u, state.I, rho_of(state.u.values))
            k_record += 1

    meta = _dt_meta(config, dts)
    meta["leak_fraction"] = float(np.exp(max(recorder.leak) / config.eps))
    meta["nutrient_range"] = nrange
    return recorder.trajectory(meta), recorder.snapshots


def _resolution_warning(grid: Grid1D, eps: float):
    if not grid.meets_concentration_resolution(eps):
        warnings.warn(
            f"grid h={grid.h:.4g} coarser than sqrt(eps)/8={math.sqrt(eps) / 8:.4g}; "
            "concentration peaks may be under-resolved",
            stacklevel=3,
        )


def _dt_meta(config: SolverConfig, dts: list[float]) -> dict:
    dts_arr = np.asarray(dts)
    return {
        "eps": config.eps,
        "n_steps": len(dts),
        "dt_min": float(dts_arr.min()) if len(dts) else math.nan,
        "dt_max": float(dts_arr.max()) if len(dts) else math.nan,
        "dts": dts_arr,
    }


class _Recorder:
    """Accumulates trajectory rows and snapshots; shared by all three solvers."""

    def __init__(self, grid: Grid1D, nrange: NutrientRange | None):
        self.grid = grid
        self.nrange = nrange
        self.times: list[float] = []
        self.I: list[float] = []
        self.max_u: list[float] = []
        self.argmax_u: list[float] = []
        self.rho: list[float] = []
        self.leak: list[float] = []
        self.extra: dict[str, list[float]] = {}
        self.snapshots: list[tuple[float, Field]] = []

    def record(self, t: float, u_field: Field, I: float, rho: float, extra: dict | None = None):
        u = u_field.values
        k = int(np.argmax(u))
        self.times.append(t)
        self.I.append(I)
        self.max_u.append(float(u[k]))
        self.argmax_u.append(float(self.grid.nodes[k]))
        self.rho.append(rho)
        self.leak.append(float(max(u[0], u[-1]) - u[k]))
        for key, val in (extra or {}).items():
            self.extra.setdefault(key, []).append(val)
        self.snapshots.append((t, u_field.copy()))

    def check_runaway(self, I: float, t: float):
        cap = 10.0 * self.nrange.I_M if self.nrange is not None else 100.0 * max(self.I[0], 1.0)
        if not 0.0 < I < cap:
            raise BlowUpError(f"resource runaway: I={I:.6g} at t={t:.6g} (cap {cap:.6g})")

    def empty_trajectory(self) -> Trajectory:
        empty = np.array([])
        return Trajectory(empty, empty, empty, empty, empty, empty, empty, empty, meta={})

    def trajectory(self, meta: dict) -> Trajectory:
        times = np.asarray(self.times)
        i_arr = np.asarray(self.I)
        for key, vals in self.extra.items():
            meta[key] = np.asarray(vals)
        return Trajectory(
            times=times,
            I=i_arr,
            max_u=np.asarray(self.max_u),
            argmax_u=np.asarray(self.argmax_u),
            rho=np.asarray(self.rho),
            dI_dt=centered_dI_dt(times, i_arr),
            tv_I_cum=np.concatenate(([0.0], np.cumsum(np.abs(np.diff(i_arr))))),
            boundary_leak=np.asarray(self.leak),
            meta=meta,
        )


def centered_dI_dt(times: np.ndarray, i_arr: np.ndarray) -> np.ndarray:
    """Centered finite differences of a recorded series, one-sided at the ends."""
    if len(times) < 2:
        return np.zeros_like(i_arr)
    out = np.empty_like(i_arr)
    out[1:-1] = (i_arr[2:] - i_arr[:-2]) / (times[2:] - times[:-2])
    out[0] = (i_arr[1] - i_arr[0]) / (times[1] - times[0])
    out[-1] = (i_arr[-1] - i_arr[-2]) / (times[-1] - times[-2])
    return out
