"""Explicit solver for the kernel-mutation model in log density.

In the log variable the equation is nonlocal but first order in time:

    du/dt (x) = R(x, I) + integral K(z) b(x + eps z, I)
                          exp((u(x + eps z) - u(x)) / eps) dz,
    I = integral exp(u/eps) dx          (unit weight; rescaling absorbs psi)

The kernel integral is discretized once per run with symmetric composite
trapezoid nodes on [-Z, Z], Z chosen so the slope-weighted tail is below
tolerance, and renormalized to unit kernel mass.  Off-grid evaluations of u
use linear interpolation with the boundary slope clamped to +-A so the
integral term never sees fabricated growth outside the domain.

Exponents are clamped at +80 and every clamp event is counted: more than 1%
of evaluations clamped in a step raises a warning, more than 10% aborts the
run.  The time step follows

    dt = min(dt_max, cfl * eps / (b_M e^S + K2))

where b_M e^S is the largest mutation integral observed in the current
right-hand side, which is exactly the stiffness the exponential coupling
injects.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import INTEGRAL, ModelSpec, NutrientRange, RangeDerivationError, derive_nutrient_range
from .numerics import Field, Grid1D, _sample_values, _weighted_exp
from .parabolic import BlowUpError, SimState, SolverConfig, _dt_meta, _Recorder, _resolution_warning
from .records import Trajectory

EXP_CLAMP = 80.0
CLAMP_WARN_FRACTION = 0.01
CLAMP_ABORT_FRACTION = 0.10


class KernelTruncationError(Exception):
    """The slope-weighted kernel tail cannot be brought below tolerance."""


class StabilityError(Exception):
    """Exponent clamping exceeded the abort fraction; the run is not trustworthy."""


@dataclass(frozen=True)
class KernelQuadrature:
    """Symmetric trapezoid rule for integrals against the mutation kernel.

    ``weights`` are already renormalized so that sum(weights * kernel_values)
    is exactly one.
    """

    nodes: np.ndarray
    weights: np.ndarray
    Z: float
    kernel_values: np.ndarray

    @property
    def mass_weights(self) -> np.ndarray:
        return self.weights * self.kernel_values

    def moment(self, fn_of_z: np.ndarray) -> float:
        return float(np.dot(self.mass_weights, fn_of_z))


def build_kernel_quadrature(
    model: ModelSpec,
    tol: float = 1e-10,
    slope_bound: float | None = None,
    z_cap: float = 100.0,
    spacing: float | None = None,
) -> KernelQuadrature:
    """Chooses the truncation radius and tabulates the kernel quadrature.

    The radius Z is the smallest value with
    integral_{|z|>Z} K(z) exp(S |z|) dz <= tol for the working slope bound S
    (default 3A); raw tail mass beyond Z must also be below 1e-10.
    """
    if model.kernel is None:
        raise ValueError(f"model {model.name} has no mutation kernel")
    c = model.constants
    s_bound = 3.0 * c.A if slope_bound is None else slope_bound
    sigma = model.kernel_sigma or _probe_sigma(model.kernel, z_cap)
    dz = sigma / 20.0 if spacing is None else spacing

    # slope-weighted and raw tail masses, cumulated from the far end inward
    zs = np.arange(0.0, z_cap + dz, dz)
    kv_sym = np.asarray(model.kernel(zs), dtype=float) + np.asarray(model.kernel(-zs), dtype=float)
    weighted = kv_sym * np.exp(s_bound * zs)
    if weighted[-1] > tol:
        raise KernelTruncationError(
            f"kernel still carries weighted density {weighted[-1]:.3g} at z={z_cap:g}"
        )
    tail_w = _cum_tail(weighted, dz)
    tail_raw = _cum_tail(kv_sym, dz)
    ok = (tail_w <= tol) & (tail_raw <= 1e-10)
    if not ok.any():
        raise KernelTruncationError(
            f"cannot reach tail tolerance {tol:g} within Z <= {z_cap:g} "
            f"(best weighted tail {tail_w.min():.3g})"
        )
    Z = float(zs[int(np.argmax(ok))])
    Z = max(Z, 2.0 * dz)

    half = np.arange(dz, Z + dz / 2.0, dz)
    nodes = np.concatenate((-half[::-1], [0.0], half))
    weights = np.full(nodes.shape, dz)
    weights[0] = weights[-1] = dz / 2.0
    kernel_values = np.asarray(model.kernel(nodes), dtype=float)
    raw_mass = float(np.dot(weights, kernel_values))
    if raw_mass <= 0:
        raise KernelTruncationError("kernel mass vanished on the quadrature window")
    weights = weights / raw_mass
    return KernelQuadrature(nodes=nodes, weights=weights, Z=Z, kernel_values=kernel_values)


def _cum_tail(values: np.ndarray, dz: float) -> np.ndarray:
    # trapezoid mass of values on [z_k, end], per left endpoint k
    seg = 0.5 * dz * (values[:-1] + values[1:])
    return np.concatenate((np.cumsum(seg[::-1])[::-1], [0.0]))


def _probe_sigma(kernel, z_cap: float) -> float:
    zs = np.linspace(-z_cap, z_cap, 40001)
    kv = np.asarray(kernel(zs), dtype=float)
    mass = np.trapezoid(kv, zs)
    if mass <= 0:
        raise KernelTruncationError("kernel has nonpositive mass")
    return math.sqrt(max(np.trapezoid(kv * zs * zs, zs) / mass, 1e-12))


def mgf_abs(kq: KernelQuadrature, s: float) -> float:
    """Kernel moment against exp(s |z|); the envelope and rate-bound constant."""
    return kq.moment(np.exp(s * np.abs(kq.nodes)))


def envelope_growth_constant(model: ModelSpec, kq: KernelQuadrature) -> float:
    """Growth rate C = b_M * integral K exp(A|z|) + K2 of the moving envelope."""
    c = model.constants
    return c.b_M * mgf_abs(kq, c.A) + c.K2


def mutation_term(
    u: Field, x_index: int, I: float, model: ModelSpec, kq: KernelQuadrature, eps: float
) -> float:
    """Nonlocal birth term at one node: sum_j w_j K_j b(x + eps z_j, I) e^{(u(x+eps z_j)-u(x))/eps}."""
    x = u.grid.nodes[x_index]
    shifted_x = x + eps * kq.nodes
    u_shift = _sample_values(u.values, u.grid, shifted_x, model.constants.A)
    expo = np.minimum((u_shift - u.values[x_index]) / eps, EXP_CLAMP)
    b_vals = np.asarray(model.b(shifted_x, I), dtype=float)
    return float(np.dot(kq.mass_weights, b_vals * np.exp(expo)))


def _shifted_grid(grid: Grid1D, kq: KernelQuadrature, eps: float) -> np.ndarray:
    return grid.nodes[None, :] + eps * kq.nodes[:, None]


def _mutation_field(
    u: np.ndarray,
    grid: Grid1D,
    I: float,
    model: ModelSpec,
    kq: KernelQuadrature,
    eps: float,
    shifted_x: np.ndarray,
    b_shift: np.ndarray | None,
) -> tuple[np.ndarray, int]:
    u_shift = _sample_values(u, grid, shifted_x.ravel(), model.constants.A).reshape(shifted_x.shape)
    expo = (u_shift - u[None, :]) / eps
    clamped = int(np.count_nonzero(expo > EXP_CLAMP))
    if clamped:
        np.minimum(expo, EXP_CLAMP, out=expo)
    if b_shift is None:
        b_shift = np.asarray(model.b(shifted_x, I), dtype=float)
    term = np.exp(expo)
    term *= b_shift
    mut = kq.mass_weights @ term
    return mut, clamped


def _kernel_dt(config: SolverConfig, mut_max: float, K2: float) -> float:
    return min(config.dt_max, config.cfl_kernel * config.eps / (mut_max + K2))


def step(
    state: SimState,
    model: ModelSpec,
    config: SolverConfig,
    kq: KernelQuadrature,
    dt_cap: float | None = None,
) -> SimState:
    """One explicit Euler update of the kernel model (resource lagged one step)."""
    new_state, _, _ = _step_impl(state, model, config, kq, dt_cap, None, None)
    return new_state


def _step_impl(
    state: SimState,
    model: ModelSpec,
    config: SolverConfig,
    kq: KernelQuadrature,
    dt_cap: float | None,
    shifted_x: np.ndarray | None,
    b_shift: np.ndarray | None,
) -> tuple[SimState, int, float]:
    grid = state.u.grid
    u = state.u.values
    if shifted_x is None:
        shifted_x = _shifted_grid(grid, kq, config.eps)
    mut, clamped = _mutation_field(u, grid, state.I, model, kq, config.eps, shifted_x, b_shift)
    frac = clamped / (mut.size * len(kq.nodes))
    if frac > CLAMP_ABORT_FRACTION:
        raise StabilityError(
            f"{100 * frac:.1f}% of kernel exponents clamped at t={state.t:.6g}; aborting"
        )
    if frac > CLAMP_WARN_FRACTION:
        warnings.warn(
            f"{100 * frac:.2f}% of kernel exponents clamped at t={state.t:.6g}", stacklevel=2
        )
    dt = _kernel_dt(config, float(mut.max()), model.constants.K2)
    if dt_cap is not None:
        dt = min(dt, dt_cap)
    rate = np.asarray(model.R(grid.nodes, state.I), dtype=float)
    u_new = u + dt * (rate + mut)
    if not np.all(np.isfinite(u_new)):
        bad = int(np.flatnonzero(~np.isfinite(u_new))[0])
        raise BlowUpError(f"non-finite u at t={state.t + dt:.6g}, node {bad} (x={grid.nodes[bad]:g})")
    i_new, _ = _weighted_exp(u_new, np.ones_like(u_new), grid.h, config.eps)
    new_state = SimState(t=state.t + dt, u=Field(grid, u_new), I=i_new, step_count=state.step_count + 1)
    return new_state, clamped, dt


def run(
    model: ModelSpec,
    grid: Grid1D,
    config: SolverConfig,
    u0: Field,
    kq: KernelQuadrature | None = None,
    nrange: NutrientRange | None = None,
) -> tuple[Trajectory, list[tuple[float, Field]]]:
    """Advance the kernel model to t = T with the same recording scheme as the
    diffusive solver, plus a cumulative clamp-event counter."""
    _resolution_warning(grid, config.eps)
    if kq is None:
        kq = build_kernel_quadrature(model)
    if nrange is None:
        try:
            nrange = derive_nutrient_range(model, INTEGRAL, grid.nodes)
        except RangeDerivationError:
            nrange = None

    ones = np.ones(grid.n_nodes)
    i0, _ = _weighted_exp(u0.values, ones, grid.h, config.eps)
    state = SimState(t=0.0, u=u0.copy(), I=i0)

    shifted_x = _shifted_grid(grid, kq, config.eps)
    b_shift = None
    if not model.b_depends_on_I:
        b_shift = np.asarray(model.b(shifted_x, i0), dtype=float)

    def rho_of(u: np.ndarray) -> float:
        return _weighted_exp(u, ones, grid.h, config.eps)[0]

    recorder = _Recorder(grid, nrange)
    clamp_total = 0
    recorder.record(state.t, state.u, state.I, rho_of(state.u.values), extra={"clamp_events": 0.0})
    if config.T == 0:
        return recorder.empty_trajectory(), recorder.snapshots

    dts: list[float] = []
    k_record = 1
    while state.t < config.T - 1e-12:
        target = min(k_record * config.record_every, config.T)
        t_old = state.t
        state, clamped, _ = _step_impl(
            state, model, config, kq, target - state.t, shifted_x, b_shift
        )
        dts.append(state.t - t_old)
        clamp_total += clamped
        recorder.check_runaway(state.I, state.t)
        if state.t >= target - 1e-12:
            state.t = target
            recorder.record(
                state.t, state.u, state.I, rho_of(state.u.values),
                extra={"clamp_events": float(clamp_total)},
            )
            k_record += 1

    meta = _dt_meta(config, dts)
    meta["leak_fraction"] = float(np.exp(max(recorder.leak) / config.eps))
    meta["nutrient_range"] = nrange
    meta["clamp_total"] = clamp_total
    meta["kernel_Z"] = kq.Z
    return recorder.trajectory(meta), recorder.snapshots
