"""Solvers for the two constrained limit systems.

Both limits have the form

    du/dt = H(x, grad u, I(t)),      max_x u(t, .) = 0 for all t > 0,

with the eikonal Hamiltonian H = |p|^2 + R(x, I) for the diffusive model and
the kernel Hamiltonian H = R(x, I) + b(x, I) * integral K(z) e^{p z} dz for
the integral one.  The constraint is enforced through the resource: H is
strictly decreasing in I, so after one explicit step the map

    Phi(I) = max_x [ u + dt * H_num(x, D+u, D-u, I) ]

is continuous and strictly decreasing, and the unique root Phi(I*) = 0 is
found by bisection.  I(t) thus acts as the multiplier that pins the maximum
of u at zero; projecting u by subtracting its max is kept only as a recorded
diagnostic (the max_u column, which should sit at roundoff).

Numerical fluxes.  The eikonal part uses the Godunov flux for p -> p^2.  The
kernel part needs a monotone flux for the convex kernel moment m(p) =
integral K e^{pz} dz (minimum at p = 0 for symmetric kernels); we evaluate m
separately on the one-sided slopes and combine as

    max( m(min(D-, 0)), m(max(D+, 0)) )

which is nondecreasing in D+, nonincreasing in D-, and consistent.  This
mirrors the Godunov construction for p^2 and is the one nonstandard scheme
choice in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integral import KernelQuadrature, build_kernel_quadrature
from .model import ModelSpec, NutrientRange, derive_nutrient_range
from .numerics import Field, Grid1D, _one_sided
from .parabolic import _Recorder, godunov_sq
from .records import Trajectory

EIKONAL = "eikonal"
KERNEL_INTEGRAL = "kernel_integral"
MGF_TABLE_RANGE = 10.0
MAX_BISECTIONS = 60


class ExtrapolationError(Exception):
    """A slope fell outside the tabulated moment-generating range."""


class ConstraintInfeasibleError(Exception):
    """No resource level in the bracket pins max u at zero."""


def mgf_kernel(kq: KernelQuadrature, p: float) -> float:
    """Kernel moment integral K(z) e^{p z} dz by quadrature; |p| <= 10."""
    if abs(p) > MGF_TABLE_RANGE:
        raise ExtrapolationError(f"slope p={p:g} outside the table range [-10, 10]")
    return kq.moment(np.exp(p * kq.nodes))


@dataclass(frozen=True)
class Hamiltonian:
    """Numerical Hamiltonian plus the resource bracket used by the constraint solve."""

    kind: str
    model: ModelSpec
    nrange: NutrientRange
    kq: KernelQuadrature | None = None
    p_grid: np.ndarray | None = None
    mgf_values: np.ndarray | None = None

    def mgf(self, p: np.ndarray) -> np.ndarray:
        if np.any(np.abs(p) > MGF_TABLE_RANGE):
            worst = float(p[np.argmax(np.abs(p))])
            raise ExtrapolationError(f"slope p={worst:g} outside the table range [-10, 10]")
        return np.interp(p, self.p_grid, self.mgf_values)

    def gradient_part(self, d_minus: np.ndarray, d_plus: np.ndarray) -> np.ndarray:
        """The p-dependent factor of H; independent of I for both kinds."""
        if self.kind == EIKONAL:
            return godunov_sq(d_minus, d_plus)
        down = self.mgf(np.minimum(d_minus, 0.0))
        up = self.mgf(np.maximum(d_plus, 0.0))
        return np.maximum(down, up)

    def value(self, xs: np.ndarray, grad_part: np.ndarray, I: float) -> np.ndarray:
        rate = np.asarray(self.model.R(xs, I), dtype=float)
        if self.kind == EIKONAL:
            return grad_part + rate
        bict = np.broadcast_to(np.asarray(self.model.b(xs, I), dtype=float), xs.shape)
        return rate + bict * grad_part


def make_hamiltonian(
    model: ModelSpec,
    kind: str,
    nrange: NutrientRange | None = None,
    grid: Grid1D | None = None,
    kq: KernelQuadrature | None = None,
    p_step: float = 1e-3,
) -> Hamiltonian:
    if kind not in (EIKONAL, KERNEL_INTEGRAL):
        raise ValueError(f"unknown hamiltonian kind {kind!r}")
    if nrange is None:
        if grid is None:
            raise ValueError("need either nrange or a grid to derive it from")
        variant = "parabolic" if kind == EIKONAL else "integral"
        nrange = derive_nutrient_range(model, variant, grid.nodes)
    if kind == EIKONAL:
        return Hamiltonian(kind=kind, model=model, nrange=nrange)
    if kq is None:
        kq = build_kernel_quadrature(model)
    p_grid = np.arange(-MGF_TABLE_RANGE, MGF_TABLE_RANGE + p_step / 2, p_step)
    mgf_values = (kq.mass_weights[None, :] * np.exp(np.outer(p_grid, kq.nodes))).sum(axis=1)
    return Hamiltonian(
        kind=kind, model=model, nrange=nrange, kq=kq, p_grid=p_grid, mgf_values=mgf_values
    )


@dataclass
class HJState:
    t: float
    u: Field
    I: float

    def __post_init__(self):
        if self.I <= 0:
            raise ValueError(f"resource must stay positive, got I={self.I}")


def _solve_constrained(
    u: np.ndarray, grid: Grid1D, ham: Hamiltonian, dt: float, tol: float
) -> tuple[np.ndarray, float, int, float]:
    """Returns (u_new, I*, bisection iterations, |max u_new|)."""
    d_minus, d_plus = _one_sided(u, grid.h)
    grad_part = ham.gradient_part(d_minus, d_plus)
    xs = grid.nodes

    def phi(I: float) -> float:
        return float((u + dt * ham.value(xs, grad_part, I)).max())

    lo, hi = ham.nrange.I_m / 4.0, 4.0 * ham.nrange.I_M
    phi_lo, phi_hi = phi(lo), phi(hi)
    if not (phi_lo >= 0.0 >= phi_hi):
        raise ConstraintInfeasibleError(
            f"constraint residual does not change sign on [{lo:.4g}, {hi:.4g}]: "
            f"Phi(lo)={phi_lo:.4g}, Phi(hi)={phi_hi:.4g}"
        )
    iterations = 0
    mid, phi_mid = lo, phi_lo
    while iterations < MAX_BISECTIONS:
        mid = 0.5 * (lo + hi)
        phi_mid = phi(mid)
        iterations += 1
        if abs(phi_mid) <= tol:
            break
        if phi_mid > 0.0:
            lo = mid
        else:
            hi = mid
    else:
        raise ConstraintInfeasibleError(
            f"bisection did not reach |Phi| <= {tol:g} in {MAX_BISECTIONS} iterations "
            f"(residual {phi_mid:.3g})"
        )
    u_new = u + dt * ham.value(xs, grad_part, mid)
    return u_new, mid, iterations, abs(phi_mid)


def constrained_step(state: HJState, ham: Hamiltonian, dt: float, constraint_tol: float = 1e-10) -> HJState:
    """One step of the constrained system; enforces max u = 0 through the resource."""
    u = state.u.values
    if abs(u.max()) > constraint_tol:
        raise ValueError(
            f"entering state violates the constraint: max u = {u.max():.3g} "
            f"exceeds tolerance {constraint_tol:g}"
        )
    u_new, i_star, _, _ = _solve_constrained(u, state.u.grid, ham, dt, constraint_tol)
    return HJState(t=state.t + dt, u=Field(state.u.grid, u_new), I=i_star)


def run_hj(
    model: ModelSpec,
    grid: Grid1D,
    hamiltonian_kind: str,
    u0: Field,
    T: float,
    dt: float | None = None,
    constraint_tol: float = 1e-10,
    record_every: float = 0.25,
    nrange: NutrientRange | None = None,
    kq: KernelQuadrature | None = None,
) -> tuple[Trajectory, list[tuple[float, Field]]]:
    """Advance the constrained limit system to t = T.

    The initial profile must already be normalized to max u0 = 0 within
    constraint_tol.  Every accepted state satisfies |max u| <= constraint_tol;
    the recorded max_u column is the per-step projection residual.
    """
    if abs(float(u0.values.max())) > constraint_tol:
        raise ValueError(
            f"u0 not normalized: max u0 = {u0.values.max():.3g}; subtract the max first"
        )
    ham = make_hamiltonian(model, hamiltonian_kind, nrange=nrange, grid=grid, kq=kq)
    if dt is None:
        dt = grid.h / 4.0

    # the constraint fixes I only after a step; seed the record with the
    # instantaneous multiplier at t=0 so the I column starts meaningfully
    i_seed = _solve_constrained(u0.values, grid, ham, dt, constraint_tol)[1]
    state = HJState(t=0.0, u=u0.copy(), I=i_seed)
    ones = np.ones(grid.n_nodes)

    recorder = _Recorder(grid, eps=1.0, nrange=ham.nrange)
    recorder.record_hj(state)
    if T == 0:
        return recorder.empty_trajectory(), recorder.snapshots

    max_iters = 0
    max_residual = 0.0
    n_steps = 0
    k_record = 1
    while state.t < T - 1e-12:
        target = min(k_record * record_every, T)
        step_dt = min(dt, target - state.t)
        u_new, i_star, iters, residual = _solve_constrained(
            state.u.values, grid, ham, step_dt, constraint_tol
        )
        state = HJState(t=state.t + step_dt, u=Field(grid, u_new), I=i_star)
        max_iters = max(max_iters, iters)
        max_residual = max(max_residual, residual)
        n_steps += 1
        if state.t >= target - 1e-12:
            state.t = target
            recorder.record_hj(state)
            k_record += 1

    traj = recorder.trajectory_hj(
        {
            "dt": dt,
            "n_steps": n_steps,
            "max_bisection_iters": max_iters,
            "max_constraint_residual": max_residual,
            "constraint_tol": constraint_tol,
            "kind": hamiltonian_kind,
            "nutrient_range": ham.nrange,
        }
    )
    return traj, recorder.snapshots


def _record_hj(self: _Recorder, state: HJState):
    u = state.u.values
    k = int(np.argmax(u))
    self.times.append(state.t)
    self.I.append(state.I)
    self.max_u.append(float(u[k]))
    self.argmax_u.append(float(self.grid.nodes[k]))
    self.rho.append(state.I)  # unit weight: the limit measure carries mass I
    self.leak.append(float(max(u[0], u[-1]) - u[k]))
    self.snapshots.append((state.t, state.u.copy()))


def _trajectory_hj(self: _Recorder, meta: dict) -> Trajectory:
    return self._base(meta)


_Recorder.record_hj = _record_hj
_Recorder.trajectory_hj = _trajectory_hj
