"""Shared result records produced by the solvers and consumed by the analysis layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    """Time series recorded along a run.

    ``rho`` is the total unweighted mass of the density, ``dI_dt`` is the
    centered finite difference of the recorded resource series and
    ``tv_I_cum`` its cumulative total variation.  ``boundary_leak`` stores
    max(u at either boundary node) - max(u), a proxy for how much density
    touches the domain walls.
    """

    times: np.ndarray
    I: np.ndarray
    max_u: np.ndarray
    argmax_u: np.ndarray
    rho: np.ndarray
    dI_dt: np.ndarray
    tv_I_cum: np.ndarray
    boundary_leak: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if len(self.tv_I_cum) > 1 and np.any(np.diff(self.tv_I_cum) < -1e-15):
            raise ValueError("cumulative total variation must be nondecreasing")

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class Peak:
    """One detected concentration: location, carried mass and spatial width."""

    location: float
    mass: float
    width: float


@dataclass
class ConcentrationReport:
    """Peaks detected in a density profile plus the mass not assigned to any peak."""

    peaks: list[Peak]
    residual_mass: float
    degenerate: bool = False

    @property
    def total_mass(self) -> float:
        return sum(p.mass for p in self.peaks) + self.residual_mass

    def dominant(self) -> Peak:
        if not self.peaks:
            raise ValueError("no peaks detected")
        return max(self.peaks, key=lambda p: p.mass)


@dataclass(frozen=True)
class Check:
    """Outcome of one monitored bound: pass flag, worst margin, witness location.

    ``margin`` is signed so that positive means violation by that amount;
    the string ``witness`` names where the worst margin occurred.
    """

    name: str
    passed: bool
    margin: float
    witness: str
    detail: str = ""

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        out = f"check={self.name} status={status} margin={self.margin:.6g} witness={self.witness}"
        if self.detail:
            out += f" detail={self.detail}"
        return out
