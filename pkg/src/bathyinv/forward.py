"""Steady backwater + lateral-conveyance surrogate of the shallow-water solver.

The water surface is marched upstream from the outlet stage with a Manning
friction slope; discharge is distributed across each section in proportion
to local conveyance; the transverse velocity follows from depth-integrated
continuity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .fields import (
    BathymetryField,
    BoundaryConditions,
    FlowField,
    ObservationMask,
    ObservationSet,
    apply_mask,
)
from .prior import rng_for


class InfeasibleBathymetry(ValueError):
    """A cross-section has no wet node."""


@dataclass(frozen=True)
class ForwardParams:
    manning_n: float = 0.03
    min_depth: float = 0.01
    max_backwater_slope: float = 0.01

    def __post_init__(self):
        if self.manning_n <= 0:
            raise ValueError("manning_n must be positive")
        if self.min_depth < 0:
            raise ValueError("min_depth must be non-negative")
        if self.max_backwater_slope <= 0:
            raise ValueError("max_backwater_slope must be positive")


def _column_depth(bed_col, stage, params):
    d = np.maximum(stage - bed_col, 0.0)
    wet = d > params.min_depth
    return d, wet


def _conveyance(d, wet, dy, n):
    return float(np.sum(np.where(wet, d, 0.0) ** (5.0 / 3.0)) * dy / n)


def _stage_step(bed_col, stage_down, sf_down, q, dx, dy, params):
    """Upstream stage from the standard-step balance
    ``stage - stage_down = dx * min((sf(stage) + sf_down) / 2, cap)``."""
    cap = params.max_backwater_slope

    def residual(stage):
        d, wet = _column_depth(bed_col, stage, params)
        k = _conveyance(d, wet, dy, params.manning_n)
        sf = (q / k) ** 2 if k > 0 else np.inf
        return stage - stage_down - dx * min(0.5 * (sf + sf_down), cap)

    lo = stage_down
    if residual(lo) >= 0:
        return lo
    # residual is increasing in stage and non-negative at lo + cap * dx
    return brentq(residual, lo, lo + cap * dx, xtol=1e-12, rtol=4 * np.finfo(float).eps)


def backwater_profile(bathy: BathymetryField, bc: BoundaryConditions, params: ForwardParams) -> np.ndarray:
    """Water-surface elevation per column, marched upstream from the outlet stage.

    Each reach uses the mean of the Manning friction slopes ``Q^2 / K^2`` at
    its two end sections (clamped to ``max_backwater_slope``), which makes the
    upstream stage implicit; it is solved with Brent's method.
    """
    g = bathy.geometry
    bed = bathy.bed_elevation
    q = bc.discharge
    surface = np.empty(g.n_along)
    surface[-1] = bc.downstream_surface
    d, wet = _column_depth(bed[:, -1], surface[-1], params)
    if not wet.any():
        raise InfeasibleBathymetry("outlet cross-section is dry under the downstream stage")
    sf = (q / _conveyance(d, wet, g.dy, params.manning_n)) ** 2
    for j in range(g.n_along - 2, -1, -1):
        surface[j] = _stage_step(bed[:, j], surface[j + 1], sf, q, g.dx, g.dy, params)
        d, wet = _column_depth(bed[:, j], surface[j], params)
        if not wet.any():
            raise InfeasibleBathymetry(f"cross-section {j} is dry")
        sf = (q / _conveyance(d, wet, g.dy, params.manning_n)) ** 2
    return surface


def water_depth(bathy: BathymetryField, surface, params: ForwardParams):
    """Depth grid (zero on dry nodes) and wet mask."""
    d = np.maximum(np.asarray(surface)[None, :] - bathy.bed_elevation, 0.0)
    wet = d > params.min_depth
    return np.where(wet, d, 0.0), wet


def conveyance_velocity(bathy: BathymetryField, surface, bc: BoundaryConditions, params: ForwardParams) -> np.ndarray:
    d, wet = water_depth(bathy, surface, params)
    n = params.manning_n
    local = np.where(wet, d, 0.0) ** (2.0 / 3.0) / n
    k = np.sum(local * d, axis=0) * bathy.geometry.dy
    return np.where(wet, bc.discharge / k[None, :] * local, 0.0)


def transverse_velocity(u, depth, geometry) -> np.ndarray:
    """Lateral velocity from continuity, integrated from the near bank (row 0).

    ``v[i] * d[i] = -dy * sum_{i' <= i} d(u d)/dx [i']``; rows 0 and
    ``n_across - 1`` are walls and carry no lateral flow.
    """
    q = np.asarray(u) * np.asarray(depth)
    dqdx = np.gradient(q, geometry.dx, axis=1, edge_order=1)
    flux = -np.cumsum(dqdx, axis=0) * geometry.dy
    flux[0] = 0.0
    flux[-1] = 0.0
    wet = np.asarray(depth) > 0
    return np.where(wet, flux / np.where(wet, depth, 1.0), 0.0)


def lateral_flux(u, depth, geometry) -> np.ndarray:
    """Cumulative lateral flux ``-dy * cumsum(d(u d)/dx)`` without wall rows zeroed."""
    q = np.asarray(u) * np.asarray(depth)
    return -np.cumsum(np.gradient(q, geometry.dx, axis=1, edge_order=1), axis=0) * geometry.dy


def simulate(bathy: BathymetryField, bc: BoundaryConditions, params: ForwardParams | None = None) -> FlowField:
    params = params or ForwardParams()
    surface = backwater_profile(bathy, bc, params)
    depth, _ = water_depth(bathy, surface, params)
    u = conveyance_velocity(bathy, surface, bc, params)
    v = transverse_velocity(u, depth, bathy.geometry)
    return FlowField(bathy.geometry, u, v, depth, surface)


def observe(flow: FlowField, mask: ObservationMask, r: float, seed, bc: BoundaryConditions) -> ObservationSet:
    """Masked velocities plus i.i.d. N(0, r^2) noise.

    Noise is drawn for every node of the grid and then masked, so masks that
    share a node also share its noise draw for the same seed.
    """
    if not r > 0:
        raise ValueError("noise level r must be positive")
    truth = apply_mask(flow, mask)
    grid_noise = rng_for(seed).standard_normal(2 * flow.geometry.n_nodes)
    noise = grid_noise[mask.output_rows(flow.geometry)] * r
    return ObservationSet(mask, truth + noise, np.full(len(truth), float(r)), bc)
