"""Synthetic dataset generation: prior bathymetry -> forward model -> records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import quantize
from .fields import BathymetryField, BoundaryConditions, ChannelGeometry, Dataset, Record
from .forward import ForwardParams, InfeasibleBathymetry, simulate
from .prior import (
    BcRanges,
    FieldBasis,
    KernelSpec,
    ParabolicMeanSpec,
    TrapezoidalMeanSpec,
    build_field_basis,
    parabolic_mean,
    sample_bathymetry,
    sample_bc,
    trapezoidal_mean,
)


@dataclass(frozen=True)
class PriorConfig:
    family: str = "parabolic"
    kernel: KernelSpec = field(default_factory=KernelSpec)
    mean: object = field(default_factory=ParabolicMeanSpec)
    n_modes: int = 200

    def __post_init__(self):
        if self.family not in ("parabolic", "trapezoidal"):
            raise ValueError(f"unknown prior family {self.family!r}")


def trapezoidal_prior(sigma=1.2, n_modes=200) -> PriorConfig:
    """The alternative family used for out-of-distribution tests: flat-bottomed
    mean section and shorter correlation lengths."""
    return PriorConfig(
        "trapezoidal",
        KernelSpec(sigma=sigma, len_along=120.0, len_across=12.0),
        TrapezoidalMeanSpec(),
        n_modes,
    )


def mean_field(geometry: ChannelGeometry, prior: PriorConfig) -> BathymetryField:
    if prior.family == "parabolic":
        return parabolic_mean(geometry, prior.mean)
    return trapezoidal_mean(geometry, prior.mean)


def prior_basis(geometry: ChannelGeometry, prior: PriorConfig) -> FieldBasis:
    return build_field_basis(geometry, prior.kernel, min(prior.n_modes, geometry.n_nodes), mean_field(geometry, prior))


def generate_dataset(
    geometry: ChannelGeometry,
    prior: PriorConfig,
    n: int,
    seed: int,
    params: ForwardParams | None = None,
    bc_ranges: BcRanges | None = None,
    max_retries: int = 100,
    basis: FieldBasis | None = None,
):
    """Generate ``n`` records; returns ``(dataset, rejection_count)``.

    Bathymetry and boundary conditions are rounded to f32 precision before the
    forward run, and flow fields after it, so the in-memory dataset is exactly
    what an f32 container stores. A draw whose forward run hits a dry section
    is redrawn (up to ``max_retries`` times per record).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    params = params or ForwardParams()
    bc_ranges = bc_ranges or BcRanges()
    basis = basis or prior_basis(geometry, prior)
    records = []
    rejections = 0
    for i in range(n):
        for attempt in range(max_retries + 1):
            bed = BathymetryField(geometry, quantize(sample_bathymetry(basis, [seed, i, attempt, 0]).bed_elevation))
            bc = BoundaryConditions.from_array(quantize(sample_bc(bc_ranges, [seed, i, attempt, 1]).as_array()))
            try:
                flow = simulate(bed, bc, params)
            except InfeasibleBathymetry:
                rejections += 1
                continue
            break
        else:
            raise InfeasibleBathymetry(f"record {i}: no wet bathymetry after {max_retries} retries")
        flow = type(flow)(geometry, *(quantize(a) for a in (flow.u, flow.v, flow.depth, flow.surface)))
        records.append(Record(bed, bc, flow))
    meta = {
        "prior_family": prior.family,
        "seed": seed,
        "sigma": repr(prior.kernel.sigma),
        "len_along": repr(prior.kernel.len_along),
        "len_across": repr(prior.kernel.len_across),
        "n_modes": basis.n_modes,
        "manning_n": repr(params.manning_n),
        "rejections": rejections,
    }
    return Dataset(geometry, tuple(records), meta), rejections
