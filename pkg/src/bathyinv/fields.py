"""Grid geometry, field containers, observation masks and error metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ChannelGeometry:
    """Structured channel mesh: rows run across the channel, columns along it.

    Column ``n_along - 1`` is the outlet (downstream boundary).
    """

    n_across: int = 21
    n_along: int = 101
    dx: float = 16.0
    dy: float = 4.0

    def __post_init__(self):
        if self.n_across < 3 or self.n_along < 3:
            raise ValueError(f"grid must be at least 3x3, got {self.n_across}x{self.n_along}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("node spacings must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_across, self.n_along)

    @property
    def n_nodes(self) -> int:
        return self.n_across * self.n_along

    def check_grid(self, a, name="array"):
        if np.shape(a) != self.shape:
            raise ValueError(f"{name} has shape {np.shape(a)}, geometry expects {self.shape}")


@dataclass(frozen=True, eq=False)
class BathymetryField:
    geometry: ChannelGeometry
    bed_elevation: np.ndarray

    def __post_init__(self):
        bed = _frozen(self.bed_elevation)
        self.geometry.check_grid(bed, "bed_elevation")
        if not np.all(np.isfinite(bed)):
            raise ValueError("bed elevation contains non-finite entries")
        object.__setattr__(self, "bed_elevation", bed)

    def flat(self) -> np.ndarray:
        return self.bed_elevation.ravel()


@dataclass(frozen=True, eq=False)
class FlowField:
    geometry: ChannelGeometry
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    surface: np.ndarray

    def __post_init__(self):
        for name in ("u", "v", "depth"):
            a = _frozen(getattr(self, name))
            self.geometry.check_grid(a, name)
            object.__setattr__(self, name, a)
        surface = _frozen(self.surface)
        if surface.shape != (self.geometry.n_along,):
            raise ValueError(f"surface must have length {self.geometry.n_along}")
        if not np.all(np.isfinite(surface)):
            raise ValueError("surface contains non-finite entries")
        object.__setattr__(self, "surface", surface)
        if np.any(self.depth < 0):
            raise ValueError("negative depth")
        dry = self.depth == 0
        if np.any(self.u[dry] != 0) or np.any(self.v[dry] != 0):
            raise ValueError("non-zero velocity on a zero-depth node")


@dataclass(frozen=True)
class BoundaryConditions:
    discharge: float
    downstream_surface: float

    def __post_init__(self):
        if not self.discharge > 0:
            raise ValueError(f"discharge must be positive, got {self.discharge}")
        if not math.isfinite(self.downstream_surface):
            raise ValueError("downstream surface must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.discharge, self.downstream_surface], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> BoundaryConditions:
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True, eq=False)
class ObservationMask:
    """Ordered node positions where velocities are sampled."""

    indices: np.ndarray
    includes_u: bool = True
    includes_v: bool = True

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, copy=True).reshape(-1, 2)
        if len(idx) == 0:
            raise ValueError("observation mask is empty")
        if len({tuple(p) for p in idx.tolist()}) != len(idx):
            raise ValueError("observation mask has duplicate nodes")
        if not (self.includes_u or self.includes_v):
            raise ValueError("mask must include at least one velocity component")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    @property
    def n_obs(self) -> int:
        return len(self.indices) * (int(self.includes_u) + int(self.includes_v))

    def check_bounds(self, geometry: ChannelGeometry):
        r, c = self.indices[:, 0], self.indices[:, 1]
        if r.min() < 0 or c.min() < 0 or r.max() >= geometry.n_across or c.max() >= geometry.n_along:
            raise IndexError("observation mask index out of bounds")

    def flat_indices(self, geometry: ChannelGeometry) -> np.ndarray:
        """Row-major node numbers, in mask order."""
        self.check_bounds(geometry)
        return self.indices[:, 0] * geometry.n_along + self.indices[:, 1]

    def output_rows(self, geometry: ChannelGeometry) -> np.ndarray:
        """Rows of the stacked ``[u.ravel(), v.ravel()]`` vector picked by this mask."""
        flat = self.flat_indices(geometry)
        parts = []
        if self.includes_u:
            parts.append(flat)
        if self.includes_v:
            parts.append(flat + geometry.n_nodes)
        return np.concatenate(parts)

    @classmethod
    def full(cls, geometry: ChannelGeometry) -> ObservationMask:
        rows, cols = np.divmod(np.arange(geometry.n_nodes), geometry.n_along)
        return cls(np.column_stack([rows, cols]))


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Noisy velocity samples; ``values`` holds all u samples, then all v samples."""

    mask: ObservationMask
    values: np.ndarray
    noise_std: np.ndarray
    bc: BoundaryConditions

    def __post_init__(self):
        values = _frozen(self.values).ravel()
        if len(values) != self.mask.n_obs:
            raise ValueError(f"expected {self.mask.n_obs} observed values, got {len(values)}")
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=np.float64), values.shape)
        std = _frozen(std)
        if np.any(std <= 0):
            raise ValueError("noise standard deviations must be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "noise_std", std)

    @property
    def noise_var(self) -> np.ndarray:
        return self.noise_std**2


@dataclass(frozen=True, eq=False)
class Record:
    bathymetry: BathymetryField
    bc: BoundaryConditions
    flow: FlowField


@dataclass(frozen=True, eq=False)
class Dataset:
    geometry: ChannelGeometry
    records: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        records = tuple(self.records)
        if not records:
            raise ValueError("dataset needs at least one record")
        for r in records:
            if r.bathymetry.geometry != self.geometry or r.flow.geometry != self.geometry:
                raise ValueError("all records must share the dataset geometry")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "metadata", {str(k): str(v) for k, v in self.metadata.items()})

    def __len__(self):
        return len(self.records)

    def subset(self, idx) -> Dataset:
        return Dataset(self.geometry, tuple(self.records[i] for i in idx), dict(self.metadata))

    def stack(self, name: str) -> np.ndarray:
        """Stack one field over records: ``bed``, ``u``, ``v``, ``depth`` (N x m) or ``bc`` (N x 2)."""
        if name == "bed":
            return np.stack([r.bathymetry.flat() for r in self.records])
        if name == "bc":
            return np.stack([r.bc.as_array() for r in self.records])
        if name == "surface":
            return np.stack([r.flow.surface for r in self.records])
        return np.stack([getattr(r.flow, name).ravel() for r in self.records])


def grid_rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _lattice_count(n_across, n_along, sa, sl):
    return -(-n_across // sa) * -(-n_along // sl)


def equispaced_mask(geometry: ChannelGeometry, n_points: int) -> ObservationMask:
    """Near-uniform lattice of roughly ``n_points`` nodes.

    Among strides ``(sa, sl)`` whose point count is within 5% of ``n_points``
    (or, if none is, those with the smallest count error), the lattice whose
    across/along aspect ratio best matches the grid's wins; ties go to the
    smaller count error, then smaller ``sa`` and ``sl``. The lattice is centred.
    """
    na_tot, nl_tot = geometry.shape
    if not 1 <= n_points <= geometry.n_nodes:
        raise ValueError(f"n_points must be in [1, {geometry.n_nodes}], got {n_points}")
    grid_aspect = na_tot / nl_tot
    best = None
    for sa in range(1, na_tot + 1):
        na = -(-na_tot // sa)
        for sl in range(1, nl_tot + 1):
            nl = -(-nl_tot // sl)
            err = abs(na * nl - n_points)
            key = (max(err / n_points, 0.05), abs(math.log((na / nl) / grid_aspect)), err, sa, sl)
            if best is None or key < best:
                best = key
    sa, sl = best[-2:]
    na, nl = -(-na_tot // sa), -(-nl_tot // sl)
    r0 = (na_tot - 1 - (na - 1) * sa) // 2
    c0 = (nl_tot - 1 - (nl - 1) * sl) // 2
    rows = r0 + sa * np.arange(na)
    cols = c0 + sl * np.arange(nl)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ObservationMask(np.column_stack([rr.ravel(), cc.ravel()]))


def apply_mask(flow: FlowField, mask: ObservationMask) -> np.ndarray:
    """Observation vector ``[u at indices, v at indices]`` in mask order."""
    stacked = np.concatenate([flow.u.ravel(), flow.v.ravel()])
    return stacked[mask.output_rows(flow.geometry)]
