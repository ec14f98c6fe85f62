"""Geostatistical bathymetry priors: a deterministic mean shape plus a
squared-exponential Gaussian random field, sampled through a truncated
Karhunen-Loeve expansion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import BathymetryField, BoundaryConditions, ChannelGeometry


def rng_for(seed) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by an int or a sequence of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class KernelSpec:
    sigma: float = 1.2
    len_along: float = 200.0
    len_across: float = 20.0
    nugget: float = 1e-6

    def __post_init__(self):
        if self.sigma <= 0 or self.len_along <= 0 or self.len_across <= 0:
            raise ValueError("kernel sigma and correlation lengths must be positive")
        if self.nugget < 0:
            raise ValueError("nugget must be non-negative")


@dataclass(frozen=True)
class ParabolicMeanSpec:
    thalweg_elevation: float = 0.0
    bank_rise: float = 3.0
    along_trend: float = -1e-4

    def __post_init__(self):
        if self.bank_rise < 0:
            raise ValueError("bank_rise must be non-negative")


@dataclass(frozen=True)
class TrapezoidalMeanSpec:
    """Flat-bottomed section: level over ``bottom_fraction`` of the width, linear banks."""

    thalweg_elevation: float = 0.5
    bank_rise: float = 3.5
    along_trend: float = -1e-4
    bottom_fraction: float = 0.5

    def __post_init__(self):
        if self.bank_rise < 0:
            raise ValueError("bank_rise must be non-negative")
        if not 0 <= self.bottom_fraction < 1:
            raise ValueError("bottom_fraction must be in [0, 1)")


@dataclass(frozen=True)
class BcRanges:
    discharge: tuple = (100.0, 300.0)
    downstream_surface: tuple = (4.0, 5.0)

    def __post_init__(self):
        for lo, hi in (self.discharge, self.downstream_surface):
            if lo > hi:
                raise ValueError(f"invalid range [{lo}, {hi}]")


@dataclass(frozen=True, eq=False)
class FieldBasis:
    geometry: ChannelGeometry
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    captured_fraction: float

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def covariance(self) -> np.ndarray:
        """Covariance of the truncated expansion (m x m)."""
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def _across_coordinate(geometry):
    return 2.0 * np.arange(geometry.n_across) / (geometry.n_across - 1) - 1.0


def parabolic_mean(geometry: ChannelGeometry, spec: ParabolicMeanSpec) -> BathymetryField:
    xi = _across_coordinate(geometry)
    along = spec.along_trend * geometry.dx * np.arange(geometry.n_along)
    bed = spec.thalweg_elevation + spec.bank_rise * xi[:, None] ** 2 + along[None, :]
    return BathymetryField(geometry, bed)


def trapezoidal_mean(geometry: ChannelGeometry, spec: TrapezoidalMeanSpec) -> BathymetryField:
    xi = np.abs(_across_coordinate(geometry))
    b = spec.bottom_fraction
    profile = np.clip((xi - b) / (1.0 - b), 0.0, None)
    along = spec.along_trend * geometry.dx * np.arange(geometry.n_along)
    bed = spec.thalweg_elevation + spec.bank_rise * profile[:, None] + along[None, :]
    return BathymetryField(geometry, bed)


def _se_kernel_1d(n, spacing, length):
    x = spacing * np.arange(n)
    d = x[:, None] - x[None, :]
    return np.exp(-(d**2) / length**2)


def kernel_matrix(geometry: ChannelGeometry, kernel: KernelSpec) -> np.ndarray:
    """Dense m x m covariance (row-major node order), nugget included."""
    ca = _se_kernel_1d(geometry.n_across, geometry.dy, kernel.len_across)
    cl = _se_kernel_1d(geometry.n_along, geometry.dx, kernel.len_along)
    c = kernel.sigma**2 * np.kron(ca, cl)
    c[np.diag_indices_from(c)] += kernel.nugget
    return c


def build_field_basis(
    geometry: ChannelGeometry, kernel: KernelSpec, n_modes: int, mean: BathymetryField | None = None
) -> FieldBasis:
    """Leading eigenpairs of the anisotropic squared-exponential covariance.

    The kernel factorises into across- and along-channel parts, so its
    eigenpairs are Kronecker products of the two small 1-D eigenproblems.
    """
    m = geometry.n_nodes
    if not 1 <= n_modes <= m:
        raise ValueError(f"n_modes must be in [1, {m}], got {n_modes}")
    la, ua = np.linalg.eigh(_se_kernel_1d(geometry.n_across, geometry.dy, kernel.len_across))
    ll, ul = np.linalg.eigh(_se_kernel_1d(geometry.n_along, geometry.dx, kernel.len_along))
    tol = 1e-8 * max(la.max(), ll.max())
    if la.min() < -tol or ll.min() < -tol:
        raise np.linalg.LinAlgError("kernel matrix is not positive semi-definite")
    la, ll = np.clip(la, 0, None), np.clip(ll, 0, None)
    lam = kernel.sigma**2 * np.outer(la, ll).ravel() + kernel.nugget
    # stable sort on negated values keeps tie order platform independent
    order = np.argsort(-lam, kind="stable")[:n_modes]
    ia, il = np.divmod(order, geometry.n_along)
    vecs = (ua[:, ia][:, None, :] * ul[:, il][None, :, :]).reshape(m, n_modes)
    total = m * (kernel.sigma**2 + kernel.nugget)
    if mean is None:
        mean_flat = np.zeros(m)
    else:
        geometry.check_grid(mean.bed_elevation, "mean")
        mean_flat = mean.flat().copy()
    return FieldBasis(geometry, mean_flat, lam[order], vecs, float(lam[order].sum() / total))


def sample_bathymetry(basis: FieldBasis, seed) -> BathymetryField:
    """Draw ``mean + sum_k sqrt(lambda_k) xi_k phi_k``.

    ``seed=None`` sets every ``xi_k`` to zero and returns the mean field.
    """
    if seed is None:
        xi = np.zeros(basis.n_modes)
    else:
        xi = rng_for(seed).standard_normal(basis.n_modes)
    flat = basis.mean + basis.eigenvectors @ (np.sqrt(basis.eigenvalues) * xi)
    return BathymetryField(basis.geometry, flat.reshape(basis.geometry.shape))


def sample_bc(ranges: BcRanges, seed) -> BoundaryConditions:
    rng = rng_for(seed)
    q = rng.uniform(*ranges.discharge) if ranges.discharge[0] < ranges.discharge[1] else ranges.discharge[0]
    lo, hi = ranges.downstream_surface
    eta = rng.uniform(lo, hi) if lo < hi else lo
    return BoundaryConditions(float(q), float(eta))
