"""Common surface of the reduced-order models used by the inversion.

A ROM maps a latent vector ``z`` (plus boundary conditions) to velocity and
bathymetry fields. Inversion only needs the methods defined on ``Rom``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import (
    array_text,
    geometry_arrays,
    geometry_from,
    metadata_arrays,
    metadata_from,
    read_arrays,
    text_array,
    write_arrays,
)
from .fields import BoundaryConditions, ChannelGeometry, ObservationMask

HEADS = ("u", "v", "s")


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 200
    batch_size: int = 32
    step_size: float = 3e-4
    seed: int = 0
    val_fraction: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.step_size <= 0 or self.weight_decay < 0:
            raise ValueError("invalid training hyperparameters")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch}: loss = {loss}")
        self.epoch = epoch


def split_indices(n, hyper: TrainHyper):
    """Deterministic (train, validation) index split."""
    from .prior import rng_for

    if n < 2 * hyper.batch_size:
        raise ValueError(f"need at least {2 * hyper.batch_size} records, got {n}")
    perm = rng_for([hyper.seed, 0x5EED]).permutation(n)
    n_val = max(1, int(round(hyper.val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class Rom:
    """Base class; subclasses implement ``decode_flat`` and the Jacobians."""

    kind = "abstract"
    geometry: ChannelGeometry
    latent_dim: int

    # scale used to normalise each head in loss terms (scalar per head)
    def head_scale(self, head) -> float:
        return 1.0

    def decode_flat(self, z, bc: BoundaryConditions) -> np.ndarray:
        """Physical ``[u, v, s]`` stacked and flattened (length 3m)."""
        raise NotImplementedError

    def obs_jacobian(self, z, bc, mask: ObservationMask) -> np.ndarray:
        raise NotImplementedError

    def bathymetry_jacobian(self, z, bc) -> np.ndarray:
        raise NotImplementedError

    def latent_of(self, bed_flat, bc) -> np.ndarray:
        """Latent vector representing a given bathymetry (encoder or projection)."""
        raise NotImplementedError

    def _check_z(self, z):
        z = np.asarray(z, dtype=np.float64).ravel()
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent vector must have length {self.latent_dim}, got {z.shape}")
        return z

    def decode(self, z, bc):
        flat = self.decode_flat(z, bc)
        m = self.geometry.n_nodes
        shape = self.geometry.shape
        return flat[:m].reshape(shape), flat[m : 2 * m].reshape(shape), flat[2 * m :].reshape(shape)

    def heads(self, z, bc) -> dict:
        """Flattened heads in normalised units (divided by ``head_scale``)."""
        flat = self.decode_flat(z, bc)
        m = self.geometry.n_nodes
        return {h: flat[i * m : (i + 1) * m] / self.head_scale(h) for i, h in enumerate(HEADS)}

    def predict_obs(self, z, bc, mask: ObservationMask) -> np.ndarray:
        return self.decode_flat(z, bc)[mask.output_rows(self.geometry)]

    def decode_bathymetry(self, z, bc) -> np.ndarray:
        return self.decode_flat(z, bc)[2 * self.geometry.n_nodes :]

    def decode_bathymetry_many(self, zs, bc) -> np.ndarray:
        return np.stack([self.decode_bathymetry(z, bc) for z in zs])

    def to_arrays(self) -> dict:
        raise NotImplementedError


class AffineRom(Rom):
    """``[u, v, s] = A z + c``; an exactly linear fixture model (boundary conditions ignored)."""

    kind = "affine"

    def __init__(self, geometry: ChannelGeometry, matrix, offset=None, metadata=None):
        self.geometry = geometry
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != 3 * geometry.n_nodes:
            raise ValueError(f"matrix must have {3 * geometry.n_nodes} rows")
        self.matrix = a
        self.latent_dim = a.shape[1]
        self.offset = np.zeros(a.shape[0]) if offset is None else np.asarray(offset, dtype=np.float64)
        self.metadata = dict(metadata or {})

    def decode_flat(self, z, bc):
        return self.matrix @ self._check_z(z) + self.offset

    def obs_jacobian(self, z, bc, mask):
        return self.matrix[mask.output_rows(self.geometry)].copy()

    def bathymetry_jacobian(self, z, bc):
        return self.matrix[2 * self.geometry.n_nodes :].copy()

    def latent_of(self, bed_flat, bc=None):
        """Least-squares latent whose s-head best matches ``bed_flat``."""
        m = self.geometry.n_nodes
        return np.linalg.lstsq(self.matrix[2 * m :], np.asarray(bed_flat) - self.offset[2 * m :], rcond=None)[0]

    def decode_bathymetry_many(self, zs, bc):
        m = self.geometry.n_nodes
        return np.asarray(zs) @ self.matrix[2 * m :].T + self.offset[2 * m :]

    def to_arrays(self):
        return {"affine/matrix": self.matrix, "affine/offset": self.offset}

    @classmethod
    def from_arrays(cls, arrays, geometry, metadata):
        return cls(geometry, arrays["affine/matrix"], arrays["affine/offset"], metadata)


def save_model(model: Rom, path):
    arrays = {"model/kind": text_array(model.kind)}
    arrays.update(geometry_arrays(model.geometry))
    arrays.update(model.to_arrays())
    arrays.update(metadata_arrays(getattr(model, "metadata", {})))
    write_arrays(path, arrays)


def load_model(path) -> Rom:
    from .pca import PcaRomModel
    from .sve import SveModel

    arrays = read_arrays(path)
    if "model/kind" not in arrays:
        raise ValueError(f"{path} is not a model container")
    kind = array_text(arrays["model/kind"])
    classes = {c.kind: c for c in (AffineRom, SveModel, PcaRomModel)}
    if kind not in classes:
        raise ValueError(f"unknown model kind {kind!r}")
    return classes[kind].from_arrays(arrays, geometry_from(arrays), metadata_from(arrays))
