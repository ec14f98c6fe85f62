"""Linear (PCA) reduced-order baseline.

Bathymetry is projected onto its leading principal components; the whitened
coefficients are the latent vector. A regressor maps (latent, boundary
conditions) to coefficients of separate u, v and bathymetry PCA bases, which
are then expanded back to fields.

The regressor is an affine least-squares map plus a dense residual network
whose output layer starts at zero, so an untrained model is the pure linear
projection model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import Dataset, ObservationMask
from .nn import MLP, Adam
from .prior import rng_for
from .rom import HEADS, Rom, TrainHyper, TrainingDiverged, split_indices
from .sve import BcStats, FieldStats, fit_stats

_FIELD = {"u": "u", "v": "v", "s": "bed"}


@dataclass(frozen=True, eq=False)
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray  # (m, k), orthonormal columns
    explained_variance: np.ndarray

    @property
    def k(self):
        return self.components.shape[1]

    def project(self, x):
        return (np.asarray(x) - self.mean) @ self.components

    def expand(self, c):
        return self.mean + np.asarray(c) @ self.components.T


def fit_pca(samples, k: int) -> PcaBasis:
    """Top-``k`` principal components of the rows of ``samples`` (N x m)."""
    x = np.asarray(samples, dtype=np.float64)
    n, m = x.shape
    if not 1 <= k <= min(n, m):
        raise ValueError(f"k must be in [1, min(N, m) = {min(n, m)}], got {k}")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k].T.copy()
    # sign convention: largest-magnitude entry of each component is positive
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(k)])
    comps *= np.where(flip == 0, 1.0, flip)
    ev = sv[:k] ** 2 / max(n - 1, 1)
    return PcaBasis(mean, comps, ev)


@dataclass(frozen=True)
class PcaRomSpec:
    latent_dim: int = 20
    widths: tuple = (128, 128)
    activation: str = "softplus"


class PcaRomModel(Rom):
    kind = "pca"

    def __init__(self, geometry, spec: PcaRomSpec, input_basis: PcaBasis, output_bases: dict, stats: dict, bc_stats: BcStats, linear=None, net=None, metadata=None, curve=None):
        self.geometry = geometry
        self.spec = spec
        self.latent_dim = k = spec.latent_dim
        self.input_basis = input_basis
        self.output_bases = output_bases
        self.stats = stats
        self.bc_stats = bc_stats
        n_in, n_out = k + 2, 3 * k
        self.linear = np.zeros((n_in + 1, n_out)) if linear is None else np.asarray(linear, dtype=np.float64)
        self.net = net or MLP((n_in, *spec.widths, n_out), spec.activation)
        self.metadata = dict(metadata or {})
        self.curve = np.zeros((0, 3)) if curve is None else np.asarray(curve)
        sd = np.sqrt(np.maximum(input_basis.explained_variance, 1e-300))
        self._in_scale = sd

    def head_scale(self, head):
        return self.stats[_FIELD[head]].std

    # latent <-> bathymetry coefficients
    def latent_of(self, bed_flat, bc=None):
        return self.input_basis.project(bed_flat) / self._in_scale

    def _features(self, z, bc):
        return np.concatenate([z, self.bc_stats.normalize(bc.as_array())])

    def regress(self, feats):
        """Normalised output coefficients for a batch of regressor inputs."""
        feats = np.atleast_2d(feats)
        return feats @ self.linear[:-1] + self.linear[-1] + self.net.forward(feats)

    def regress_jacobian(self, feats):
        k = self.latent_dim
        return self.linear[:k].T + self.net.input_jacobian(feats, cols=np.arange(k))

    def _head_matrix(self, head):
        # maps normalised coefficients of ``head`` to physical field values
        basis = self.output_bases[head]
        return basis.components * self.head_scale(head)

    def decode_flat(self, z, bc):
        z = self._check_z(z)
        c = self.regress(self._features(z, bc))[0]
        k = self.latent_dim
        parts = [self.output_bases[h].mean + self._head_matrix(h) @ c[i * k : (i + 1) * k] for i, h in enumerate(HEADS)]
        return np.concatenate(parts)

    def _jacobian_rows(self, z, bc, rows):
        z = self._check_z(z)
        jc = self.regress_jacobian(self._features(z, bc))
        m, k = self.geometry.n_nodes, self.latent_dim
        out = np.empty((len(rows), k))
        for i, h in enumerate(HEADS):
            sel = (rows >= i * m) & (rows < (i + 1) * m)
            if sel.any():
                out[sel] = self._head_matrix(h)[rows[sel] - i * m] @ jc[i * k : (i + 1) * k]
        return out

    def obs_jacobian(self, z, bc, mask: ObservationMask):
        return self._jacobian_rows(z, bc, mask.output_rows(self.geometry))

    def bathymetry_jacobian(self, z, bc):
        m = self.geometry.n_nodes
        return self._jacobian_rows(z, bc, np.arange(2 * m, 3 * m))

    def to_arrays(self):
        arrays = {
            "pca/widths": np.array(self.spec.widths, dtype=np.uint32),
            "pca/latent_dim": np.array([self.latent_dim], dtype=np.uint32),
            "pca/linear": self.linear,
            "pca/net": self.net.params,
            "norm/bc/mean": self.bc_stats.mean,
            "norm/bc/std": self.bc_stats.std,
            "train/curve": self.curve,
        }
        from .container import text_array

        arrays["pca/activation"] = text_array(self.spec.activation)
        for name, b in [("input", self.input_basis), *self.output_bases.items()]:
            arrays[f"basis/{name}/mean"] = b.mean
            arrays[f"basis/{name}/components"] = b.components
            arrays[f"basis/{name}/explained_variance"] = b.explained_variance
        for name, st in self.stats.items():
            arrays[f"norm/{name}/mean"] = st.mean
            arrays[f"norm/{name}/std"] = np.array([st.std])
        return arrays

    @classmethod
    def from_arrays(cls, arrays, geometry, metadata):
        from .container import array_text

        spec = PcaRomSpec(int(arrays["pca/latent_dim"][0]), tuple(int(w) for w in arrays["pca/widths"]), array_text(arrays["pca/activation"]))

        def basis(name):
            return PcaBasis(arrays[f"basis/{name}/mean"], arrays[f"basis/{name}/components"], arrays[f"basis/{name}/explained_variance"])

        stats = {n: FieldStats(arrays[f"norm/{n}/mean"], float(arrays[f"norm/{n}/std"][0])) for n in ("bed", "u", "v")}
        net = MLP((spec.latent_dim + 2, *spec.widths, 3 * spec.latent_dim), spec.activation, arrays["pca/net"])
        return cls(
            geometry, spec, basis("input"), {h: basis(h) for h in HEADS}, stats,
            BcStats(arrays["norm/bc/mean"], arrays["norm/bc/std"]), arrays["pca/linear"], net, metadata, arrays["train/curve"],
        )


def pca_decode(model: PcaRomModel, z, bc):
    return model.decode(z, bc)


def pca_velocity_jacobian(model: PcaRomModel, z, bc, mask) -> np.ndarray:
    return model.obs_jacobian(z, bc, mask)


def _regression_data(model: PcaRomModel, ds: Dataset):
    beds = ds.stack("bed")
    feats = np.hstack([model.latent_of(beds), model.bc_stats.normalize(ds.stack("bc"))])
    fields = {"u": ds.stack("u"), "v": ds.stack("v"), "s": beds}
    targets = np.hstack([model.output_bases[h].project(fields[h]) / model.head_scale(h) for h in HEADS])
    return feats, targets


def train_pca_rom(ds: Dataset, k: int, hyper: TrainHyper = TrainHyper(), widths=(128, 128), log=None) -> PcaRomModel:
    """Fit the four PCA bases on the training split, then the regressor.

    With ``hyper.epochs == 0`` only the affine least-squares part is fitted.
    """
    tr_idx, va_idx = split_indices(len(ds), hyper)
    train = ds.subset(tr_idx)
    stats, bc_stats = fit_stats(train)
    beds = train.stack("bed")
    bases = {"u": fit_pca(train.stack("u"), k), "v": fit_pca(train.stack("v"), k), "s": fit_pca(beds, k)}
    model = PcaRomModel(ds.geometry, PcaRomSpec(k, tuple(widths)), fit_pca(beds, k), bases, stats, bc_stats)
    model.metadata.update(
        {
            "train_records": str(len(ds)),
            "validation_indices": ",".join(map(str, va_idx)),
            "seed": str(hyper.seed),
            "epochs": str(hyper.epochs),
        }
    )
    feats, targets = _regression_data(model, ds)
    x_tr = np.hstack([feats[tr_idx], np.ones((len(tr_idx), 1))])
    # tiny ridge keeps the solve well-posed when features are collinear
    gram = x_tr.T @ x_tr + 1e-8 * np.eye(x_tr.shape[1])
    model.linear = np.linalg.solve(gram, x_tr.T @ targets[tr_idx])
    model.net.init_uniform(rng_for([hyper.seed, 3]))
    model.net.weights[-1][...] = 0.0
    if hyper.epochs == 0:
        return model
    resid = targets - (feats @ model.linear[:-1] + model.linear[-1])
    params = model.net.params
    opt = Adam(params.size, hyper.step_size, weight_decay=hyper.weight_decay)
    rng = rng_for([hyper.seed, 4])
    best = (np.inf, params.copy())
    curve = []
    x_va, r_va = feats[va_idx], resid[va_idx]
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(tr_idx)
        running = 0.0
        for start in range(0, len(order), hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            out, cache = model.net.forward(feats[idx], keep=True)
            diff = out - resid[idx]
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            opt.step(params, model.net.backward(cache, diff * (2.0 / diff.size)))
            running += loss * len(idx)
        val = float(np.mean((model.net.forward(x_va) - r_va) ** 2))
        curve.append([epoch, running / len(tr_idx), val])
        if val < best[0]:
            best = (val, params.copy())
        if log and (epoch == 1 or epoch % 50 == 0 or epoch == hyper.epochs):
            log(f"epoch {epoch:4d}  train {running / len(tr_idx):.6f}  val {val:.6f}")
    params[...] = best[1]
    model.curve = np.array(curve)
    return model
