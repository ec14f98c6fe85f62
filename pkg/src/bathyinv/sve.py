"""Supervised variational encoder (SVE) reduced-order model.

Encoder: normalised bathymetry (+ boundary conditions) -> Gaussian latent
(mean and log-variance heads). Decoder: latent (+ boundary conditions) ->
normalised (u, v, bathymetry). Trained on the sum of the three head MSEs
plus a weighted KL divergence to N(0, I).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .container import array_text, text_array
from .fields import BathymetryField, BoundaryConditions, Dataset, ObservationMask
from .nn import MLP, Adam
from .prior import rng_for
from .rom import Rom, TrainHyper, TrainingDiverged, split_indices


@dataclass(frozen=True)
class SveArchitecture:
    latent_dim: int = 20
    encoder_widths: tuple = (512, 128)
    decoder_widths: tuple = (128, 512)
    activation: str = "softplus"
    kl_weight: float = 1e-3
    bc_embedding: bool = True

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if any(w < 1 for w in (*self.encoder_widths, *self.decoder_widths)):
            raise ValueError("layer widths must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))


@dataclass(frozen=True)
class LatentGaussian:
    mu: np.ndarray
    log_var: np.ndarray


@dataclass(frozen=True, eq=False)
class FieldStats:
    """Per-node mean and a single scalar spread for one field."""

    mean: np.ndarray
    std: float

    @classmethod
    def fit(cls, samples):
        mean = samples.mean(axis=0)
        std = float(np.sqrt(np.mean((samples - mean) ** 2)))
        return cls(mean, std if std > 0 else 1.0)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


@dataclass(frozen=True, eq=False)
class BcStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, bcs):
        std = bcs.std(axis=0)
        return cls(bcs.mean(axis=0), np.where(std > 0, std, 1.0))

    def normalize(self, bc):
        return (np.asarray(bc) - self.mean) / self.std


def fit_stats(ds: Dataset):
    return (
        {"bed": FieldStats.fit(ds.stack("bed")), "u": FieldStats.fit(ds.stack("u")), "v": FieldStats.fit(ds.stack("v"))},
        BcStats.fit(ds.stack("bc")),
    )


class SveModel(Rom):
    kind = "sve"

    def __init__(self, geometry, arch: SveArchitecture, stats: dict, bc_stats: BcStats, encoder=None, decoder=None, metadata=None, curve=None):
        self.geometry = geometry
        self.arch = arch
        self.latent_dim = arch.latent_dim
        self.stats = stats
        self.bc_stats = bc_stats
        m, k = geometry.n_nodes, arch.latent_dim
        n_bc = 2 if arch.bc_embedding else 0
        self.encoder = encoder or MLP((m + n_bc, *arch.encoder_widths, 2 * k), arch.activation)
        self.decoder = decoder or MLP((k + n_bc, *arch.decoder_widths, 3 * m), arch.activation)
        self.metadata = dict(metadata or {})
        self.curve = np.zeros((0, 7)) if curve is None else np.asarray(curve, dtype=np.float64)
        self._out_mean = np.concatenate([stats["u"].mean, stats["v"].mean, stats["bed"].mean])
        self._out_std = np.repeat([stats["u"].std, stats["v"].std, stats["bed"].std], m)

    def head_scale(self, head):
        return self.stats["bed" if head == "s" else head].std

    # -- network inputs ---------------------------------------------------
    def _bc_feature(self, bc):
        if not self.arch.bc_embedding:
            return np.zeros(0)
        a = bc.as_array() if isinstance(bc, BoundaryConditions) else np.asarray(bc, dtype=np.float64)
        return self.bc_stats.normalize(a)

    def encoder_input(self, bed_flat, bc):
        return np.concatenate([self.stats["bed"].normalize(bed_flat), self._bc_feature(bc)])

    def decoder_input(self, z, bc):
        return np.concatenate([self._check_z(z), self._bc_feature(bc)])

    # -- inference --------------------------------------------------------
    def encode(self, bathy: BathymetryField, bc) -> LatentGaussian:
        if bathy.geometry != self.geometry:
            raise ValueError("bathymetry geometry does not match the model")
        out = self.encoder.forward(self.encoder_input(bathy.flat(), bc)[None])[0]
        k = self.latent_dim
        return LatentGaussian(out[:k], out[k:])

    def latent_of(self, bed_flat, bc):
        """Encoder mean for a flattened bathymetry."""
        out = self.encoder.forward(self.encoder_input(np.asarray(bed_flat, dtype=np.float64), bc)[None])[0]
        return out[: self.latent_dim]

    def encode_many(self, beds, bcs):
        x = self.stats["bed"].normalize(np.asarray(beds))
        if self.arch.bc_embedding:
            x = np.hstack([x, self.bc_stats.normalize(bcs)])
        out = self.encoder.forward(x)
        return out[:, : self.latent_dim], out[:, self.latent_dim :]

    def decode_flat(self, z, bc):
        out = self.decoder.forward(self.decoder_input(z, bc)[None])[0]
        return self._out_mean + self._out_std * out

    def decode_bathymetry_many(self, zs, bc):
        zs = np.atleast_2d(zs)
        x = np.hstack([zs, np.tile(self._bc_feature(bc), (len(zs), 1))])
        m = self.geometry.n_nodes
        # only the bathymetry head is needed, so evaluate the last layer partially
        h = x
        dec = self.decoder
        for w, b in zip(dec.weights[:-1], dec.biases[:-1]):
            h = dec._act(h @ w + b)
        s = h @ dec.weights[-1][:, 2 * m :] + dec.biases[-1][2 * m :]
        return self.stats["bed"].denormalize(s)

    def obs_jacobian(self, z, bc, mask: ObservationMask):
        rows = mask.output_rows(self.geometry)
        j = self.decoder.input_jacobian(self.decoder_input(z, bc), rows=rows, cols=np.arange(self.latent_dim))
        return self._out_std[rows, None] * j

    def bathymetry_jacobian(self, z, bc):
        m = self.geometry.n_nodes
        rows = np.arange(2 * m, 3 * m)
        j = self.decoder.input_jacobian(self.decoder_input(z, bc), rows=rows, cols=np.arange(self.latent_dim))
        return self.stats["bed"].std * j

    # -- persistence ------------------------------------------------------
    def to_arrays(self):
        a = self.arch
        arrays = {
            "arch/latent_dim": np.array([a.latent_dim], dtype=np.uint32),
            "arch/encoder_widths": np.array(a.encoder_widths, dtype=np.uint32),
            "arch/decoder_widths": np.array(a.decoder_widths, dtype=np.uint32),
            "arch/activation": text_array(a.activation),
            "arch/kl_weight": np.array([a.kl_weight]),
            "arch/bc_embedding": np.array([int(a.bc_embedding)], dtype=np.uint32),
            "enc/params": self.encoder.params,
            "dec/params": self.decoder.params,
            "norm/bc/mean": self.bc_stats.mean,
            "norm/bc/std": self.bc_stats.std,
            "train/curve": self.curve,
        }
        for name, st in self.stats.items():
            arrays[f"norm/{name}/mean"] = st.mean
            arrays[f"norm/{name}/std"] = np.array([st.std])
        return arrays

    @classmethod
    def from_arrays(cls, arrays, geometry, metadata):
        arch = SveArchitecture(
            latent_dim=int(arrays["arch/latent_dim"][0]),
            encoder_widths=tuple(int(w) for w in arrays["arch/encoder_widths"]),
            decoder_widths=tuple(int(w) for w in arrays["arch/decoder_widths"]),
            activation=array_text(arrays["arch/activation"]),
            kl_weight=float(arrays["arch/kl_weight"][0]),
            bc_embedding=bool(arrays["arch/bc_embedding"][0]),
        )
        stats = {n: FieldStats(arrays[f"norm/{n}/mean"], float(arrays[f"norm/{n}/std"][0])) for n in ("bed", "u", "v")}
        bc_stats = BcStats(arrays["norm/bc/mean"], arrays["norm/bc/std"])
        model = cls(geometry, arch, stats, bc_stats, metadata=metadata, curve=arrays["train/curve"])
        model.encoder.params[...] = arrays["enc/params"]
        model.decoder.params[...] = arrays["dec/params"]
        return model


# -- module-level operations ------------------------------------------------


def encode(model: SveModel, bathy, bc) -> LatentGaussian:
    return model.encode(bathy, bc)


def reparameterize(g: LatentGaussian, seed) -> np.ndarray:
    xi = rng_for(seed).standard_normal(len(g.mu))
    return g.mu + np.exp(0.5 * np.asarray(g.log_var)) * xi


def decode(model: Rom, z, bc):
    return model.decode(z, bc)


def velocity_jacobian_ad(model: SveModel, z, bc, mask) -> np.ndarray:
    return model.obs_jacobian(z, bc, mask)


def bathymetry_jacobian_ad(model: SveModel, z, bc) -> np.ndarray:
    return model.bathymetry_jacobian(z, bc)


@dataclass(frozen=True, eq=False)
class Batch:
    """Normalised network inputs and targets for a set of records."""

    enc_in: np.ndarray  # (B, m [+2])
    bc_feat: np.ndarray  # (B, 0 or 2)
    target: np.ndarray  # (B, 3m): u, v, s

    def __len__(self):
        return len(self.enc_in)

    def take(self, idx):
        return Batch(self.enc_in[idx], self.bc_feat[idx], self.target[idx])


def make_batch(model: SveModel, ds: Dataset) -> Batch:
    bed = model.stats["bed"].normalize(ds.stack("bed"))
    if model.arch.bc_embedding:
        bc_feat = model.bc_stats.normalize(ds.stack("bc"))
    else:
        bc_feat = np.zeros((len(ds), 0))
    target = np.hstack([model.stats["u"].normalize(ds.stack("u")), model.stats["v"].normalize(ds.stack("v")), bed])
    return Batch(np.hstack([bed, bc_feat]), bc_feat, target)


def kl_term(mu, log_var) -> float:
    return float(np.mean(0.5 * np.sum(np.exp(log_var) + mu**2 - 1.0 - log_var, axis=1)))


def sve_loss(model: SveModel, batch: Batch, xi=None, grad=False):
    """Loss terms ``(total, term_u, term_v, term_s, term_kl)``.

    ``xi`` holds the standard-normal draws of the reparameterisation
    (``None`` uses ``z = mu``). With ``grad=True`` also returns the flat
    gradients of ``total`` w.r.t. encoder and decoder parameters.
    """
    k = model.latent_dim
    m = model.geometry.n_nodes
    nb = len(batch)
    enc_out, enc_cache = model.encoder.forward(batch.enc_in, keep=True)
    mu, log_var = enc_out[:, :k], enc_out[:, k:]
    if xi is None:
        xi = np.zeros_like(mu)
    sd = np.exp(0.5 * log_var)
    z = mu + sd * xi
    pred, dec_cache = model.decoder.forward(np.hstack([z, batch.bc_feat]), keep=True)
    diff = pred - batch.target
    sq = diff**2
    terms = [float(sq[:, i * m : (i + 1) * m].mean()) for i in range(3)]
    kl = kl_term(mu, log_var)
    beta = model.arch.kl_weight
    total = sum(terms) + beta * kl
    out = (total, *terms, kl)
    if not grad:
        return out
    d_pred = diff * (2.0 / (nb * m))
    g_dec, d_in = model.decoder.backward(dec_cache, d_pred, want_input=True)
    d_z = d_in[:, :k]
    d_mu = d_z + beta * mu / nb
    d_lv = d_z * xi * 0.5 * sd + beta * 0.5 * (np.exp(log_var) - 1.0) / nb
    g_enc = model.encoder.backward(enc_cache, np.hstack([d_mu, d_lv]))
    return out, g_enc, g_dec


def init_sve(ds: Dataset, arch: SveArchitecture, seed=0) -> SveModel:
    stats, bc_stats = fit_stats(ds)
    model = SveModel(ds.geometry, arch, stats, bc_stats)
    rng = rng_for([seed, 1])
    model.encoder.init_uniform(rng)
    model.decoder.init_uniform(rng)
    return model


def train_sve(ds: Dataset, arch: SveArchitecture, hyper: TrainHyper = TrainHyper(), log=None) -> SveModel:
    """Adam training; returns the snapshot with the lowest validation loss.

    Validation loss is evaluated at ``z = mu`` (no sampling). The training
    curve rows are ``epoch, train_total, val_total, val_u, val_v, val_s, val_kl``.
    """
    tr_idx, va_idx = split_indices(len(ds), hyper)
    model = init_sve(ds.subset(tr_idx), arch, hyper.seed)
    model.metadata.update(
        {
            "train_records": str(len(ds)),
            "validation_indices": ",".join(map(str, va_idx)),
            "seed": str(hyper.seed),
            "epochs": str(hyper.epochs),
            "batch_size": str(hyper.batch_size),
            "step_size": repr(hyper.step_size),
        }
    )
    if hyper.epochs == 0:
        return model
    full = make_batch(model, ds)
    train, val = full.take(tr_idx), full.take(va_idx)
    k = arch.latent_dim
    n_enc = model.encoder.n_params
    params = np.concatenate([model.encoder.params, model.decoder.params])
    model.encoder.params = params[:n_enc]
    model.decoder.params = params[n_enc:]
    model.encoder._bind()
    model.decoder._bind()
    opt = Adam(params.size, hyper.step_size, weight_decay=hyper.weight_decay)
    grad = np.empty_like(params)
    rng = rng_for([hyper.seed, 2])
    best = (np.inf, params.copy())
    curve = []
    t0 = time.perf_counter()
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(train))
        running = 0.0
        for start in range(0, len(train), hyper.batch_size):
            b = train.take(order[start : start + hyper.batch_size])
            xi = rng.standard_normal((len(b), k))
            (total, *_), g_enc, g_dec = sve_loss(model, b, xi, grad=True)
            if not np.isfinite(total):
                raise TrainingDiverged(epoch, total)
            grad[:n_enc] = g_enc
            grad[n_enc:] = g_dec
            opt.step(params, grad)
            running += total * len(b)
        val_terms = sve_loss(model, val)
        if not np.isfinite(val_terms[0]):
            raise TrainingDiverged(epoch, val_terms[0])
        curve.append([epoch, running / len(train), *val_terms])
        if val_terms[0] < best[0]:
            best = (val_terms[0], params.copy())
        if log and (epoch == 1 or epoch % 20 == 0 or epoch == hyper.epochs):
            log(f"epoch {epoch:4d}  train {running / len(train):.5f}  val {val_terms[0]:.5f}  ({time.perf_counter() - t0:.1f}s)")
    params[...] = best[1]
    model.encoder = MLP(model.encoder.sizes, arch.activation, params[:n_enc])
    model.decoder = MLP(model.decoder.sizes, arch.activation, params[n_enc:])
    model.curve = np.array(curve)
    model.metadata["best_val_loss"] = repr(best[0])
    return model
