"""Reproducible analyses: inversion error tables, latent-dimension and
sparsity sweeps, Hessian spectra of loss terms, Mahalanobis distribution-shift
reports, and CSV / PGM export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import Dataset, ObservationMask, equispaced_mask, grid_rmse
from .forward import observe
from .inversion import InversionOptions, invert
from .rom import HEADS, Rom, TrainHyper

DEFAULT_NOISE = 0.05  # m/s
DESK_SPARSITY_COUNTS = (2121, 200, 50, 20, 10)


# ---------------------------------------------------------------- Mahalanobis


@dataclass(frozen=True, eq=False)
class TrainStats:
    """Mean and truncated eigen-factorisation of a training-sample covariance."""

    mean: np.ndarray
    eigenvalues: np.ndarray  # descending, >= 0
    eigenvectors: np.ndarray  # (m, r), orthonormal columns
    nugget: float = 1e-6

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        if np.any(ev < 0) or np.any(np.diff(ev) > 0):
            raise ValueError("eigenvalues must be non-negative and descending")
        if self.nugget < 0:
            raise ValueError("nugget must be non-negative")
        if self.nugget == 0 and (np.any(ev == 0) or self.eigenvectors.shape[1] < len(self.mean)):
            raise ValueError("zero eigenvalues (or a truncated basis) need a positive nugget")

    @property
    def m(self) -> int:
        return len(self.mean)

    def to_arrays(self, prefix):
        return {
            f"{prefix}/mean": self.mean,
            f"{prefix}/eigenvalues": self.eigenvalues,
            f"{prefix}/eigenvectors": self.eigenvectors,
            f"{prefix}/nugget": np.array([self.nugget]),
        }


def fit_train_stats(samples, n_eig=100, nugget=1e-6) -> TrainStats:
    """Sample mean and the top ``n_eig`` eigenpairs of the (ddof=1) sample covariance."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n, m = x.shape
    if n < 2:
        raise ValueError("need at least two samples")
    mean = x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x - mean, full_matrices=False)
    r = min(n_eig, len(sv), m)
    ev = sv[:r] ** 2 / (n - 1)
    return TrainStats(mean, ev, vt[:r].T.copy(), nugget)


def mahalanobis(x, stats: TrainStats) -> float:
    """``sqrt((x - mu)' S^-1 (x - mu) / m)`` with ``S = V diag(lam) V' + nugget I``.

    The inverse acts as ``1 / (lam + nugget)`` inside the retained eigenspace
    and ``1 / nugget`` on its orthogonal complement.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != stats.mean.shape:
        raise ValueError(f"expected a vector of length {stats.m}, got {x.shape}")
    r = x - stats.mean
    c = stats.eigenvectors.T @ r
    d2 = float(np.sum(c**2 / (stats.eigenvalues + stats.nugget)))
    if stats.eigenvectors.shape[1] < stats.m:
        perp = max(float(r @ r) - float(c @ c), 0.0)
        d2 += perp / stats.nugget
    return float(np.sqrt(d2 / stats.m))


# ---------------------------------------------------------------- Hessian spectra


def fd_hessian(loss, z, h=1e-3) -> np.ndarray:
    """Central second differences of a scalar function, symmetrised.

    ``H_ij = [L(z+h e_i+h e_j) - L(z+h e_i-h e_j) - L(z-h e_i+h e_j) + L(z-h e_i-h e_j)] / 4h^2``
    """
    if not h > 0:
        raise ValueError("FD step h must be positive")
    z = np.asarray(z, dtype=np.float64)
    k = len(z)
    eye = np.eye(k) * h
    hess = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            vals = [loss(z + si * eye[i] + sj * eye[j]) for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1))]
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError("non-finite loss in Hessian evaluation")
            hess[i, j] = hess[j, i] = (vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h * h)
    return 0.5 * (hess + hess.T)


def head_loss(model: Rom, term: str, bc, target=None):
    """Mean squared normalised misfit of one decoder head against ``target``."""
    if term not in HEADS:
        raise ValueError(f"loss term must be one of {HEADS}, got {term!r}")
    i = HEADS.index(term)
    m = model.geometry.n_nodes
    scale = model.head_scale(term)

    def loss(z, target=target):
        out = model.decode_flat(z, bc)[i * m : (i + 1) * m]
        return float(np.mean(((out - target) / scale) ** 2))

    return loss


def hessian_spectrum(model: Rom, loss_term: str, z, bc, h=1e-3, target=None) -> np.ndarray:
    """Singular values (descending) of the FD Hessian of one loss term in ``z``.

    ``target`` defaults to the decoded head at ``z`` itself, so the residual
    vanishes there and the Hessian reduces to ``2 J'J / (m scale^2)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if target is None:
        i = HEADS.index(loss_term) if loss_term in HEADS else 0
        m = model.geometry.n_nodes
        target = model.decode_flat(z, bc)[i * m : (i + 1) * m]
    hess = fd_hessian(head_loss(model, loss_term, bc, target), z, h)
    return np.linalg.svd(hess, compute_uv=False)


def quadratic_spectrum(a, z=None, h=1e-3) -> np.ndarray:
    """FD spectrum of ``L = z' A z / 2``; for tests and the quadratic fixture."""
    a = np.asarray(a, dtype=np.float64)
    z = np.zeros(len(a)) if z is None else z
    return np.linalg.svd(fd_hessian(lambda w: 0.5 * w @ a @ w, z, h), compute_uv=False)


def decay_index(spectrum, fraction=0.01) -> int:
    """First index whose value is below ``fraction`` of the maximum (len if none)."""
    s = np.asarray(spectrum, dtype=np.float64)
    below = np.nonzero(s < fraction * s.max())[0]
    return int(below[0]) if len(below) else len(s)


# ---------------------------------------------------------------- evaluation


def model_splits(model: Rom, ds: Dataset):
    """(train, validation) record indices recorded in the model metadata."""
    meta = getattr(model, "metadata", {})
    if "validation_indices" not in meta:
        raise ValueError("model metadata has no train/validation split")
    if int(meta.get("train_records", -1)) != len(ds):
        raise ValueError("dataset size does not match the one the model was trained on")
    val = np.array([int(i) for i in meta["validation_indices"].split(",") if i], dtype=np.int64)
    train = np.setdiff1d(np.arange(len(ds)), val)
    return train, val


def mask_for(geometry, mask_points=None) -> ObservationMask:
    if mask_points is None or mask_points >= geometry.n_nodes:
        return ObservationMask.full(geometry)
    return equispaced_mask(geometry, mask_points)


def inversion_rmse(model: Rom, ds: Dataset, mask_points=None, r=DEFAULT_NOISE, noise_seed=0, opts=None, indices=None) -> np.ndarray:
    """Per-record bathymetry RMSE of the MAP estimate from noisy masked velocities.

    Record ``i`` uses the noise seed ``[noise_seed, i]``.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset split")
    opts = opts or InversionOptions()
    mask = mask_for(ds.geometry, mask_points)
    idx = range(len(ds)) if indices is None else indices
    errs = []
    for i in idx:
        rec = ds.records[i]
        obs = observe(rec.flow, mask, r, [noise_seed, int(i)], rec.bc)
        est = invert(obs, model, opts, uq_samples=0)
        errs.append(grid_rmse(est.bathymetry_map.bed_elevation, rec.bathymetry.bed_elevation))
    return np.array(errs)


def forward_rmse(model: Rom, ds: Dataset) -> dict:
    """Mean per-head RMSE of ``decode(latent_of(bed))`` against the stored fields."""
    m = ds.geometry.n_nodes
    out = {h: [] for h in HEADS}
    for rec in ds.records:
        z = model.latent_of(rec.bathymetry.flat(), rec.bc)
        flat = model.decode_flat(z, rec.bc)
        truth = {"u": rec.flow.u, "v": rec.flow.v, "s": rec.bathymetry.bed_elevation}
        for i, h in enumerate(HEADS):
            out[h].append(grid_rmse(flat[i * m : (i + 1) * m], truth[h].ravel()))
    return {h: float(np.mean(v)) for h, v in out.items()}


def rmse_table(model: Rom, ds: Dataset, test: Dataset | None = None, mask_points=None, r=DEFAULT_NOISE, noise_seed=0, opts=None, max_per_split=None) -> dict:
    """Mean inversion RMSE on the train / validation (/ test) splits.

    ``max_per_split`` evaluates only the first records of each split.
    """
    train, val = model_splits(model, ds)
    splits = {"train": (ds, train), "validation": (ds, val)}
    if test is not None:
        if len(test) == 0:
            raise ValueError("empty test split")
        splits["test"] = (test, np.arange(len(test)))
    table = {}
    for name, (d, idx) in splits.items():
        idx = idx if max_per_split is None else idx[:max_per_split]
        table[name] = inversion_rmse(model, d, mask_points, r, noise_seed, opts, idx)
    return table


def format_table(rows: dict, columns=("train", "validation", "test"), title="Inversion RMSE [m]") -> str:
    """Aligned text table: one row per method, one column per split (means)."""
    cols = [c for c in columns if any(c in v for v in rows.values())]
    width = max(12, *(len(n) for n in rows))
    lines = [title, f"{'method':<{width}}" + "".join(f"{c:>14}" for c in cols)]
    for name, vals in rows.items():
        cells = "".join(f"{np.mean(vals[c]):>14.4f}" if c in vals else f"{'-':>14}" for c in cols)
        lines.append(f"{name:<{width}}" + cells)
    return "\n".join(lines)


# ---------------------------------------------------------------- sweeps


@dataclass(eq=False)
class SweepReport:
    """Per-axis-value inversion RMSE samples, with optional extra columns."""

    name: str
    axis_name: str
    axis: list
    samples: list  # one 1-D array of per-sample RMSEs per axis value
    extra: dict = field(default_factory=dict)  # column -> one value per axis value
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=np.float64)
        d = np.diff(a)
        if len(a) > 1 and not (np.all(d >= 0) or np.all(d <= 0)):
            raise ValueError("sweep axis must be monotone")
        if len(self.samples) != len(a) or any(len(v) != len(a) for v in self.extra.values()):
            raise ValueError("sweep columns must match the axis length")

    @property
    def mean(self) -> np.ndarray:
        return np.array([np.mean(s) for s in self.samples])

    @property
    def std(self) -> np.ndarray:
        return np.array([np.std(s) for s in self.samples])

    def write_csv(self, path):
        """One row per (axis value, sample)."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([self.axis_name, "sample", "rmse", *self.extra])
            for j, (a, s) in enumerate(zip(self.axis, self.samples)):
                for i, v in enumerate(s):
                    w.writerow([a, i, f"{v:.9g}", *(f"{self.extra[c][j]:.9g}" for c in self.extra)])

    def summary(self) -> str:
        widths = {c: max(14, len(c) + 2) for c in self.extra}
        head = f"{self.axis_name:>10}{'mean':>12}{'std':>12}{'n':>6}" + "".join(f"{c:>{widths[c]}}" for c in self.extra)
        lines = [self.name, head]
        for j, a in enumerate(self.axis):
            row = f"{a:>10}{self.mean[j]:>12.4f}{self.std[j]:>12.4f}{len(self.samples[j]):>6}"
            row += "".join(f"{self.extra[c][j]:>{widths[c]}.4f}" for c in self.extra)
            lines.append(row)
        return "\n".join(lines)


def monotone_within(values, tolerance=0.05, increasing=True) -> bool:
    """Each step may move against the trend by at most ``tolerance`` (relative)."""
    v = np.asarray(values, dtype=np.float64)
    if increasing:
        return bool(np.all(v[1:] >= v[:-1] * (1 - tolerance)))
    return bool(np.all(v[1:] <= v[:-1] * (1 + tolerance)))


def latent_dim_sweep(dataset: Dataset, dims, hyper: TrainHyper, test: Dataset, arch=None, mask_points=None, r=DEFAULT_NOISE, noise_seed=0, models=None, log=None) -> SweepReport:
    """Train one SVE per latent dimension (shared seed) and invert a fixed test split.

    ``models`` is an optional cache ``{k: model}``; trained models are added to it.
    """
    from dataclasses import replace

    from .sve import SveArchitecture, train_sve

    dims = [int(k) for k in dims]
    if any(b < a for a, b in zip(dims, dims[1:])):
        raise ValueError("dims must be ascending")
    arch = arch or SveArchitecture()
    models = {} if models is None else models
    samples, fwd = [], {h: [] for h in HEADS}
    for k in dims:
        if k not in models:
            models[k] = train_sve(dataset, replace(arch, latent_dim=k), hyper)
        model = models[k]
        samples.append(inversion_rmse(model, test, mask_points, r, noise_seed))
        f = forward_rmse(model, test)
        for h in HEADS:
            fwd[h].append(f[h])
        if log:
            log(f"k={k}: inversion RMSE {samples[-1].mean():.4f}")
    extra = {f"forward_rmse_{h}": fwd[h] for h in HEADS}
    return SweepReport("latent-dimension sweep", "latent_dim", dims, samples, extra, {"seed": hyper.seed})


def sparsity_sweep(model: Rom, test: Dataset, counts=DESK_SPARSITY_COUNTS, seeds=(0,), r=DEFAULT_NOISE, opts=None) -> SweepReport:
    """Inversion RMSE per observation count (equispaced masks); samples are
    averaged over the noise seeds per record."""
    counts = [int(c) for c in counts]
    if any(b > a for a, b in zip(counts, counts[1:])):
        raise ValueError("counts must be descending")
    samples = []
    for c in counts:
        runs = [inversion_rmse(model, test, c, r, s, opts) for s in seeds]
        samples.append(np.mean(runs, axis=0))
    return SweepReport("sparsity sweep", "n_points", counts, samples, {}, {"seeds": ",".join(map(str, seeds))})


# ---------------------------------------------------------------- distribution shift


SHIFT_FEATURES = ("u", "v", "latent")


def shift_stats(model: Rom, train: Dataset, n_eig=100, nugget=1e-6) -> dict:
    """Training statistics for the three distance panels: u, v, encoded latent."""
    lat = np.stack([model.latent_of(r.bathymetry.flat(), r.bc) for r in train.records])
    return {
        "u": fit_train_stats(train.stack("u"), n_eig, nugget),
        "v": fit_train_stats(train.stack("v"), n_eig, nugget),
        "latent": fit_train_stats(lat, n_eig, nugget),
    }


@dataclass(eq=False)
class ShiftReport:
    """Per-sample (distances, RMSE) rows grouped by test-set label."""

    labels: list
    distances: dict  # label -> (n, 3) array over SHIFT_FEATURES
    rmse: dict  # label -> (n,) array

    def cluster_means(self) -> dict:
        return {lab: (self.distances[lab].mean(axis=0), float(self.rmse[lab].mean())) for lab in self.labels}

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["test_set", "sample", *(f"mahalanobis_{c}" for c in SHIFT_FEATURES), "rmse"])
            for lab in self.labels:
                for i, (d, e) in enumerate(zip(self.distances[lab], self.rmse[lab])):
                    w.writerow([lab, i, *(f"{x:.9g}" for x in d), f"{e:.9g}"])

    def summary(self) -> str:
        lines = ["distribution shift: cluster means", f"{'test_set':<16}" + "".join(f"{'d_' + c:>12}" for c in SHIFT_FEATURES) + f"{'rmse':>10}"]
        for lab, (d, e) in self.cluster_means().items():
            lines.append(f"{lab:<16}" + "".join(f"{x:>12.4g}" for x in d) + f"{e:>10.4f}")
        return "\n".join(lines)


def shift_report(model: Rom, test_sets: dict, stats: dict, mask_points=None, r=DEFAULT_NOISE, noise_seed=0, opts=None) -> ShiftReport:
    """Mahalanobis distances (u, v, latent) and inversion RMSE per test sample."""
    dist, rmse = {}, {}
    for label, ds in test_sets.items():
        rows = []
        for rec in ds.records:
            z = model.latent_of(rec.bathymetry.flat(), rec.bc)
            rows.append([mahalanobis(rec.flow.u.ravel(), stats["u"]), mahalanobis(rec.flow.v.ravel(), stats["v"]), mahalanobis(z, stats["latent"])])
        dist[label] = np.array(rows)
        rmse[label] = inversion_rmse(model, ds, mask_points, r, noise_seed, opts)
    return ShiftReport(list(test_sets), dist, rmse)


# ---------------------------------------------------------------- heatmaps


def write_pgm(path, grid, lo=None, hi=None):
    """8-bit binary PGM of ``grid`` (linear scale ``lo..hi``) plus a sidecar CSV of raw values."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError("heatmap grid must be 2-D")
    lo = float(np.nanmin(g)) if lo is None else lo
    hi = float(np.nanmax(g)) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    img = np.clip(np.round((g - lo) / span * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    np.savetxt(path.with_suffix(".csv"), g, delimiter=",", fmt="%.9g")
    return path


def write_heatmaps(directory, fields: dict, shared_scale=("truth", "estimate")):
    """One PGM (+CSV) per named field; fields named in ``shared_scale`` share a colour range."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shared = [np.asarray(fields[n]) for n in shared_scale if n in fields]
    lo = min(float(a.min()) for a in shared) if shared else None
    hi = max(float(a.max()) for a in shared) if shared else None
    out = []
    for name, grid in fields.items():
        if name in shared_scale:
            out.append(write_pgm(directory / f"{name}.pgm", grid, lo, hi))
        else:
            out.append(write_pgm(directory / f"{name}.pgm", grid))
    return out
