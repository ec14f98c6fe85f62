"""Command-line pipeline: generate -> train -> invert -> evaluate -> diagnose.

Every command validates its inputs before writing anything. Exit status is 0
on success, 1 on a validation error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def _log(msg):
    print(msg, flush=True)


def _input_file(path, what):
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {path}")
    return p


def _output_path(path):
    p = Path(path)
    if not p.parent.is_dir():
        raise ValidationError(f"output directory does not exist: {p.parent}")
    return p


def _output_dir(path):
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ValidationError(f"output path exists and is not a directory: {p}")
    if not p.parent.is_dir():
        raise ValidationError(f"parent directory does not exist: {p.parent}")
    return p


def _load(loader, path, what):
    _input_file(path, what)
    try:
        return loader(path)
    except (ValueError, KeyError) as e:
        raise ValidationError(f"cannot read {what} {path}: {e}") from None


def _config(path):
    from .config import default_config, load_config

    if path is None:
        return default_config()
    _input_file(path, "config file")
    return load_config(path)


def _model(path):
    from .rom import load_model

    return _load(load_model, path, "model")


def _dataset(path):
    from .container import load_dataset

    return _load(load_dataset, path, "dataset")


def _positive(name, value, minimum=1):
    if value is not None and value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")


# ---------------------------------------------------------------- commands
# Each ``prepare_*`` validates and returns a zero-argument runner.


def prepare_generate(args):
    from .container import save_dataset
    from .datagen import generate_dataset, prior_basis

    cfg = _config(args.config)
    _positive("--n", args.n)
    out = _output_path(args.out)
    geometry, prior = cfg.geometry(), cfg.prior()

    def run():
        t = time.perf_counter()
        basis = prior_basis(geometry, prior)
        ds, rejected = generate_dataset(
            geometry, prior, args.n, args.seed, cfg.forward_params(), cfg.bc_ranges(), cfg.get("forward", "max_retries"), basis
        )
        save_dataset(ds, out)
        _log(f"generated {len(ds)} records ({rejected} rejected draws) in {time.perf_counter() - t:.1f} s -> {out}")

    return run


def prepare_train(args):
    from .rom import save_model

    cfg = _config(args.config)
    ds = _dataset(args.dataset)
    _positive("--latent-dim", args.latent_dim)
    out = _output_path(args.out)
    k = args.latent_dim or cfg.get("rom", "latent_dim")
    hyper = cfg.train_hyper()
    if len(ds) < 2 * hyper.batch_size:
        raise ValidationError(f"dataset has {len(ds)} records; training needs at least {2 * hyper.batch_size}")
    if k > ds.geometry.n_nodes:
        raise ValidationError(f"latent dimension {k} exceeds the number of grid nodes")

    def run():
        from .diagnostics import forward_rmse, model_splits

        t = time.perf_counter()
        if args.rom == "sve":
            from .sve import train_sve

            model = train_sve(ds, cfg.sve_architecture(k), hyper, log=_log)
        else:
            from .pca import train_pca_rom

            model = train_pca_rom(ds, k, hyper, cfg.pca_spec(k).widths, log=_log)
        save_model(model, out)
        _, val = model_splits(model, ds)
        if model.curve.size:
            best = int(np.argmin(model.curve[:, 2]))
            _log(f"loss curve: first val {model.curve[0, 2]:.5f}, best val {model.curve[best, 2]:.5f} at epoch {int(model.curve[best, 0])}, last train {model.curve[-1, 1]:.5f}")
        f = forward_rmse(model, ds.subset(val))
        _log("validation RMSE per head: " + ", ".join(f"{h} {v:.4f}" for h, v in f.items()))
        _log(f"trained {args.rom} (k={k}) in {time.perf_counter() - t:.1f} s -> {out}")

    return run


def prepare_invert(args):
    from .container import load_observations
    from .fields import grid_rmse
    from .forward import observe
    from .inversion import invert, save_result

    cfg = _config(args.config)
    model = _model(args.model)
    out = _output_path(args.out)
    truth = None
    if args.obs is not None:
        if args.dataset is not None:
            raise ValidationError("give either --obs or --dataset/--record, not both")
        obs, geometry = _load(load_observations, args.obs, "observation file")
        if geometry != model.geometry:
            raise ValidationError("observation geometry does not match the model")
        source = Path(args.obs).name
    else:
        if args.dataset is None or args.record is None:
            raise ValidationError("need --obs, or --dataset with --record")
        ds = _dataset(args.dataset)
        if not 0 <= args.record < len(ds):
            raise ValidationError(f"--record must be in [0, {len(ds) - 1}]")
        _positive("--mask-points", args.mask_points)
        if ds.geometry != model.geometry:
            raise ValidationError("dataset geometry does not match the model")
        from .diagnostics import mask_for

        rec = ds.records[args.record]
        mask = mask_for(ds.geometry, args.mask_points)
        obs = observe(rec.flow, mask, cfg.get("inversion", "noise_std"), [args.noise_seed, args.record], rec.bc)
        truth = rec.bathymetry.bed_elevation
        source = f"{Path(args.dataset).name}#{args.record}"
    opts = cfg.inversion_options()
    heatmap_dir = _output_dir(args.heatmaps) if args.heatmaps else None

    def run():
        t = time.perf_counter()
        est = invert(obs, model, opts, cfg.get("inversion", "uq_samples"), cfg.get("seeds", "uq"))
        meta = {"source": source, "n_obs": obs.mask.n_obs, "noise_seed": args.noise_seed, "model": Path(args.model).name}
        if truth is not None:
            meta["rmse"] = repr(grid_rmse(est.bathymetry_map.bed_elevation, truth))
        save_result(est, out, meta)
        _log(f"|z_map| = {np.linalg.norm(est.z_map):.6f}")
        _log(f"iterations = {est.iterations_used} (converged: {est.converged}, stalled: {est.stalled})")
        _log(f"final objective = {est.objective_trace[-1]:.6f}")
        if truth is not None:
            _log(f"RMSE vs truth = {meta['rmse'][:8]} m")
            if heatmap_dir is not None:
                _heatmaps(heatmap_dir, truth, est)
        _log(f"inversion took {time.perf_counter() - t:.2f} s -> {out}")

    return run


def _heatmaps(directory, truth, est):
    from .diagnostics import write_heatmaps

    b = est.bathymetry_map.bed_elevation
    write_heatmaps(directory, {"truth": truth, "estimate": b, "error": b - truth, "std": est.bathymetry_std})


def prepare_evaluate(args):
    from .diagnostics import format_table, model_splits, rmse_table

    model = _model(args.model)
    ds = _dataset(args.dataset)
    test = _dataset(args.test) if args.test else None
    if test is not None and len(test) == 0:
        raise ValidationError("test split is empty")
    _positive("--mask-points", args.mask_points)
    _positive("--max-records", args.max_records)
    try:
        model_splits(model, ds)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    cfg = _config(args.config)
    out = _output_path(args.csv) if args.csv else None

    def run():
        table = rmse_table(model, ds, test, args.mask_points, cfg.get("inversion", "noise_std"), 0, cfg.inversion_options(), args.max_records)
        _log(format_table({model.kind: table}))
        if out is not None:
            with open(out, "w") as f:
                f.write("split,record,rmse\n")
                for split, vals in table.items():
                    for i, v in enumerate(vals):
                        f.write(f"{split},{i},{v:.9g}\n")

    return run


DIAGNOSE_KINDS = ("hessian", "mahalanobis", "sparsity", "latent-sweep")


def prepare_diagnose(args):
    cfg = _config(args.config)
    out = _output_dir(args.out)
    kind = args.kind
    if kind == "hessian":
        model = _model(args.model)
        ds = _dataset(args.dataset) if args.dataset else None
        if args.fd_step <= 0:
            raise ValidationError("--fd-step must be positive")
        if ds is not None and not 0 <= args.record < len(ds):
            raise ValidationError(f"--record must be in [0, {len(ds) - 1}]")
        return lambda: _diagnose_hessian(model, ds, args, out)
    if kind == "mahalanobis":
        model = _model(args.model)
        train = _dataset(args.dataset)
        tests = [_dataset(p) for p in args.test]
        if not tests:
            raise ValidationError("mahalanobis needs at least one --test dataset")
        labels = args.labels.split(",") if args.labels else [Path(p).stem for p in args.test]
        if len(labels) != len(tests) or len(set(labels)) != len(labels):
            raise ValidationError("--labels must give one distinct label per --test dataset")
        if any(t.geometry != train.geometry for t in tests):
            raise ValidationError("test datasets must share the training geometry")
        return lambda: _diagnose_mahalanobis(model, train, dict(zip(labels, tests)), cfg, args, out)
    if kind == "sparsity":
        model = _model(args.model)
        test = _dataset(args.test[0] if args.test else args.dataset)
        counts = [int(c) for c in args.counts.split(",")]
        if any(c < 1 for c in counts) or any(b > a for a, b in zip(counts, counts[1:])):
            raise ValidationError("--counts must be positive and descending")
        seeds = [int(s) for s in args.seeds.split(",")]
        return lambda: _diagnose_sparsity(model, test, counts, seeds, cfg, args, out)
    if kind == "latent-sweep":
        train = _dataset(args.dataset)
        if not args.test:
            raise ValidationError("latent-sweep needs a --test dataset")
        test = _dataset(args.test[0])
        dims = [int(k) for k in args.dims.split(",")]
        if any(k < 1 for k in dims) or any(b < a for a, b in zip(dims, dims[1:])):
            raise ValidationError("--dims must be positive and ascending")
        hyper = cfg.train_hyper()
        if len(train) < 2 * hyper.batch_size:
            raise ValidationError(f"dataset has {len(train)} records; training needs at least {2 * hyper.batch_size}")
        return lambda: _diagnose_latent(train, test, dims, cfg, args, out)
    raise ValidationError(f"unknown diagnose kind {kind!r}")


def _write_text(path, text):
    Path(path).write_text(text + "\n")
    _log(text)


def _example_heatmaps(model, ds, cfg, mask_points, directory):
    from .diagnostics import mask_for
    from .forward import observe
    from .inversion import invert

    rec = ds.records[0]
    obs = observe(rec.flow, mask_for(ds.geometry, mask_points), cfg.get("inversion", "noise_std"), [0, 0], rec.bc)
    est = invert(obs, model, cfg.inversion_options(), cfg.get("inversion", "uq_samples"), cfg.get("seeds", "uq"))
    _heatmaps(directory, rec.bathymetry.bed_elevation, est)


def _diagnose_hessian(model, ds, args, out):
    from .diagnostics import decay_index, hessian_spectrum
    from .fields import BoundaryConditions
    from .prior import BcRanges

    if ds is not None:
        rec = ds.records[args.record]
        z, bc = model.latent_of(rec.bathymetry.flat(), rec.bc), rec.bc
    else:
        mid = BcRanges()
        z, bc = np.zeros(model.latent_dim), BoundaryConditions(np.mean(mid.discharge), np.mean(mid.downstream_surface))
    out.mkdir(exist_ok=True)
    spectra = {t: hessian_spectrum(model, t, z, bc, args.fd_step) for t in ("u", "v", "s")}
    with open(out / "hessian_spectrum.csv", "w") as f:
        f.write("term,index,singular_value\n")
        for t, s in spectra.items():
            for i, v in enumerate(s):
                f.write(f"{t},{i},{v:.12g}\n")
    lines = ["Hessian spectra of loss terms", f"{'term':<6}{'max':>14}{'decay_1pct':>12}"]
    lines += [f"{t:<6}{s[0]:>14.6g}{decay_index(s):>12}" for t, s in spectra.items()]
    _write_text(out / "summary.txt", "\n".join(lines))


def _diagnose_mahalanobis(model, train, tests, cfg, args, out):
    from .diagnostics import shift_report, shift_stats

    out.mkdir(exist_ok=True)
    stats = shift_stats(model, train)
    rep = shift_report(model, tests, stats, args.mask_points, cfg.get("inversion", "noise_std"), 0, cfg.inversion_options())
    rep.write_csv(out / "mahalanobis.csv")
    _write_text(out / "summary.txt", rep.summary())
    for label, ds in tests.items():
        _example_heatmaps(model, ds, cfg, args.mask_points, out / f"heatmaps_{label}")


def _diagnose_sparsity(model, test, counts, seeds, cfg, args, out):
    from .diagnostics import sparsity_sweep

    out.mkdir(exist_ok=True)
    rep = sparsity_sweep(model, test, counts, seeds, cfg.get("inversion", "noise_std"), cfg.inversion_options())
    rep.write_csv(out / "sparsity.csv")
    _write_text(out / "summary.txt", rep.summary())
    _example_heatmaps(model, test, cfg, counts[-1], out / "heatmaps")


def _diagnose_latent(train, test, dims, cfg, args, out):
    from .diagnostics import latent_dim_sweep

    out.mkdir(exist_ok=True)
    models = {}
    rep = latent_dim_sweep(train, dims, cfg.train_hyper(), test, cfg.sve_architecture(), args.mask_points, cfg.get("inversion", "noise_std"), 0, models, log=_log)
    rep.write_csv(out / "latent_sweep.csv")
    _write_text(out / "summary.txt", rep.summary())
    _example_heatmaps(models[dims[-1]], test, cfg, args.mask_points, out / "heatmaps")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bathyinv", description="Latent-space bathymetry inversion from flow velocities.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample bathymetries, run the forward model, write a .vgd dataset")
    g.add_argument("--config")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an SVE or PCA reduced-order model, write a .vgm file")
    t.add_argument("--dataset", required=True)
    t.add_argument("--rom", choices=("sve", "pca"), required=True)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True)

    i = sub.add_parser("invert", help="MAP inversion of one observation set, write a .vgr file")
    i.add_argument("--model", required=True)
    i.add_argument("--obs")
    i.add_argument("--dataset")
    i.add_argument("--record", type=int)
    i.add_argument("--mask-points", type=int)
    i.add_argument("--noise-seed", type=int, default=0)
    i.add_argument("--config")
    i.add_argument("--heatmaps", help="directory for truth/estimate/error/std PGM heatmaps")
    i.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="train/validation/test inversion RMSE table")
    e.add_argument("--model", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--test")
    e.add_argument("--mask-points", type=int)
    e.add_argument("--max-records", type=int, help="evaluate only the first N records of each split")
    e.add_argument("--config")
    e.add_argument("--csv", help="per-record RMSE output file")

    d = sub.add_parser("diagnose", help="analyses: " + ", ".join(DIAGNOSE_KINDS))
    d.add_argument("kind", choices=DIAGNOSE_KINDS)
    d.add_argument("--model")
    d.add_argument("--dataset")
    d.add_argument("--test", action="append", default=[])
    d.add_argument("--labels")
    d.add_argument("--record", type=int, default=0)
    d.add_argument("--fd-step", type=float, default=1e-3)
    d.add_argument("--counts", default=",".join(map(str, (2121, 200, 50, 20, 10))))
    d.add_argument("--seeds", default="0")
    d.add_argument("--dims", default="5,10,20,40")
    d.add_argument("--mask-points", type=int)
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    return p


PREPARE = {
    "generate": prepare_generate,
    "train": prepare_train,
    "invert": prepare_invert,
    "evaluate": prepare_evaluate,
    "diagnose": prepare_diagnose,
}

_NEEDS_MODEL = {"hessian", "mahalanobis", "sparsity"}


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        if args.threads is not None and args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        if args.command == "diagnose":
            if args.kind in _NEEDS_MODEL and not args.model:
                raise ValidationError(f"diagnose {args.kind} needs --model")
            if not args.dataset and not (args.kind == "hessian" or (args.kind == "sparsity" and args.test)):
                raise ValidationError(f"diagnose {args.kind} needs --dataset")
        run = PREPARE[args.command](args)
    except (ValidationError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                run()
        else:
            run()
    except Exception as e:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
