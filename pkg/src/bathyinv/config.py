"""Flat ``block.key = value`` run configuration.

Lines are ``block.key = value``; ``#`` starts a comment. Values are Python
literals (numbers, strings, tuples) or bare words, which are read as strings.
Unknown blocks or keys and badly typed values are errors.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field, replace
from pathlib import Path

from .datagen import PriorConfig
from .fields import ChannelGeometry
from .forward import ForwardParams
from .inversion import InversionOptions, LineSearchOptions
from .pca import PcaRomSpec
from .prior import BcRanges, KernelSpec, ParabolicMeanSpec, TrapezoidalMeanSpec
from .rom import TrainHyper
from .sve import SveArchitecture


class ConfigError(ValueError):
    pass


def _widths(v):
    v = (v,) if isinstance(v, int) else tuple(v)
    if not v or not all(isinstance(w, int) and w >= 1 for w in v):
        raise ValueError("widths must be positive integers")
    return v


def _str(v):
    if not isinstance(v, str):
        raise ValueError("expected a string")
    return v


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError("expected an integer")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError("expected a number")
    return float(v)


SCHEMA = {
    "geometry": {"n_across": (_int, 21), "n_along": (_int, 101), "dx": (_float, 16.0), "dy": (_float, 4.0)},
    "prior": {
        "family": (_str, "parabolic"),
        "sigma": (_float, 1.2),
        "len_along": (_float, 200.0),
        "len_across": (_float, 20.0),
        "nugget": (_float, 1e-6),
        "n_modes": (_int, 200),
        "thalweg_elevation": (_float, None),
        "bank_rise": (_float, None),
        "along_trend": (_float, None),
        "bottom_fraction": (_float, None),
    },
    "forward": {
        "manning_n": (_float, 0.03),
        "min_depth": (_float, 0.01),
        "max_backwater_slope": (_float, 0.01),
        "discharge_min": (_float, 100.0),
        "discharge_max": (_float, 300.0),
        "surface_min": (_float, 4.0),
        "surface_max": (_float, 5.0),
        "max_retries": (_int, 100),
    },
    "rom": {
        "kind": (_str, "sve"),
        "latent_dim": (_int, 20),
        "encoder_widths": (_widths, (512, 128)),
        "decoder_widths": (_widths, (128, 512)),
        "regressor_widths": (_widths, (128, 128)),
        "activation": (_str, "softplus"),
        "kl_weight": (_float, 1e-3),
        "bc_embedding": (bool, True),
        "epochs": (_int, 200),
        "batch_size": (_int, 32),
        "step_size": (_float, 3e-4),
        "weight_decay": (_float, 0.0),
        "val_fraction": (_float, 0.1),
    },
    "inversion": {
        "max_iterations": (_int, 10),
        "grad_tol": (_float, 1e-6),
        "alpha_init": (_float, 1.0),
        "shrink": (_float, 0.5),
        "max_backtracks": (_int, 20),
        "sufficient_decrease": (_float, 1e-4),
        "jacobian_mode": (_str, "analytic"),
        "fd_delta": (_float, 1e-4),
        "noise_std": (_float, 0.05),
        "uq_samples": (_int, 200),
    },
    "seeds": {"train": (_int, 0), "uq": (_int, 0)},
}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)  # block -> {key: value}, defaults filled in

    def get(self, block, key):
        return self.values[block][key]

    def geometry(self) -> ChannelGeometry:
        g = self.values["geometry"]
        return ChannelGeometry(g["n_across"], g["n_along"], g["dx"], g["dy"])

    def prior(self) -> PriorConfig:
        p = self.values["prior"]
        overrides = {k: p[k] for k in ("thalweg_elevation", "bank_rise", "along_trend", "bottom_fraction") if p[k] is not None}
        if p["family"] == "parabolic":
            if "bottom_fraction" in overrides:
                raise ConfigError("prior.bottom_fraction applies only to the trapezoidal family")
            mean = replace(ParabolicMeanSpec(), **overrides)
        elif p["family"] == "trapezoidal":
            mean = replace(TrapezoidalMeanSpec(), **overrides)
        else:
            raise ConfigError(f"prior.family: unknown family {p['family']!r}")
        kernel = KernelSpec(p["sigma"], p["len_along"], p["len_across"], p["nugget"])
        return PriorConfig(p["family"], kernel, mean, p["n_modes"])

    def forward_params(self) -> ForwardParams:
        f = self.values["forward"]
        return ForwardParams(f["manning_n"], f["min_depth"], f["max_backwater_slope"])

    def bc_ranges(self) -> BcRanges:
        f = self.values["forward"]
        return BcRanges((f["discharge_min"], f["discharge_max"]), (f["surface_min"], f["surface_max"]))

    def train_hyper(self) -> TrainHyper:
        r = self.values["rom"]
        return TrainHyper(r["epochs"], r["batch_size"], r["step_size"], self.values["seeds"]["train"], r["val_fraction"], r["weight_decay"])

    def sve_architecture(self, latent_dim=None) -> SveArchitecture:
        r = self.values["rom"]
        k = r["latent_dim"] if latent_dim is None else latent_dim
        return SveArchitecture(k, r["encoder_widths"], r["decoder_widths"], r["activation"], r["kl_weight"], r["bc_embedding"])

    def pca_spec(self, latent_dim=None) -> PcaRomSpec:
        r = self.values["rom"]
        return PcaRomSpec(r["latent_dim"] if latent_dim is None else latent_dim, r["regressor_widths"], r["activation"])

    def inversion_options(self) -> InversionOptions:
        v = self.values["inversion"]
        ls = LineSearchOptions(v["shrink"], v["max_backtracks"], v["sufficient_decrease"])
        return InversionOptions(v["max_iterations"], v["grad_tol"], v["alpha_init"], ls, v["jacobian_mode"], v["fd_delta"])

    def validate(self):
        """Build every typed object once so invalid values fail early."""
        try:
            self.geometry()
            self.prior()
            self.forward_params()
            self.bc_ranges()
            self.train_hyper()
            self.sve_architecture()
            self.pca_spec()
            self.inversion_options()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.values["rom"]["kind"] not in ("sve", "pca"):
            raise ConfigError(f"rom.kind: expected 'sve' or 'pca', got {self.values['rom']['kind']!r}")
        if self.values["inversion"]["noise_std"] <= 0:
            raise ConfigError("inversion.noise_std must be positive")
        if self.values["inversion"]["uq_samples"] < 0:
            raise ConfigError("inversion.uq_samples must be >= 0")
        return self


def default_config() -> RunConfig:
    return RunConfig({b: {k: d for k, (_, d) in keys.items()} for b, keys in SCHEMA.items()})


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text  # bare word


def parse_config(text: str) -> RunConfig:
    values = default_config().values
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'block.key = value'")
        name, value = (s.strip() for s in line.split("=", 1))
        if name.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {name!r} must have the form block.key")
        block, key = name.split(".")
        if block not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown block {block!r} (key {name!r})")
        if key not in SCHEMA[block]:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        if name in seen:
            raise ConfigError(f"line {lineno}: duplicate key {name!r}")
        seen.add(name)
        conv = SCHEMA[block][key][0]
        v = _literal(value)
        try:
            if conv is bool:
                if not isinstance(v, bool):
                    raise ValueError("expected True or False")
            else:
                v = conv(v)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lineno}: {name}: {e}") from None
        values[block][key] = v
    return RunConfig(values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
