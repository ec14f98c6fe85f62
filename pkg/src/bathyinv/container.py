"""Binary array container shared by datasets, models, observations and results.

Layout (little-endian)::

    b"VGD1"  u16 version  u32 array_count
    per array: u16 name_len, name (UTF-8), u8 dtype, u8 ndim, ndim x u64 dims, payload

dtype codes: 0 = f32, 1 = f64, 2 = u32. Text is stored as a u32 array of
UTF-8 byte values.
"""

from __future__ import annotations

import re
import struct

import numpy as np

from .fields import (
    BathymetryField,
    BoundaryConditions,
    ChannelGeometry,
    Dataset,
    FlowField,
    ObservationMask,
    ObservationSet,
    Record,
)

MAGIC = b"VGD1"
VERSION = 1

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u4"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DimensionMismatchError(ContainerError):
    pass


class DimensionOverflowError(ContainerError):
    pass


def encode_arrays(arrays: dict) -> bytes:
    if len(arrays) >= 2**32:
        raise DimensionOverflowError("too many arrays")
    out = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = a.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"array {name!r}: unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        if len(raw) >= 2**16:
            raise DimensionOverflowError(f"array name too long: {name[:40]}...")
        if a.ndim >= 2**8:
            raise DimensionOverflowError(f"array {name!r} has too many dimensions")
        if any(d >= 2**64 for d in a.shape):
            raise DimensionOverflowError(f"array {name!r} dimension overflow")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _CODES[dt], a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    return b"".join(out)


def decode_arrays(buf: bytes) -> dict:
    if len(buf) < 4:
        raise TruncatedError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"truncated payload at byte {pos} (wanted {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"array {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=object)) * dt.itemsize
        a = np.frombuffer(take(nbytes), dtype=dt).reshape(dims)
        arrays[name] = a.astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last array")
    return arrays


def write_arrays(path, arrays: dict):
    buf = encode_arrays(arrays)
    with open(path, "wb") as f:
        f.write(buf)


def read_arrays(path) -> dict:
    with open(path, "rb") as f:
        return decode_arrays(f.read())


def text_array(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.uint32)


def array_text(a) -> str:
    return bytes(np.asarray(a, dtype=np.uint8)).decode("utf-8")


def geometry_arrays(g: ChannelGeometry) -> dict:
    return {
        "geometry/dims": np.array([g.n_across, g.n_along], dtype=np.uint32),
        "geometry/spacing": np.array([g.dx, g.dy], dtype=np.float64),
    }


def geometry_from(arrays) -> ChannelGeometry:
    try:
        dims, spacing = arrays["geometry/dims"], arrays["geometry/spacing"]
    except KeyError as e:
        raise ContainerError(f"missing array {e.args[0]}") from None
    return ChannelGeometry(int(dims[0]), int(dims[1]), float(spacing[0]), float(spacing[1]))


def metadata_arrays(meta: dict) -> dict:
    return {f"meta/{k}": text_array(str(v)) for k, v in meta.items()}


def metadata_from(arrays) -> dict:
    return {k[5:]: array_text(v) for k, v in arrays.items() if k.startswith("meta/")}


_REC = re.compile(r"^rec(\d+)/(\w+)$")
_REC_FIELDS = ("bed", "u", "v", "depth", "surface", "bc")


def quantize(a, precision="f32"):
    """Round to what ``precision`` can store, returned as float64."""
    a = np.asarray(a, dtype=np.float64)
    return a.astype(np.float32).astype(np.float64) if precision == "f32" else a.copy()


def dataset_arrays(ds: Dataset, precision="f32") -> dict:
    dt = np.float32 if precision == "f32" else np.float64
    arrays = geometry_arrays(ds.geometry)
    arrays.update(metadata_arrays(ds.metadata))
    for i, r in enumerate(ds.records):
        arrays[f"rec{i}/bed"] = r.bathymetry.bed_elevation.astype(dt)
        arrays[f"rec{i}/u"] = r.flow.u.astype(dt)
        arrays[f"rec{i}/v"] = r.flow.v.astype(dt)
        arrays[f"rec{i}/depth"] = r.flow.depth.astype(dt)
        arrays[f"rec{i}/surface"] = r.flow.surface.astype(dt)
        arrays[f"rec{i}/bc"] = r.bc.as_array().astype(dt)
    return arrays


def save_dataset(ds: Dataset, path, precision="f32"):
    """Write ``ds``; payloads are f32 by default (use ``precision="f64"`` for lossless storage of arbitrary values)."""
    if precision not in ("f32", "f64"):
        raise ValueError(f"precision must be 'f32' or 'f64', got {precision!r}")
    write_arrays(path, dataset_arrays(ds, precision))


def dataset_from_arrays(arrays: dict) -> Dataset:
    geometry = geometry_from(arrays)
    recs = {}
    for name, a in arrays.items():
        m = _REC.match(name)
        if m:
            recs.setdefault(int(m.group(1)), {})[m.group(2)] = np.asarray(a, dtype=np.float64)
    if not recs:
        raise ContainerError("container holds no records")
    if sorted(recs) != list(range(len(recs))):
        raise ContainerError("record indices are not contiguous")
    records = []
    for i in range(len(recs)):
        f = recs[i]
        missing = [k for k in _REC_FIELDS if k not in f]
        if missing:
            raise ContainerError(f"record {i} is missing {missing}")
        for k in ("bed", "u", "v", "depth"):
            if f[k].shape != geometry.shape:
                raise DimensionMismatchError(
                    f"rec{i}/{k} has shape {f[k].shape}, geometry is {geometry.shape}"
                )
        if f["surface"].shape != (geometry.n_along,) or f["bc"].shape != (2,):
            raise DimensionMismatchError(f"record {i} surface/bc shape mismatch")
        records.append(
            Record(
                BathymetryField(geometry, f["bed"]),
                BoundaryConditions.from_array(f["bc"]),
                FlowField(geometry, f["u"], f["v"], f["depth"], f["surface"]),
            )
        )
    return Dataset(geometry, tuple(records), metadata_from(arrays))


def load_dataset(path) -> Dataset:
    return dataset_from_arrays(read_arrays(path))


def save_observations(obs: ObservationSet, geometry: ChannelGeometry, path):
    arrays = geometry_arrays(geometry)
    arrays.update(
        {
            "obs/indices": obs.mask.indices.astype(np.uint32),
            "obs/components": np.array([obs.mask.includes_u, obs.mask.includes_v], dtype=np.uint32),
            "obs/values": obs.values.astype(np.float64),
            "obs/noise_std": obs.noise_std.astype(np.float64),
            "obs/bc": obs.bc.as_array(),
        }
    )
    write_arrays(path, arrays)


def load_observations(path) -> tuple[ObservationSet, ChannelGeometry]:
    arrays = read_arrays(path)
    geometry = geometry_from(arrays)
    try:
        comps = arrays["obs/components"]
        mask = ObservationMask(arrays["obs/indices"].astype(np.int64), bool(comps[0]), bool(comps[1]))
        mask.check_bounds(geometry)
        obs = ObservationSet(
            mask,
            arrays["obs/values"],
            arrays["obs/noise_std"],
            BoundaryConditions.from_array(arrays["obs/bc"]),
        )
    except KeyError as e:
        raise ContainerError(f"missing array {e.args[0]}") from None
    return obs, geometry
