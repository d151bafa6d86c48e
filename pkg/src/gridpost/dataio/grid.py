"""Regular lat/lon grids: field container, binary format, normalization, interpolation.

Rows of every field array run north to south (row 0 is the northernmost
latitude), columns west to east, matching the on-disk layout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, DomainError, FormatError

MAGIC = b"GFB1"
_HEADER = struct.Struct("<4sHHI4d")
_DATE_LEN = 10
_VAR_LEN = 8


@dataclass(frozen=True)
class GridSpec:
    lon0: float = -10.0
    lat0: float = 30.0
    dlon: float = 0.5
    dlat: float = 0.5
    nlon: int = 81
    nlat: int = 81

    def __post_init__(self):
        if self.nlon < 2 or self.nlat < 2:
            raise DomainError("grid needs at least 2x2 nodes")
        if self.dlon <= 0 or self.dlat <= 0:
            raise DomainError("grid spacing must be positive")

    @property
    def shape(self):
        return (self.nlat, self.nlon)

    @property
    def lat_max(self):
        return self.lat0 + (self.nlat - 1) * self.dlat

    @property
    def lon_max(self):
        return self.lon0 + (self.nlon - 1) * self.dlon

    def lats(self):
        """Row latitudes, north to south."""
        return self.lat_max - self.dlat * np.arange(self.nlat)

    def lons(self):
        return self.lon0 + self.dlon * np.arange(self.nlon)

    def contains(self, lat, lon):
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        eps = 1e-9
        return (
            (lat >= self.lat0 - eps) & (lat <= self.lat_max + eps)
            & (lon >= self.lon0 - eps) & (lon <= self.lon_max + eps)
        )

    def fractional_index(self, lat, lon):
        """(row, col) in grid-cell units for the given coordinates."""
        row = (self.lat_max - np.asarray(lat, dtype=float)) / self.dlat
        col = (np.asarray(lon, dtype=float) - self.lon0) / self.dlon
        return row, col


@dataclass
class GridField:
    spec: GridSpec
    variable: str
    valid_date: str
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.spec.shape:
            raise DataError(
                f"field {self.variable}@{self.valid_date}: shape {self.values.shape} != grid {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"field {self.variable}@{self.valid_date} has non-finite values")


def write_grid(path, fields) -> None:
    """Write fields (all on one grid) in the GFB1 binary format."""
    fields = list(fields)
    if not fields:
        raise DataError("no fields to write")
    spec = fields[0].spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, spec.nlat, spec.nlon, len(fields),
                              spec.lon0, spec.lat0, spec.dlon, spec.dlat))
        for f in fields:
            if f.spec != spec:
                raise DataError("all fields in one file must share a grid")
            date = f.valid_date.encode("ascii")
            var = f.variable.encode("ascii")
            if len(date) != _DATE_LEN:
                raise DataError(f"date {f.valid_date!r} is not YYYY-MM-DD")
            if len(var) > _VAR_LEN:
                raise DataError(f"variable id {f.variable!r} longer than {_VAR_LEN} bytes")
            fh.write(date)
            fh.write(var.ljust(_VAR_LEN, b" "))
            fh.write(np.ascontiguousarray(f.values, dtype="<f4").tobytes())


def read_grid(path) -> list[GridField]:
    """Read a GFB1 file. Field values are float32 views into one buffer."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    magic, nlat, nlon, t, lon0, lat0, dlon, dlat = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    try:
        spec = GridSpec(lon0, lat0, dlon, dlat, nlon, nlat)
    except DomainError as exc:
        raise FormatError(f"{path}: invalid grid header ({exc})", offset=4) from exc
    npts = nlat * nlon
    rec = _DATE_LEN + _VAR_LEN + 4 * npts
    out = []
    off = _HEADER.size
    for i in range(t):
        if off + rec > len(buf):
            raise FormatError(f"{path}: truncated at record {i} of {t}", offset=off)
        try:
            date = buf[off:off + _DATE_LEN].decode("ascii")
            var = buf[off + _DATE_LEN:off + _DATE_LEN + _VAR_LEN].decode("ascii").rstrip(" ")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: non-ASCII record label", offset=off) from exc
        vals = np.frombuffer(buf, dtype="<f4", count=npts, offset=off + _DATE_LEN + _VAR_LEN)
        try:
            out.append(GridField(spec, var, date, vals.reshape(nlat, nlon)))
        except DataError as exc:
            raise FormatError(f"{path}: {exc}", offset=off) from exc
        off += rec
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after {t} records", offset=off)
    return out


def stack_fields(fields, variable=None):
    """``(dates, values[T, nlat, nlon])`` for the fields of one variable, date-sorted."""
    sel = [f for f in fields if variable is None or f.variable == variable]
    sel.sort(key=lambda f: f.valid_date)
    if not sel:
        return [], np.empty((0, 0, 0), dtype=np.float32)
    return [f.valid_date for f in sel], np.stack([f.values for f in sel])


def minmax_normalize(field):
    """Rescale one field to [0, 1]; returns ``(normalized, min, max)``.

    Accepts a ``GridField`` (returns a ``GridField``) or a bare array. A
    constant field maps to 0.5 everywhere.
    """
    values = field.values if isinstance(field, GridField) else np.asarray(field)
    if not np.all(np.isfinite(values)):
        raise DataError("cannot normalize a field with non-finite values")
    lo, hi = values.min(), values.max()
    if hi > lo:
        out = (values - lo) / (hi - lo)
    else:
        out = np.full_like(values, 0.5)
    if isinstance(field, GridField):
        return GridField(field.spec, field.variable, field.valid_date, out), lo, hi
    return out, lo, hi


def minmax_normalize_stack(values):
    """Per-field min-max over the trailing two axes of ``values[..., H, W]``."""
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise DataError("cannot normalize fields with non-finite values")
    lo = values.min(axis=(-2, -1), keepdims=True)
    hi = values.max(axis=(-2, -1), keepdims=True)
    rng = hi - lo
    const = rng == 0
    out = (values - lo) / np.where(const, 1, rng)
    return np.where(const, np.asarray(0.5, dtype=out.dtype), out), lo[..., 0, 0], hi[..., 0, 0]


@dataclass(frozen=True)
class BilinearWeights:
    """Precomputed 4-node stencils for a set of points on one grid."""

    rows: np.ndarray  # (P, 2) upper/lower row indices
    cols: np.ndarray  # (P, 2)
    w: np.ndarray  # (P, 2, 2)

    def apply(self, values):
        """Interpolate ``values[..., nlat, nlon]`` to the points -> ``[..., P]``."""
        r0, r1 = self.rows[:, 0], self.rows[:, 1]
        c0, c1 = self.cols[:, 0], self.cols[:, 1]
        w = self.w
        return (
            values[..., r0, c0] * w[:, 0, 0] + values[..., r0, c1] * w[:, 0, 1]
            + values[..., r1, c0] * w[:, 1, 0] + values[..., r1, c1] * w[:, 1, 1]
        )


def bilinear_weights(spec: GridSpec, lat, lon) -> BilinearWeights:
    lat = np.atleast_1d(np.asarray(lat, dtype=float))
    lon = np.atleast_1d(np.asarray(lon, dtype=float))
    inside = spec.contains(lat, lon)
    if not np.all(inside):
        bad = np.flatnonzero(~inside)[0]
        raise DomainError(f"point ({lat[bad]}, {lon[bad]}) lies outside the grid")
    row, col = spec.fractional_index(lat, lon)
    row = np.clip(row, 0, spec.nlat - 1)
    col = np.clip(col, 0, spec.nlon - 1)
    r0 = np.minimum(np.floor(row).astype(int), spec.nlat - 2)
    c0 = np.minimum(np.floor(col).astype(int), spec.nlon - 2)
    fr, fc = row - r0, col - c0
    w = np.stack([
        np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc], axis=-1),
        np.stack([fr * (1 - fc), fr * fc], axis=-1),
    ], axis=1)
    return BilinearWeights(np.stack([r0, r0 + 1], 1), np.stack([c0, c0 + 1], 1), w)


def bilinear_interpolate(field, lat, lon, spec: GridSpec | None = None):
    """Bilinear value of a field at (lat, lon); scalars in, scalar out."""
    if isinstance(field, GridField):
        spec, values = field.spec, field.values
    else:
        values = np.asarray(field)
        spec = spec or GridSpec(nlat=values.shape[-2], nlon=values.shape[-1])
    out = bilinear_weights(spec, lat, lon).apply(np.asarray(values, dtype=float))
    return out[..., 0] if np.ndim(lat) == 0 and np.ndim(lon) == 0 else out
