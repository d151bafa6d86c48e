"""Station tables, the (date x station) dataset cube, CSV files and chronological splits."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError, DataIOError
from .grid import GridField, GridSpec, read_grid, stack_fields, write_grid

STATION_HEADER = ["station_id", "lat", "lon", "altitude", "orography"]
OBS_HEADER = ["date", "station_id", "obs"]
META_NAMES = ["lat", "lon", "altitude", "orography"]


def fmt(v: float) -> str:
    """CSV number format: 9 significant digits, ``.`` decimal, empty for NaN."""
    return "" if math.isnan(v) else f"{v:.9g}"


def round_sig(a, digits=9):
    """Round to what ``fmt`` prints, so in-memory data equals its CSV round trip."""
    a = np.asarray(a, dtype=float)
    return np.array([float(f"{v:.{digits}g}") for v in a.ravel()]).reshape(a.shape)


@dataclass
class StationTable:
    station_id: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    altitude: np.ndarray
    orography: np.ndarray

    def __len__(self):
        return len(self.station_id)

    def meta(self):
        """``(S, 4)`` array in ``META_NAMES`` order."""
        return np.stack([self.lat, self.lon, self.altitude, self.orography], axis=1)

    def index(self):
        return {sid: i for i, sid in enumerate(self.station_id)}

    def check_inside(self, grid: GridSpec):
        inside = grid.contains(self.lat, self.lon)
        if not np.all(inside):
            bad = [str(s) for s in self.station_id[~inside]]
            raise DataError(f"stations outside grid bounds: {', '.join(bad)}")


@dataclass
class StationSample:
    station_id: str
    date: str
    predictors: dict
    lat: float
    lon: float
    altitude: float
    orography: float
    observation: float

    @property
    def missing(self):
        return math.isnan(self.observation)


@dataclass
class Dataset:
    """Everything for a set of dates: station predictors/obs as dense cubes plus fields.

    ``predictors`` is ``(D, S, P)``, ``obs`` is ``(D, S)`` with NaN for missing,
    ``fields[var]`` is the ``(D, nlat, nlon)`` ensemble-mean field stack.
    ``extras`` carries generator internals (truth fields etc.) when available.
    """

    grid: GridSpec
    dates: list
    stations: StationTable
    predictor_names: list
    predictors: np.ndarray
    obs: np.ndarray
    fields: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        d, s = len(self.dates), len(self.stations)
        if self.predictors.shape != (d, s, len(self.predictor_names)):
            raise DataError(f"predictor cube {self.predictors.shape} != ({d}, {s}, {len(self.predictor_names)})")
        if self.obs.shape != (d, s):
            raise DataError(f"observation cube {self.obs.shape} != ({d}, {s})")
        if not np.all(np.isfinite(self.predictors)):
            raise DataError("predictors must be finite")

    @property
    def n_dates(self):
        return len(self.dates)

    def subset(self, idx):
        idx = np.asarray(idx)
        extras = {}
        for k, v in self.extras.items():
            extras[k] = v[idx] if isinstance(v, np.ndarray) and v.ndim >= 1 and len(v) == self.n_dates else v
        return replace(
            self,
            dates=[self.dates[i] for i in idx],
            predictors=self.predictors[idx],
            obs=self.obs[idx],
            fields={k: v[idx] for k, v in self.fields.items()},
            extras=extras,
        )

    def samples(self):
        """Iterate over ``StationSample`` rows (date-major)."""
        st = self.stations
        for t, date in enumerate(self.dates):
            for s in range(len(st)):
                yield StationSample(
                    str(st.station_id[s]), date,
                    dict(zip(self.predictor_names, self.predictors[t, s].tolist())),
                    float(st.lat[s]), float(st.lon[s]), float(st.altitude[s]),
                    float(st.orography[s]), float(self.obs[t, s]),
                )

    def with_predictor(self, name, values):
        """Copy with an extra predictor column ``values[D, S]`` appended."""
        values = np.asarray(values, dtype=float)
        return replace(
            self,
            predictor_names=self.predictor_names + [name],
            predictors=np.concatenate([self.predictors, values[..., None]], axis=-1),
        )


@dataclass
class DatasetSplit:
    train: Dataset
    validation: Dataset
    test: Dataset


def chronological_split(dataset: Dataset, train_end: str, val_end: str) -> DatasetSplit:
    """Dates ``<= train_end`` train, ``(train_end, val_end]`` validate, the rest test."""
    if not train_end < val_end:
        raise ConfigError(f"train_end {train_end} must precede val_end {val_end}")
    order = np.argsort(np.asarray(dataset.dates), kind="stable")
    ds = dataset.subset(order)
    dates = np.asarray(ds.dates)
    parts = {
        "train": np.flatnonzero(dates <= train_end),
        "validation": np.flatnonzero((dates > train_end) & (dates <= val_end)),
        "test": np.flatnonzero(dates > val_end),
    }
    for name, idx in parts.items():
        if idx.size == 0:
            raise ConfigError(f"{name} partition is empty (train_end={train_end}, val_end={val_end})")
    return DatasetSplit(*(ds.subset(parts[k]) for k in ("train", "validation", "test")))


def default_split_dates(dates):
    """Last 360-day year tests, the one before validates, everything earlier trains."""
    years = sorted({d[:4] for d in dates})
    if len(years) < 3:
        raise ConfigError(f"need at least 3 years of dates for the default split, got {len(years)}")
    return f"{years[-3]}-12-31", f"{years[-2]}-12-31"


# ---------------------------------------------------------------- CSV I/O


def _open_csv(path, header_check):
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"missing file: {path}")
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or not header_check(header):
        fh.close()
        raise DataError(f"{path}: unexpected header {header}")
    return fh, reader, header


def read_stations(path, grid: GridSpec | None = None) -> StationTable:
    fh, reader, _ = _open_csv(path, lambda h: h == STATION_HEADER)
    rows, seen = [], set()
    with fh:
        for lineno, row in enumerate(reader, start=2):
            try:
                sid = row[0]
                vals = [float(v) for v in row[1:5]]
                if len(row) != 5 or not sid or not all(map(math.isfinite, vals)):
                    raise ValueError
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: cannot parse station row {row}") from None
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate station {sid}")
            seen.add(sid)
            rows.append((sid, *vals))
    cols = list(zip(*rows)) if rows else [[]] * 5
    table = StationTable(np.array(cols[0], dtype=object), *(np.array(c, dtype=float) for c in cols[1:]))
    if grid is not None:
        table.check_inside(grid)
    return table


def write_stations(path, table: StationTable):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_HEADER)
        for i in range(len(table)):
            w.writerow([table.station_id[i]] + [fmt(float(a[i])) for a in
                        (table.lat, table.lon, table.altitude, table.orography)])


def read_observations(path):
    """``{(date, station_id): obs}`` with NaN for empty cells."""
    fh, reader, _ = _open_csv(path, lambda h: h == OBS_HEADER)
    out = {}
    with fh:
        for lineno, row in enumerate(reader, start=2):
            try:
                date, sid, cell = row
                val = float(cell) if cell.strip() else math.nan
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse observation row {row}") from None
            if (date, sid) in out:
                raise DataError(f"{path}:{lineno}: duplicate (station, date) ({sid}, {date})")
            out[(date, sid)] = val
    return out


def read_predictors(path):
    """``(names, {(date, station_id): values})``."""
    fh, reader, header = _open_csv(path, lambda h: len(h) >= 3 and h[:2] == ["date", "station_id"])
    names = header[2:]
    out = {}
    with fh:
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(header):
                    raise ValueError
                vals = np.array([float(v) for v in row[2:]])
                if not np.all(np.isfinite(vals)):
                    raise ValueError
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse predictor row") from None
            key = (row[0], row[1])
            if key in out:
                raise DataError(f"{path}:{lineno}: duplicate (station, date) ({row[1]}, {row[0]})")
            out[key] = vals
    return names, out


def write_observations(path, dates, station_ids, obs):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for t, date in enumerate(dates):
            for s, sid in enumerate(station_ids):
                w.writerow([date, sid, fmt(float(obs[t, s]))])


def write_predictors(path, dates, station_ids, names, cube):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "station_id"] + list(names))
        for t, date in enumerate(dates):
            for s, sid in enumerate(station_ids):
                w.writerow([date, sid] + [fmt(float(v)) for v in cube[t, s]])


# ------------------------------------------------------------ directories


def grid_path(directory, variable):
    return Path(directory) / f"grids_{variable}.gfb"


def save_dataset(directory, ds: Dataset, write_truth=False):
    """Write a dataset directory; returns the list of files written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = [d / "stations.csv", d / "observations.csv", d / "predictors.csv"]
    write_stations(written[0], ds.stations)
    write_observations(written[1], ds.dates, ds.stations.station_id, ds.obs)
    write_predictors(written[2], ds.dates, ds.stations.station_id, ds.predictor_names, ds.predictors)
    for var, stack in ds.fields.items():
        p = grid_path(d, var)
        write_grid(p, (GridField(ds.grid, var, date, stack[t]) for t, date in enumerate(ds.dates)))
        written.append(p)
    if write_truth and "truth" in ds.extras:
        for k, var in enumerate(ds.fields):
            p = d / f"truth_{var}.gfb"
            truth = ds.extras["truth"][:, k]
            write_grid(p, (GridField(ds.grid, var, date, truth[t]) for t, date in enumerate(ds.dates)))
            written.append(p)
    return written


def load_dataset(directory, variables=None) -> Dataset:
    """Load a directory written by ``save_dataset`` (or by hand in the same formats)."""
    d = Path(directory)
    if not d.is_dir():
        raise DataIOError(f"data directory not found: {d}")
    grid_files = sorted(d.glob("grids_*.gfb"))
    fields, grid, field_dates = {}, None, None
    for p in grid_files:
        var = p.stem[len("grids_"):]
        if variables is not None and var not in variables:
            continue
        recs = read_grid(p)
        dates, stack = stack_fields(recs)
        if grid is None and recs:
            grid = recs[0].spec
            field_dates = dates
        elif dates != field_dates:
            raise DataError(f"{p}: dates differ from other grid files")
        fields[var] = stack
    if variables is not None:
        for var in variables:
            if var not in fields:
                raise DataIOError(f"missing grid file: {grid_path(d, var)}")
    grid = grid or GridSpec()
    stations = read_stations(d / "stations.csv", grid)
    names, pred = read_predictors(d / "predictors.csv")
    obs_map = read_observations(d / "observations.csv")
    dates = sorted({k[0] for k in pred})
    if field_dates is not None and field_dates != dates:
        raise DataError("grid dates and predictor dates differ")
    sidx = stations.index()
    didx = {t: i for i, t in enumerate(dates)}
    cube = np.full((len(dates), len(stations), len(names)), np.nan)
    for (date, sid), vals in pred.items():
        if sid not in sidx:
            raise DataError(f"predictors reference unknown station {sid}")
        cube[didx[date], sidx[sid]] = vals
    if np.isnan(cube).any():
        t, s = np.argwhere(np.isnan(cube).any(-1))[0]
        raise DataError(f"no predictors for station {stations.station_id[s]} on {dates[t]}")
    obs = np.full((len(dates), len(stations)), np.nan)
    for (date, sid), v in obs_map.items():
        if sid in sidx and date in didx:
            obs[didx[date], sidx[sid]] = v
    return Dataset(grid, dates, stations, names, cube, obs, fields)


def file_checksums(paths):
    out = {}
    for p in sorted(map(Path, paths)):
        h = hashlib.sha256()
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        out[p.name] = h.hexdigest()
    return out


def write_manifest(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
