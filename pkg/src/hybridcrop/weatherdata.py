"""Daily weather ingestion, cleaning, normalization and synthesis.

A :class:`WeatherSeries` is one season of daily feature vectors.  Seasons
follow the two crop windows used throughout the package: Jan 1 - Sep 7 for
phenology and Sep 7 - May 15 (next year) for cold hardiness.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SYNTHETIC_FEATURES = ("daylength", "tmin", "tmax", "tmean", "et0", "etp", "rain", "solar")
REAL_FEATURES = ("tmin", "tmax", "tmean", "hmin", "hmax", "hmean",
                 "dmin", "dmax", "dmean", "solar", "rain", "wind", "et")
DATE_FEATURES = ("doy_sin", "doy_cos")

_UNITS = {
    "daylength": "h", "tmin": "degC", "tmax": "degC", "tmean": "degC",
    "hmin": "%", "hmax": "%", "hmean": "%", "dmin": "degC", "dmax": "degC",
    "dmean": "degC", "solar": "MJ m-2 day-1", "rain": "mm", "wind": "m s-1",
    "et": "mm", "et0": "mm", "etp": "mm",
}

# (month, day) bounds; hardiness seasons wrap into the following year
WINDOWS = {
    "phenology": ((1, 1), (9, 7)),
    "hardiness": ((9, 7), (5, 15)),
}

MISSING_TOKENS = {"", "na", "nan", "null", "none", "-999", "-99"}


class WeatherParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class DuplicateDateError(WeatherParseError):
    pass


class WeatherSchemaError(ValueError):
    """Upstream data no longer has the layout the parser expects."""


class WeatherFetchError(RuntimeError):
    def __init__(self, msg: str, retryable: bool = True):
        super().__init__(msg)
        self.retryable = retryable


@dataclass(frozen=True)
class WeatherRecord:
    """One day of weather.  Unknown/absent features are NaN."""

    date: date
    values: Mapping[str, float]

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def violations(self) -> list[str]:
        v = self.values
        out = []
        t = [v.get(k, math.nan) for k in ("tmin", "tmean", "tmax")]
        if not any(math.isnan(x) for x in t) and not (t[0] <= t[1] <= t[2]):
            out.append("tmin <= tmean <= tmax")
        for k in ("rain", "solar"):
            if v.get(k, 0.0) < 0:
                out.append(f"{k} >= 0")
        for k in ("hmin", "hmax", "hmean"):
            if not 0.0 <= v.get(k, 50.0) <= 100.0:
                out.append(f"0 <= {k} <= 100")
        return out


@dataclass(frozen=True, eq=False)
class WeatherSeries:
    """A run of consecutive days of weather features.

    ``features`` is (T, F).  After :func:`normalize`, ``features`` holds
    z-scores plus the periodic date embedding and ``raw`` keeps the
    untouched values in the original feature order.
    """

    dates: np.ndarray
    features: np.ndarray
    names: tuple[str, ...]
    location_id: str = ""
    season_window: tuple[date, date] | None = None
    missing_mask: np.ndarray | None = None
    raw: np.ndarray | None = None
    raw_names: tuple[str, ...] | None = None

    def __post_init__(self):
        d = np.asarray(self.dates, dtype="datetime64[D]")
        object.__setattr__(self, "dates", d)
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        if self.missing_mask is None:
            object.__setattr__(self, "missing_mask", np.zeros(self.features.shape, dtype=bool))
        if len(d) > 1 and not np.all(np.diff(d).astype(int) == 1):
            raise WeatherParseError("dates must increase by exactly one day")
        if self.features.shape != (len(d), len(self.names)):
            raise ValueError(f"features shape {self.features.shape} does not match "
                             f"{len(d)} days x {len(self.names)} names")

    def __len__(self):
        return len(self.dates)

    @property
    def n_features(self) -> int:
        return len(self.names)

    @property
    def normalized(self) -> bool:
        return self.raw is not None

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.names.index(name)]

    def raw_column(self, name: str) -> np.ndarray:
        if self.raw is None:
            return self.column(name)
        return self.raw[:, self.raw_names.index(name)]

    def tmean(self) -> np.ndarray:
        """Daily mean air temperature in degC, never normalized."""
        names = self.raw_names if self.raw is not None else self.names
        if "tmean" in names:
            return self.raw_column("tmean")
        return 0.5 * (self.raw_column("tmin") + self.raw_column("tmax"))

    def record(self, i: int) -> WeatherRecord:
        names = self.raw_names if self.raw is not None else self.names
        src = self.raw if self.raw is not None else self.features
        vals = {n: float(x) for n, x in zip(names, src[i])}
        return WeatherRecord(self.dates[i].item(), vals)

    def records(self) -> list[WeatherRecord]:
        return [self.record(i) for i in range(len(self))]

    def doy(self) -> np.ndarray:
        years = self.dates.astype("datetime64[Y]")
        return (self.dates - years).astype(int)

    def slice(self, start: int, stop: int | None = None) -> "WeatherSeries":
        s = slice(start, stop)
        return replace(self, dates=self.dates[s], features=self.features[s],
                       missing_mask=self.missing_mask[s],
                       raw=None if self.raw is None else self.raw[s])

    def concat(self, other: "WeatherSeries") -> "WeatherSeries":
        if other.names != self.names:
            raise ValueError("feature names differ")
        raw = None
        if self.raw is not None and other.raw is not None:
            raw = np.concatenate([self.raw, other.raw])
        return replace(self, dates=np.concatenate([self.dates, other.dates]),
                       features=np.concatenate([self.features, other.features]),
                       missing_mask=np.concatenate([self.missing_mask, other.missing_mask]),
                       raw=raw)


# -- seasons ----------------------------------------------------------------

def season_bounds(kind: str, year: int) -> tuple[date, date]:
    """First and last day of the ``kind`` season that starts in ``year``."""
    (m0, d0), (m1, d1) = WINDOWS[kind]
    start = date(year, m0, d0)
    end = date(year if (m1, d1) > (m0, d0) else year + 1, m1, d1)
    return start, end


def season_of(day: date, kind: str) -> int | None:
    """Starting year of the ``kind`` season containing ``day`` (or None)."""
    for year in (day.year, day.year - 1):
        s, e = season_bounds(kind, year)
        if s <= day <= e:
            return year
    return None


def season_length(kind: str, year: int) -> int:
    s, e = season_bounds(kind, year)
    return (e - s).days + 1


# -- CSV loading ------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Maps feature names onto CSV column names."""

    features: Mapping[str, str]
    date_column: str = "date"
    location_column: str | None = "location"
    units: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def default(cls, names: Sequence[str] = SYNTHETIC_FEATURES) -> "CsvSchema":
        return cls({n: n for n in names}, units={n: _UNITS.get(n, "") for n in names})

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "CsvSchema":
        doc = json.loads(Path(path).read_text())
        feats, units = {}, {}
        for name, spec in doc["features"].items():
            if isinstance(spec, str):
                feats[name] = spec
            else:
                feats[name] = spec["column"]
                units[name] = spec.get("unit", "")
        return cls(feats, doc.get("date_column", "date"), doc.get("location_column", "location"), units)

    def to_json(self) -> dict:
        return {
            "date_column": self.date_column,
            "location_column": self.location_column,
            "features": {n: {"column": c, "unit": self.units.get(n, _UNITS.get(n, ""))}
                         for n, c in self.features.items()},
        }


def _parse_float(tok: str, line: int, col: str) -> float:
    if tok.strip().lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(tok)
    except ValueError:
        raise WeatherParseError(f"column '{col}': cannot parse {tok!r} as a number", line) from None


def load_csv(path: str | os.PathLike, schema: CsvSchema | None = None,
             window: str | None = "phenology",
             location: str | None = None) -> dict[tuple[str, int], WeatherSeries]:
    """Read a daily weather CSV and group the rows into seasons.

    Returns a dict keyed by ``(location_id, season_start_year)``.  Rows
    outside the season window are ignored.  Days missing inside a season are
    inserted with every feature flagged in ``missing_mask``.  With
    ``window=None`` each location becomes one series keyed by its first year.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if schema is None:
            cols = [c for c in header if c not in ("date", "location")]
            schema = CsvSchema({c: c for c in cols})
        missing_cols = [c for c in [schema.date_column, *schema.features.values()] if c not in header]
        if missing_cols:
            raise WeatherParseError(f"missing columns {missing_cols} in header", 1)
        names = tuple(schema.features)
        groups: dict[tuple[str, int], dict[date, np.ndarray]] = {}
        for row in reader:
            line = reader.line_num
            if None in row or any(v is None for v in row.values()):
                raise WeatherParseError("wrong number of fields", line)
            try:
                day = date.fromisoformat(row[schema.date_column].strip())
            except ValueError:
                raise WeatherParseError(f"bad date {row[schema.date_column]!r}", line) from None
            loc = location or (row.get(schema.location_column, "") if schema.location_column else "") or path.stem
            key_year = season_of(day, window) if window else 0
            if key_year is None:
                continue
            vals = np.array([_parse_float(row[c], line, c) for c in schema.features.values()])
            bucket = groups.setdefault((loc, key_year), {})
            if day in bucket:
                raise DuplicateDateError(f"duplicate date {day.isoformat()}", line)
            bucket[day] = vals

    out = {}
    for (loc, year), rows in sorted(groups.items()):
        days = sorted(rows)
        n = (days[-1] - days[0]).days + 1
        feats = np.full((n, len(names)), np.nan)
        for d, v in rows.items():
            feats[(d - days[0]).days] = v
        dates = np.arange(np.datetime64(days[0]), np.datetime64(days[0]) + n)
        bounds = season_bounds(window, year) if window else (days[0], days[-1])
        key = (loc, year if window else days[0].year)
        out[key] = WeatherSeries(dates, np.nan_to_num(feats, nan=0.0), names, loc, bounds,
                                 missing_mask=np.isnan(feats))
    return out


def write_csv(path: str | os.PathLike, series: Iterable[WeatherSeries]) -> None:
    """Write raw series as CSV (missing cells left empty)."""
    series = list(series)
    names = series[0].raw_names if series[0].raw is not None else series[0].names
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "location", *names])
        for s in series:
            src = s.raw if s.raw is not None else s.features
            mask = s.missing_mask if s.raw is None else np.zeros(src.shape, dtype=bool)
            for i, d in enumerate(s.dates):
                w.writerow([str(d), s.location_id,
                            *["" if mask[i, j] else repr(float(x)) for j, x in enumerate(src[i])]])


# -- cleaning ---------------------------------------------------------------

def clean_season(series: WeatherSeries, max_missing: float = 0.10) -> WeatherSeries | None:
    """Fill gaps by linear interpolation, or return None to discard the season.

    A season is discarded when any feature is missing on more than
    ``max_missing`` of its days.  Gaps at either end take the nearest
    observed value.  ``missing_mask`` is kept so imputed cells stay visible.
    """
    mask = series.missing_mask
    if not mask.any():
        return series
    frac = mask.mean(axis=0)
    if np.any(frac > max_missing) or np.any(mask.all(axis=0)):
        return None
    feats = series.features.copy()
    idx = np.arange(len(series))
    for j in np.flatnonzero(mask.any(axis=0)):
        seen = ~mask[:, j]
        feats[~seen, j] = np.interp(idx[~seen], idx[seen], feats[seen, j])
    return replace(series, features=feats)


# -- normalization ----------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc: Mapping) -> "NormStats":
        return cls(tuple(doc["names"]), np.asarray(doc["mean"], float), np.asarray(doc["std"], float))


def fit_norm(dataset: Iterable[WeatherSeries]) -> NormStats:
    series = list(dataset)
    stacked = np.concatenate([s.features for s in series])
    std = stacked.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return NormStats(series[0].names, stacked.mean(axis=0), std)


def date_embedding(series: WeatherSeries) -> np.ndarray:
    ang = 2.0 * np.pi * series.doy() / 365.0
    return np.stack([np.sin(ang), np.cos(ang)], axis=1)


def normalize_series(series: WeatherSeries, stats: NormStats) -> WeatherSeries:
    if series.normalized:
        raise ValueError("series is already normalized")
    if series.names != stats.names:
        raise ValueError(f"feature names {series.names} do not match stats {stats.names}")
    z = (series.features - stats.mean) / stats.std
    feats = np.concatenate([z, date_embedding(series)], axis=1)
    mask = np.concatenate([series.missing_mask, np.zeros((len(series), 2), bool)], axis=1)
    return replace(series, features=feats, names=series.names + DATE_FEATURES,
                   missing_mask=mask, raw=series.features, raw_names=series.names)


def normalize(dataset, stats: NormStats | None = None):
    """z-score every feature and append the periodic date embedding.

    ``dataset`` is a list or dict of clean raw series.  Statistics are fitted
    on ``dataset`` when ``stats`` is None; pass the training-split stats
    when normalizing validation or test data.  Returns ``(dataset, stats)``
    with the same container type.
    """
    items = list(dataset.values()) if isinstance(dataset, Mapping) else list(dataset)
    if stats is None:
        stats = fit_norm(items)
    if isinstance(dataset, Mapping):
        return {k: normalize_series(s, stats) for k, s in dataset.items()}, stats
    return [normalize_series(s, stats) for s in items], stats


def denormalize(series: WeatherSeries, stats: NormStats) -> WeatherSeries:
    n = len(stats.names)
    feats = series.features[:, :n] * stats.std + stats.mean
    return WeatherSeries(series.dates, feats, stats.names, series.location_id,
                         series.season_window, series.missing_mask[:, :n])


# -- derived quantities ---------------------------------------------------------

def _solar_geometry(doy: np.ndarray, latitude: float):
    j = doy + 1
    phi = np.radians(latitude)
    decl = 0.409 * np.sin(2 * np.pi * j / 365 - 1.39)
    ws = np.arccos(np.clip(-np.tan(phi) * np.tan(decl), -1.0, 1.0))
    dr = 1 + 0.033 * np.cos(2 * np.pi * j / 365)
    ra = 24 * 60 / np.pi * 0.0820 * dr * (ws * np.sin(phi) * np.sin(decl)
                                         + np.cos(phi) * np.cos(decl) * np.sin(ws))
    return 24.0 / np.pi * ws, ra


def day_length(doy: np.ndarray, latitude: float) -> np.ndarray:
    """Astronomical day length in hours (FAO-56)."""
    return _solar_geometry(np.asarray(doy), latitude)[0]


def reference_et(doy, latitude, tmin, tmax, tmean) -> np.ndarray:
    """Hargreaves reference evapotranspiration, mm/day."""
    ra = _solar_geometry(np.asarray(doy), latitude)[1]
    return np.maximum(0.0, 0.0023 * 0.408 * ra * (tmean + 17.8) * np.sqrt(np.maximum(tmax - tmin, 0.0)))


def potential_et(tmean, solar) -> np.ndarray:
    """Priestley-Taylor potential evapotranspiration, mm/day."""
    es = 0.6108 * np.exp(17.27 * tmean / (tmean + 237.3))
    slope = 4098.0 * es / (tmean + 237.3) ** 2
    rn = 0.77 * 0.6 * np.asarray(solar)
    return np.maximum(0.0, 1.26 * slope / (slope + 0.066) * rn * 0.408)


# -- synthetic weather ----------------------------------------------------------

@dataclass(frozen=True)
class ClimateProfile:
    """Seasonal cycle and noise settings for :func:`simulate_weather`."""

    name: str
    latitude: float
    longitude: float = 0.0
    tmean_mean: float = 11.0
    tmean_amplitude: float = 12.0
    peak_doy: int = 200
    diurnal_range: float = 14.0
    noise_scale: float = 3.0
    ar_coef: float = 0.7
    rain_mean: float = 1.0
    rain_amplitude: float = 0.5
    rain_prob: float = 0.25
    solar_mean: float = 15.0
    solar_amplitude: float = 10.0

    def tmean_cycle(self, doy: np.ndarray) -> np.ndarray:
        return self.tmean_mean + self.tmean_amplitude * np.cos(2 * np.pi * (np.asarray(doy) - self.peak_doy) / 365.0)


PROFILES = {
    "WA": ClimateProfile("WA", 46.29, -119.74, tmean_mean=11.5, tmean_amplitude=12.5, peak_doy=200,
                         diurnal_range=15.0, rain_mean=0.6, rain_amplitude=0.5, rain_prob=0.18),
    "VT": ClimateProfile("VT", 44.48, -73.21, tmean_mean=7.5, tmean_amplitude=14.0, peak_doy=200,
                         diurnal_range=11.0, rain_mean=2.8, rain_amplitude=-0.3, rain_prob=0.40,
                         solar_mean=13.0, solar_amplitude=9.0),
    "CA": ClimateProfile("CA", 38.30, -122.29, tmean_mean=15.0, tmean_amplitude=7.5, peak_doy=205,
                         diurnal_range=15.0, rain_mean=1.8, rain_amplitude=1.0, rain_prob=0.20,
                         solar_mean=18.0, solar_amplitude=9.0),
    "OR": ClimateProfile("OR", 45.03, -123.09, tmean_mean=11.5, tmean_amplitude=8.5, peak_doy=205,
                         diurnal_range=12.0, rain_mean=3.0, rain_amplitude=0.8, rain_prob=0.45,
                         solar_mean=14.0, solar_amplitude=9.5),
}


def _ar1(rng: np.random.Generator, n: int, phi: float, scale: float) -> np.ndarray:
    eps = rng.standard_normal(n) * scale * math.sqrt(1.0 - phi * phi)
    out = np.empty(n)
    prev = rng.standard_normal() * scale
    for i in range(n):
        prev = phi * prev + eps[i]
        out[i] = prev
    return out


def simulate_weather(seed: int, profile: ClimateProfile | str, start: date | None = None,
                     end: date | None = None) -> WeatherSeries:
    """Sinusoidal annual cycle plus AR(1) noise, in the synthetic 8-feature layout.

    Deterministic in ``seed``.  Defaults to calendar year 2001.
    """
    if isinstance(profile, str):
        profile = PROFILES[profile]
    start = start or date(2001, 1, 1)
    end = end or date(start.year, 12, 31)
    n = (end - start).days + 1
    dates = np.arange(np.datetime64(start), np.datetime64(start) + n)
    doy = (dates - dates.astype("datetime64[Y]")).astype(int)
    rng = np.random.default_rng(seed)
    base = profile.tmean_cycle(doy)
    sig = profile.noise_scale
    common = _ar1(rng, n, profile.ar_coef, sig)
    half = 0.5 * profile.diurnal_range
    draws = np.stack([
        base - half + common + 0.5 * sig * rng.standard_normal(n),
        base + common,
        base + half + common + 0.5 * sig * rng.standard_normal(n),
    ], axis=1)
    draws.sort(axis=1)
    tmin, tmean, tmax = draws.T

    season = np.cos(2 * np.pi * (doy - 15) / 365.0)
    wet_latent = _ar1(rng, n, 0.5, 1.0)
    thresh = _norm_ppf(1.0 - profile.rain_prob)
    wet = wet_latent > thresh
    mean_wet = np.maximum(profile.rain_mean * (1.0 + profile.rain_amplitude * season), 0.05) / profile.rain_prob
    rain = np.where(wet, rng.gamma(0.8, 1.0, n) * mean_wet / 0.8, 0.0)

    solar_clear = profile.solar_mean + profile.solar_amplitude * np.cos(2 * np.pi * (doy - 172) / 365.0)
    solar = np.maximum(0.5, solar_clear * np.where(wet, 0.55, 1.0) + 0.1 * sig * rng.standard_normal(n))
    dl = day_length(doy, profile.latitude)
    et0 = reference_et(doy, profile.latitude, tmin, tmax, tmean)
    etp = potential_et(tmean, solar)
    feats = np.stack([dl, tmin, tmax, tmean, et0, etp, rain, solar], axis=1)
    return WeatherSeries(dates, feats, SYNTHETIC_FEATURES, profile.name, (start, end))


def _norm_ppf(p: float) -> float:
    from scipy.special import ndtri
    return float(ndtri(p))


def simulate_season(seed: int, profile: ClimateProfile | str, kind: str, year: int) -> WeatherSeries:
    s, e = season_bounds(kind, year)
    return simulate_weather(seed, profile, s, e)


# -- NASA POWER client --------------------------------------------------------

POWER_PARAMETERS = ("T2M", "T2M_MIN", "T2M_MAX", "PRECTOTCORR", "ALLSKY_SFC_SW_DWN")


@dataclass(frozen=True)
class FetchConfig:
    base_url: str = "https://power.larc.nasa.gov/api/temporal/daily/point"
    timeout: float = 60.0
    retries: int = 3
    max_in_flight: int = 4

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "FetchConfig":
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - {"base_url", "timeout", "retries", "max_in_flight"}
        if unknown:
            raise ValueError(f"unknown fetch config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        if not 1 <= cfg.max_in_flight <= 4:
            raise ValueError("max_in_flight must be within 1..4")
        return cfg


_cache_locks: dict[str, threading.Lock] = {}
_cache_locks_guard = threading.Lock()


def _lock_for(key: str) -> threading.Lock:
    with _cache_locks_guard:
        return _cache_locks.setdefault(key, threading.Lock())


def cache_path(cache_dir: str | os.PathLike, lat: float, lon: float, year: int,
               profile: str = "synthetic") -> Path:
    return Path(cache_dir) / f"power_{lat:.4f}_{lon:.4f}_{year}_{profile}.csv"


def parse_power_json(doc: Mapping, lat: float) -> WeatherSeries:
    """Turn a NASA POWER daily-point JSON payload into the synthetic layout."""
    try:
        params = doc["properties"]["parameter"]
    except (KeyError, TypeError):
        raise WeatherSchemaError("payload lacks properties.parameter") from None
    missing = [p for p in POWER_PARAMETERS if p not in params]
    if missing:
        raise WeatherSchemaError(f"payload lacks parameters {missing}")
    keys = sorted(params["T2M"])
    try:
        days = [date(int(k[:4]), int(k[4:6]), int(k[6:8])) for k in keys]
    except ValueError:
        raise WeatherSchemaError(f"unexpected date key format {keys[:1]}") from None
    raw = {p: np.array([float(params[p].get(k, -999.0)) for k in keys]) for p in POWER_PARAMETERS}
    missing_day = np.zeros(len(keys), bool)
    for v in raw.values():
        missing_day |= v <= -999.0
    tmean, tmin, tmax = raw["T2M"], raw["T2M_MIN"], raw["T2M_MAX"]
    rain, solar = np.maximum(raw["PRECTOTCORR"], 0.0), np.maximum(raw["ALLSKY_SFC_SW_DWN"], 0.0)
    dates = np.array(days, dtype="datetime64[D]")
    doy = (dates - dates.astype("datetime64[Y]")).astype(int)
    feats = np.stack([day_length(doy, lat), tmin, tmax, tmean,
                      reference_et(doy, lat, tmin, tmax, tmean), potential_et(tmean, solar),
                      rain, solar], axis=1)
    mask = np.repeat(missing_day[:, None], feats.shape[1], axis=1)
    feats[mask] = 0.0
    return WeatherSeries(dates, feats, SYNTHETIC_FEATURES, f"{lat:.4f}", (days[0], days[-1]), mask)


def _read_cached(path: Path) -> WeatherSeries:
    (series,) = load_csv(path, CsvSchema.default(), window=None).values()
    return series


def fetch_weather(location: tuple[float, float], years: Iterable[int], cache_dir: str | os.PathLike,
                  config: FetchConfig | None = None, session=None) -> dict[int, WeatherSeries]:
    """Daily NASA POWER weather per calendar year, cached as one CSV per year.

    Cached years never touch the network.  ``session`` only needs a
    ``get(url, params=..., timeout=...)`` method returning an object with
    ``raise_for_status()`` and ``json()``; it defaults to ``requests``.
    """
    config = config or FetchConfig()
    lat, lon = round(location[0], 4), round(location[1], 4)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    if session is None:
        import requests
        session = requests

    def one(year: int) -> WeatherSeries:
        path = cache_path(cache_dir, lat, lon, year)
        with _lock_for(str(path)):
            if path.exists():
                return _read_cached(path)
        params = {"parameters": ",".join(POWER_PARAMETERS), "community": "AG",
                  "latitude": lat, "longitude": lon, "start": f"{year}0101",
                  "end": f"{year}1231", "format": "JSON"}
        last = None
        for attempt in range(config.retries + 1):
            try:
                resp = session.get(config.base_url, params=params, timeout=config.timeout)
                resp.raise_for_status()
                doc = resp.json()
                break
            except Exception as exc:  # network layer errors vary by client
                last = exc
                log.warning("POWER request for %s failed (attempt %d): %s", year, attempt + 1, exc)
        else:
            raise WeatherFetchError(f"could not fetch {year} for ({lat}, {lon}): {last}", retryable=True)
        series = parse_power_json(doc, lat)
        with _lock_for(str(path)):
            tmp = path.with_suffix(".tmp")
            write_csv(tmp, [series])
            os.replace(tmp, path)
        return _read_cached(path)

    years = list(years)
    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        return dict(zip(years, pool.map(one, years)))


def season_from_year(calendar: Mapping[int, WeatherSeries], kind: str, year: int) -> WeatherSeries:
    """Cut a season window out of consecutive calendar-year series."""
    s, e = season_bounds(kind, year)
    parts = [calendar[y] for y in range(s.year, e.year + 1)]
    full = parts[0]
    for p in parts[1:]:
        full = full.concat(p)
    i0 = int((np.datetime64(s) - full.dates[0]).astype(int))
    i1 = int((np.datetime64(e) - full.dates[0]).astype(int)) + 1
    if i0 < 0 or i1 > len(full):
        raise ValueError(f"weather does not cover {s}..{e}")
    return replace(full.slice(i0, i1), season_window=(s, e))
