"""Synthetic labelled datasets produced by rolling the reference models over weather.

Labels always come from :func:`~hybridcrop.biophys.oracle_gdd` /
:func:`~hybridcrop.biophys.oracle_ferguson`, never from the differentiable
path, so the generator is an independent check on the latter.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import biophys as bp
from . import weatherdata as wd
from .data import Season

log = logging.getLogger(__name__)

TASK = {"gdd": "phenology", "ferguson": "hardiness"}

# Sub-ranges used to draw synthetic cultivars.  The model ranges are wider
# than what lets a season reach veraison before the window closes, so the
# GDD thresholds are drawn from the lower part of each range.
SAMPLING_SPECS = {
    "gdd": bp.GDD_SPEC.with_range("tbasem", 4.0, 10.0).with_range("teffmx", 25.0, 35.0)
    .with_range("tsumem", 10.0, 100.0).with_range("tsum1", 100.0, 300.0)
    .with_range("tsum2", 250.0, 500.0).with_range("tsum3", 300.0, 600.0)
    .with_range("tsum4", 200.0, 600.0),
    "ferguson": bp.FERGUSON_SPEC,
}


@dataclass
class CultivarTable:
    model: str
    names: tuple[str, ...]
    params: np.ndarray
    provenance: str

    def __len__(self):
        return len(self.names)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: self.params[i] for i, n in enumerate(self.names)}

    def save(self, path: str | os.PathLike) -> None:
        spec = bp.SPECS[self.model]
        doc = {"model": self.model, "provenance": self.provenance,
               "cultivars": {n: spec.to_json(self.params[i]) for i, n in enumerate(self.names)}}
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CultivarTable":
        doc = json.loads(Path(path).read_text())
        spec = bp.SPECS[doc["model"]]
        names = tuple(sorted(doc["cultivars"], key=_natural))
        rows = []
        for n in names:
            vals = {r["name"]: float(r["value"]) for r in doc["cultivars"][n]}
            rows.append([vals[k] for k in spec.names])
        return cls(doc["model"], names, np.array(rows), doc.get("provenance", f"file:{path}"))


def _natural(name: str):
    digits = "".join(ch for ch in name if ch.isdigit())
    return (int(digits) if digits else 0, name)


def sample_cultivars(seed: int, n: int, spec: bp.ParamSpec | str, shrink: float = 0.5,
                     model: str | None = None) -> CultivarTable:
    """Draw ``n`` parameter vectors uniformly from ``midpoint +/- shrink * halfwidth``."""
    if isinstance(spec, str):
        model = model or spec
        spec = SAMPLING_SPECS[spec]
    if model is None:
        model = "gdd" if len(spec) == len(bp.GDD_SPEC) else "ferguson"
    if not 0.0 <= shrink <= 1.0:
        raise ValueError("shrink must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=(n, len(spec)))
    params = spec.midpoint + shrink * u * spec.width / 2.0
    names = tuple(f"C{i:02d}" for i in range(n))
    return CultivarTable(model, names, params, f"sampled({seed})")


@dataclass(frozen=True)
class Modulation:
    """Daily perturbation ``param += amplitude * tanh((m_t - center) / scale)``.

    ``m_t`` is the trailing ``window``-day mean of raw ``feature`` within the
    season (shorter at the start).  ``center`` / ``scale`` default to the
    pooled mean / std of ``m_t`` over the dataset's weather.
    """

    param: str = "tbasem"
    feature: str = "rain"
    window: int = 30
    amplitude: float = 2.0
    center: float | None = None
    scale: float | None = None

    def driver(self, weather: wd.WeatherSeries) -> np.ndarray:
        x = weather.raw_column(self.feature)
        c = np.cumsum(np.concatenate([[0.0], x]))
        t = np.arange(len(x))
        lo = np.maximum(0, t - self.window + 1)
        return (c[t + 1] - c[lo]) / (t + 1 - lo)

    def fitted(self, weathers: Sequence[wd.WeatherSeries]) -> "Modulation":
        if self.center is not None and self.scale is not None:
            return self
        m = np.concatenate([self.driver(w) for w in weathers])
        sd = float(m.std()) or 1.0
        return Modulation(self.param, self.feature, self.window, self.amplitude,
                          float(m.mean()) if self.center is None else self.center,
                          sd if self.scale is None else self.scale)

    def trace(self, weather: wd.WeatherSeries, base: np.ndarray, spec: bp.ParamSpec) -> np.ndarray:
        """(T, d) daily parameters, clamped into ``spec``."""
        i = spec.index(self.param)
        out = np.tile(base, (len(weather), 1))
        out[:, i] += self.amplitude * np.tanh((self.driver(weather) - self.center) / self.scale)
        clipped = np.clip(out, spec.lo, spec.hi)
        if np.any(clipped != out):
            log.info("modulated %s left its range on %d days; clamped", self.param,
                     int(np.sum(clipped != out)))
        return clipped


@dataclass
class SynthDataset:
    model: str
    seasons: list[Season]
    table: CultivarTable
    meta: dict = field(default_factory=dict)
    incomplete: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return TASK[self.model]

    def by_key(self) -> dict[tuple, Season]:
        return {s.key: s for s in self.seasons}

    def observed_fraction(self) -> float:
        n = sum(int(s.target.mask.sum()) for s in self.seasons)
        return n / max(1, sum(len(s) for s in self.seasons))


def _weather_seed(seed: int, year: int, location: str) -> int:
    ss = np.random.SeedSequence([seed, year, zlib.crc32(location.encode())])
    return int(ss.generate_state(1)[0])


def synth_weather(model: str, years: Sequence[int], profile: str = "WA", seed: int = 0) -> dict[int, wd.WeatherSeries]:
    """Seasonal weather per year for one location, deterministic in ``seed``."""
    kind = TASK[model]
    return {y: wd.simulate_season(_weather_seed(seed, y, profile), profile, kind, y) for y in years}


def _mask(rng: np.random.Generator, T: int, mask_frac: float, mode: str) -> np.ndarray:
    if mask_frac <= 0:
        return np.ones(T, bool)
    if mode == "iid":
        return rng.random(T) >= mask_frac
    if mode == "weekly":
        every = max(1, int(round(1.0 / max(1e-9, 1.0 - mask_frac))))
        m = np.zeros(T, bool)
        m[rng.integers(every)::every] = True
        return m
    raise ValueError(f"unknown mask mode {mode!r}")


def _label(model: str, weather: wd.WeatherSeries, params: np.ndarray, cfg: bp.GddConfig) -> bp.CropStateSeries:
    if model == "gdd":
        return bp.oracle_gdd(weather, params, cfg)
    return bp.oracle_ferguson(weather, params)


def generate(model: str, table: CultivarTable, weather: Mapping[int, wd.WeatherSeries],
             years: int | Sequence[int] | None = 10, mask_frac: float | None = None, seed: int = 0,
             mask_mode: str = "iid", location: str | None = None,
             modulation: Modulation | None = None, cfg: bp.GddConfig = bp.GddConfig()) -> SynthDataset:
    """Label every (cultivar, year) season with the reference model.

    ``mask_frac`` defaults to 0.88 for hardiness and 0 for phenology.
    Phenology seasons that miss bud break, bloom or veraison are listed in
    ``incomplete`` (and kept).
    """
    if model not in TASK:
        raise ValueError(f"unknown model {model!r}")
    all_years = sorted(weather)
    if years is None:
        use = all_years
    elif isinstance(years, int):
        use = all_years[:years]
    else:
        use = list(years)
    if mask_frac is None:
        mask_frac = 0.88 if model == "ferguson" else 0.0
    spec = bp.SPECS[model]
    if not all(spec.contains(p) for p in table.params):
        raise ValueError("cultivar table has parameters outside the model ranges")
    if modulation is not None:
        modulation = modulation.fitted([weather[y] for y in use])
    loc = location or (weather[use[0]].location_id if use else "")
    seasons, incomplete, traces = [], [], {}
    for ci, name in enumerate(table.names):
        for y in use:
            w = weather[y]
            p = table.params[ci]
            if modulation is not None:
                p = modulation.trace(w, p, spec)
                traces[(ci, y, loc)] = p
            lab = _label(model, w, p, cfg)
            if model == "ferguson":
                rng = np.random.default_rng([seed, ci, y, zlib.crc32(loc.encode())])
                lab.mask = _mask(rng, len(w), mask_frac, mask_mode)
            elif not np.all(np.isfinite(lab.onsets[1:4])):
                incomplete.append((name, y))
            seasons.append(Season(ci, y, w, lab, loc, name))
    if incomplete:
        log.warning("%d phenology seasons miss an onset: %s", len(incomplete), incomplete[:5])
    meta = {"model": model, "seed": seed, "mask_frac": mask_frac, "mask_mode": mask_mode,
            "location": loc, "years": list(use), "table": table.provenance,
            "pooled_budbreak": cfg.pooled_budbreak, "carry_overshoot": cfg.carry_overshoot,
            "modulation": asdict(modulation) if modulation else None}
    return SynthDataset(model, seasons, table, meta, incomplete, traces)


def generate_nonstationary(model: str, table: CultivarTable, weather: Mapping[int, wd.WeatherSeries],
                           modulation: Modulation = Modulation(), **kw) -> SynthDataset:
    """Like :func:`generate`, but a parameter drifts daily with an exogenous driver."""
    return generate(model, table, weather, modulation=modulation, **kw)


# -- recipes -----------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Everything needed to rebuild a dataset bit for bit."""

    model: str = "gdd"
    n_cultivars: int = 5
    years: int = 8
    first_year: int = 2001
    seed: int = 0
    table_seed: int | None = None
    shrink: float = 0.8
    profile: str = "WA"
    mask_frac: float | None = None
    mask_mode: str = "iid"
    modulation: dict | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def build(cfg: SynthConfig, profile: str | None = None, table: CultivarTable | None = None) -> SynthDataset:
    """Weather, cultivar table and labels from a :class:`SynthConfig`."""
    prof = profile or cfg.profile
    ts = cfg.seed if cfg.table_seed is None else cfg.table_seed
    table = table or sample_cultivars(ts, cfg.n_cultivars, SAMPLING_SPECS[cfg.model], cfg.shrink, cfg.model)
    years = list(range(cfg.first_year, cfg.first_year + cfg.years))
    weather = synth_weather(cfg.model, years, prof, cfg.seed)
    mod = Modulation(**cfg.modulation) if cfg.modulation else None
    ds = generate(cfg.model, table, weather, years, cfg.mask_frac, cfg.seed, cfg.mask_mode, prof, mod)
    ds.meta["config"] = asdict(cfg)
    ds.meta["profile"] = prof
    return ds


# -- on-disk layout --------------------------------------------------------------

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_if_changed(path: Path, text: str) -> None:
    if path.exists() and path.read_text() == text:
        return
    path.write_text(text)


def save_dataset(ds: SynthDataset, root: str | os.PathLike) -> Path:
    """Directory of CSVs plus ``meta.json``, ``cultivars.json`` and ``manifest.json``.

    Files whose content would not change are left untouched.
    """
    root = Path(root)
    (root / "weather").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    manifest = []
    written = set()
    for s in ds.seasons:
        wname = f"weather/{s.location}_{s.year}.csv"
        if wname not in written:
            w = s.weather
            names = w.raw_names if w.raw is not None else w.names
            src = w.raw if w.raw is not None else w.features
            rows = [[str(d), w.location_id, *[repr(float(x)) for x in r]] for d, r in zip(w.dates, src)]
            _write_if_changed(root / wname, _csv_text(["date", "location", *names], rows))
            written.add(wname)
        lname = f"labels/{s.cultivar_name}_{s.location}_{s.year}.csv"
        t = s.target
        header = ["date", "value", "observed"]
        cols = [t.values, t.mask.astype(int)]
        if t.phase is not None:
            header.append("ecodormant")
            cols.append(t.phase.astype(int))
        trace = ds.traces.get((s.cultivar, s.year, s.location))
        if trace is not None:
            spec = bp.SPECS[ds.model]
            header += [f"param_{n}" for n in spec.names]
        rows = []
        for i, d in enumerate(s.weather.dates):
            r = [str(d), repr(float(t.values[i])), int(t.mask[i])]
            if t.phase is not None:
                r.append(int(t.phase[i]))
            if trace is not None:
                r += [repr(float(x)) for x in trace[i]]
            rows.append(r)
        _write_if_changed(root / lname, _csv_text(header, rows))
        manifest.append({"cultivar": s.cultivar_name, "cultivar_index": s.cultivar, "year": s.year,
                         "location": s.location, "weather": wname, "labels": lname})
    _write_if_changed(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    _write_if_changed(root / "meta.json", json.dumps(
        {**ds.meta, "incomplete": [list(x) for x in ds.incomplete]}, indent=1, sort_keys=True))
    tmp = root / "cultivars.json.new"
    ds.table.save(tmp)
    _write_if_changed(root / "cultivars.json", tmp.read_text())
    tmp.unlink()
    return root


def load_dataset(root: str | os.PathLike) -> SynthDataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    manifest = json.loads((root / "manifest.json").read_text())
    table = CultivarTable.load(root / "cultivars.json")
    model = meta["model"]
    weather_cache: dict[str, wd.WeatherSeries] = {}
    seasons, traces = [], {}
    for e in manifest:
        if e["weather"] not in weather_cache:
            got = wd.load_csv(root / e["weather"], window=None, location=e["location"])
            weather_cache[e["weather"]] = next(iter(got.values()))
        w = weather_cache[e["weather"]]
        with open(root / e["labels"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        vals = np.array([float(r["value"]) for r in rows])
        mask = np.array([r["observed"] == "1" for r in rows])
        phase = np.array([r["ecodormant"] == "1" for r in rows]) if rows and "ecodormant" in rows[0] else None
        target = bp.CropStateSeries(TASK[model], vals, mask, phase=phase, dates=w.dates)
        pcols = [k for k in (rows[0] if rows else {}) if k.startswith("param_")]
        if pcols:
            traces[(e["cultivar_index"], e["year"], e["location"])] = np.array(
                [[float(r[k]) for k in pcols] for r in rows])
        seasons.append(Season(e["cultivar_index"], e["year"], w, target, e["location"], e["cultivar"]))
    incomplete = [tuple(x) for x in meta.pop("incomplete", [])]
    return SynthDataset(model, seasons, table, meta, incomplete, traces)
