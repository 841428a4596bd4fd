"""Command-line entry point.

Every command merges defaults, an optional JSON ``--config`` file and
explicit flags (later wins), validates the result, archives it as
``config.json`` in ``<runs>/<command>/<name>/`` and writes its artifacts
next to it.  Unknown configuration keys exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import adapt as ap
from . import baselines as bl
from . import biophys as bp
from . import evalbench as eb
from . import gradtrain as gt
from . import hybrid as hy
from . import synthgen as sg
from . import weatherdata as wd
from .data import with_norm

log = logging.getLogger("hybridcrop")

CACHE_ENV = "HYBRIDCROP_CACHE"
EXIT_USAGE = 2
EXIT_FAILURE = 1

_COMMON = {"name": "default", "runs": "runs"}
_NET = {"pre_dims": [64], "recur_dim": 64, "post_dims": [64], "arch": "gru"}
_TRAIN = {"epochs": 400, "learning_rate": None, "batch_size": None}

DEFAULTS: dict[str, dict[str, Any]] = {
    "fetch": {**_COMMON, "lat": None, "lon": None, "years": None, "cache": None,
              "fetch_config": None},
    "synth": {**_COMMON, "model": "gdd", "n_cultivars": 5, "years": 8, "first_year": 2001,
              "seed": 0, "table_seed": None, "shrink": 0.8, "profile": "WA", "mask_frac": None,
              "mask_mode": "iid", "modulation": None},
    "preprocess": {**_COMMON, "input": None, "window": "phenology", "max_missing": 0.10},
    "train": {**_COMMON, **_NET, **_TRAIN, "kind": "dmc-mtl", "dataset": None, "seed": 0,
              "split_seed": None, "n_seasons": None, "static": "gd", "base_checkpoint": None,
              "obs_every": 1, "een_arch": "gru", "resume": False},
    "eval": {**_COMMON, **_NET, **_TRAIN, "experiment": "headline", "dataset": None,
             "models": ["gd", "dmc-mtl"], "seeds": list(eb.CANONICAL_SEEDS), "counts": [1, 2, 4],
             "checkpoints": None, "datasets": None, "static": "gd", "thresholds": None,
             "jobs": 1},
    "forecast": {**_COMMON, "checkpoint": None, "een": None, "past": None, "future": None,
                 "observations": None, "horizon": 14, "cultivar": 0},
    "attribute": {**_COMMON, "checkpoint": None, "weather": None, "dataset": None, "season": 0,
                  "cultivar": 0, "day": -1, "param": 0, "steps": 256, "baseline": "mean",
                  "rule": "right"},
}

REQUIRED = {"fetch": ("lat", "lon", "years"), "preprocess": ("input",), "train": ("dataset",),
            "eval": ("dataset",), "forecast": ("checkpoint", "past", "future"),
            "attribute": ("checkpoint",)}


class UsageError(Exception):
    """Bad configuration or arguments; exits with status 2."""


class CommandError(Exception):
    """A command could not complete; exits with status 1."""


# -- configuration ---------------------------------------------------------------

def load_config(command: str, path: str | None, overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Defaults, then the config file, then flag overrides; unknown keys are rejected."""
    cfg = dict(DEFAULTS[command])
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]!r} for {command}")
        cfg.update(doc)
    cfg.update(overrides)
    missing = [k for k in REQUIRED.get(command, ()) if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command} needs {', '.join(missing)}")
    return cfg


def run_dir(command: str, cfg: Mapping[str, Any]) -> Path:
    return Path(cfg["runs"]) / command / str(cfg["name"])


def _write_if_changed(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists() and path.read_text() == text:
        return
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(eb._jsonable(obj), indent=1, sort_keys=True) + "\n"


def archive_config(out: Path, cfg: Mapping[str, Any]) -> None:
    _write_if_changed(out / "config.json", _dump(dict(cfg)))


def _years(v) -> list[int]:
    if isinstance(v, str):
        if "-" in v:
            a, b = v.split("-", 1)
            return list(range(int(a), int(b) + 1))
        return [int(y) for y in v.split(",") if y]
    if isinstance(v, int):
        return [v]
    return [int(y) for y in v]


def cache_dir(cfg: Mapping[str, Any]) -> Path:
    if cfg.get("cache"):
        return Path(cfg["cache"])
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "hybridcrop"


# -- fetch / synth / preprocess ---------------------------------------------------------

def cmd_fetch(cfg: Mapping[str, Any]) -> Path:
    out = run_dir("fetch", cfg)
    fc = wd.FetchConfig.from_file(cfg["fetch_config"]) if cfg.get("fetch_config") else None
    years = _years(cfg["years"])
    try:
        got = wd.fetch_weather((float(cfg["lat"]), float(cfg["lon"])), years, cache_dir(cfg), fc)
    except wd.WeatherFetchError as exc:
        raise CommandError(str(exc)) from None
    archive_config(out, cfg)
    wd.write_csv(out / "weather.csv", [got[y] for y in years])
    print(f"fetched {len(years)} years -> {out / 'weather.csv'}")
    return out


def cmd_synth(cfg: Mapping[str, Any]) -> Path:
    out = run_dir("synth", cfg)
    keys = set(sg.SynthConfig.__dataclass_fields__)
    sc = sg.SynthConfig.from_dict({k: v for k, v in cfg.items() if k in keys})
    if sc.model not in sg.TASK:
        raise UsageError(f"unknown model {sc.model!r}")
    ds = sg.build(sc)
    archive_config(out, cfg)
    sg.save_dataset(ds, out)
    for key in ds.incomplete:
        log.warning("season %s never reaches veraison", key)
    print(f"{len(ds.seasons)} seasons ({ds.task}) -> {out}")
    return out


def cmd_preprocess(cfg: Mapping[str, Any]) -> Path:
    out = run_dir("preprocess", cfg)
    window = cfg["window"] or None
    try:
        seasons = wd.load_csv(cfg["input"], window=window)
    except (OSError, wd.WeatherParseError) as exc:
        raise CommandError(str(exc)) from None
    kept, discarded = [], []
    for (loc, year), s in seasons.items():
        frac = s.missing_mask.mean(axis=0) if len(s) else np.zeros(len(s.names))
        clean = wd.clean_season(s, cfg["max_missing"])
        if clean is None:
            worst = int(np.argmax(frac))
            discarded.append({"location": loc, "year": year, "feature": s.names[worst],
                              "missing_fraction": float(frac[worst])})
            continue
        kept.append(replace(clean, missing_mask=np.zeros(clean.features.shape, bool)))
    archive_config(out, cfg)
    if kept:
        buf = out / "clean.csv"
        wd.write_csv(buf, kept)
        _write_if_changed(out / "norm.json", _dump(wd.fit_norm(kept).to_json()))
    _write_if_changed(out / "discarded.json", _dump(discarded))
    print(f"kept {len(kept)} seasons, discarded {len(discarded)} -> {out}")
    return out


# -- training -------------------------------------------------------------------------

def _net_kw(cfg: Mapping[str, Any]) -> dict:
    return {"pre_dims": tuple(cfg["pre_dims"]), "recur_dim": int(cfg["recur_dim"]),
            "post_dims": tuple(cfg["post_dims"]), "arch": cfg["arch"]}


def _train_config(kind: str, cfg: Mapping[str, Any], seed: int) -> gt.TrainConfig:
    kw = {"epochs": int(cfg["epochs"]), "seed": int(seed)}
    if cfg.get("learning_rate") is not None:
        kw["learning_rate"] = float(cfg["learning_rate"])
    if cfg.get("batch_size") is not None:
        kw["batch_size"] = int(cfg["batch_size"])
    return gt.TrainConfig.preset(kind, **kw)


def load_data(path) -> sg.SynthDataset:
    try:
        return sg.load_dataset(path)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot load dataset {path}: {exc}") from None


def prepare_split(ds: sg.SynthDataset, split_seed: int, n_seasons: int | None = None):
    """Split, optionally thin the training seasons, and normalise on the training weather."""
    plan = eb.make_splits(ds.seasons, split_seed)
    train, val, test = plan.apply(ds.seasons)
    if n_seasons:
        train = eb.limit_seasons(train, int(n_seasons), split_seed)
    if not train:
        raise CommandError("the split leaves no training seasons")
    stats = wd.fit_norm([s.weather for s in train])
    return plan, stats, *[with_norm(x, stats) for x in (train, val, test)]


def _static_for(kind: str, source: str, ds: sg.SynthDataset, train, val, seed: int,
                out: Path | None, resume: bool) -> bl.StaticBio | None:
    if kind not in ("deployed", "pinn", "residual"):
        return None
    if kind == "deployed" or source == "deployed":
        return bl.StaticBio(ds.model, {i: ds.table.params[i] for i in range(len(ds.table.names))})
    sub = None if out is None else out / "static"
    return bl.fit_gd(ds.model, train, len(ds.table.names), gt.TrainConfig.preset("gd", seed=seed),
                     val, sub, resume)


def train_predictor(kind: str, ds: sg.SynthDataset, train, val, seed: int, cfg: Mapping[str, Any],
                    out: Path | None = None, resume: bool = False):
    """Fit one predictor of ``kind`` on already normalised seasons."""
    static = _static_for(kind, cfg.get("static", "gd"), ds, train, val, seed, out, resume)
    if kind == "deployed":
        return static
    tc = _train_config(kind, cfg, seed)
    net_kw = _net_kw(cfg) if kind not in ("deployed", "gd", "temphybrid") else {}
    sub = None if out is None else out / "training"
    return bl.fit_baseline(kind, ds.model, train, len(ds.table.names), seed, tc, val, sub,
                           static, resume, **net_kw)


def _final_losses(out: Path) -> tuple[float, float]:
    logs = [out / "loss_log.csv"] if (out / "loss_log.csv").exists() else sorted(out.glob("*/loss_log.csv"))
    tr, va = [], []
    for p in logs:
        rows = gt.read_loss_log(p)
        if rows:
            tr.append(rows[-1]["train_loss"])
            va.append(rows[-1]["val_loss"])
    return (float(np.mean(tr)) if tr else float("nan"), float(np.mean(va)) if va else float("nan"))


def _norm_path(checkpoint: Path) -> Path:
    return Path(checkpoint).with_name("norm.json")


def load_norm(checkpoint) -> wd.NormStats:
    p = _norm_path(Path(checkpoint))
    if not p.exists():
        raise CommandError(f"no norm.json next to {checkpoint}")
    return wd.NormStats.from_json(json.loads(p.read_text()))


def load_dmc(path) -> hy.DmcModel:
    try:
        pred = bl.load_predictor(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot load {path}: {exc}") from None
    if not isinstance(pred, bl.DmcPredictor):
        raise CommandError(f"{path} does not hold a multi-cultivar DMC model")
    return pred.model


def cmd_train(cfg: Mapping[str, Any]) -> Path:
    kind = cfg["kind"]
    valid = {k.value for k in bl.BaselineKind} | {"een"}
    if kind not in valid:
        raise UsageError(f"unknown kind {kind!r}; choose from {sorted(valid)}")
    if kind == "een" and not cfg.get("base_checkpoint"):
        raise UsageError("--kind een needs --base-checkpoint")
    out = run_dir("train", cfg)
    if cfg["resume"] and not out.exists():
        raise UsageError(f"nothing to resume in {out}")
    ds = load_data(cfg["dataset"])
    seed = int(cfg["seed"])
    split_seed = seed if cfg["split_seed"] is None else int(cfg["split_seed"])
    archive_config(out, {k: v for k, v in cfg.items() if k != "resume"})

    if kind == "een":
        base = load_dmc(cfg["base_checkpoint"])
        stats = load_norm(cfg["base_checkpoint"])
        plan = eb.make_splits(ds.seasons, split_seed)
        train, val, _ = plan.apply(ds.seasons)
        if cfg["n_seasons"]:
            train = eb.limit_seasons(train, int(cfg["n_seasons"]), split_seed)
        train, val = with_norm(train, stats), with_norm(val, stats)
        een, _ = ap.train_een(base, train, _train_config("een", cfg, seed), val, out / "training",
                              seed, cfg["een_arch"], int(cfg["obs_every"]), resume=bool(cfg["resume"]))
        ap.save_een(out / "model.ckpt", een, base)
    else:
        plan, stats, train, val, _ = prepare_split(ds, split_seed, cfg["n_seasons"])
        pred = train_predictor(kind, ds, train, val, seed, cfg, out, bool(cfg["resume"]))
        pred.save(out / "model.ckpt")
    _write_if_changed(out / "norm.json", _dump(stats.to_json()))
    _write_if_changed(out / "split.json", _dump(plan.to_dict()))
    tl, vl = _final_losses(out / "training") if (out / "training").exists() else (float("nan"),) * 2
    print(f"final train_loss {tl:.6g} val_loss {vl:.6g} -> {out / 'model.ckpt'}")
    return out / "model.ckpt"


# -- evaluation ---------------------------------------------------------------------------

def _fit_and_score(job: tuple) -> tuple:
    """Worker: train ``kind`` on one seed's split and score its test seasons."""
    kind, seed, n, cfg = job
    ds = load_data(cfg["dataset"])
    _, _, train, val, test = prepare_split(ds, seed, n)
    pred = train_predictor(kind, ds, train, val, seed, cfg)
    scores = eb.evaluate(pred, test, check_realism=True)
    return kind, seed, n, scores


def _run_jobs(jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [_fit_and_score(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_fit_and_score, jobs))


def _checkpoint_predictors(cfg: Mapping[str, Any]) -> dict[str, tuple[object, wd.NormStats]]:
    ck = cfg.get("checkpoints") or {}
    if not isinstance(ck, Mapping) or not ck:
        raise UsageError("this experiment needs checkpoints as a name -> path mapping")
    out = {}
    for name, path in sorted(ck.items()):
        try:
            out[name] = (bl.load_predictor(path), load_norm(path))
        except (OSError, ValueError, KeyError) as exc:
            raise CommandError(f"cannot load {path}: {exc}") from None
    return out


def _stage_svg(rows: Mapping[str, np.ndarray], title: str) -> str:
    return eb.svg_chart({m: ([1, 2, 3], v) for m, v in rows.items()}, title,
                        "stage (1 bud break, 2 bloom, 3 veraison)", "RMSE")


def cmd_eval(cfg: Mapping[str, Any]) -> Path:
    exp = cfg["experiment"]
    if exp not in ("headline", "sweep", "robustness", "coverage", "perstage"):
        raise UsageError(f"unknown experiment {exp!r}")
    out = run_dir("eval", cfg)
    ds = load_data(cfg["dataset"])
    seeds = [int(s) for s in cfg["seeds"]]
    base_cfg = {k: v for k, v in cfg.items() if k not in ("checkpoints", "datasets")}
    archive_config(out, cfg)

    if exp in ("headline", "coverage"):
        jobs = [(m, s, None, base_cfg) for s in seeds for m in cfg["models"]]
        rep = eb.EvalReport()
        for kind, seed, _, scores in _run_jobs(jobs, int(cfg["jobs"])):
            rep.add(kind, seed, scores)
        thr = cfg["thresholds"]
        if thr is None:
            top = max([c["rmse"] for c in rep.cells] + [1.0])
            thr = np.linspace(0.0, top, 41).tolist()
        eb.write_report(out, exp, rep, thr)
        header, rows = eb.headline_table({ds.task: rep})
        eb.write_csv(out / f"{exp}_table.csv", header, rows)
    elif exp == "sweep":
        jobs = [(m, s, int(n), base_cfg) for s in seeds for n in cfg["counts"] for m in cfg["models"]]
        rows = []
        for kind, seed, n, scores in _run_jobs(jobs, int(cfg["jobs"])):
            rows.append([kind, n, seed, eb.mean_rmse(scores)])
        eb.write_csv(out / "sweep.csv", ["model", "seasons", "seed", "rmse"], rows)
        series = {}
        for m in cfg["models"]:
            xs = sorted({r[1] for r in rows if r[0] == m})
            ys = [float(np.nanmean([r[3] for r in rows if r[0] == m and r[1] == x])) for x in xs]
            series[m] = (xs, ys)
        (out / "sweep.svg").write_text(eb.svg_chart(series, "data-limited sweep",
                                                    "training seasons per cultivar", "RMSE"))
    elif exp == "robustness":
        preds = _checkpoint_predictors(cfg)
        dsets = cfg.get("datasets") or {}
        if not isinstance(dsets, Mapping) or not dsets:
            raise UsageError("robustness needs datasets as a location -> dataset mapping")
        loaded = {loc: load_data(p).seasons for loc, p in sorted(dsets.items())}
        header = ["model", *loaded]
        rows = []
        for name, (p, stats) in preds.items():
            res = eb.robustness_eval({name: p}, {loc: with_norm(s, stats) for loc, s in loaded.items()})
            rows.append([name, *[res[name][loc] for loc in loaded]])
        eb.write_csv(out / "robustness.csv", header, rows)
    else:
        preds = _checkpoint_predictors(cfg)
        plan = eb.make_splits(ds.seasons, seeds[0])
        _, _, test = plan.apply(ds.seasons)
        errs = {name: eb.per_stage_error({name: p}, with_norm(test, stats))[name]
                for name, (p, stats) in preds.items()}
        table = {name: eb.stage_rmse(e) for name, e in errs.items()}
        eb.write_csv(out / "perstage.csv", ["model", "budbreak", "bloom", "veraison"],
                     [[n, *v] for n, v in table.items()])
        (out / "perstage.svg").write_text(_stage_svg(table, "per-stage onset error"))
    print(f"{exp} report -> {out}")
    return out


# -- forecast and attribution -------------------------------------------------------------

def _one_series(path, stats: wd.NormStats) -> wd.WeatherSeries:
    try:
        got = wd.load_csv(path, window=None)
    except (OSError, wd.WeatherParseError) as exc:
        raise CommandError(f"{path}: {exc}") from None
    if len(got) != 1:
        raise CommandError(f"{path} must hold exactly one location")
    s = next(iter(got.values()))
    if s.missing_mask.any():
        clean = wd.clean_season(s)
        if clean is None:
            raise CommandError(f"{path}: too many missing values")
        s = replace(clean, missing_mask=np.zeros(clean.features.shape, bool))
    return s


def read_observations(path, cultivar) -> dict:
    """Observation CSV (date, cultivar, value) -> {date: value} for one cultivar."""
    out = {}
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                if str(row["cultivar"]).strip() != str(cultivar):
                    continue
                out[np.datetime64(row["date"].strip(), "D")] = float(row["value"])
            except (KeyError, ValueError) as exc:
                raise CommandError(f"{path}:{i}: bad observation row ({exc})") from None
    return out


def cmd_forecast(cfg: Mapping[str, Any]) -> Path:
    out = run_dir("forecast", cfg)
    model = load_dmc(cfg["checkpoint"])
    stats = load_norm(cfg["checkpoint"])
    cult = int(cfg["cultivar"])
    past_raw, fut_raw = _one_series(cfg["past"], stats), _one_series(cfg["future"], stats)
    horizon = int(cfg["horizon"])
    if horizon > len(fut_raw):
        raise CommandError(f"horizon {horizon} exceeds the {len(fut_raw)} days of future weather")
    obs = read_observations(cfg["observations"], cfg["cultivar"]) if cfg.get("observations") else {}
    archive_config(out, cfg)
    if cfg.get("een") and obs:
        een = ap.load_een(cfg["een"])
        full = wd.normalize_series(past_raw.concat(fut_raw.slice(0, horizon)), stats)
        seen = set(full.dates[:len(past_raw)])
        keep = {d: v for d, v in obs.items() if d in seen}
        pred = ap.adapt_rollout(model, een, full, cult, keep)
        n = len(past_raw)
        s = pred.series
        tail = bp.CropStateSeries(s.kind, s.values[n:], onsets=s.onsets, phase=None if s.phase is None
                                  else s.phase[n:], dates=s.dates[n:])
        pred = hy.Prediction(tail, pred.omega[n:], pred.raw[n:], pred.state)
    else:
        pred = hy.forecast(model, wd.normalize_series(past_raw, stats),
                           wd.normalize_series(fut_raw, stats), horizon, cult)
    text = hy.predictions_csv(pred, model.spec)
    _write_if_changed(out / "forecast.csv", text)
    print(f"{horizon}-day forecast -> {out / 'forecast.csv'}")
    return out / "forecast.csv"


def cmd_attribute(cfg: Mapping[str, Any]) -> Path:
    out = run_dir("attribute", cfg)
    model = load_dmc(cfg["checkpoint"])
    stats = load_norm(cfg["checkpoint"])
    if cfg.get("weather"):
        series = wd.normalize_series(_one_series(cfg["weather"], stats), stats)
        cult = int(cfg["cultivar"])
    elif cfg.get("dataset"):
        seasons = load_data(cfg["dataset"]).seasons
        idx = int(cfg["season"])
        if not 0 <= idx < len(seasons):
            raise UsageError(f"season index {idx} outside 0..{len(seasons) - 1}")
        series = wd.normalize_series(seasons[idx].weather, stats)
        cult = seasons[idx].cultivar
    else:
        raise UsageError("attribute needs weather or dataset")
    param = cfg["param"]
    names = list(model.spec.names)
    if isinstance(param, str) and param not in names:
        raise UsageError(f"unknown parameter {param!r}; choose from {names}")
    j = names.index(param) if isinstance(param, str) else int(param)
    if not 0 <= j < len(names):
        raise UsageError(f"parameter index {j} outside 0..{len(names) - 1}")
    day = int(cfg["day"]) % len(series)
    x = series.features
    base = x.mean(axis=0) if cfg["baseline"] == "mean" else np.zeros(x.shape[1])
    fn = eb.dmc_param_fn(model, cult, day, j)
    if cfg["rule"] not in eb.IG_RULES:
        raise UsageError(f"unknown rule {cfg['rule']!r}; choose from {list(eb.IG_RULES)}")
    ig = eb.integrated_gradients_fn(fn, x, base, int(cfg["steps"]), rule=cfg["rule"])
    resid = eb.completeness_residual(fn, x, np.broadcast_to(base, x.shape), ig)
    archive_config(out, cfg)
    rows = [[str(d), *r] for d, r in zip(series.dates, ig)]
    eb.write_csv(out / "attributions.csv", ["date", *series.names], rows)
    eb.write_json(out / "summary.json", {"day": day, "param": names[j], "cultivar": cult,
                                         "steps": int(cfg["steps"]), "rule": cfg["rule"],
                                         "completeness_residual": resid,
                                         "total": float(ig.sum()),
                                         "per_feature": dict(zip(series.names, ig.sum(axis=0).tolist()))})
    print(f"completeness residual {resid:.3g} -> {out}")
    return out


COMMANDS = {"fetch": cmd_fetch, "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "eval": cmd_eval, "forecast": cmd_forecast, "attribute": cmd_attribute}


# -- argument parsing ---------------------------------------------------------------------

def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


_NAME_OR_INDEX = {("attribute", "param")}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridcrop", description="Hybrid crop-state forecasting")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS
    for cmd, defaults in DEFAULTS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="JSON file with configuration keys")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if (cmd, key) in _NAME_OR_INDEX:
                sp.add_argument(flag, dest=key, type=_json_value, default=S, help="name or index")
            elif isinstance(default, bool):
                sp.add_argument(flag, dest=key, action="store_true", default=S)
            elif isinstance(default, int) and not isinstance(default, bool):
                sp.add_argument(flag, dest=key, type=int, default=S)
            elif isinstance(default, float):
                sp.add_argument(flag, dest=key, type=float, default=S)
            elif isinstance(default, str):
                sp.add_argument(flag, dest=key, default=S)
            else:
                sp.add_argument(flag, dest=key, type=_json_value, default=S,
                                help="JSON value or plain string")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ns = vars(args)
    command, path = ns.pop("command"), ns.pop("config")
    ns.pop("verbose")
    try:
        cfg = load_config(command, path, ns)
        COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CommandError, gt.TrainingDiverged, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


__all__ = ["main", "build_parser", "load_config", "DEFAULTS", "COMMANDS", "UsageError", "CommandError",
           "cmd_fetch", "cmd_synth", "cmd_preprocess", "cmd_train", "cmd_eval", "cmd_forecast",
           "cmd_attribute", "train_predictor", "prepare_split", "read_observations", "CACHE_ENV"]
