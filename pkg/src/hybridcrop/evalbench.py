"""Splits, metrics, significance tests, experiment sweeps and attribution.

Every predictor is used through ``predict(series, cultivar)`` so the
functions here do not care which model family produced the numbers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import betainc

from . import autodiff as ad
from . import biophys as bp
from . import paramnet as pn
from .data import seasons_by_cultivar

log = logging.getLogger(__name__)

CANONICAL_SEEDS = (0, 1, 2, 3, 4)
SCORED = (1, 2, 3)


# -- splits ---------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Season keys per cultivar for test, validation and training."""

    seed: int
    train: dict = field(default_factory=dict)
    val: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)

    def apply(self, seasons: Sequence) -> tuple[list, list, list]:
        role = {}
        for part, name in ((self.train, "train"), (self.val, "val"), (self.test, "test")):
            for keys in part.values():
                for k in keys:
                    role[tuple(k)] = name
        out = {"train": [], "val": [], "test": []}
        for s in seasons:
            r = role.get(s.key)
            if r:
                out[r].append(s)
        return out["train"], out["val"], out["test"]

    def to_dict(self) -> dict:
        enc = lambda d: {str(c): [list(k) for k in v] for c, v in sorted(d.items())}  # noqa: E731
        return {"seed": self.seed, "train": enc(self.train), "val": enc(self.val),
                "test": enc(self.test), "excluded": list(self.excluded)}


def make_splits(seasons: Sequence, seed: int, n_test: int = 2, n_val: int = 1,
                min_seasons: int = 4) -> SplitPlan:
    """Uniform random test / validation / training seasons per cultivar.

    Cultivars with fewer than ``min_seasons`` seasons are excluded with a
    warning.
    """
    plan = SplitPlan(seed)
    for c, items in sorted(seasons_by_cultivar(seasons).items()):
        if len(items) < min_seasons:
            log.warning("cultivar %s has %d seasons (< %d); excluded", c, len(items), min_seasons)
            plan.excluded.append(c)
            continue
        keys = sorted(s.key for s in items)
        rng = np.random.default_rng([seed, int(c)])
        order = [keys[i] for i in rng.permutation(len(keys))]
        plan.test[c] = order[:n_test]
        plan.val[c] = order[n_test:n_test + n_val]
        plan.train[c] = order[n_test + n_val:]
    return plan


def limit_seasons(train: Sequence, n: int, seed: int) -> list:
    """At most ``n`` training seasons per cultivar, drawn with ``seed``."""
    out = []
    for c, items in sorted(seasons_by_cultivar(train).items()):
        if n > len(items):
            log.info("cultivar %s: %d seasons requested, %d available", c, n, len(items))
        rng = np.random.default_rng([seed, int(c), 11])
        keep = sorted(rng.permutation(len(items))[:n])
        out += [items[i] for i in keep]
    return out


# -- metrics ----------------------------------------------------------------------

def _onset_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a = a[None] if a.ndim == 1 else a
    return a[:, list(SCORED)] if a.shape[1] == 5 else a


def season_onset_errors(pred_onsets, true_onsets, season_end=None) -> np.ndarray:
    """(N, 3) signed errors; unreached predictions count as ``season_end``.

    Seasons whose truth misses a stage come back as NaN rows.
    """
    p, t = _onset_rows(pred_onsets), _onset_rows(true_onsets)
    if season_end is not None:
        end = np.broadcast_to(np.asarray(season_end, float).reshape(-1, 1), p.shape)
        p = np.where(np.isfinite(p), p, end)
    err = p - t
    bad = ~np.all(np.isfinite(t), axis=1)
    err[bad] = np.nan
    return err


def rmse_phenology(pred_onsets, true_onsets, season_end=None, reduce: str = "rmse") -> float:
    """Mean over seasons of the per-season RMSE across bud break, bloom and veraison.

    ``reduce="sum"`` uses the summed absolute error across the three stages
    instead.
    """
    err = season_onset_errors(pred_onsets, true_onsets, season_end)
    err = err[np.all(np.isfinite(err), axis=1)]
    if not len(err):
        return math.nan
    if reduce == "sum":
        per = np.abs(err).sum(axis=1)
    else:
        per = np.sqrt(np.mean(err * err, axis=1))
    return float(per.mean())


def rmse_hardiness(pred, true, mask=None) -> float:
    p, t = np.asarray(pred, float), np.asarray(true, float)
    m = np.ones(t.shape, bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise ValueError("no unmasked days")
    d = (p - t)[m]
    return float(np.sqrt(np.mean(d * d)))


def t_sf(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` of Student's t."""
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test with ``n - 1`` degrees of freedom.

    Zero-variance differences give ``(0, 1)`` when the mean difference is 0
    and ``(+-inf, 0)`` otherwise.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and the same length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, t_sf(t, n - 1)


def coverage_curve(rmses, thresholds) -> np.ndarray:
    """Fraction of cultivars with RMSE at or below each threshold."""
    r = np.asarray(rmses, float)
    th = np.asarray(thresholds, float)
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be sorted")
    if r.size == 0:
        return np.zeros(len(th))
    return np.array([(r <= x).mean() for x in th])


# -- realism -----------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    day: int
    kind: str
    detail: str


HARDINESS_BOUNDS = (float(bp.FERGUSON_SPEC.lo[bp.F_HCMAX]), float(bp.FERGUSON_SPEC.hi[bp.F_HCMIN]))


def realism_check(series, kind: str | None = None, bounds: tuple[float, float] | None = None,
                  eps: float = 1e-9) -> list[Violation]:
    """Days that break biological plausibility.

    Phenology: every day whose stage is lower than the day before.
    Hardiness: every day outside ``[bounds[0] - eps, bounds[1] + eps]`` (by
    default the widest hcmax..hcmin envelope) or not finite.
    """
    kind = kind or series.kind
    v = np.asarray(series.values if hasattr(series, "values") else series, float)
    out = []
    if kind == "phenology":
        s = np.rint(v)
        for t in np.flatnonzero(np.diff(s) < 0) + 1:
            out.append(Violation(int(t), "regression", f"stage {int(s[t - 1])} -> {int(s[t])}"))
        return out
    lo, hi = bounds or HARDINESS_BOUNDS
    for t, x in enumerate(v):
        if not np.isfinite(x):
            out.append(Violation(t, "nonfinite", "LTE50 is not finite"))
        elif x < lo - eps or x > hi + eps:
            out.append(Violation(t, "bounds", f"LTE50 {x:.3f} outside [{lo}, {hi}]"))
    return out


def fig4_fixture():
    """Hand-built classifier whose argmax goes bloom -> bud break -> bloom.

    The network is a one-unit feed-forward map of the first feature; class
    k wins when that feature lies in ``[k, k+1)``.  Returns the predictor
    and a feature matrix whose stage trace reverts once (at day 6).
    """
    from .baselines import DeepMtl, N_CLASSES
    from .paramnet import NetConfig, NetWeights

    F = 3
    cfg = NetConfig(input_dim=F, out_dim=N_CLASSES, n_cultivars=1, embed_mode="none", arch="ffn",
                    ffn_dims=(1,), head="linear")
    k = np.arange(N_CLASSES, dtype=float)
    arrays = {"pre0.w": np.array([[1.0], [0.0], [0.0]]), "pre0.b": np.zeros(1),
              "out.w": k[None, :], "out.b": -k * (k + 1) / 2.0}
    x = np.zeros((9, F))
    x[:, 0] = [0.2, 0.4, 1.5, 1.6, 2.5, 2.6, 1.5, 2.5, 3.5]
    return DeepMtl(NetWeights(cfg, arrays), "phenology"), x


# -- evaluation of predictors ---------------------------------------------------------

@dataclass
class SeasonScore:
    cultivar: int
    year: int
    location: str
    rmse: float
    stage_err: np.ndarray | None = None
    violations: int = 0


def score_season(predictor, season, check_realism: bool = True) -> SeasonScore:
    pred = predictor.predict(season.weather, season.cultivar)
    viol = len(realism_check(pred)) if check_realism else 0
    if season.task == "phenology":
        end = float(len(season) - 1)
        err = season_onset_errors(pred.onsets, season.target.onsets, end)[0]
        r = float(np.sqrt(np.mean(err * err))) if np.all(np.isfinite(err)) else math.nan
        return SeasonScore(season.cultivar, season.year, season.location, r, err, viol)
    m = season.target.mask
    r = rmse_hardiness(pred.values, season.target.values, m) if m.any() else math.nan
    return SeasonScore(season.cultivar, season.year, season.location, r, None, viol)


def evaluate(predictor, seasons: Sequence, check_realism: bool = True) -> list[SeasonScore]:
    return [score_season(predictor, s, check_realism) for s in seasons]


def mean_rmse(scores: Sequence[SeasonScore]) -> float:
    v = [s.rmse for s in scores if np.isfinite(s.rmse)]
    return float(np.mean(v)) if v else math.nan


def per_cultivar(scores: Sequence[SeasonScore]) -> dict[int, float]:
    by: dict[int, list] = {}
    for s in scores:
        if np.isfinite(s.rmse):
            by.setdefault(s.cultivar, []).append(s.rmse)
    return {c: float(np.mean(v)) for c, v in sorted(by.items())}


@dataclass
class EvalReport:
    """Per (model, cultivar, seed) RMSE cells and what is derived from them."""

    cells: list = field(default_factory=list)
    violations: dict = field(default_factory=dict)

    def add(self, model: str, seed: int, scores: Sequence[SeasonScore]) -> None:
        for c, r in per_cultivar(scores).items():
            self.cells.append({"model": model, "cultivar": int(c), "seed": int(seed), "rmse": r})
        self.violations[(model, seed)] = int(sum(s.violations for s in scores))

    def models(self) -> list[str]:
        return sorted({c["model"] for c in self.cells})

    def values(self, model: str, by: str = "seed") -> np.ndarray:
        """Per-seed means (``by="seed"``) or per-cultivar means over seeds."""
        rows = [c for c in self.cells if c["model"] == model]
        keys = sorted({r[by] for r in rows})
        return np.array([np.mean([r["rmse"] for r in rows if r[by] == k]) for k in keys])

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for m in self.models():
            v = self.values(m)
            out[m] = (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
        return out

    def ttests(self) -> dict[tuple[str, str], tuple[float, float]]:
        """Paired tests over matching (cultivar, seed) cells for every model pair."""
        out = {}
        ms = self.models()
        idx = {(c["model"], c["cultivar"], c["seed"]): c["rmse"] for c in self.cells}
        for i, a in enumerate(ms):
            for b in ms[i + 1:]:
                keys = sorted({(c, s) for (m, c, s) in idx if m == a} & {(c, s) for (m, c, s) in idx if m == b})
                if len(keys) >= 2:
                    out[(a, b)] = paired_ttest([idx[(a, *k)] for k in keys], [idx[(b, *k)] for k in keys])
        return out

    def coverage(self, thresholds) -> dict[str, np.ndarray]:
        return {m: coverage_curve(self.values(m, by="cultivar"), thresholds) for m in self.models()}

    def to_json(self) -> dict:
        return {"cells": self.cells, "aggregate": {m: {"mean": a, "sd": b} for m, (a, b) in self.aggregate().items()},
                "ttests": [{"a": a, "b": b, "t": t, "p": p} for (a, b), (t, p) in self.ttests().items()],
                "violations": [{"model": m, "seed": s, "count": n} for (m, s), n in sorted(self.violations.items())]}


# -- experiments ---------------------------------------------------------------------

FitFn = Callable[[list, list, int], object]


def run_headline(fit_fns: Mapping[str, FitFn], seasons: Sequence, seeds=CANONICAL_SEEDS,
                 prepare: Callable | None = None) -> EvalReport:
    """Train every model on every seed's split and score the test seasons.

    ``prepare(train, val, test)`` may normalise the three lists (fitted on
    ``train`` only) and must return them in the same order.
    """
    rep = EvalReport()
    for seed in seeds:
        train, val, test = make_splits(seasons, seed).apply(seasons)
        if prepare is not None:
            train, val, test = prepare(train, val, test)
        for name, fn in fit_fns.items():
            rep.add(name, seed, evaluate(fn(train, val, seed), test))
    return rep


def sweep_data_limit(fit_fns: Mapping[str, FitFn], seasons: Sequence, counts=range(1, 16),
                     seeds=CANONICAL_SEEDS, prepare: Callable | None = None) -> list[dict]:
    """Retrain with 1..N training seasons per cultivar against fixed test sets.

    The split for each seed is drawn once; only the training seasons are
    subsampled, so every point shares the same two test seasons per cultivar.
    """
    rows = []
    for seed in seeds:
        train_all, val, test = make_splits(seasons, seed).apply(seasons)
        avail = min(len(v) for v in seasons_by_cultivar(train_all).values())
        for n in counts:
            train = limit_seasons(train_all, n, seed)
            tr, va, te = prepare(train, val, test) if prepare else (train, val, test)
            for name, fn in fit_fns.items():
                rows.append({"model": name, "seasons": int(n), "seed": int(seed),
                             "rmse": mean_rmse(evaluate(fn(tr, va, seed), te, False)),
                             "capped": bool(n > avail)})
    return rows


def robustness_eval(predictors: Mapping[str, object], datasets: Mapping[str, Sequence]) -> dict:
    """Rows are models, columns are locations; no retraining."""
    return {name: {loc: mean_rmse(evaluate(p, seasons, False)) for loc, seasons in datasets.items()}
            for name, p in predictors.items()}


def per_stage_error(predictors: Mapping[str, object], seasons: Sequence) -> dict[str, np.ndarray]:
    """(n_seasons, 3) signed onset errors per model for bud break, bloom and veraison."""
    out = {}
    for name, p in predictors.items():
        rows = [score_season(p, s, False).stage_err for s in seasons]
        out[name] = np.array([r for r in rows if r is not None and np.all(np.isfinite(r))]).reshape(-1, 3)
    return out


def stage_rmse(errors: np.ndarray) -> np.ndarray:
    e = np.asarray(errors, float).reshape(-1, 3)
    return np.sqrt(np.mean(e * e, axis=0)) if len(e) else np.full(3, np.nan)


# -- integrated gradients ---------------------------------------------------------------

IG_RULES = ("right", "midpoint")


def integrated_gradients_fn(fn: Callable[[ad.Var], ad.Var], x: np.ndarray, baseline, m: int = 256,
                            chunk: int = 64, rule: str = "right") -> np.ndarray:
    """Integrated gradients of a batched scalar function with an m-point Riemann sum.

    The default ``rule="right"`` samples the path at k/m for k = 1..m;
    ``"midpoint"`` samples at (k - 1/2)/m for the same cost and converges
    faster on smooth paths.  ReLU kinks make the integrand discontinuous,
    so both rules then converge like 1/m.  ``fn`` maps a (B, *x.shape)
    variable to (B,) outputs.  Returns an array shaped like ``x``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if rule not in IG_RULES:
        raise ValueError(f"unknown rule {rule!r}; expected one of {IG_RULES}")
    x = np.asarray(x, dtype=np.float64)
    b = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    total = np.zeros_like(x)
    alphas = (np.arange(1, m + 1) - (0.5 if rule == "midpoint" else 0.0)) / m
    for i in range(0, m, chunk):
        a = alphas[i:i + chunk].reshape((-1,) + (1,) * x.ndim)
        pts = b[None] + a * (x - b)[None]
        _, g = ad.value_and_grad(lambda P: ad.vsum(fn(P["x"])), {"x": pts})
        total += g["x"].sum(axis=0)
    return (x - b) * total / m


def dmc_param_fn(model, cultivar: int, day: int, param: int):
    """F(x) = parameter ``param`` applied on ``day`` by a DMC model, batched over inputs."""
    from .hybrid import omega_sequence

    if model.window is not None:
        raise ValueError("integrated gradients needs the full-recurrence model")

    def fn(xb):
        B = xb.shape[0]
        raw = pn.apply(model.net.arrays, model.net.config, xb, np.full(B, cultivar))
        om = omega_sequence(raw, model)
        return ad.reshape(ad.getitem(om, (slice(None), day, param)), (B,))

    return fn


def integrated_gradients(model, series, cultivar: int, target: tuple[int, int], baseline=None,
                         m: int = 256, rule: str = "right") -> np.ndarray:
    """(T, F) attribution of one applied parameter to every input feature and day.

    ``baseline`` defaults to the per-feature mean of ``series``.
    """
    x = series.features if hasattr(series, "features") else np.asarray(series, float)
    day, param = target
    if not 0 <= day < len(x):
        raise ValueError(f"target day {day} outside the season")
    base = x.mean(axis=0) if baseline is None else np.asarray(baseline, float)
    return integrated_gradients_fn(dmc_param_fn(model, cultivar, day, param), x, base, m, rule=rule)


def completeness_residual(fn, x, baseline, attributions) -> float:
    """``|sum IG - (F(x) - F(b))| / max(|F(x) - F(b)|, 1e-12)``."""
    x = np.asarray(x, float)
    b = np.broadcast_to(np.asarray(baseline, float), x.shape)
    fx = float(fn(ad.const(x[None])).value[0])
    fb = float(fn(ad.const(b[None])).value[0])
    gap = fx - fb
    return abs(float(np.sum(attributions)) - gap) / max(abs(gap), 1e-12)


# -- reports ------------------------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else f"{float(v):.6f}"
    return v


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True))
    return path


def _jsonable(o):
    if isinstance(o, Mapping):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return None if not math.isfinite(f) else round(f, 9)
    if isinstance(o, np.integer):
        return int(o)
    return o


def headline_table(reports: Mapping[str, EvalReport]) -> tuple[list[str], list[list]]:
    """Rows = models, columns = tasks, cells ``mean+-sd``."""
    tasks = sorted(reports)
    models = sorted({m for r in reports.values() for m in r.models()})
    rows = []
    for m in models:
        row = [m]
        for t in tasks:
            agg = reports[t].aggregate().get(m)
            row.append("" if agg is None else f"{agg[0]:.3f}+-{agg[1]:.3f}")
        rows.append(row)
    return ["model", *tasks], rows


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf", "#000000", "#aec7e8")


def svg_chart(series: Mapping[str, tuple[Sequence, Sequence]], title: str = "", xlabel: str = "",
              ylabel: str = "", step: bool = False, width: int = 640, height: int = 400) -> str:
    """Minimal line (or step) chart with a legend; deterministic text output."""
    pad_l, pad_r, pad_t, pad_b = 60, 150, 30, 45
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()]) if series else np.zeros(1)
    ys = ys[np.isfinite(ys)] if np.isfinite(ys).any() else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = min(0.0, float(ys.min())), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    W, H = width - pad_l - pad_r, height - pad_t - pad_b
    sx = lambda v: pad_l + (v - x0) / (x1 - x0) * W  # noqa: E731
    sy = lambda v: pad_t + H - (v - y0) / (y1 - y0) * H  # noqa: E731
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{pad_l}" y="18" font-size="13">{_esc(title)}</text>',
           f'<line x1="{pad_l}" y1="{pad_t + H}" x2="{pad_l + W}" y2="{pad_t + H}" stroke="black"/>',
           f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + H}" stroke="black"/>']
    for v in np.linspace(x0, x1, 5):
        out.append(f'<text x="{sx(v):.1f}" y="{pad_t + H + 15}" text-anchor="middle">{v:.3g}</text>')
    for v in np.linspace(y0, y1, 5):
        out.append(f'<text x="{pad_l - 5}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    out.append(f'<text x="{pad_l + W / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{pad_t + H / 2:.1f}" transform="rotate(-90 14 {pad_t + H / 2:.1f})" '
               f'text-anchor="middle">{_esc(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        col = _PALETTE[i % len(_PALETTE)]
        pts = []
        prev = None
        for a, b in zip(np.asarray(x, float), np.asarray(y, float)):
            if not np.isfinite(b):
                continue
            if step and prev is not None:
                pts.append(f"{sx(a):.1f},{sy(prev):.1f}")
            pts.append(f"{sx(a):.1f},{sy(b):.1f}")
            prev = b
        out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        ly = pad_t + 14 * i + 8
        out.append(f'<line x1="{pad_l + W + 10}" y1="{ly}" x2="{pad_l + W + 30}" y2="{ly}" stroke="{col}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{pad_l + W + 35}" y="{ly + 4}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_report(out_dir, name: str, report: EvalReport, thresholds=None) -> Path:
    """CSV of cells, JSON summary and (with ``thresholds``) a coverage SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"{name}_cells.csv", ["model", "cultivar", "seed", "rmse"],
              [[c["model"], c["cultivar"], c["seed"], c["rmse"]] for c in report.cells])
    write_json(out / f"{name}_summary.json", report.to_json())
    if thresholds is not None:
        cov = report.coverage(thresholds)
        (out / f"{name}_coverage.svg").write_text(svg_chart(
            {m: (thresholds, c) for m, c in cov.items()}, f"{name} coverage", "RMSE threshold",
            "fraction of cultivars", step=True))
    return out


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("annotations", "os")]
