"""Comparison models behind one evaluation interface.

Every predictor exposes ``predict(series, cultivar) -> CropStateSeries``
where ``series`` is a normalized :class:`~hybridcrop.weatherdata.WeatherSeries`
(its raw temperatures still available through ``tmean()``).  Models that
are trained come with a ``fit_*`` function built on
:func:`hybridcrop.gradtrain.fit`.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import biophys as bp
from . import paramnet as pn
from .data import make_batch, seasons_by_cultivar
from .gradtrain import (Adam, TrainConfig, Trainable, cross_entropy, fit, gd_calibrate, masked_mse,
                        onset_loss, pinn_loss, static_params)
from .hybrid import DmcModel, dmc_rollout, dmc_trainable
from .paramnet import NetConfig, NetWeights

log = logging.getLogger(__name__)

N_CLASSES = 4          # dormant, bud break, bloom, veraison-or-later
PINN_P = 0.5
TEMP_HIDDEN = 64
TEMP_SCALE = 10.0      # degC per unit of network input and output


class BaselineKind(str, Enum):
    DEPLOYED = "deployed"
    GD = "gd"
    DEEP_MTL = "deep-mtl"
    PINN = "pinn"
    RESIDUAL = "residual"
    TEMPHYBRID = "temphybrid"
    DMC_MTL = "dmc-mtl"
    DMC_STL = "dmc-stl"
    DMC_AGG = "dmc-agg"
    DMC_MULT = "dmc-mult"
    DMC_ADD = "dmc-add"
    DMC_MULTIH = "dmc-multih"


DMC_EMBED = {"dmc-mtl": "concat", "dmc-stl": "none", "dmc-agg": "none", "dmc-mult": "mult",
             "dmc-add": "add", "dmc-multih": "multihead"}


# -- static biophysical models --------------------------------------------------

@dataclass
class StaticBio:
    """Per-cultivar static parameters rolled through the reference model."""

    model: str
    params: dict
    kind: str = "deployed"
    cfg: bp.GddConfig = bp.GddConfig()

    def lookup(self, cultivar) -> np.ndarray:
        if cultivar not in self.params:
            raise KeyError(f"no {self.model} parameters for cultivar {cultivar!r}")
        return np.asarray(self.params[cultivar], dtype=np.float64)

    def predict(self, series, cultivar) -> bp.CropStateSeries:
        p = self.lookup(cultivar)
        if self.model == "gdd":
            return bp.oracle_gdd(series, p, self.cfg)
        return bp.oracle_ferguson(series, p)

    def save(self, path) -> None:
        keys = sorted(self.params, key=str)
        arrays = {f"p{i}": np.asarray(self.params[k]) for i, k in enumerate(keys)}
        pn.save_checkpoint(path, arrays, {"model": {"kind": self.kind, "biophys": self.model,
                                                    "cultivars": [k for k in keys]}})


def deployed_bio(params: Mapping, series, cultivar, model: str = "gdd") -> bp.CropStateSeries:
    """Reference rollout with a cultivar's published static parameters."""
    return StaticBio(model, dict(params)).predict(series, cultivar)


def load_published(path, model: str, names: Sequence[str] | None = None) -> StaticBio:
    """Published-parameter JSON (cultivar name -> named values).

    With ``names`` the table is re-keyed by cultivar index in that order; a
    name missing from the file is an error.
    """
    table = bp.load_param_table(path, bp.SPECS[model])
    if names is None:
        return StaticBio(model, table)
    missing = [n for n in names if n not in table]
    if missing:
        raise KeyError(f"{path}: no parameters for cultivars {missing}")
    return StaticBio(model, {i: table[n] for i, n in enumerate(names)})


def fit_gd(model: str, train: Sequence, n_cultivars: int, config: TrainConfig | None = None,
           val: Sequence = (), out_dir=None, resume: bool = False) -> StaticBio:
    table, _ = gd_calibrate(model, train, n_cultivars, config, val_seasons=val, out_dir=out_dir,
                            resume=resume)
    return StaticBio(model, table, kind="gd")


def _static_targets(static: StaticBio, seasons: Sequence, T: int, task: str) -> np.ndarray:
    out = np.zeros((len(seasons), T))
    for i, s in enumerate(seasons):
        v = static.predict(s.weather, s.cultivar).values
        out[i, :len(v)] = np.minimum(v, N_CLASSES - 1) if task == "phenology" else v
    return out


# -- Deep-MTL and PINN ------------------------------------------------------------

def deep_config(task: str, input_dim: int, n_cultivars: int, **net_kw) -> NetConfig:
    out = N_CLASSES if task == "phenology" else 1
    return NetConfig(input_dim=input_dim, out_dim=out, n_cultivars=n_cultivars, head="linear", **net_kw)


def deep_mtl_forward(weights: NetWeights, series, cultivar: int) -> np.ndarray:
    """(T, 4) class logits for phenology or (T,) LTE50 for hardiness."""
    y = pn.forward(weights, series, cultivar)
    return y if weights.config.out_dim > 1 else y[:, 0]


def class_onsets(stage: np.ndarray, n: int = 5) -> np.ndarray:
    """First day each class is the argmax (NaN if never); class 0 at day 0."""
    out = np.full(n, np.nan)
    for k in range(n):
        hit = np.flatnonzero(stage == k)
        if hit.size:
            out[k] = hit[0]
    return out


@dataclass
class DeepMtl:
    """Direct regression / classification network (no biophysical structure)."""

    weights: NetWeights
    task: str
    kind: str = "deep-mtl"

    def predict(self, series, cultivar) -> bp.CropStateSeries:
        y = deep_mtl_forward(self.weights, series, cultivar)
        dates = getattr(series, "dates", None)
        if self.task == "phenology":
            stage = np.argmax(y, axis=1)
            return bp.CropStateSeries("phenology", stage.astype(float), onsets=class_onsets(stage),
                                      dates=dates)
        return bp.CropStateSeries("hardiness", y, dates=dates)

    def probabilities(self, series, cultivar) -> np.ndarray:
        y = deep_mtl_forward(self.weights, series, cultivar)
        e = np.exp(y - y.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def save(self, path) -> None:
        pn.save_weights(path, self.weights, {"model": {"kind": self.kind, "task": self.task}})


def _deep_loss(cfg: NetConfig, task: str, P, batch, phys=None, p: float = 0.0):
    y = pn.apply(P, cfg, batch.x, batch.cultivar, batch.valid)
    m = batch.y_mask & batch.valid
    if task == "phenology":
        data = cross_entropy(y, np.minimum(batch.y, N_CLASSES - 1), m)
        if phys is None:
            return data
        return ad.add(ad.mul(data, 1.0 - p), ad.mul(cross_entropy(y, phys, batch.valid), p))
    pred = ad.reshape(y, batch.y.shape)
    if phys is None:
        return masked_mse(pred, batch.y, m)
    return pinn_loss(pred, batch.y, phys, p, m, batch.valid)


def fit_deep(task: str, train: Sequence, n_cultivars: int, seed: int = 0,
             config: TrainConfig | None = None, val: Sequence = (), out_dir=None,
             static: StaticBio | None = None, p: float = PINN_P, resume: bool = False,
             **net_kw) -> DeepMtl:
    """Train Deep-MTL, or the PINN variant when ``static`` supplies the physics targets."""
    kind = "pinn" if static is not None else "deep-mtl"
    config = config or TrainConfig.preset(kind)
    cfg = deep_config(task, train[0].weather.n_features, n_cultivars, **net_kw)
    w = pn.init_weights(cfg, seed)

    def loss(P, items, rng):
        batch = make_batch(items)
        phys = None if static is None else _static_targets(static, items, batch.y.shape[1], task)
        return _deep_loss(cfg, task, P, batch, phys, p)

    tr = Trainable(dict(w.arrays), loss, {"kind": kind, "task": task, "net": cfg.to_dict()})
    res = fit(tr, list(train), list(val), config, out_dir, resume)
    return DeepMtl(NetWeights(cfg, res.params), task, kind)


# -- Residual hybrid ----------------------------------------------------------------

@dataclass
class Residual:
    """Static biophysical output plus a learned per-day correction."""

    weights: NetWeights
    static: StaticBio
    task: str
    kind: str = "residual"

    def predict(self, series, cultivar) -> bp.CropStateSeries:
        return residual_rollout(self.weights, series, cultivar, self.static, self.task)

    def save(self, path) -> None:
        extra = {"model": {"kind": self.kind, "task": self.task, "biophys": self.static.model,
                           "static": {str(k): list(map(float, v)) for k, v in self.static.params.items()}}}
        pn.save_weights(path, self.weights, extra)


def residual_rollout(weights: NetWeights, series, cultivar: int, static: StaticBio,
                     task: str | None = None) -> bp.CropStateSeries:
    base = static.predict(series, cultivar)
    r = pn.forward(weights, series, cultivar)[:, 0]
    v = base.values + r
    dates = getattr(series, "dates", None)
    if (task or base.kind) == "phenology":
        stage = np.clip(np.rint(v), 0, 4).astype(int)
        return bp.CropStateSeries("phenology", v, onsets=class_onsets_monotone(stage), dates=dates)
    return bp.CropStateSeries("hardiness", v, dates=dates)


def class_onsets_monotone(stage: np.ndarray, n: int = 5) -> np.ndarray:
    """First day the stage reaches or passes each index."""
    return bp.onsets_from_stages(stage, n)


def fit_residual(task: str, train: Sequence, n_cultivars: int, static: StaticBio, seed: int = 0,
                 config: TrainConfig | None = None, val: Sequence = (), out_dir=None,
                 resume: bool = False, **net_kw) -> Residual:
    config = config or TrainConfig.preset("residual")
    cfg = NetConfig(input_dim=train[0].weather.n_features, out_dim=1, n_cultivars=n_cultivars,
                    head="linear", **net_kw)
    w = pn.init_weights(cfg, seed)

    def loss(P, items, rng):
        batch = make_batch(items)
        base = _static_targets(static, items, batch.y.shape[1], "hardiness")
        r = ad.reshape(pn.apply(P, cfg, batch.x, batch.cultivar, batch.valid), batch.y.shape)
        return masked_mse(ad.add(r, base), batch.y, batch.y_mask & batch.valid)

    tr = Trainable(dict(w.arrays), loss, {"kind": "residual", "task": task, "net": cfg.to_dict()})
    res = fit(tr, list(train), list(val), config, out_dir, resume)
    return Residual(NetWeights(cfg, res.params), static, task)


# -- TempHybrid -------------------------------------------------------------------

def temp_shapes(hidden: int = TEMP_HIDDEN) -> dict[str, tuple[int, ...]]:
    return {"resp0.w": (1, hidden), "resp0.b": (hidden,), "resp1.w": (hidden, 1), "resp1.b": (1,)}


def init_response(seed: int = 0, hidden: int = TEMP_HIDDEN) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {"resp0.w": rng.normal(0.0, 1.0, (1, hidden)), "resp0.b": rng.uniform(-2.0, 2.0, hidden),
            "resp1.w": rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 1)), "resp1.b": np.zeros(1)}


def response(P: Mapping, tmean):
    """Learned non-negative daily response ``TEMP_SCALE * softplus(ffn(tmean / TEMP_SCALE))``.

    Takes temperature only; ``tmean`` of any shape.
    """
    t = np.asarray(tmean, dtype=np.float64)
    x = ad.const(t.reshape(-1, 1) / TEMP_SCALE)
    h = ad.tanh(ad.dense(x, P["resp0.w"], P["resp0.b"]))
    y = ad.softplus(ad.dense(h, P["resp1.w"], P["resp1.b"]))
    return ad.reshape(ad.mul(y, TEMP_SCALE), t.shape)


def fit_response(target_fn, P: Mapping | None = None, grid=None, steps: int = 2000,
                 lr: float = 1e-2, seed: int = 0) -> dict[str, np.ndarray]:
    """Fit the response network to an analytic curve on a temperature grid."""
    grid = np.linspace(-20.0, 45.0, 261) if grid is None else np.asarray(grid, float)
    y = np.asarray(target_fn(grid), float)
    P = {k: np.array(v) for k, v in (P or init_response(seed)).items()}
    opt = Adam(P)
    for _ in range(steps):
        _, g = ad.value_and_grad(lambda Q: masked_mse(response(Q, grid), y), P)
        opt.step(P, g, lr)
    return P


def temphybrid_batch(model: str, P: Mapping, params, tmean: np.ndarray, valid: np.ndarray,
                     cfg: bp.GddConfig = bp.GddConfig()):
    """Differentiable rollout with the learned response replacing the native one."""
    B, T = tmean.shape
    params = ad.const(params)
    units = response(P, tmean)
    if model == "gdd":
        st = bp.GddStepper(B, cfg)
        thr = bp._stage_thresholds(params, cfg)
        for t in range(T):
            st.advance(ad.mul(ad.getitem(units, (slice(None), t)), valid[:, t].astype(float)), thr,
                       valid[:, t])
        return st.finish()
    st = bp.FergusonStepper(B)
    for t in range(T):
        st.step(params, tmean[:, t], valid[:, t], chill_units=ad.mul(ad.getitem(units, (slice(None), t)), -1.0))
    return st.finish()


@dataclass
class TempHybrid:
    model: str
    response: dict
    params: dict
    cfg: bp.GddConfig = bp.GddConfig()
    kind: str = "temphybrid"

    def predict(self, series, cultivar) -> bp.CropStateSeries:
        return temphybrid_rollout(self.response, self.params[cultivar], series, self.model, self.cfg)

    def save(self, path) -> None:
        arrays = dict(self.response)
        keys = sorted(self.params)
        for i, k in enumerate(keys):
            arrays[f"p{i}"] = np.asarray(self.params[k])
        pn.save_checkpoint(path, arrays, {"model": {"kind": self.kind, "biophys": self.model,
                                                    "cultivars": keys}})


def temphybrid_rollout(P: Mapping, params, series, model: str = "gdd",
                       cfg: bp.GddConfig = bp.GddConfig()) -> bp.CropStateSeries:
    tm = series.tmean() if hasattr(series, "tmean") else np.asarray(series, float)
    tr = temphybrid_batch(model, P, np.asarray(params, float)[None], tm[None], np.ones((1, len(tm)), bool), cfg)
    dates = getattr(series, "dates", None)
    if model == "gdd":
        return bp.CropStateSeries("phenology", tr.stages[0].astype(float), onsets=tr.onsets[0], dates=dates)
    return bp.CropStateSeries("hardiness", tr.lte.value[0], phase=tr.phase[0], dates=dates)


def native_response(model: str, spec: bp.ParamSpec | None = None):
    """The built-in response at the range midpoints, used to initialise the network."""
    spec = spec or bp.SPECS[model]
    mid = spec.midpoint
    if model == "gdd":
        return lambda t: np.minimum(np.maximum(t - mid[0], 0.0), mid[1])
    return lambda t: -np.minimum(t - mid[bp.F_TENDO], 0.0)


def fit_temphybrid(model: str, train: Sequence, n_cultivars: int, seed: int = 0,
                   config: TrainConfig | None = None, val: Sequence = (), out_dir=None,
                   hidden: int = TEMP_HIDDEN, cfg: bp.GddConfig = bp.GddConfig(),
                   resume: bool = False) -> TempHybrid:
    """Jointly train the response network and per-cultivar static parameters."""
    config = config or TrainConfig.preset("temphybrid")
    spec = bp.SPECS[model]
    P0 = fit_response(native_response(model, spec), init_response(seed, hidden), seed=seed)
    arrays = {**P0, "logits": np.zeros((n_cultivars, len(spec)))}

    def loss(P, items, rng):
        batch = make_batch(items)
        p = static_params(ad.getitem(P["logits"], batch.cultivar), spec)
        tr = temphybrid_batch(model, P, p, batch.tmean, batch.valid, cfg)
        if model == "gdd":
            return onset_loss(tr.onset_soft, batch.onsets)
        return masked_mse(tr.lte, batch.y, batch.y_mask & batch.valid)

    tr = Trainable(arrays, loss, {"kind": "temphybrid", "biophys": model, "hidden": hidden})
    res = fit(tr, list(train), list(val), config, out_dir, resume)
    table = static_params(ad.const(res.params["logits"]), spec).value
    resp = {k: v for k, v in res.params.items() if k != "logits"}
    return TempHybrid(model, resp, {c: table[c] for c in range(n_cultivars)}, cfg)


# -- DMC variants ------------------------------------------------------------------

@dataclass
class DmcPredictor:
    model: DmcModel
    kind: str = "dmc-mtl"

    def predict(self, series, cultivar) -> bp.CropStateSeries:
        return dmc_rollout(self.model, series, cultivar).series

    def save(self, path) -> None:
        from .hybrid import save_model
        save_model(path, self.model, {"kind": self.kind})


@dataclass
class DmcStl:
    """One DMC model per cultivar, each trained only on its own seasons."""

    models: dict
    kind: str = "dmc-stl"

    def predict(self, series, cultivar) -> bp.CropStateSeries:
        if cultivar not in self.models:
            raise KeyError(f"no single-task model for cultivar {cultivar!r}")
        return dmc_rollout(self.models[cultivar], series, 0).series

    def save(self, path) -> None:
        arrays, sub = {}, {}
        for c, m in sorted(self.models.items()):
            for k, v in m.net.arrays.items():
                arrays[f"c{c}/{k}"] = v
            sub[str(c)] = m.describe()
        pn.save_checkpoint(path, arrays, {"model": {"kind": self.kind, "members": sub}})


def make_variant(kind: str, biophys: str, input_dim: int, n_cultivars: int, seed: int = 0,
                 **net_kw) -> DmcModel:
    """Untrained DMC model for one of the embedding variants."""
    from .hybrid import new_model

    kind = BaselineKind(kind).value
    if kind not in DMC_EMBED:
        raise ValueError(f"{kind} is not a DMC variant")
    n = 1 if kind == "dmc-stl" else n_cultivars
    return new_model(biophys, input_dim, n, seed, embed_mode=DMC_EMBED[kind], **net_kw)


def fit_dmc(kind: str, biophys: str, train: Sequence, n_cultivars: int, seed: int = 0,
            config: TrainConfig | None = None, val: Sequence = (), out_dir=None, resume: bool = False,
            **net_kw):
    """Train a DMC variant; ``dmc-stl`` returns a :class:`DmcStl`, the rest a :class:`DmcPredictor`."""
    kind = BaselineKind(kind).value
    config = config or TrainConfig.preset(kind)
    F = train[0].weather.n_features
    model_kw = {k: net_kw.pop(k) for k in ("smoothing", "window", "offset", "gdd", "loss_stages")
                if k in net_kw}
    if kind == "dmc-stl":
        val_by = seasons_by_cultivar(val)
        models = {}
        for c, items in sorted(seasons_by_cultivar(train).items()):
            m = replace(make_variant(kind, biophys, F, 1, seed, **net_kw), **model_kw)
            own = [replace(s, cultivar=0) for s in items]
            own_val = [replace(s, cultivar=0) for s in val_by.get(c, [])]
            sub = None if out_dir is None else os.path.join(out_dir, f"cultivar_{c}")
            again = resume and sub is not None and os.path.exists(os.path.join(sub, "last.ckpt"))
            res = fit(dmc_trainable(m, {"kind": kind, "cultivar": c}), own, own_val, config, sub, again)
            models[c] = m.with_arrays(res.params)
        return DmcStl(models)
    m = replace(make_variant(kind, biophys, F, n_cultivars, seed, **net_kw), **model_kw)
    res = fit(dmc_trainable(m, {"kind": kind}), list(train), list(val), config, out_dir, resume)
    return DmcPredictor(m.with_arrays(res.params), kind)


def fit_baseline(kind: str, biophys: str, train: Sequence, n_cultivars: int, seed: int = 0,
                 config: TrainConfig | None = None, val: Sequence = (), out_dir=None,
                 static: StaticBio | None = None, resume: bool = False, **net_kw):
    """Single dispatch over every trainable baseline kind."""
    kind = BaselineKind(kind).value
    task = bp.TASK_OF[biophys]
    if kind == "deployed":
        if static is None:
            raise ValueError("the deployed baseline needs a published parameter table")
        return static
    if kind == "gd":
        return fit_gd(biophys, train, n_cultivars, config, val, out_dir, resume)
    if kind == "deep-mtl":
        return fit_deep(task, train, n_cultivars, seed, config, val, out_dir, resume=resume, **net_kw)
    if kind == "pinn":
        if static is None:
            raise ValueError("the PINN baseline needs static parameters for its physics term")
        return fit_deep(task, train, n_cultivars, seed, config or TrainConfig.preset("pinn"), val,
                        out_dir, static=static, resume=resume, **net_kw)
    if kind == "residual":
        if static is None:
            raise ValueError("the residual baseline needs static parameters")
        return fit_residual(task, train, n_cultivars, static, seed, config, val, out_dir, resume, **net_kw)
    if kind == "temphybrid":
        return fit_temphybrid(biophys, train, n_cultivars, seed, config, val, out_dir, resume=resume)
    return fit_dmc(kind, biophys, train, n_cultivars, seed, config, val, out_dir, resume, **net_kw)


def load_predictor(path):
    """Rebuild any saved predictor from its checkpoint."""
    from .hybrid import DmcModel as _Dmc

    arrays, meta = pn.load_checkpoint(path)
    m = meta.get("model", {})
    kind = m.get("kind", "dmc")
    if kind in ("deployed", "gd"):
        keys = m["cultivars"]
        return StaticBio(m["biophys"], {k: arrays[f"p{i}"] for i, k in enumerate(keys)}, kind=kind)
    if kind in ("deep-mtl", "pinn"):
        w, _ = pn.load_weights(path)
        return DeepMtl(w, m["task"], kind)
    if kind == "residual":
        w, _ = pn.load_weights(path)
        static = StaticBio(m["biophys"], {int(k): np.array(v) for k, v in m["static"].items()})
        return Residual(w, static, m["task"])
    if kind == "temphybrid":
        keys = m["cultivars"]
        resp = {k: v for k, v in arrays.items() if k.startswith("resp")}
        return TempHybrid(m["biophys"], resp, {k: arrays[f"p{i}"] for i, k in enumerate(keys)})
    if kind == "dmc-stl":
        models = {}
        for c, desc in m["members"].items():
            sub = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(f"c{c}/")}
            models[int(c)] = _Dmc.from_meta(desc, sub)
        return DmcStl(models)
    if kind == "een":
        raise ValueError(f"{path}: EEN checkpoints need a base model; use adapt.load_een")
    return DmcPredictor(_Dmc.from_meta(m, arrays), kind if kind != "dmc" else "dmc-mtl")
