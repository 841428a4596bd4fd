"""Dynamic model calibration: network -> daily parameters -> biophysical rollout."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import biophys as bp
from . import paramnet as pn
from .gradtrain import Trainable, masked_mse, onset_loss
from .paramnet import NetConfig, NetWeights

STAGE_NAMES = ("dormant", "budbreak", "bloom", "veraison", "ripe")


@dataclass
class DmcModel:
    """A parameter network bound to a biophysical model.

    ``smoothing`` switches to the delta formulation (daily parameter change
    bounded by ``smoothing * width``).  ``window`` limits the recurrence to
    the last ``window`` days.  ``offset`` applies the parameters predicted
    from day t's weather on day t+1 instead of day t.
    """

    net: NetWeights
    biophys: str = "gdd"
    spec: bp.ParamSpec | None = None
    smoothing: float | None = None
    window: int | None = None
    offset: bool = False
    gdd: bp.GddConfig = field(default_factory=bp.GddConfig)
    loss_stages: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self):
        if self.biophys not in bp.SPECS:
            raise ValueError(f"unknown biophysical model {self.biophys!r}")
        if self.spec is None:
            self.spec = bp.SPECS[self.biophys]
        if len(self.spec) != self.net.config.out_dim:
            raise ValueError(f"network predicts {self.net.config.out_dim} values, "
                             f"spec has {len(self.spec)}")
        if self.smoothing is not None and self.smoothing <= 0:
            raise ValueError("smoothing must be positive")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def task(self) -> str:
        return bp.TASK_OF[self.biophys]

    def describe(self) -> dict:
        return {"kind": "dmc", "net": self.net.config.to_dict(), "biophys": self.biophys,
                "spec": self.spec.to_json(), "smoothing": self.smoothing, "window": self.window,
                "offset": self.offset, "pooled_budbreak": self.gdd.pooled_budbreak,
                "carry_overshoot": self.gdd.carry_overshoot, "loss_stages": list(self.loss_stages)}

    @classmethod
    def from_meta(cls, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> "DmcModel":
        cfg = NetConfig.from_dict(meta["net"])
        shapes = pn.weight_shapes(cfg)
        net = NetWeights(cfg, {k: np.array(arrays[k]) for k in shapes})
        return cls(net, meta["biophys"], bp.ParamSpec.from_json(meta["spec"]), meta.get("smoothing"),
                   meta.get("window"), meta.get("offset", False),
                   bp.GddConfig(meta.get("pooled_budbreak", True), meta.get("carry_overshoot", True)),
                   tuple(meta.get("loss_stages", (1, 2, 3))))

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "DmcModel":
        return replace(self, net=NetWeights(self.net.config, {k: np.array(v) for k, v in arrays.items()}))


# -- differentiable core --------------------------------------------------------

def net_raw(params: Mapping, model: DmcModel, x, cultivars, valid=None):
    """Raw network outputs (B, T, d) in [-1, 1]."""
    cfg = model.net.config
    if model.window is not None:
        return pn.apply_windowed(params, cfg, x, cultivars, model.window, valid)
    return pn.apply(params, cfg, x, cultivars, valid)


class OmegaMap:
    """Turns raw outputs into the parameters applied each day, one day at a time.

    Handles the smoothing recursion and the one-day offset, and can resume
    from :meth:`state`.
    """

    def __init__(self, model: DmcModel, B: int, prev=None, started: bool = False):
        self.model = model
        self.spec = model.spec
        mid = np.broadcast_to(self.spec.midpoint, (B, len(self.spec))).copy()
        self.prev = ad.const(mid if prev is None else np.asarray(prev))
        self.started = started

    def __call__(self, raw_t):
        """(B, d) raw outputs for day t -> parameters applied on day t."""
        spec, s = self.spec, self.model.smoothing
        if s is None:
            today = pn.rescale(raw_t, spec)
        elif not self.started:
            today = self.prev
        else:
            step = ad.mul(ad.clip(raw_t, -1.0, 1.0), s * spec.width)
            today = ad.clip(ad.add(self.prev, step), spec.lo, spec.hi)
        self.started = True
        if self.model.offset:
            applied, self.prev = self.prev, today
            return applied
        self.prev = today
        return today

    def state(self) -> dict:
        return {"prev": self.prev.value.copy(), "started": self.started}


def omega_sequence(raw, model: DmcModel, om: OmegaMap | None = None):
    """(B, T, d) applied parameters for a whole raw sequence."""
    raw = ad.const(raw)
    B, T, _ = raw.shape
    if model.smoothing is None and not model.offset and om is None:
        return pn.rescale(raw, model.spec)
    om = om or OmegaMap(model, B)
    days = [om(r) for r in ad.unstack(raw, 1)]
    return ad.stack(days, axis=1) if days else ad.const(np.zeros((B, 0, len(model.spec))))


def batch_loss(params: Mapping, model: DmcModel, batch) -> ad.Var:
    raw = net_raw(params, model, batch.x, batch.cultivar, batch.valid)
    omega = omega_sequence(raw, model)
    if model.biophys == "gdd":
        tr = bp.gdd_rollout_batch(batch.tmean, omega, batch.valid, model.gdd)
        return onset_loss(tr.onset_soft, batch.onsets, model.loss_stages)
    tr = bp.ferguson_rollout_batch(batch.tmean, omega, batch.valid)
    return masked_mse(tr.lte, batch.y, batch.y_mask & batch.valid)


def dmc_trainable(model: DmcModel, meta: Mapping | None = None) -> Trainable:
    from .data import make_batch

    def loss(P, items, rng):
        return batch_loss(P, model, make_batch(items))

    return Trainable(dict(model.net.arrays), loss, {**model.describe(), **(meta or {})})


# -- inference ------------------------------------------------------------------

@dataclass
class DmcState:
    """Everything needed to continue a rollout: recurrent, biophysical and smoothing state."""

    day: int
    h: np.ndarray | None
    bio: dict
    omega: dict
    history: np.ndarray | None = None   # last window-1 feature rows, windowed nets only


def _inputs(series):
    x = series.features if hasattr(series, "features") else np.asarray(series, dtype=np.float64)
    tm = series.tmean() if hasattr(series, "tmean") else None
    return x, tm


def _run(model: DmcModel, x: np.ndarray, tmean: np.ndarray, cultivar: int,
         state: DmcState | None = None):
    """Plain evaluation over one season chunk; returns (values, omega, raw, trace, state)."""
    P = model.net.arrays
    cfg = model.net.config
    T = len(x)
    h0 = None if state is None else state.h
    if model.window is not None:
        hist = np.zeros((0, x.shape[1])) if state is None or state.history is None else state.history
        full = np.concatenate([hist, x])
        raw_full = pn.apply_windowed(P, cfg, full, [cultivar], model.window).value
        raw = raw_full[:, len(hist):]
        keep = max(0, model.window - 1)
        new_hist = full[len(full) - keep:] if keep else full[:0]
        h_last = None
    else:
        raw_v, h_last = pn.apply(P, cfg, x[None], [cultivar], h0=h0, return_state=True)
        raw = raw_v.value
        h_last = None if h_last is None else h_last.value
        new_hist = None
    om = OmegaMap(model, 1, **(state.omega if state else {}))
    omega = omega_sequence(raw, model, om if (model.smoothing is not None or model.offset) else None).value
    day = 0 if state is None else state.day
    if model.biophys == "gdd":
        bio = state.bio if state else {}
        st = bp.GddStepper(1, model.gdd, bio.get("stage"), bio.get("acc"), day)
        thr = bp._stage_thresholds(ad.const(omega), model.gdd)
        dd = bp.gdd_response(tmean[None, :], omega)
        for t in range(T):
            st.advance(ad.const(dd[:, t]), thr[:, t, :], np.ones(1, bool))
        tr = st.finish(thr)
        values = tr.stages[0].astype(float)
        bio_state = st.state()
    else:
        bio = state.bio if state else {}
        st = bp.FergusonStepper(1, bio.get("hc"), bio.get("chill"), bio.get("eco"))
        for t in range(T):
            st.step(omega[:, t, :], tmean[None, t])
        tr = st.finish()
        values = tr.lte.value[0]
        bio_state = st.state()
    new_state = DmcState(day + T, h_last, bio_state, om.state(), new_hist)
    return values, omega[0], raw[0], tr, new_state


@dataclass
class Prediction:
    series: bp.CropStateSeries
    omega: np.ndarray
    raw: np.ndarray
    state: DmcState


def dmc_rollout(model: DmcModel, series, cultivar: int, state: DmcState | None = None) -> Prediction:
    """Daily predictions and the applied parameter trace for one normalized season."""
    x, tm = _inputs(series)
    if tm is None:
        raise ValueError("series must carry raw temperatures (a normalized WeatherSeries)")
    if x.shape[1] != model.net.config.input_dim:
        raise ValueError(f"expected {model.net.config.input_dim} features, got {x.shape[1]}")
    values, omega, raw, tr, st = _run(model, x, tm, cultivar, state)
    dates = getattr(series, "dates", None)
    if model.biophys == "gdd":
        out = bp.CropStateSeries("phenology", values, onsets=tr.onsets[0], dates=dates)
    else:
        out = bp.CropStateSeries("hardiness", values, phase=tr.phase[0], dates=dates)
    return Prediction(out, omega, raw, st)


def dmc_rollout_smoothed(model: DmcModel, series, cultivar: int, s: float | None = None) -> Prediction:
    """:func:`dmc_rollout` in the delta formulation with scale ``s``."""
    m = model if s is None else replace(model, smoothing=s)
    if m.smoothing is None:
        raise ValueError("a smoothing scale is required")
    return dmc_rollout(m, series, cultivar)


def forecast(model: DmcModel, past, future, horizon: int, cultivar: int,
             state: DmcState | None = None) -> Prediction:
    """Warm up on ``past`` then roll ``horizon`` days of caller-supplied ``future`` weather."""
    if horizon < 0 or horizon > len(future):
        raise ValueError(f"horizon {horizon} exceeds the {len(future)} days of future weather")
    warm = state if past is None else dmc_rollout(model, past, cultivar, state).state
    fut = future.slice(0, horizon) if hasattr(future, "slice") else np.asarray(future)[:horizon]
    if horizon == 0:
        kind = "phenology" if model.biophys == "gdd" else "hardiness"
        empty = bp.CropStateSeries(kind, np.zeros(0), onsets=np.full(5, np.nan) if kind == "phenology" else None)
        return Prediction(empty, np.zeros((0, len(model.spec))), np.zeros((0, len(model.spec))), warm)
    return dmc_rollout(model, fut, cultivar, warm)


def predictions_csv(pred: Prediction, spec: bp.ParamSpec, path: str | os.PathLike | None = None) -> str:
    """CSV with date, state label, numeric value and one column per parameter."""
    s = pred.series
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "state", "value", *[f"omega_{n}" for n in spec.names]])
    dates = s.dates if s.dates is not None else np.arange(len(s))
    for i in range(len(s)):
        v = float(s.values[i])
        label = STAGE_NAMES[int(round(v))] if s.kind == "phenology" else "lte50"
        w.writerow([str(dates[i]), label, repr(v), *[repr(float(o)) for o in pred.omega[i]]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# -- persistence -------------------------------------------------------------

def save_model(path: str | os.PathLike, model: DmcModel, extra: Mapping | None = None) -> None:
    pn.save_checkpoint(path, model.net.arrays, {"model": {**model.describe(), **(extra or {})}})


def load_model(path: str | os.PathLike) -> tuple[DmcModel, dict]:
    arrays, meta = pn.load_checkpoint(path)
    m = meta["model"]
    if m.get("kind", "dmc") not in ("dmc", "dmc-mtl", "dmc-stl", "dmc-agg", "dmc-mult", "dmc-add",
                                    "dmc-multih"):
        raise ValueError(f"{path}: checkpoint holds a {m.get('kind')!r} model, not a DMC model")
    return DmcModel.from_meta(m, arrays), meta


def new_model(biophys: str, input_dim: int, n_cultivars: int, seed: int = 0, **net_kw) -> DmcModel:
    """Freshly initialised DMC model; ``net_kw`` goes to :class:`NetConfig`."""
    extra = {k: net_kw.pop(k) for k in ("smoothing", "window", "offset", "gdd", "loss_stages")
             if k in net_kw}
    cfg = NetConfig(input_dim=input_dim, out_dim=len(bp.SPECS[biophys]), n_cultivars=n_cultivars, **net_kw)
    return DmcModel(pn.init_weights(cfg, seed), biophys, **extra)
