"""In-season adaptation with an error encoding network (EEN).

A frozen DMC model supplies raw parameter outputs.  The EEN reads the
signed error of the previous day's prediction against a sparse
observation and emits a bounded correction that is added to the raw
outputs before rescaling.  The EEN has no bias terms, so a season without
errors leaves the base rollout untouched bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import biophys as bp
from . import paramnet as pn
from .gradtrain import Trainable, TrainConfig, TrainResult, fit, masked_mse, onset_loss
from .hybrid import DmcModel, OmegaMap, Prediction, DmcState, net_raw
from .paramnet import NetConfig

DELTA_SCALE = 0.1


@dataclass
class EenWeights:
    """Bias-free network over (error, cultivar scalar) plus the scalar embedding ``cult``."""

    config: NetConfig
    arrays: dict

    @property
    def n_cultivars(self) -> int:
        return self.arrays["cult"].shape[0]

    def net_arrays(self) -> dict:
        return {k: v for k, v in self.arrays.items() if k != "cult"}


def een_config(base: NetConfig, arch: str = "gru") -> NetConfig:
    """Mirror ``base`` with two inputs, no embedding layer and no biases."""
    return replace(base, input_dim=2, embed_mode="none", embed_dim=2, use_bias=False,
                   head="tanh", arch=arch)


def init_een(base: NetConfig, seed: int = 0, arch: str = "gru") -> EenWeights:
    cfg = een_config(base, arch)
    net = pn.init_weights(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    arrays = dict(net.arrays)
    arrays["cult"] = rng.uniform(-1.0, 1.0, size=(base.n_cultivars, 1))
    return EenWeights(cfg, arrays)


def _een_inputs(err, cultivars, cult):
    """(B,) errors -> (B, 2) inputs; the cultivar scalar is zeroed where the error is 0."""
    err = ad.const(err)
    B = err.shape[0]
    c = ad.reshape(ad.getitem(ad.const(cult), np.asarray(cultivars, int)), (B,))
    cvec = ad.where(err.value != 0.0, c, 0.0)
    return ad.stack([err, cvec], axis=1)


def een_forward(weights: EenWeights, error_seq, cultivar: int) -> np.ndarray:
    """(T, d) outputs in [-1, 1] for a per-day error sequence (NaN = no observation).

    Output on day t depends on errors up to and including day t.
    """
    e = np.nan_to_num(np.asarray(error_seq, dtype=np.float64), nan=0.0)
    T = len(e)
    cult = weights.arrays["cult"]
    c = np.where(e != 0.0, cult[int(cultivar), 0], 0.0)
    x = np.stack([e, c], axis=1)[None] if T else np.zeros((1, 0, 2))
    return pn.apply(weights.net_arrays(), weights.config, x, [0]).value[0]


class _EenCell:
    """One-day EEN evaluation carrying the recurrent state."""

    def __init__(self, params: Mapping, cfg: NetConfig, B: int):
        self.params = {k: v for k, v in params.items() if k != "cult"}
        self.cfg = cfg
        self.h = None if cfg.arch == "ffn" else ad.const(np.zeros((B, cfg.recur_dim)))
        self.zero_c = np.zeros(B, int)

    def __call__(self, x_t):
        B = x_t.shape[0]
        h, state = pn.trunk(self.params, self.cfg, ad.reshape(x_t, (B, 1, 2)), self.zero_c,
                            h0=None if self.h is None else self.h, return_state=True)
        if state is not None:
            self.h = state
        y = pn.head(self.params, self.cfg, h, self.zero_c)
        return ad.reshape(y, (B, y.shape[-1]))


@dataclass
class AdaptTrace:
    trace: object
    omega: ad.Var
    errors: np.ndarray


def _adapt_core(base: DmcModel, een_params: Mapping, een_cfg: NetConfig, raw_base: np.ndarray,
                tmean: np.ndarray, valid: np.ndarray, cultivars: np.ndarray,
                obs: np.ndarray, obs_mask: np.ndarray) -> AdaptTrace:
    """Sequential adapted rollout over a (B, T) batch, differentiable in ``een_params``.

    The error observed on day t enters the EEN on day t+1.  Errors are
    inputs, not differentiated through.
    """
    B, T, d = raw_base.shape
    om = OmegaMap(base, B)
    cell = _EenCell(een_params, een_cfg, B)
    if base.biophys == "gdd":
        st = bp.GddStepper(B, base.gdd)
    else:
        st = bp.FergusonStepper(B)
    err_prev = np.zeros(B)
    errors = np.zeros((B, T))
    omegas = []
    for t in range(T):
        delta = cell(_een_inputs(err_prev, cultivars, een_params["cult"]))
        raw_t = ad.clip(ad.add(raw_base[:, t], ad.mul(delta, DELTA_SCALE)), -1.0, 1.0)
        w_t = om(raw_t)
        omegas.append(w_t)
        out = st.step(w_t, tmean[:, t], valid[:, t])
        pred = out.astype(float) if base.biophys == "gdd" else out.value
        err = np.where(obs_mask[:, t] & valid[:, t], obs[:, t] - pred, 0.0)
        errors[:, t] = err
        err_prev = err
    omega = ad.stack(omegas, axis=1) if T else ad.const(np.zeros((B, 0, d)))
    return AdaptTrace(st.finish(), omega, errors)


def _observation_arrays(observations, T: int, dates=None) -> tuple[np.ndarray, np.ndarray]:
    """Normalise observations to (T,) values and mask.

    Accepts a (T,) array with NaN for missing days, a mapping from day index
    (or date, when ``dates`` is given) to value, a :class:`CropStateSeries`
    (its ``mask`` selects the days), or None.
    """
    vals = np.zeros(T)
    mask = np.zeros(T, bool)
    if observations is None:
        return vals, mask
    if isinstance(observations, bp.CropStateSeries):
        if len(observations) != T:
            raise ValueError(f"observation series has {len(observations)} days, season has {T}")
        m = np.asarray(observations.mask, bool)
        return np.where(m, observations.values, 0.0), m.copy()
    if isinstance(observations, Mapping):
        index = {d: i for i, d in enumerate(dates)} if dates is not None else {}
        for k, v in observations.items():
            i = index.get(k, k)
            if not isinstance(i, (int, np.integer)) or not 0 <= i < T:
                raise ValueError(f"observation {k!r} lies outside the season window")
            vals[i], mask[i] = float(v), True
        return vals, mask
    arr = np.asarray(observations, dtype=np.float64)
    if arr.shape != (T,):
        raise ValueError(f"observation array must have shape ({T},), got {arr.shape}")
    mask = np.isfinite(arr)
    return np.where(mask, arr, 0.0), mask


def adapt_rollout(base: DmcModel, een: EenWeights, series, cultivar: int, observations=None) -> Prediction:
    """Base rollout corrected by the EEN from sparse in-season observations."""
    x = series.features
    tm = series.tmean()
    T = len(x)
    obs, mask = _observation_arrays(observations, T, getattr(series, "dates", None))
    raw = net_raw(base.net.arrays, base, x[None], [cultivar]).value
    res = _adapt_core(base, een.arrays, een.config, raw, tm[None], np.ones((1, T), bool),
                      np.array([cultivar]), obs[None], mask[None])
    dates = getattr(series, "dates", None)
    tr = res.trace
    if base.biophys == "gdd":
        out = bp.CropStateSeries("phenology", tr.stages[0].astype(float), onsets=tr.onsets[0], dates=dates)
    else:
        out = bp.CropStateSeries("hardiness", tr.lte.value[0], phase=tr.phase[0], dates=dates)
    return Prediction(out, res.omega.value[0], raw[0], DmcState(T, None, {}, {}))


# -- training -----------------------------------------------------------------

def sample_cutoffs(rng: np.random.Generator, lengths: Sequence[int]) -> np.ndarray:
    """One cutoff day per season, uniform over ``0..len-1``."""
    return np.array([int(rng.integers(0, max(int(n), 1))) for n in lengths])


def visible_observations(y_mask: np.ndarray, cutoffs: np.ndarray, every: int = 1,
                         phase: np.ndarray | None = None) -> np.ndarray:
    """Observations the EEN may see: labelled, on the sampling grid and not after the cutoff."""
    B, T = y_mask.shape
    t = np.arange(T)[None, :]
    m = y_mask & (t <= np.asarray(cutoffs)[:, None])
    if every > 1:
        ph = np.zeros(B, int) if phase is None else np.asarray(phase, int)
        m &= (t - ph[:, None]) % every == 0
    return m


def een_trainable(base: DmcModel, een: EenWeights, obs_every: int = 1) -> Trainable:
    from .data import make_batch

    def loss(P, items, rng):
        batch = make_batch(items)
        raw = net_raw(base.net.arrays, base, batch.x, batch.cultivar, batch.valid).value
        cut = sample_cutoffs(rng, [len(s) for s in items])
        phase = rng.integers(0, obs_every, size=len(items)) if obs_every > 1 else None
        seen = visible_observations(batch.y_mask & batch.valid, cut, obs_every, phase)
        res = _adapt_core(base, P, een.config, raw, batch.tmean, batch.valid, batch.cultivar,
                          batch.y, seen)
        if base.biophys == "gdd":
            return onset_loss(res.trace.onset_soft, batch.onsets, base.loss_stages)
        return masked_mse(res.trace.lte, batch.y, batch.y_mask & batch.valid)

    meta = {"kind": "een", "een": een.config.to_dict(), "base": base.describe(), "obs_every": obs_every}
    return Trainable(dict(een.arrays), loss, meta)


def train_een(base: DmcModel, seasons: Sequence, config: TrainConfig | None = None,
              val_seasons: Sequence = (), out_dir=None, seed: int | None = None,
              arch: str = "gru", obs_every: int = 1, init: EenWeights | None = None,
              resume: bool = False
              ) -> tuple[EenWeights, TrainResult]:
    """Train an EEN against a frozen base model on the base model's training seasons.

    Each epoch draws a fresh cutoff day per season; observations after it
    are hidden from the EEN while the loss still covers every labelled day.
    With ``val_seasons`` the weights from the best validation epoch are
    returned, since a one-season training set is quickly memorised.
    """
    config = config or TrainConfig.preset("een")
    een = init or init_een(base.net.config, config.seed if seed is None else seed, arch)
    tr = een_trainable(base, een, obs_every)
    res = fit(tr, list(seasons), list(val_seasons), config, out_dir, resume)
    keep = res.best_params if val_seasons else res.params
    return EenWeights(een.config, {k: v.copy() for k, v in keep.items()}), res


def save_een(path, een: EenWeights, base: DmcModel | None = None) -> None:
    meta = {"model": {"kind": "een", "een": een.config.to_dict(),
                      "base": base.describe() if base is not None else None}}
    pn.save_checkpoint(path, een.arrays, meta)


def load_een(path) -> EenWeights:
    arrays, meta = pn.load_checkpoint(path)
    m = meta["model"]
    if m.get("kind") != "een":
        raise ValueError(f"{path}: not an EEN checkpoint")
    cfg = NetConfig.from_dict(m["een"])
    keep = set(pn.weight_shapes(cfg)) | {"cult"}
    return EenWeights(cfg, {k: v for k, v in arrays.items() if k in keep})


def onset_rmse(pred_onsets: np.ndarray, true_onsets: np.ndarray, stages=(1, 2, 3)) -> float:
    st = list(stages)
    d = np.asarray(pred_onsets, float)[..., st] - np.asarray(true_onsets, float)[..., st]
    d = d[np.isfinite(d)]
    return math.sqrt(float(np.mean(d * d))) if d.size else math.nan


__all__ = ["DELTA_SCALE", "EenWeights", "een_config", "init_een", "een_forward", "adapt_rollout",
           "sample_cutoffs", "visible_observations", "een_trainable", "train_een", "save_een",
           "load_een", "onset_rmse"]
