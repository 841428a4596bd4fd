"""Growing-degree-day phenology and Ferguson cold-hardiness models.

Both models exist twice:

* a branch-free implementation built from :mod:`hybridcrop.autodiff`
  operations, which accepts a parameter vector per day and is
  differentiable in those parameters, and
* a plain-conditional reference (``oracle_gdd`` / ``oracle_ferguson``) for
  static parameters, used to check the first.

Phenology day indices count from the first day of the season (0-based).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad


class Stage(IntEnum):
    DORMANT = 0
    BUDBREAK = 1
    BLOOM = 2
    VERAISON = 3
    RIPE = 4


SCORED_STAGES = (Stage.BUDBREAK, Stage.BLOOM, Stage.VERAISON)

# development units charged per missing stage when an onset is never reached
UNREACHED_PENALTY_DAYS = 30.0


# -- parameter tables ---------------------------------------------------------

@dataclass(frozen=True)
class ParamEntry:
    name: str
    unit: str
    min: float
    max: float


@dataclass(frozen=True)
class ParamSpec:
    """Ordered named parameters with closed ranges.  ``min == max`` freezes one."""

    entries: tuple[ParamEntry, ...]

    def __post_init__(self):
        for e in self.entries:
            if e.min > e.max:
                raise ValueError(f"{e.name}: min {e.min} > max {e.max}")

    def __len__(self):
        return len(self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    @property
    def lo(self) -> np.ndarray:
        return np.array([e.min for e in self.entries])

    @property
    def hi(self) -> np.ndarray:
        return np.array([e.max for e in self.entries])

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def midpoint(self) -> np.ndarray:
        return self.lo + 0.5 * self.width

    @property
    def frozen(self) -> np.ndarray:
        return self.width == 0

    def index(self, name: str) -> int:
        return self.names.index(name)

    def contains(self, values, tol: float = 1e-9) -> bool:
        v = np.asarray(values)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def with_range(self, name: str, lo: float, hi: float) -> "ParamSpec":
        return ParamSpec(tuple(ParamEntry(e.name, e.unit, lo, hi) if e.name == name else e
                               for e in self.entries))

    def to_json(self, values=None) -> list[dict]:
        out = []
        for i, e in enumerate(self.entries):
            d = asdict(e)
            if values is not None:
                d["value"] = float(np.asarray(values)[i])
            out.append(d)
        return out

    @classmethod
    def from_json(cls, doc: Sequence[Mapping]) -> "ParamSpec":
        return cls(tuple(ParamEntry(d["name"], d.get("unit", ""), float(d["min"]), float(d["max"]))
                         for d in doc))


GDD_SPEC = ParamSpec((
    ParamEntry("tbasem", "degC", 0.0, 15.0),
    ParamEntry("teffmx", "degC", 15.0, 45.0),
    ParamEntry("tsumem", "degC day", 10.0, 100.0),
    ParamEntry("tsum1", "degC day", 100.0, 1000.0),
    ParamEntry("tsum2", "degC day", 100.0, 1000.0),
    ParamEntry("tsum3", "degC day", 100.0, 1000.0),
    ParamEntry("tsum4", "degC day", 100.0, 1000.0),
))

FERGUSON_SPEC = ParamSpec((
    ParamEntry("hcinit", "degC", -15.0, 5.0),
    ParamEntry("hcmin", "degC", -5.0, 0.0),
    ParamEntry("hcmax", "degC", -40.0, -20.0),
    ParamEntry("tendo", "degC", 0.0, 10.0),
    ParamEntry("teco", "degC", 0.0, 10.0),
    ParamEntry("enacclim", "degC/degC", 0.2, 0.2),
    ParamEntry("ecacclim", "degC/degC", 0.2, 0.2),
    ParamEntry("endeacclim", "degC/degC", 0.2, 0.2),
    ParamEntry("ecdeacclim", "degC/degC", 0.2, 0.2),
    ParamEntry("ecobound", "degC day", -800.0, -200.0),
))

SPECS = {"gdd": GDD_SPEC, "ferguson": FERGUSON_SPEC}
TASK_OF = {"gdd": "phenology", "ferguson": "hardiness"}


@dataclass(frozen=True)
class GddParams:
    tbasem: float
    teffmx: float
    tsumem: float
    tsum1: float
    tsum2: float
    tsum3: float
    tsum4: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    def check(self, spec: ParamSpec = GDD_SPEC) -> None:
        if not spec.contains(self.as_array()):
            raise ValueError(f"parameters outside their ranges: {self}")
        if self.teffmx <= self.tbasem:
            raise ValueError("teffmx must exceed tbasem")


@dataclass(frozen=True)
class FergusonParams:
    hcinit: float
    hcmin: float
    hcmax: float
    tendo: float
    teco: float
    ecobound: float
    enacclim: float = 0.2
    ecacclim: float = 0.2
    endeacclim: float = 0.2
    ecdeacclim: float = 0.2

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FERGUSON_SPEC.names])

    def check(self, spec: ParamSpec = FERGUSON_SPEC) -> None:
        if not spec.contains(self.as_array()):
            raise ValueError(f"parameters outside their ranges: {self}")
        if not self.hcmax < self.hcmin:
            raise ValueError("hcmax must be below hcmin")


def as_params(p) -> np.ndarray:
    if isinstance(p, (GddParams, FergusonParams)):
        return p.as_array()
    return np.asarray(p, dtype=np.float64)


def save_param_table(path: str | os.PathLike, spec: ParamSpec, table: Mapping[str, np.ndarray]) -> None:
    """Write ``cultivar -> parameter vector`` as JSON records."""
    doc = {str(k): spec.to_json(v) for k, v in table.items()}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_param_table(path: str | os.PathLike, spec: ParamSpec) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for cultivar, rows in doc.items():
        vals = {r["name"]: float(r["value"]) for r in rows}
        missing = [n for n in spec.names if n not in vals]
        if missing:
            raise ValueError(f"cultivar {cultivar}: missing parameters {missing}")
        out[cultivar] = np.array([vals[n] for n in spec.names])
    return out


# -- model states -------------------------------------------------------------

@dataclass
class PhenologyState:
    stage: int = Stage.DORMANT
    dd_accum: float = 0.0
    onset_days: dict = field(default_factory=dict)


@dataclass
class HardinessState:
    hc: float
    chill_sum: float = 0.0
    ecodormant: bool = False


@dataclass
class CropStateSeries:
    """Daily crop state: phenology stage index or LTE50 in degC.

    ``mask`` marks days with an observation.  For phenology, ``onsets[k]``
    is the day index stage ``k`` was first reached (NaN if never) for
    k = 0..4; index 0 is always 0.
    """

    kind: str
    values: np.ndarray
    mask: np.ndarray | None = None
    onsets: np.ndarray | None = None
    phase: np.ndarray | None = None
    dates: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(len(self.values), dtype=bool)
        if self.kind == "phenology" and self.onsets is None:
            self.onsets = onsets_from_stages(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def stages(self) -> np.ndarray:
        return np.rint(self.values).astype(int)


def onsets_from_stages(stages: np.ndarray, n_stages: int = 5) -> np.ndarray:
    """First day each stage index is reached or exceeded (NaN if never)."""
    s = np.asarray(stages)
    out = np.full(n_stages, np.nan)
    for k in range(n_stages):
        hit = np.flatnonzero(s >= k)
        if hit.size:
            out[k] = hit[0]
    return out


# -- GDD ------------------------------------------------------------------------

@dataclass(frozen=True)
class GddConfig:
    """``pooled_budbreak``: bud break needs tsumem + tsum1 (else tsum1 alone).
    ``carry_overshoot``: surplus degree days carry into the next stage."""

    pooled_budbreak: bool = True
    carry_overshoot: bool = True


def gdd_response(tmean, p):
    """Daily degree days ``clamp(tmean - tbasem, 0, teffmx)``."""
    p = as_params(p) if not isinstance(p, ad.Var) else p
    tb, tm = p[..., 0], p[..., 1]
    if isinstance(p, ad.Var) or isinstance(tmean, ad.Var):
        return ad.minimum(ad.maximum(ad.sub(tmean, tb), 0.0), tm)
    return np.minimum(np.maximum(np.asarray(tmean) - tb, 0.0), tm)


def _stage_thresholds(p, cfg: GddConfig):
    """(…, 4) thresholds for leaving stages Dormant..Veraison."""
    bud = ad.add(p[..., 2], p[..., 3]) if cfg.pooled_budbreak else p[..., 3]
    return ad.stack([bud, p[..., 4], p[..., 5], p[..., 6]], axis=-1)


def _gdd_advance(stage: np.ndarray, acc, dd, thr_row, live: np.ndarray, cfg: GddConfig):
    """Shared branch-free day update.

    ``thr_row`` is (B, 4).  Returns new stage, new accumulator, the crossing
    mask and the fraction of the day at which the threshold was met.
    """
    thr = ad.take_along(thr_row, np.minimum(stage, 3)[:, None], axis=1)[:, 0]
    new = ad.add(acc, dd)
    crossed = (new.value >= thr.value) & (stage < Stage.RIPE) & live
    # a threshold already met at the start of the day (daily parameters can
    # lower it) counts as crossing at the day's start
    inside = crossed & (thr.value > acc.value)
    frac = ad.where(inside, ad.div(ad.sub(thr, acc), ad.where(inside, dd, 1.0)), 0.0)
    rest = ad.sub(new, thr) if cfg.carry_overshoot else 0.0
    acc = ad.where(crossed, rest, new)
    return stage + crossed.astype(int), acc, crossed, frac, thr


def gdd_step(state: PhenologyState, p, tmean: float, day: int,
             cfg: GddConfig = GddConfig()) -> PhenologyState:
    """Advance one day.  ``p`` may differ from the previous call."""
    p = as_params(p)
    dd = gdd_response(tmean, p)
    thr = _stage_thresholds(ad.const(p[None, :]), cfg)
    stage, acc, crossed, _, _ = _gdd_advance(
        np.array([int(state.stage)]), ad.const([state.dd_accum]), ad.const([dd]), thr,
        np.array([True]), cfg)
    onsets = dict(state.onset_days)
    if crossed[0]:
        onsets[Stage(int(stage[0]))] = day
    return PhenologyState(Stage(int(stage[0])), float(acc.value[0]), onsets)


@dataclass
class GddTrace:
    """Batched GDD rollout output.

    ``onset_soft`` is a differentiable (B, 5) surrogate of onset day: the
    fractional crossing time for reached stages, and the last day plus a
    penalty proportional to the remaining development for unreached ones.
    """

    stages: np.ndarray
    onsets: np.ndarray
    onset_soft: ad.Var
    acc: ad.Var
    dd: ad.Var


def _broadcast_params(params, B: int, T: int) -> ad.Var:
    p = ad.const(params)
    if p.ndim == 1:
        p = ad.reshape(p, (1, 1, p.shape[0]))
    elif p.ndim == 2:
        p = ad.reshape(p, (p.shape[0], 1, p.shape[1]))
    if p.shape[:2] != (B, T):
        p = ad.add(p, np.zeros((B, T, p.shape[-1])))
    return p


class GddStepper:
    """Day-by-day GDD state for a batch, resumable and differentiable.

    :func:`gdd_rollout_batch` drives it over whole seasons; the in-season
    adapter drives it one day at a time with parameters that depend on
    earlier outputs.  Both reach identical values because they share
    :func:`_gdd_advance`.
    """

    def __init__(self, B: int, cfg: GddConfig = GddConfig(), stage=None, acc=None, day: int = 0):
        self.cfg = cfg
        self.fresh = stage is None
        self.stage = np.zeros(B, int) if stage is None else np.asarray(stage, int).copy()
        self.acc = ad.const(np.zeros(B) if acc is None else np.asarray(acc, dtype=np.float64))
        self.day0 = day
        self.t = 0
        self.n_live = np.zeros(B, int)
        self.onsets = np.full((B, 5), np.nan)
        self._fracs: list = []
        self._cross: list = []
        self._stages: list = []
        self._thr: list = []

    @property
    def B(self) -> int:
        return self.stage.shape[0]

    def advance(self, dd, thr_row, live: np.ndarray) -> np.ndarray:
        live = np.asarray(live, bool)
        self.stage, self.acc, crossed, frac, _ = _gdd_advance(self.stage, self.acc, dd, thr_row, live,
                                                              self.cfg)
        day = self.day0 + self.t
        self.onsets[crossed, self.stage[crossed]] = day
        self._fracs.append(frac)
        self._cross.append(np.where(crossed, self.stage, 0))
        self._stages.append(self.stage.copy())
        self._thr.append(thr_row)
        self.n_live += live
        self.t += 1
        return self.stage

    def step(self, p_t, tmean_t, live=None) -> np.ndarray:
        """Advance with a (B, d) parameter row and (B,) temperatures."""
        live = np.ones(self.B, bool) if live is None else np.asarray(live, bool)
        p_t = ad.const(p_t)
        dd = ad.mul(gdd_response(np.asarray(tmean_t, dtype=np.float64), p_t), live.astype(float))
        return self.advance(dd, _stage_thresholds(p_t, self.cfg), live)

    def state(self) -> dict:
        return {"stage": self.stage.copy(), "acc": self.acc.value.copy(), "day": self.day0 + self.t}

    def finish(self, thr_all=None) -> "GddTrace":
        B, T = self.B, self.t
        cross_stage = np.stack(self._cross, axis=1) if T else np.zeros((B, 0), int)
        stages = np.stack(self._stages, axis=1) if T else np.zeros((B, 0), int)
        if T:
            days = np.arange(T, dtype=float)[None, :] + (self.day0 - 1)
            cross = ad.where(cross_stage > 0, ad.add(ad.stack(self._fracs, axis=1), days), 0.0)
        else:
            cross = ad.const(np.zeros((B, 0)))
        onehot = (cross_stage[:, :, None] == np.arange(5)[None, None, :]).astype(float)
        onehot[:, :, 0] = 0.0
        soft = ad.vsum(ad.mul(ad.reshape(cross, (B, T, 1)), onehot), axis=1)

        last = self.day0 + self.n_live - 1.0
        if T:
            last_idx = np.maximum(self.n_live - 1, 0)
            if thr_all is None:
                thr_all = ad.stack(self._thr, axis=1)
            rows = ad.getitem(thr_all, (np.arange(B), last_idx))
            thr_last = ad.reshape(ad.take_along(rows, np.minimum(self.stage, 3)[:, None], axis=1), (B,))
        else:
            thr_last = ad.const(np.ones(B))
        partial = ad.sub(1.0, ad.div(self.acc, thr_last))
        ks = np.arange(5)[None, :]
        unreached = ks > self.stage[:, None]
        deficit = ad.add(ad.reshape(partial, (B, 1)),
                         np.maximum(ks - self.stage[:, None] - 1, 0).astype(float))
        penalty = ad.add(ad.mul(deficit, UNREACHED_PENALTY_DAYS), last[:, None])
        soft = ad.add(soft, ad.mul(penalty, unreached.astype(float)))

        onsets = self.onsets.copy()
        if self.fresh:
            onsets[:, 0] = np.where(self.n_live > 0, float(self.day0), np.nan)
        return GddTrace(stages, onsets, soft, self.acc, None)


def _gdd_scan(dd, thr, valid: np.ndarray, cfg: GddConfig, stage0=None, acc0=None, day0: int = 0):
    """Whole-season GDD recursion as a single graph node.

    Forward values match :class:`GddStepper` exactly (same float operations
    in the same order); the reverse pass walks the season backwards along
    the realised crossing pattern.  Returns ``(stages, onsets, out, n_live,
    fresh)`` where ``out`` is a (B, 6) variable: five soft onsets then the
    final accumulator.
    """
    dd, thr = ad.const(dd), ad.const(thr)
    D, TH = dd.value, thr.value
    B, T = D.shape
    fresh = stage0 is None
    stage = np.zeros(B, int) if stage0 is None else np.asarray(stage0, int).copy()
    acc = np.zeros(B) if acc0 is None else np.asarray(acc0, dtype=np.float64).copy()
    rows = np.arange(B)
    onsets = np.full((B, 5), np.nan)
    soft = np.zeros((B, 5))
    stages = np.zeros((B, T), int)
    idx_hist = np.zeros((B, T), int)
    cross_hist = np.zeros((B, T), bool)
    acc_prev = np.zeros((B, T))
    frac_hist = np.zeros((B, T))
    inside_hist = np.zeros((B, T), bool)
    n_live = np.zeros(B, int)
    ripe = int(Stage.RIPE)
    for t in range(T):
        live = valid[:, t]
        idx = np.minimum(stage, 3)
        th = TH[rows, t, idx]
        new = acc + D[:, t]
        crossed = (new >= th) & (stage < ripe) & live
        inside = crossed & (th > acc)
        frac = np.where(inside, (th - acc) / np.where(inside, D[:, t], 1.0), 0.0)
        idx_hist[:, t], cross_hist[:, t], acc_prev[:, t], frac_hist[:, t] = idx, crossed, acc, frac
        inside_hist[:, t] = inside
        acc = np.where(crossed, new - th if cfg.carry_overshoot else 0.0, new)
        stage = stage + crossed.astype(int)
        onsets[crossed, stage[crossed]] = day0 + t
        soft[crossed, stage[crossed]] = frac[crossed] + (float(t) + (day0 - 1))
        stages[:, t] = stage
        n_live += live
    last_idx = np.maximum(n_live - 1, 0)
    if T:
        th_last = TH[rows, last_idx, np.minimum(stage, 3)]
    else:
        th_last = np.ones(B)
    last = day0 + n_live - 1.0
    partial = 1.0 - acc / th_last
    ks = np.arange(5)[None, :]
    unreached = ks > stage[:, None]
    deficit = partial[:, None] + np.maximum(ks - stage[:, None] - 1, 0).astype(float)
    penalty = deficit * UNREACHED_PENALTY_DAYS + last[:, None]
    soft = soft + penalty * unreached.astype(float)
    if fresh:
        onsets[:, 0] = np.where(n_live > 0, float(day0), np.nan)
    out_val = np.concatenate([soft, acc[:, None]], axis=1)
    final_stage, acc_final = stage, acc
    memo = {}

    def grads(g):
        key = id(g)
        if key in memo:
            return memo[key]
        g_soft, abar = g[:, :5], g[:, 5].copy()
        gdd = np.zeros((B, T))
        gthr = np.zeros((B, T, 4))
        if T:
            gu = (g_soft * unreached).sum(axis=1)
            abar += gu * (-UNREACHED_PENALTY_DAYS / th_last)
            np.add.at(gthr, (rows, last_idx, np.minimum(final_stage, 3)),
                      gu * UNREACHED_PENALTY_DAYS * acc_final / th_last ** 2)
        stage_after = stages
        for t in range(T - 1, -1, -1):
            c = cross_hist[:, t]
            idx = idx_hist[:, t]
            d = D[:, t]
            ins = inside_hist[:, t]
            safe = np.where(ins, d, 1.0)
            fbar = np.where(ins, g_soft[rows, stage_after[:, t]], 0.0)
            if cfg.carry_overshoot:
                pre_bar = abar
                gth = np.where(c, -abar, 0.0)
            else:
                pre_bar = np.where(c, 0.0, abar)
                gth = np.zeros(B)
            gth = gth + fbar / safe
            a_prev_bar = pre_bar - fbar / safe
            gdd[:, t] = pre_bar - fbar * frac_hist[:, t] / safe
            gthr[rows, t, idx] += gth
            abar = a_prev_bar
        memo.clear()
        memo[key] = (gdd, gthr)
        return gdd, gthr

    out = ad._make(out_val, (dd, thr), (lambda g: grads(g)[0], lambda g: grads(g)[1]), "gdd_scan")
    return stages, onsets, out, n_live, fresh


def gdd_rollout_batch(tmean: np.ndarray, params, valid: np.ndarray | None = None,
                      cfg: GddConfig = GddConfig(), start_stage=None, start_acc=None,
                      day_offset: int = 0) -> GddTrace:
    """Differentiable GDD rollout over a (B, T) batch of temperatures.

    ``params`` is (d,), (B, d), or (B, T, d).  ``valid`` masks padded days;
    padded days neither accumulate nor transition.
    """
    tmean = np.atleast_2d(np.asarray(tmean, dtype=np.float64))
    B, T = tmean.shape
    valid = np.ones((B, T), bool) if valid is None else np.asarray(valid, bool)
    p = _broadcast_params(params, B, T)
    dd_all = ad.mul(gdd_response(tmean, p), valid.astype(float))
    thr_all = _stage_thresholds(p, cfg)
    stages, onsets, out, _, _ = _gdd_scan(dd_all, thr_all, valid, cfg, start_stage, start_acc, day_offset)
    soft = ad.getitem(out, (slice(None), slice(0, 5)))
    acc = ad.getitem(out, (slice(None), 5))
    return GddTrace(stages, onsets, soft, acc, dd_all)


def gdd_rollout(weather, params_seq, cfg: GddConfig = GddConfig()) -> CropStateSeries:
    """Fold :func:`gdd_step` semantics over a season.

    ``params_seq`` has length 1 (static) or one row per day.
    """
    tmean = weather.tmean() if hasattr(weather, "tmean") else np.asarray(weather, float)
    p = np.atleast_2d(as_params(params_seq) if not isinstance(params_seq, (list, tuple))
                      else np.array([as_params(x) for x in params_seq]))
    T = len(tmean)
    if p.shape[0] not in (1, T):
        raise ValueError(f"params_seq has {p.shape[0]} rows for a {T}-day season")
    tr = gdd_rollout_batch(tmean[None, :], p[None, :, :] if p.shape[0] == T else p[0], cfg=cfg)
    dates = getattr(weather, "dates", None)
    return CropStateSeries("phenology", tr.stages[0].astype(float), onsets=tr.onsets[0], dates=dates)


# -- Ferguson -------------------------------------------------------------------

F_HCINIT, F_HCMIN, F_HCMAX, F_TENDO, F_TECO, F_ENACC, F_ECACC, F_ENDEACC, F_ECDEACC, F_ECOBOUND = range(10)


def hardiness_delta(hc, hcmin, hcmax, ka, kd, chill_units, heat_units):
    """Change in LTE50 for one day.

    Acclimation (negative) is strongest when the bud is least hardy and
    vanishes at ``hcmax``; deacclimation (positive) is strongest at
    ``hcmax`` and vanishes at ``hcmin``.
    """
    span = ad.sub(hcmin, hcmax)
    acclim = ad.mul(ad.mul(ka, chill_units), ad.sub(1.0, ad.div(ad.sub(hcmin, hc), span)))
    deacclim = ad.mul(ad.mul(kd, heat_units), ad.sub(1.0, ad.div(ad.sub(hc, hcmax), span)))
    return ad.add(acclim, deacclim)


def _ferguson_advance(hc, chill, eco: np.ndarray, p_t, tmean_t, live: np.ndarray, chill_units=None):
    """Shared branch-free day update on a (B,) batch.  ``p_t`` is (B, 10).

    ``chill_units`` overrides the built-in chilling response (non-positive).
    """
    col = lambda i: p_t[:, i]  # noqa: E731
    hcmin, hcmax = col(F_HCMIN), col(F_HCMAX)
    tb = ad.where(eco, col(F_TECO), col(F_TENDO))
    diff = ad.sub(tmean_t, tb)
    if chill_units is None:
        chill_units = ad.minimum(diff, 0.0)
    heat_units = ad.maximum(diff, 0.0)
    ka = ad.where(eco, col(F_ECACC), col(F_ENACC))
    kd = ad.where(eco, col(F_ECDEACC), col(F_ENDEACC))
    new_hc = ad.clip(ad.add(hc, hardiness_delta(hc, hcmin, hcmax, ka, kd, chill_units, heat_units)),
                     hcmax, hcmin)
    hc = ad.where(live, new_hc, hc)
    chill = ad.where(live, ad.add(chill, chill_units), chill)
    eco = eco | (live & (chill.value <= p_t.value[:, F_ECOBOUND]))
    return hc, chill, eco


def ferguson_step(state: HardinessState, p, tmean: float) -> HardinessState:
    p = as_params(p)[None, :]
    hc, chill, eco = _ferguson_advance(ad.const([state.hc]), ad.const([state.chill_sum]),
                                       np.array([state.ecodormant]), ad.const(p),
                                       np.array([tmean], float), np.array([True]))
    return HardinessState(float(hc.value[0]), float(chill.value[0]), bool(eco[0]))


def initial_hardiness(p) -> ad.Var:
    """Start-of-season LTE50: ``hcinit`` clamped into ``[hcmax, hcmin]``."""
    p = ad.const(p)
    return ad.clip(p[..., F_HCINIT], p[..., F_HCMAX], p[..., F_HCMIN])


@dataclass
class FergusonTrace:
    lte: ad.Var
    phase: np.ndarray
    hc: ad.Var
    chill: ad.Var


class FergusonStepper:
    """Day-by-day Ferguson state for a batch; see :class:`GddStepper`.

    Without ``hc`` the first call to :meth:`step` initialises the state from
    that day's parameters.
    """

    def __init__(self, B: int, hc=None, chill=None, eco=None):
        self.hc = None if hc is None else ad.const(np.asarray(hc, dtype=np.float64))
        self.chill = ad.const(np.zeros(B) if chill is None else np.asarray(chill, dtype=np.float64))
        self.eco = np.zeros(B, bool) if eco is None else np.asarray(eco, bool).copy()
        self._lte: list = []
        self._phase: list = []

    @property
    def B(self) -> int:
        return self.eco.shape[0]

    def step(self, p_t, tmean_t, live=None, chill_units=None):
        live = np.ones(self.B, bool) if live is None else np.asarray(live, bool)
        p_t = ad.const(p_t)
        if self.hc is None:
            self.hc = initial_hardiness(p_t)
        self.hc, self.chill, self.eco = _ferguson_advance(self.hc, self.chill, self.eco, p_t,
                                                          np.asarray(tmean_t, dtype=np.float64), live,
                                                          chill_units)
        self._lte.append(self.hc)
        self._phase.append(self.eco.copy())
        return self.hc

    def state(self) -> dict:
        return {"hc": None if self.hc is None else self.hc.value.copy(),
                "chill": self.chill.value.copy(), "eco": self.eco.copy()}

    def finish(self) -> FergusonTrace:
        B = self.B
        lte = ad.stack(self._lte, axis=1) if self._lte else ad.const(np.zeros((B, 0)))
        phase = np.stack(self._phase, axis=1) if self._phase else np.zeros((B, 0), bool)
        hc = self.hc if self.hc is not None else ad.const(np.full(B, np.nan))
        return FergusonTrace(lte, phase, hc, self.chill)


def ferguson_rollout_batch(tmean: np.ndarray, params, valid: np.ndarray | None = None,
                           start_hc=None, start_chill=None, start_eco=None) -> FergusonTrace:
    """Differentiable Ferguson rollout; shapes as :func:`gdd_rollout_batch`."""
    tmean = np.atleast_2d(np.asarray(tmean, dtype=np.float64))
    B, T = tmean.shape
    valid = np.ones((B, T), bool) if valid is None else np.asarray(valid, bool)
    p = _broadcast_params(params, B, T)
    st = FergusonStepper(B, start_hc, start_chill, start_eco)
    for t in range(T):
        st.step(p[:, t, :], tmean[:, t], valid[:, t])
    return st.finish()


def ferguson_rollout(weather, params_seq) -> CropStateSeries:
    tmean = weather.tmean() if hasattr(weather, "tmean") else np.asarray(weather, float)
    p = np.atleast_2d(as_params(params_seq) if not isinstance(params_seq, (list, tuple))
                      else np.array([as_params(x) for x in params_seq]))
    T = len(tmean)
    if p.shape[0] not in (1, T):
        raise ValueError(f"params_seq has {p.shape[0]} rows for a {T}-day season")
    tr = ferguson_rollout_batch(tmean[None, :], p[None, :, :] if p.shape[0] == T else p[0])
    return CropStateSeries("hardiness", tr.lte.value[0], phase=tr.phase[0],
                           dates=getattr(weather, "dates", None))


def rollout(model: str, weather, params_seq, **kw) -> CropStateSeries:
    if model == "gdd":
        return gdd_rollout(weather, params_seq, **kw)
    if model == "ferguson":
        return ferguson_rollout(weather, params_seq)
    raise ValueError(f"unknown biophysical model {model!r}")


# -- reference implementations ----------------------------------------------

def _daily_rows(params, T: int) -> list:
    p = np.atleast_2d(as_params(params))
    if p.shape[0] == 1:
        return [p[0].tolist()] * T
    if p.shape[0] != T:
        raise ValueError(f"{p.shape[0]} parameter rows for a {T}-day season")
    return p.tolist()


def oracle_gdd(weather, params, cfg: GddConfig = GddConfig()) -> CropStateSeries:
    """GDD written with ordinary conditionals on Python floats.

    ``params`` is one vector, or one row per day.
    """
    tmean = weather.tmean() if hasattr(weather, "tmean") else np.asarray(weather, float)
    rows = _daily_rows(params, len(tmean))
    stage, acc = 0, 0.0
    stages = []
    for t, p in zip(tmean, rows):
        tb, tm = p[0], p[1]
        thresholds = [p[2] + p[3] if cfg.pooled_budbreak else p[3], p[4], p[5], p[6]]
        dd = t - tb
        if dd < 0:
            dd = 0.0
        if dd > tm:
            dd = tm
        acc += dd
        if stage < 4 and acc >= thresholds[stage]:
            acc = acc - thresholds[stage] if cfg.carry_overshoot else 0.0
            stage += 1
        stages.append(stage)
    out = CropStateSeries("phenology", np.array(stages, float), dates=getattr(weather, "dates", None))
    if not stages:
        out.onsets = np.full(5, np.nan)
    return out


def oracle_ferguson(weather, params) -> CropStateSeries:
    """Ferguson model written with ordinary conditionals on Python floats."""
    tmean = weather.tmean() if hasattr(weather, "tmean") else np.asarray(weather, float)
    rows = _daily_rows(params, len(tmean))
    p = rows[0] if len(rows) else as_params(params).reshape(-1, len(FERGUSON_SPEC))[0]
    hc = min(max(p[F_HCINIT], p[F_HCMAX]), p[F_HCMIN])
    chill, eco = 0.0, False
    lte, phase = [], []
    for t, p in zip(tmean, rows):
        hcmin, hcmax = p[F_HCMIN], p[F_HCMAX]
        if eco:
            tb, ka, kd = p[F_TECO], p[F_ECACC], p[F_ECDEACC]
        else:
            tb, ka, kd = p[F_TENDO], p[F_ENACC], p[F_ENDEACC]
        if t < tb:
            cu, hu = t - tb, 0.0
        else:
            cu, hu = 0.0, t - tb
        span = hcmin - hcmax
        delta = ka * cu * (1.0 - (hcmin - hc) / span) + kd * hu * (1.0 - (hc - hcmax) / span)
        hc = hc + delta
        if hc < hcmax:
            hc = hcmax
        elif hc > hcmin:
            hc = hcmin
        chill += cu
        if chill <= p[F_ECOBOUND]:
            eco = True
        lte.append(hc)
        phase.append(eco)
    return CropStateSeries("hardiness", np.array(lte), phase=np.array(phase, bool),
                           dates=getattr(weather, "dates", None))


def oracle(model: str, weather, params, **kw) -> CropStateSeries:
    return oracle_gdd(weather, params, **kw) if model == "gdd" else oracle_ferguson(weather, params)
