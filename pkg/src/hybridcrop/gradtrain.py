"""Losses, gradient checking, the optimizer and the training loop.

Every model in the package is trained through :func:`fit`, which consumes a
:class:`Trainable` (named arrays plus a loss over a list of seasons).  The
loop is deterministic: shuffling draws from ``default_rng([seed, epoch])``
and checkpoints carry no timestamps.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import biophys as bp
from .paramnet import load_checkpoint, rescale, save_checkpoint

log = logging.getLogger(__name__)

value_and_grad = ad.value_and_grad


def grad(loss_fn: Callable[[dict], ad.Var], params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradient of a scalar composite.

    Raises :class:`~hybridcrop.autodiff.NonFiniteError` naming the first
    operation that produced a non-finite value.
    """
    return ad.grad(loss_fn, params)


# -- losses -------------------------------------------------------------------

def masked_mse(pred, target, mask=None) -> ad.Var:
    """Mean squared error over entries where ``mask`` is true.

    An all-masked input gives 0 with a zero gradient.
    """
    pred = ad.const(pred)
    target = np.asarray(target.value if isinstance(target, ad.Var) else target, dtype=np.float64)
    m = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), pred.shape)
    n = int(m.sum())
    if n == 0:
        return ad.mul(ad.vsum(pred), 0.0)
    diff = ad.where(m, ad.sub(pred, np.where(m, target, 0.0)), 0.0)
    return ad.mul(ad.vsum(ad.square(diff)), 1.0 / n)


def pinn_loss(pred, target, biophys_pred, p: float, mask=None, phys_mask=None) -> ad.Var:
    """``(1 - p) * MSE(pred, target) + p * MSE(pred, biophys_pred)``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    data = masked_mse(pred, target, mask)
    phys = masked_mse(pred, biophys_pred, phys_mask)
    return ad.add(ad.mul(data, 1.0 - p), ad.mul(phys, p))


def cross_entropy(logits, target, mask=None) -> ad.Var:
    """Mean negative log-likelihood of integer ``target`` classes over observed days."""
    logits = ad.const(logits)
    t = np.asarray(target).astype(int)
    m = np.ones(t.shape, bool) if mask is None else np.asarray(mask, bool)
    n = int(m.sum())
    if n == 0:
        return ad.mul(ad.vsum(logits), 0.0)
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_along(logp, np.clip(t, 0, logits.shape[-1] - 1)[..., None], axis=-1)
    picked = ad.reshape(picked, t.shape)
    return ad.mul(ad.vsum(ad.where(m, picked, 0.0)), -1.0 / n)


def onset_loss(onset_soft, true_onsets: np.ndarray, stages=(1, 2, 3)) -> ad.Var:
    """Phenology loss on continuous crossing times.

    A stage reached on integer day ``d`` has its continuous crossing time in
    ``(d - 1, d]``, so the target is ``d - 0.5``.
    """
    st = list(stages)
    pred = ad.getitem(onset_soft, (slice(None), st))
    tgt = true_onsets[:, st] - 0.5
    return masked_mse(pred, np.nan_to_num(tgt), np.isfinite(tgt))


def state_loss(model: str, tmean: np.ndarray, params, batch, cfg: bp.GddConfig = bp.GddConfig(),
               stages=(1, 2, 3)) -> ad.Var:
    """Loss of a biophysical rollout driven by ``params`` against ``batch`` labels."""
    if model == "gdd":
        tr = bp.gdd_rollout_batch(tmean, params, batch.valid, cfg)
        return onset_loss(tr.onset_soft, batch.onsets, stages)
    tr = bp.ferguson_rollout_batch(tmean, params, batch.valid)
    return masked_mse(tr.lte, batch.y, batch.y_mask & batch.valid)


# -- finite differences ----------------------------------------------------------

@dataclass
class FdReport:
    max_rel_err: float
    n_checked: int
    excluded: list = field(default_factory=list)
    worst: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.n_checked > 0

    def __float__(self):
        return self.max_rel_err


def finite_diff_check(loss_fn: Callable[[dict], ad.Var], point: Mapping[str, np.ndarray],
                      eps: float = 1e-4, n_coords: int = 200, seed: int = 0,
                      kink_tol: float = 0.25) -> FdReport:
    """Compare reverse-mode gradients with central differences.

    ``n_coords`` coordinates are drawn without replacement across all arrays
    (all of them if there are fewer).  The relative error of a coordinate is
    ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.

    A coordinate is excluded as a kink when the gap between its one-sided
    slopes does not shrink linearly with the step, which is what happens
    when a clamp or max boundary lies within ``eps`` of the point.  The gap
    is compared at ``eps``, ``eps/2`` and ``eps/4``: a single kink at distance
    ``eps/3`` halves the first gap exactly, but not the second.
    """
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    f0, g = ad.value_and_grad(loss_fn, point)
    coords = [(k, i) for k in sorted(point) for i in range(point[k].size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def f_at(name, idx, delta):
        arr = point[name].copy()
        arr.flat[idx] += delta
        args = {k: ad.const(arr if k == name else v) for k, v in point.items()}
        return float(loss_fn(args).value)

    worst, max_err, excluded, n = None, 0.0, [], 0
    for name, idx in coords:
        fp, fm = f_at(name, idx, eps), f_at(name, idx, -eps)
        fwd, bwd = (fp - f0) / eps, (f0 - fm) / eps
        gap = fwd - bwd
        if abs(gap) > 1e-6 * (abs(fwd) + abs(bwd)) + 1e-9:
            gaps = [gap]
            for h in (eps / 2, eps / 4):
                gaps.append((f_at(name, idx, h) - f0) / h - (f0 - f_at(name, idx, -h)) / h)
            if any(abs(b - a / 2) > kink_tol * abs(a) for a, b in zip(gaps, gaps[1:])):
                excluded.append((name, idx))
                continue
        g_fd = (fp - fm) / (2 * eps)
        g_ad = float(g[name].flat[idx])
        err = abs(g_ad - g_fd) / (abs(g_fd) + 1e-8)
        n += 1
        if err >= max_err:
            max_err, worst = err, (name, idx, g_ad, g_fd)
    return FdReport(max_err, n, excluded, worst)


# -- optimizer --------------------------------------------------------------

def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    big = max((float(np.max(np.abs(g))) for g in grads.values() if g.size), default=0.0)
    if big == 0.0:
        return 0.0
    # scaled so that squaring cannot overflow
    norm = big * math.sqrt(sum(float(np.sum((g / big) ** 2)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


class Adam:
    """Adam with bias correction.  State is kept as named arrays for checkpoints."""

    def __init__(self, params: Mapping[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (*self.m.values(), *self.v.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for k in self.m:
            self.m[k] = arrays[f"opt.m.{k}"].copy()
            self.v[k] = arrays[f"opt.v.{k}"].copy()


@dataclass
class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a new best."""

    lr: float
    factor: float = 0.9
    patience: int = 10
    best: float = math.inf
    bad: int = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


# -- configuration ----------------------------------------------------------------

# (learning rate, batch size) per model family
LR_PRESETS = {
    "dmc-mtl": (1e-4, 12),
    "dmc-mtl-main": (2e-4, 12),
    "dmc-stl": (5e-3, 4),
    "dmc-agg": (1e-4, 12),
    "dmc-mult": (1e-4, 12),
    "dmc-add": (1e-4, 12),
    "dmc-multih": (1e-4, 12),
    "deep-mtl": (1e-4, 12),
    "pinn": (1e-4, 12),
    "residual": (1e-4, 12),
    "temphybrid": (2e-2, 4),
    "gd": (1e-1, 4),
    "een": (1e-4, 12),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    learning_rate: float = 1e-4
    batch_size: int = 12
    anneal_factor: float = 0.9
    plateau_patience: int = 10
    seed: int = 0
    clip_norm: float | None = 10.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0.0 < self.anneal_factor <= 1.0:
            raise ValueError("anneal_factor must lie in (0, 1]")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def preset(cls, kind: str, **kw) -> "TrainConfig":
        lr, bs = LR_PRESETS[kind]
        return cls(learning_rate=kw.pop("learning_rate", lr), batch_size=kw.pop("batch_size", bs), **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- training loop ----------------------------------------------------------------

LossFn = Callable[[Mapping[str, ad.Var], Sequence, np.random.Generator], ad.Var]


@dataclass
class Trainable:
    """Arrays to optimise, a loss over a list of items, and descriptive metadata.

    ``loss(params, items, rng)`` returns the mean loss of ``items``; ``rng``
    is a per-batch generator for losses with their own randomness.
    """

    params: dict[str, np.ndarray]
    loss: LossFn
    meta: dict = field(default_factory=dict)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str, checkpoint: str | None):
        super().__init__(f"training diverged at epoch {epoch} ({detail}); "
                         f"last good checkpoint: {checkpoint}")
        self.epoch = epoch
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    log: list[dict]
    out_dir: Path | None = None

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.log]


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_loss_log(path: Path, rows: Sequence[Mapping]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for r in rows:
        w.writerow([int(r["epoch"]), _fmt(r["train_loss"]), _fmt(r["val_loss"]), _fmt(r["lr"])])
    path.write_text(buf.getvalue())


def read_loss_log(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"]), "lr": float(r["lr"])} for r in csv.DictReader(fh)]


def evaluate_loss(tr: Trainable, params: Mapping[str, np.ndarray], items: Sequence,
                  batch_size: int, seed: int = 0) -> float:
    """Size-weighted mean loss over ``items`` without building gradients."""
    if not items:
        return math.nan
    total = 0.0
    for b, i in enumerate(range(0, len(items), batch_size)):
        chunk = items[i:i + batch_size]
        rng = np.random.default_rng([seed, 2**31 - 1, b])
        val = float(tr.loss({k: ad.const(v) for k, v in params.items()}, chunk, rng).value)
        total += val * len(chunk)
    return total / len(items)


def fit(tr: Trainable, train_items: Sequence, val_items: Sequence = (),
        config: TrainConfig = TrainConfig(), out_dir: str | os.PathLike | None = None,
        resume: bool = False, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch Adam with plateau annealing on the training loss.

    With ``out_dir`` the loop writes ``last.ckpt`` (weights, optimizer and
    scheduler state), ``best.ckpt`` (lowest validation loss, or lowest
    training loss without a validation set) and ``loss_log.csv``.
    ``resume`` continues from ``last.ckpt``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in tr.params.items()}
    opt = Adam(params, config.betas, config.adam_eps)
    sched = PlateauScheduler(config.learning_rate, config.anneal_factor, config.plateau_patience)
    rows: list[dict] = []
    best_metric, best_params = math.inf, {k: v.copy() for k, v in params.items()}
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    last_path = out / "last.ckpt" if out else None

    if resume:
        if last_path is None or not last_path.exists():
            raise FileNotFoundError("resume requested but no last.ckpt in the output directory")
        arrays, meta = load_checkpoint(last_path)
        st = meta["train_state"]
        params = {k: arrays[k] for k in params}
        opt = Adam(params, config.betas, config.adam_eps)
        opt.load_state(arrays, st["opt_t"])
        sched = PlateauScheduler(st["lr"], config.anneal_factor, config.plateau_patience,
                                 st["sched_best"], st["sched_bad"])
        start = st["epoch"]
        best_metric = st["best_metric"]
        if (out / "best.ckpt").exists():
            b_arrays, _ = load_checkpoint(out / "best.ckpt")
            best_params = {k: b_arrays[k] for k in params}
        rows = [r for r in read_loss_log(out / "loss_log.csv") if r["epoch"] <= start]

    def save(path: Path, arrs: Mapping[str, np.ndarray], epoch: int, with_opt: bool) -> None:
        meta = {"model": tr.meta, "train": config.to_dict()}
        payload = dict(arrs)
        if with_opt:
            payload.update(opt.state_arrays())
            meta["train_state"] = {"epoch": epoch, "lr": sched.lr, "sched_best": sched.best,
                                   "sched_bad": sched.bad, "opt_t": opt.t,
                                   "best_metric": best_metric}
        save_checkpoint(path, payload, meta)

    n = len(train_items)
    if n == 0:
        raise ValueError("no training items")
    for epoch in range(start + 1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        lr = sched.lr
        total = 0.0
        for b, i in enumerate(range(0, n, config.batch_size)):
            chunk = [train_items[j] for j in order[i:i + config.batch_size]]
            brng = np.random.default_rng([config.seed, epoch, b])
            try:
                val, g = ad.value_and_grad(lambda P: tr.loss(P, chunk, brng), params)
            except ad.NonFiniteError as e:
                _diverged(out, rows, epoch, str(e), last_path)
            if not math.isfinite(val):
                _diverged(out, rows, epoch, "non-finite loss", last_path)
            clip_global_norm(g, config.clip_norm)
            opt.step(params, g, lr)
            total += val * len(chunk)
        train_loss = total / n
        if not all(np.all(np.isfinite(v)) for v in params.values()):
            _diverged(out, rows, epoch, "non-finite weights", last_path)
        if not opt.finite():
            _diverged(out, rows, epoch, "non-finite optimizer moments", last_path)
        val_loss = evaluate_loss(tr, params, list(val_items), config.batch_size, config.seed)
        metric = val_loss if val_items else train_loss
        improved = metric < best_metric
        if improved:
            best_metric = metric
            best_params = {k: v.copy() for k, v in params.items()}
        sched.step(train_loss)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        rows.append(row)
        if on_epoch:
            on_epoch(row)
        if out is not None:
            if improved:
                save(out / "best.ckpt", best_params, epoch, False)
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save(last_path, params, epoch, True)
                write_loss_log(out / "loss_log.csv", rows)
    if out is not None:
        save(out / "final.ckpt", params, config.epochs, False)
        write_loss_log(out / "loss_log.csv", rows)
    return TrainResult(params, best_params, rows, out)


def _diverged(out: Path | None, rows, epoch: int, detail: str, last_path) -> None:
    if out is not None:
        write_loss_log(out / "loss_log.csv", rows)
    ck = str(last_path) if last_path is not None and last_path.exists() else None
    raise TrainingDiverged(epoch, detail, ck)


# -- static calibration baseline -------------------------------------------------

def static_params(logits, spec: bp.ParamSpec):
    """Unconstrained logits -> parameters inside ``spec`` via tanh and rescale."""
    return rescale(ad.tanh(logits), spec)


def gd_trainable(model: str, n_cultivars: int, spec: bp.ParamSpec | None = None,
                 cfg: bp.GddConfig = bp.GddConfig(), init=None) -> Trainable:
    """Per-cultivar static parameter logits fitted through the differentiable rollout."""
    from .data import make_batch

    spec = spec or bp.SPECS[model]
    logits = np.zeros((n_cultivars, len(spec))) if init is None else np.array(init, dtype=np.float64)

    def loss(P, items, rng):
        batch = make_batch(items)
        p = static_params(ad.getitem(P["logits"], batch.cultivar), spec)
        return state_loss(model, batch.tmean, p, batch, cfg)

    return Trainable({"logits": logits}, loss, {"kind": "gd", "model": model,
                                                "spec": spec.to_json()})


def season_errors(model: str, batch, params, cfg: bp.GddConfig = bp.GddConfig(),
                  stages=(1, 2, 3)) -> np.ndarray:
    """Per-season loss of a static or daily parameterisation, without gradients."""
    p = ad.const(params)
    if model == "gdd":
        tr = bp.gdd_rollout_batch(batch.tmean, p, batch.valid, cfg)
        st = list(stages)
        tgt = batch.onsets[:, st] - 0.5
        m = np.isfinite(tgt)
        err = np.where(m, tr.onset_soft.value[:, st] - np.nan_to_num(tgt), 0.0) ** 2
    else:
        tr = bp.ferguson_rollout_batch(batch.tmean, p, batch.valid)
        m = batch.y_mask & batch.valid
        err = np.where(m, tr.lte.value - batch.y, 0.0) ** 2
    return err.sum(axis=1) / np.maximum(m.sum(axis=1), 1)


def search_init(model: str, seasons: Sequence, n_cultivars: int, spec: bp.ParamSpec,
                n_candidates: int = 256, seed: int = 0, cfg: bp.GddConfig = bp.GddConfig()) -> np.ndarray:
    """Brute-force starting logits: best of ``n_candidates`` uniform draws per cultivar.

    Candidates are shared across cultivars and drawn over the full ranges.
    Returns (n_cultivars, d) logits; cultivars without seasons stay at 0.
    """
    from .data import make_batch

    rng = np.random.default_rng([seed, 7])
    u = rng.uniform(-0.95, 0.95, size=(n_candidates, len(spec)))
    u[0] = 0.0
    cand = rescale(u, spec)
    logits = np.zeros((n_cultivars, len(spec)))
    by_c: dict[int, list] = {}
    for s in seasons:
        by_c.setdefault(s.cultivar, []).append(s)
    for c, items in sorted(by_c.items()):
        batch = make_batch(items)
        rep = lambda a: np.repeat(a, n_candidates, axis=0)  # noqa: E731
        tiled = type(batch)(rep(batch.x), rep(batch.tmean), rep(batch.valid), rep(batch.cultivar),
                            rep(batch.y), rep(batch.y_mask), rep(batch.onsets), batch.task)
        params = np.tile(cand, (len(items), 1))
        err = season_errors(model, tiled, params, cfg).reshape(len(items), n_candidates).mean(axis=0)
        logits[c] = np.arctanh(u[int(np.argmin(err))])
    return logits


def gd_calibrate(model: str, seasons: Sequence, n_cultivars: int | None = None,
                 config: TrainConfig | None = None, spec: bp.ParamSpec | None = None,
                 cfg: bp.GddConfig = bp.GddConfig(), val_seasons: Sequence = (),
                 out_dir=None, n_candidates: int = 0, resume: bool = False
                 ) -> tuple[dict[int, np.ndarray], TrainResult]:
    """Fit one static parameter vector per cultivar.

    Each cultivar is an independent problem with its own Adam state,
    scheduler and mini-batches drawn from its own seasons.  Sharing one
    optimizer across cultivars lets momentum keep moving the rows that are
    absent from a batch, which stalls the fit.

    ``n_candidates > 0`` seeds each cultivar with the best of that many
    uniform draws (:func:`search_init`) instead of the range midpoints.
    With ``out_dir`` every cultivar checkpoints into ``cultivar_<c>/`` and
    the season-weighted mean curve goes to ``loss_log.csv``; ``resume``
    continues every cultivar that has a ``last.ckpt``.

    Returns ``({cultivar: params}, TrainResult)`` with parameters from the
    final epoch; ``TrainResult.params["logits"]`` stacks all cultivars.
    """
    spec = spec or bp.SPECS[model]
    config = config or TrainConfig.preset("gd")
    n_cultivars = n_cultivars or (max(s.cultivar for s in seasons) + 1)
    by_c: dict[int, list] = {}
    for s in seasons:
        by_c.setdefault(s.cultivar, []).append(replace(s, cultivar=0))
    val_c: dict[int, list] = {}
    for s in val_seasons:
        val_c.setdefault(s.cultivar, []).append(replace(s, cultivar=0))
    logits = np.zeros((n_cultivars, len(spec)))
    best = np.zeros_like(logits)
    curves = {}
    out = Path(out_dir) if out_dir is not None else None
    for c, items in sorted(by_c.items()):
        init = search_init(model, items, 1, spec, n_candidates, config.seed, cfg) if n_candidates > 0 else None
        tr = gd_trainable(model, 1, spec, cfg, init)
        tr.meta["cultivar"] = c
        sub = out / f"cultivar_{c}" if out else None
        again = resume and sub is not None and (sub / "last.ckpt").exists()
        res = fit(tr, items, val_c.get(c, []), config, sub, again)
        logits[c] = res.params["logits"][0]
        best[c] = res.best_params["logits"][0]
        curves[c] = (len(items), res.log)
    log_rows = []
    total = sum(n for n, _ in curves.values())
    for e in range(len(next(iter(curves.values()))[1]) if curves else 0):
        row = {"epoch": e + 1, "train_loss": 0.0, "val_loss": math.nan, "lr": 0.0}
        vals = []
        for n, rows in curves.values():
            row["train_loss"] += rows[e]["train_loss"] * n / total
            row["lr"] = max(row["lr"], rows[e]["lr"])
            if math.isfinite(rows[e]["val_loss"]):
                vals.append(rows[e]["val_loss"])
        if vals:
            row["val_loss"] = float(np.mean(vals))
        log_rows.append(row)
    if out is not None:
        write_loss_log(out / "loss_log.csv", log_rows)
    res = TrainResult({"logits": logits}, {"logits": best}, log_rows, out)
    table = static_params(ad.const(logits), spec).value
    return {c: table[c] for c in sorted(by_c)}, res
