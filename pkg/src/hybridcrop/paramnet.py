"""Recurrent parameter network: daily weather + cultivar -> raw parameters in [-1, 1].

The forward pass is written once against :mod:`hybridcrop.autodiff`, so the
same code serves inference (plain arrays) and training (leaf variables).
Inputs are batched as (B, T, F) with a (B, T) validity mask; padded days
freeze the recurrent state.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .biophys import ParamEntry, ParamSpec  # noqa: F401  (re-exported)

EMBED_MODES = ("concat", "add", "mult", "multihead", "none")
HEADS = ("tanh", "linear")


@dataclass(frozen=True)
class NetConfig:
    """Network shape.

    ``arch`` is ``"gru"`` for the recurrent backbone or ``"ffn"`` for the
    per-day feed-forward ablation (``ffn_dims`` hidden layers, no recurrence).
    ``head`` selects a tanh-bounded output (parameter prediction) or a
    linear one (direct regression / classification logits).
    """

    input_dim: int
    out_dim: int
    n_cultivars: int = 1
    embed_mode: str = "concat"
    embed_dim: int | None = None
    pre_dims: tuple[int, ...] = (256, 512)
    recur_dim: int = 1024
    post_dims: tuple[int, ...] = (512, 256)
    arch: str = "gru"
    ffn_dims: tuple[int, ...] = (64, 64, 64)
    head: str = "tanh"
    use_bias: bool = True

    def __post_init__(self):
        mode = self.embed_mode.lower()
        object.__setattr__(self, "embed_mode", mode)
        object.__setattr__(self, "pre_dims", tuple(int(d) for d in self.pre_dims))
        object.__setattr__(self, "post_dims", tuple(int(d) for d in self.post_dims))
        object.__setattr__(self, "ffn_dims", tuple(int(d) for d in self.ffn_dims))
        if mode not in EMBED_MODES:
            raise ValueError(f"unknown embed_mode {self.embed_mode!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.arch not in ("gru", "ffn"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.embed_dim is None:
            object.__setattr__(self, "embed_dim", self.input_dim)
        if mode in ("add", "mult") and self.embed_dim != self.input_dim:
            raise ValueError(f"{mode} embedding needs embed_dim == input_dim")
        dims = (self.input_dim, self.out_dim, self.n_cultivars, self.embed_dim, self.recur_dim,
                *self.pre_dims, *self.post_dims, *self.ffn_dims)
        if min(dims) <= 0:
            raise ValueError("all dimensions must be positive")

    @property
    def has_embedding(self) -> bool:
        return self.embed_mode in ("concat", "add", "mult")

    @property
    def trunk_input_dim(self) -> int:
        return self.input_dim + (self.embed_dim if self.embed_mode == "concat" else 0)

    @property
    def n_heads(self) -> int:
        return self.n_cultivars if self.embed_mode == "multihead" else 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetConfig keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("pre_dims", "post_dims", "ffn_dims"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class NetWeights:
    """Named float64 arrays plus the config that shapes them."""

    config: NetConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, k):
        return self.arrays[k]

    def copy(self) -> "NetWeights":
        return NetWeights(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def zeros_like(self) -> "NetWeights":
        return NetWeights(self.config, {k: np.zeros_like(v) for k, v in self.arrays.items()})


def _layer_dims(cfg: NetConfig) -> list[tuple[str, int, int]]:
    """(name, fan_in, fan_out) for every dense layer in evaluation order."""
    out = []
    d = cfg.trunk_input_dim
    hidden = cfg.pre_dims if cfg.arch == "gru" else cfg.ffn_dims
    for i, h in enumerate(hidden):
        out.append((f"pre{i}", d, h))
        d = h
    if cfg.arch == "gru":
        out.append(("gru.x", d, 3 * cfg.recur_dim))
        d = cfg.recur_dim
        for i, h in enumerate(cfg.post_dims):
            out.append((f"post{i}", d, h))
            d = h
    heads = [f"out{c}" for c in range(cfg.n_heads)] if cfg.embed_mode == "multihead" else ["out"]
    for name in heads:
        out.append((name, d, cfg.out_dim))
    return out


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def weight_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if config.has_embedding:
        shapes["embed"] = (config.n_cultivars, config.embed_dim)
    for name, fi, fo in _layer_dims(config):
        shapes[f"{name}.w"] = (fi, fo)
        if config.use_bias:
            shapes[f"{name}.b"] = (fo,)
        if name == "gru.x":
            shapes["gru.h.w"] = (config.recur_dim, 3 * config.recur_dim)
            if config.use_bias:
                shapes["gru.h.b"] = (3 * config.recur_dim,)
    return shapes


def init_weights(config: NetConfig, seed: int) -> NetWeights:
    """Glorot-uniform dense layers, orthogonal recurrent blocks, zero biases."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    if config.has_embedding:
        arrays["embed"] = _glorot(rng, config.n_cultivars, config.embed_dim)
    for name, fi, fo in _layer_dims(config):
        arrays[f"{name}.w"] = _glorot(rng, fi, fo)
        if config.use_bias:
            arrays[f"{name}.b"] = np.zeros(fo)
        if name == "gru.x":
            H = config.recur_dim
            arrays["gru.h.w"] = np.concatenate([_orthogonal(rng, H) for _ in range(3)], axis=1)
            if config.use_bias:
                arrays["gru.h.b"] = np.zeros(3 * H)
    return NetWeights(config, arrays)


def rescale(raw, spec: ParamSpec):
    """Map raw network outputs in [-1, 1] to parameter ranges (last axis)."""
    raw = ad.clip(raw, -1.0, 1.0) if isinstance(raw, ad.Var) else np.clip(raw, -1.0, 1.0)
    lo, width = spec.lo, spec.width
    if isinstance(raw, ad.Var):
        return ad.add(lo, ad.mul(ad.mul(ad.add(raw, 1.0), 0.5), width))
    return lo + (raw + 1.0) * 0.5 * width


def unrescale(p, spec: ParamSpec) -> np.ndarray:
    """Inverse of :func:`rescale`; frozen entries map to 0."""
    p = np.asarray(p, dtype=np.float64)
    w = spec.width
    safe = np.where(w > 0, w, 1.0)
    return np.where(w > 0, 2.0 * (p - spec.lo) / safe - 1.0, 0.0)


def _cultivar_index(cultivars, cfg: NetConfig, B: int) -> np.ndarray:
    c = np.broadcast_to(np.asarray(cultivars, dtype=int), (B,)).copy()
    if np.any(c < 0) or np.any(c >= cfg.n_cultivars):
        raise ValueError(f"cultivar id out of range [0, {cfg.n_cultivars}): {c}")
    return c


def embed(x, cultivars, params: Mapping, cfg: NetConfig):
    """Apply the cultivar embedding to features ``x`` of shape (B, T, F)."""
    x = ad.const(x)
    B, T, _ = x.shape
    c = _cultivar_index(cultivars, cfg, B)
    if not cfg.has_embedding:
        return x
    row = ad.reshape(ad.getitem(params["embed"], c), (B, 1, cfg.embed_dim))
    if cfg.embed_mode == "add":
        return ad.add(x, row)
    if cfg.embed_mode == "mult":
        return ad.mul(x, row)
    return ad.concat([x, ad.add(row, np.zeros((B, T, cfg.embed_dim)))], axis=-1)


def _dense(params, name, x, cfg):
    return ad.dense(x, params[f"{name}.w"], params.get(f"{name}.b") if cfg.use_bias else None)


def _as_batch(x, valid):
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, ad.Var) else x
    if x.ndim == 2:
        x = x[None] if not isinstance(x, ad.Var) else ad.reshape(x, (1,) + x.shape)
    B, T = x.shape[:2]
    valid = np.ones((B, T), bool) if valid is None else np.asarray(valid, bool).reshape(B, T)
    return x, valid


def trunk(params: Mapping, cfg: NetConfig, x, cultivars, valid=None, h0=None,
          return_state: bool = False):
    """Features up to the last hidden layer, (B, T, D).

    ``h0`` resumes the recurrence from a saved hidden state.
    """
    x, valid = _as_batch(x, valid)
    if x.shape[-1] != cfg.input_dim:
        raise ValueError(f"expected {cfg.input_dim} input features, got {x.shape[-1]}")
    B, T = valid.shape
    h = embed(x, cultivars, params, cfg)
    hidden = cfg.pre_dims if cfg.arch == "gru" else cfg.ffn_dims
    for i in range(len(hidden)):
        h = ad.relu(_dense(params, f"pre{i}", h, cfg))
    if cfg.arch == "ffn":
        return (h, None) if return_state else h
    xproj = _dense(params, "gru.x", h, cfg)
    wh, bh = params["gru.h.w"], params.get("gru.h.b") if cfg.use_bias else None
    state = ad.const(np.zeros((B, cfg.recur_dim)) if h0 is None else h0)
    steps = ad.unstack(xproj, 1) if T else []
    outs = []
    for t, xt in enumerate(steps):
        new = ad.gru_cell(xt, state, wh, bh)
        state = new if valid[:, t].all() else ad.where(valid[:, t, None], new, state)
        outs.append(state)
    h = ad.stack(outs, axis=1) if T else ad.const(np.zeros((B, 0, cfg.recur_dim)))
    for i in range(len(cfg.post_dims)):
        h = ad.relu(_dense(params, f"post{i}", h, cfg))
    return (h, state) if return_state else h


def head(params: Mapping, cfg: NetConfig, h, cultivars):
    """Output layer(s) applied to trunk features."""
    h = ad.const(h)
    B = h.shape[0]
    if cfg.embed_mode == "multihead":
        c = _cultivar_index(cultivars, cfg, B)
        W = ad.getitem(ad.stack([params[f"out{k}.w"] for k in range(cfg.n_heads)]), c)
        y = ad.matmul(h, W)
        if cfg.use_bias:
            b = ad.getitem(ad.stack([params[f"out{k}.b"] for k in range(cfg.n_heads)]), c)
            y = ad.add(y, ad.reshape(b, (B, 1, cfg.out_dim)))
    else:
        y = _dense(params, "out", h, cfg)
    return ad.tanh(y) if cfg.head == "tanh" else y


def apply(params: Mapping, cfg: NetConfig, x, cultivars, valid=None, h0=None,
          return_state: bool = False):
    """Differentiable forward over a batch; returns (B, T, out_dim)."""
    h, state = trunk(params, cfg, x, cultivars, valid, h0, return_state=True)
    y = head(params, cfg, h, cultivars)
    return (y, state) if return_state else y


def _features(series) -> np.ndarray:
    return series.features if hasattr(series, "features") else np.asarray(series, dtype=np.float64)


def forward(weights: NetWeights, series, cultivar: int) -> np.ndarray:
    """Raw per-day outputs (T, out_dim) for one normalized season."""
    x = _features(series)
    if x.ndim != 2 or x.shape[1] != weights.config.input_dim:
        raise ValueError(f"expected (T, {weights.config.input_dim}) features, got {x.shape}")
    return apply(weights.arrays, weights.config, x, [cultivar]).value[0]


def window_batch(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-aligned sliding windows: (T, k, F) inputs and (T, k) validity.

    Window ``t`` holds days ``max(0, t-k+1)..t`` with leading padding, so the
    recurrence over a window starts from zeros at its first real day.
    """
    T, F = x.shape
    k = max(1, min(int(k), max(T, 1)))
    idx = np.arange(T)[:, None] - (k - 1) + np.arange(k)[None, :]
    valid = idx >= 0
    return x[np.clip(idx, 0, None)] * valid[..., None], valid


def apply_windowed(params: Mapping, cfg: NetConfig, x, cultivars, k: int, valid=None):
    """Windowed forward over a batch (B, T, F) -> (B, T, out_dim)."""
    x, valid = _as_batch(x, valid)
    x = np.asarray(x.value if isinstance(x, ad.Var) else x)
    B, T, F = x.shape
    if k < 1:
        raise ValueError("window length must be >= 1")
    wins, wvalid = [], []
    for b in range(B):
        w, v = window_batch(x[b], k)
        vb, _ = window_batch(valid[b][:, None].astype(float), k)
        wins.append(w)
        wvalid.append(v & (vb[..., 0] > 0))
    kk = wins[0].shape[1] if T else 1
    X = np.concatenate(wins).reshape(B * T, kk, F) if T else np.zeros((0, 1, F))
    V = np.concatenate(wvalid).reshape(B * T, kk) if T else np.zeros((0, 1), bool)
    c = np.repeat(_cultivar_index(cultivars, cfg, B), T)
    h = trunk(params, cfg, X, c, V)
    last = ad.getitem(h, (slice(None), -1)) if T else ad.const(np.zeros((0, h.shape[-1])))
    y = head(params, cfg, ad.reshape(last, (B * T, 1, last.shape[-1])), c)
    return ad.reshape(y, (B, T, cfg.out_dim))


def forward_windowed(weights: NetWeights, series, cultivar: int, k: int) -> np.ndarray:
    """Output at day t uses only days ``max(0, t-k+1)..t`` with a fresh state."""
    x = _features(series)
    return apply_windowed(weights.arrays, weights.config, x, [cultivar], k).value[0]


def ffn_config(cfg: NetConfig, dims=(64, 64, 64)) -> NetConfig:
    return replace(cfg, arch="ffn", ffn_dims=tuple(dims))


def forward_ffn(weights: NetWeights, series, cultivar: int) -> np.ndarray:
    """Per-day feed-forward map; ``weights`` must come from an ``arch="ffn"`` config."""
    if weights.config.arch != "ffn":
        raise ValueError("forward_ffn needs weights initialised with arch='ffn'")
    return forward(weights, series, cultivar)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"HCKPT\x00"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> None:
    """Write a deterministic binary container.

    Layout: magic, u32 version, u64 header length, JSON header (sorted keys:
    ``meta`` plus an array directory of name/shape/offset), then the arrays
    as little-endian float64 in directory order.
    """
    names = sorted(arrays)
    directory, offset, chunks = [], 0, []
    for n in names:
        a = np.ascontiguousarray(arrays[n], dtype="<f8")
        directory.append({"name": n, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta or {}, "arrays": directory}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    header = json.loads(data[pos:pos + hlen])
    base = pos + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=start).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_weights(path, weights: NetWeights, extra: Mapping | None = None) -> None:
    meta = {"net": weights.config.to_dict()}
    if extra:
        meta.update(extra)
    save_checkpoint(path, weights.arrays, meta)


def load_weights(path) -> tuple[NetWeights, dict]:
    arrays, meta = load_checkpoint(path)
    cfg = NetConfig.from_dict(meta["net"])
    net = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    expected = weight_shapes(cfg)
    bad = sorted(set(expected) ^ set(net))
    if bad:
        raise ValueError(f"{path}: checkpoint arrays do not match config: {bad}")
    for k, shape in expected.items():
        if tuple(shape) != net[k].shape:
            raise ValueError(f"{path}: array {k} has shape {net[k].shape}, config expects {shape}")
    return NetWeights(cfg, net), meta
