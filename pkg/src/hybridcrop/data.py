"""Labelled seasons and padded mini-batches shared by the trainers."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .biophys import CropStateSeries
from .weatherdata import NormStats, WeatherSeries, normalize_series

KINDS = {"phenology": "gdd", "hardiness": "ferguson"}


@dataclass(frozen=True, eq=False)
class Season:
    """One cultivar-season: weather, labels and identifiers.

    ``weather`` may be raw or normalized; :func:`with_norm` produces the
    normalized copy used as network input.  ``tmean`` always comes from the
    raw values.
    """

    cultivar: int
    year: int
    weather: WeatherSeries
    target: CropStateSeries
    location: str = ""
    cultivar_name: str = ""

    @property
    def task(self) -> str:
        return self.target.kind

    @property
    def key(self) -> tuple:
        return (self.cultivar, self.year, self.location)

    def __len__(self):
        return len(self.weather)


def with_norm(seasons: Sequence[Season], stats: NormStats) -> list[Season]:
    out = []
    for s in seasons:
        w = s.weather if s.weather.normalized else normalize_series(s.weather, stats)
        out.append(replace(s, weather=w))
    return out


@dataclass
class Batch:
    """Right-padded arrays for B seasons of up to T days."""

    x: np.ndarray          # (B, T, F) normalized features
    tmean: np.ndarray      # (B, T) raw mean temperature
    valid: np.ndarray      # (B, T) real (non-padding) days
    cultivar: np.ndarray   # (B,)
    y: np.ndarray          # (B, T) stage index or LTE50
    y_mask: np.ndarray     # (B, T) observed label
    onsets: np.ndarray     # (B, 5) true onset day per stage, NaN if absent
    task: str
    seasons: tuple = ()

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def onset_mask(self) -> np.ndarray:
        """(B, 5) stages with a known true onset, excluding the trivial dormant one."""
        m = np.isfinite(self.onsets)
        m[:, 0] = False
        return m


def make_batch(seasons: Sequence[Season], obs_mask: Sequence[np.ndarray] | None = None) -> Batch:
    seasons = list(seasons)
    if not seasons:
        raise ValueError("empty batch")
    task = seasons[0].task
    B, T = len(seasons), max(len(s) for s in seasons)
    F = seasons[0].weather.n_features
    x = np.zeros((B, T, F))
    tm = np.zeros((B, T))
    valid = np.zeros((B, T), bool)
    y = np.zeros((B, T))
    ym = np.zeros((B, T), bool)
    onsets = np.full((B, 5), np.nan)
    for i, s in enumerate(seasons):
        n = len(s)
        x[i, :n] = s.weather.features
        tm[i, :n] = s.weather.tmean()
        valid[i, :n] = True
        y[i, :n] = s.target.values
        ym[i, :n] = s.target.mask if obs_mask is None else obs_mask[i]
        if s.target.onsets is not None:
            onsets[i] = s.target.onsets
    return Batch(x, tm, valid, np.array([s.cultivar for s in seasons]), y, ym, onsets, task,
                 tuple(seasons))


def seasons_by_cultivar(seasons: Sequence[Season]) -> dict[int, list[Season]]:
    out: dict[int, list[Season]] = {}
    for s in seasons:
        out.setdefault(s.cultivar, []).append(s)
    return out
