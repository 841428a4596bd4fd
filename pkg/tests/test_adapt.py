from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcrop import adapt as ap
from hybridcrop import biophys as bp
from hybridcrop import data
from hybridcrop import hybrid as hy
from hybridcrop import paramnet as pn
from hybridcrop import weatherdata as wd
from hybridcrop.gradtrain import TrainConfig

KW = dict(pre_dims=(6,), recur_dim=8, post_dims=(6,))


@pytest.fixture(scope="module")
def gdd_norm(gdd_small):
    stats = wd.fit_norm([s.weather for s in gdd_small.seasons])
    return data.with_norm(gdd_small.seasons, stats)


@pytest.fixture(scope="module")
def fer_norm(ferguson_small):
    stats = wd.fit_norm([s.weather for s in ferguson_small.seasons])
    return data.with_norm(ferguson_small.seasons, stats)


def model(kind="gdd", n_cult=3, seed=0, **kw):
    return hy.new_model(kind, 10, n_cult, seed, **{**KW, **kw})


# -- architecture ---------------------------------------------------------------------

def test_een_has_no_biases_and_two_inputs():
    een = ap.init_een(model().net.config, 0)
    assert een.config.input_dim == 2 and not een.config.use_bias
    assert not any(k.endswith(".b") for k in een.arrays)
    assert een.arrays["cult"].shape == (3, 1)


def test_een_zero_errors_give_zero_deltas():
    een = ap.init_een(model().net.config, 1)
    np.testing.assert_array_equal(ap.een_forward(een, np.zeros(60), 2), 0.0)
    np.testing.assert_array_equal(ap.een_forward(een, np.full(60, np.nan), 2), 0.0)


def test_een_zero_prefix_before_first_observation():
    een = ap.init_een(model().net.config, 2)
    e = np.full(80, np.nan)
    e[40] = 1.0
    e[55] = -2.0
    y = ap.een_forward(een, e, 0)
    np.testing.assert_array_equal(y[:40], 0.0)
    assert np.abs(y[40]).max() > 0
    assert np.all(np.abs(y) <= 1)


def test_single_error_persists_through_recurrent_state():
    base = pn.NetConfig(input_dim=10, out_dim=7, n_cultivars=2, pre_dims=(), recur_dim=1, post_dims=())
    een = ap.init_een(base, 0)
    a = een.arrays
    a["gru.x.w"] = np.array([[0.5, -0.3, 1.2], [0.2, 0.1, -0.4]])
    a["gru.h.w"] = np.array([[0.4, 1.5, 0.9]])
    a["out.w"] = np.linspace(-1, 1, 7)[None]
    a["cult"] = np.array([[0.3], [-0.7]])
    e = np.zeros(12)
    e[2] = 1.5
    y = ap.een_forward(een, e, 1)

    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    h, ref = 0.0, []
    for t in range(12):
        x = np.array([e[t], a["cult"][1, 0] if e[t] != 0 else 0.0])
        xp = x @ a["gru.x.w"]
        hp = h * a["gru.h.w"][0]
        r, z = sig(xp[0] + hp[0]), sig(xp[1] + hp[1])
        n = np.tanh(xp[2] + r * hp[2])
        h = (1 - z) * n + z * h
        ref.append(np.tanh(h * a["out.w"][0]))
    np.testing.assert_allclose(y, np.array(ref), rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(y[:2], 0.0)
    assert np.all(np.abs(y[3:, 0]) > 1e-4)


# -- adapted rollout ---------------------------------------------------------------------

def test_no_observations_is_bitwise_base_rollout(gdd_norm, fer_norm):
    m = model(seed=3)
    een = ap.init_een(m.net.config, 5)
    for s in gdd_norm:
        base = hy.dmc_rollout(m, s.weather, s.cultivar)
        for obs in (None, np.full(len(s), np.nan), {}):
            out = ap.adapt_rollout(m, een, s.weather, s.cultivar, obs)
            np.testing.assert_array_equal(out.series.values, base.series.values)
            np.testing.assert_array_equal(out.omega, base.omega)
    f = model("ferguson", 2, seed=3)
    een = ap.init_een(f.net.config, 5)
    s = fer_norm[0]
    np.testing.assert_array_equal(ap.adapt_rollout(f, een, s.weather, s.cultivar).series.values,
                                  hy.dmc_rollout(f, s.weather, s.cultivar).series.values)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_perfect_observations_leave_base_unchanged(fer_norm, seed):
    f = model("ferguson", 2, seed=seed % 7)
    een = ap.init_een(f.net.config, seed)
    s = fer_norm[seed % len(fer_norm)]
    base = hy.dmc_rollout(f, s.weather, s.cultivar)
    obs = np.full(len(s), np.nan)
    days = np.random.default_rng(seed).choice(len(s), 20, replace=False)
    obs[days] = base.series.values[days]
    out = ap.adapt_rollout(f, een, s.weather, s.cultivar, obs)
    np.testing.assert_array_equal(out.series.values, base.series.values)


def test_error_affects_only_following_days(fer_norm):
    f = model("ferguson", 2, seed=1)
    een = ap.init_een(f.net.config, 1)
    s = fer_norm[0]
    base = hy.dmc_rollout(f, s.weather, s.cultivar)
    out = ap.adapt_rollout(f, een, s.weather, s.cultivar, {30: base.series.values[30] + 3.0})
    np.testing.assert_array_equal(out.series.values[:31], base.series.values[:31])
    np.testing.assert_array_equal(out.omega[:31], base.omega[:31])
    assert not np.array_equal(out.omega[31:], base.omega[31:])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_adapted_parameters_stay_in_range(gdd_norm, seed, err):
    m = model(seed=seed % 5)
    een = ap.init_een(m.net.config, seed)
    s = gdd_norm[seed % len(gdd_norm)]
    obs = np.full(len(s), np.nan)
    obs[::5] = err
    out = ap.adapt_rollout(m, een, s.weather, s.cultivar, obs)
    assert bp.GDD_SPEC.contains(out.omega)
    assert np.all(np.diff(out.series.values) >= 0)


def test_observations_outside_window_rejected(gdd_norm):
    m = model()
    een = ap.init_een(m.net.config, 0)
    s = gdd_norm[0]
    with pytest.raises(ValueError):
        ap.adapt_rollout(m, een, s.weather, s.cultivar, {len(s): 1.0})
    with pytest.raises(ValueError):
        ap.adapt_rollout(m, een, s.weather, s.cultivar, {np.datetime64("1990-01-01"): 1.0})
    with pytest.raises(ValueError):
        ap.adapt_rollout(m, een, s.weather, s.cultivar, np.zeros(len(s) + 1))


def test_observations_by_date(gdd_norm):
    m = model(seed=2)
    een = ap.init_een(m.net.config, 2)
    s = gdd_norm[0]
    d = s.weather.dates[20]
    a = ap.adapt_rollout(m, een, s.weather, s.cultivar, {d: 3.0})
    b = ap.adapt_rollout(m, een, s.weather, s.cultivar, {20: 3.0})
    np.testing.assert_array_equal(a.series.values, b.series.values)


# -- masking --------------------------------------------------------------------------

def test_visible_observations():
    y = np.ones((2, 10), bool)
    y[0, 3] = False
    m = ap.visible_observations(y, np.array([5, 0]))
    np.testing.assert_array_equal(m[0], [1, 1, 1, 0, 1, 1, 0, 0, 0, 0])
    np.testing.assert_array_equal(m[1], [1] + [0] * 9)
    w = ap.visible_observations(np.ones((1, 20), bool), np.array([19]), every=7, phase=np.array([2]))
    assert list(np.flatnonzero(w[0])) == [2, 9, 16]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 300), min_size=1, max_size=8), st.integers(0, 2**31))
def test_cutoffs_within_season(lengths, seed):
    c = ap.sample_cutoffs(np.random.default_rng(seed), lengths)
    assert np.all(c >= 0) and np.all(c < np.array(lengths))


def test_cutoffs_roughly_uniform():
    c = ap.sample_cutoffs(np.random.default_rng(0), [10] * 5000)
    counts = np.bincount(c, minlength=10)
    assert counts.min() > 400 and counts.max() < 600


# -- training ------------------------------------------------------------------------

def _biased(seasons, shift=-2.0):
    """Relabel seasons with a base temperature ``shift`` away from the midpoint."""
    truth = bp.GDD_SPEC.midpoint.copy()
    truth[bp.GDD_SPEC.index("tbasem")] += shift
    return [replace(s, target=bp.oracle_gdd(s.weather.tmean(), truth)) for s in seasons]


def _zero_base():
    m = model()
    return m.with_arrays(m.net.zeros_like().arrays)


def test_trained_een_corrects_biased_base(gdd_norm):
    seas = _biased(gdd_norm)
    m = _zero_base()
    een, _ = ap.train_een(m, seas, TrainConfig.preset("een", epochs=30, learning_rate=1e-2, batch_size=9),
                          seed=0)
    base_err, adapt_err = [], []
    for s in seas:
        y = s.target.values
        b = hy.dmc_rollout(m, s.weather, s.cultivar).series.values
        a = ap.adapt_rollout(m, een, s.weather, s.cultivar, y).series.values
        base_err.append(np.sqrt(np.mean((b - y) ** 2)))
        adapt_err.append(np.sqrt(np.mean((a - y) ** 2)))
    # measured: base 0.414, adapted 0.314
    assert np.mean(adapt_err) < np.mean(base_err)
    np.testing.assert_allclose(np.mean(base_err), 0.41438239, rtol=1e-6)


def test_train_een_is_deterministic(gdd_norm, tmp_path):
    m = model(seed=1)
    cfg = TrainConfig.preset("een", epochs=2, batch_size=4)
    a, _ = ap.train_een(m, gdd_norm[:5], cfg, out_dir=tmp_path / "a")
    b, _ = ap.train_een(m, gdd_norm[:5], cfg, out_dir=tmp_path / "b")
    for k in a.arrays:
        np.testing.assert_array_equal(a.arrays[k], b.arrays[k])
    assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()


def test_train_een_returns_best_validation_weights(gdd_norm):
    m = model(seed=1)
    cfg = TrainConfig.preset("een", epochs=4, batch_size=4, learning_rate=5e-2)
    een, res = ap.train_een(m, gdd_norm[:5], cfg, val_seasons=gdd_norm[5:])
    for k in een.arrays:
        np.testing.assert_array_equal(een.arrays[k], res.best_params[k])
    een2, res2 = ap.train_een(m, gdd_norm[:5], cfg)
    for k in een2.arrays:
        np.testing.assert_array_equal(een2.arrays[k], res2.params[k])


def test_cutoff_zero_leaves_een_untouched(gdd_norm, monkeypatch):
    m = model(seed=1)
    monkeypatch.setattr(ap, "sample_cutoffs", lambda rng, lengths: np.full(len(lengths), -1))
    een0 = ap.init_een(m.net.config, 0)
    een, res = ap.train_een(m, gdd_norm[:4], TrainConfig.preset("een", epochs=2, batch_size=4), init=een0)
    for k in een0.arrays:
        np.testing.assert_array_equal(een.arrays[k], een0.arrays[k])


def test_een_save_load_round_trip(tmp_path, gdd_norm):
    m = model(seed=2)
    een = ap.init_een(m.net.config, 4)
    ap.save_een(tmp_path / "e.ckpt", een, m)
    back = ap.load_een(tmp_path / "e.ckpt")
    assert back.config == een.config
    for k in een.arrays:
        np.testing.assert_array_equal(back.arrays[k], een.arrays[k])
    hy.save_model(tmp_path / "m.ckpt", m)
    with pytest.raises(ValueError):
        ap.load_een(tmp_path / "m.ckpt")


def test_onset_rmse():
    p = np.array([[0, 10, 20, 30, np.nan]])
    t = np.array([[0, 12, 20, 27, np.nan]])
    assert ap.onset_rmse(p, t) == pytest.approx(np.sqrt((4 + 0 + 9) / 3))
