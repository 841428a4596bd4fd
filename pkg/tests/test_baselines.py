import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcrop import baselines as bl
from hybridcrop import biophys as bp
from hybridcrop import data
from hybridcrop import evalbench as eb
from hybridcrop import paramnet as pn
from hybridcrop import weatherdata as wd
from hybridcrop.gradtrain import TrainConfig

SMALL = dict(pre_dims=(6,), recur_dim=8, post_dims=(6,))
ONE_EPOCH = TrainConfig(epochs=1, batch_size=4)


@pytest.fixture(scope="module")
def gdd_norm(gdd_small):
    stats = wd.fit_norm([s.weather for s in gdd_small.seasons])
    return data.with_norm(gdd_small.seasons, stats)


@pytest.fixture(scope="module")
def fer_norm(ferguson_small):
    stats = wd.fit_norm([s.weather for s in ferguson_small.seasons])
    return data.with_norm(ferguson_small.seasons, stats)


def published(ds):
    return bl.StaticBio(ds.model, {i: p for i, p in enumerate(ds.table.params)})


# -- deployed -------------------------------------------------------------------------

def test_deployed_equals_constant_parameter_rollout(gdd_small):
    s = gdd_small.seasons[0]
    p = gdd_small.table.params[s.cultivar]
    out = bl.deployed_bio({s.cultivar: p}, s.weather, s.cultivar)
    tr = bp.gdd_rollout(s.weather.tmean(), np.tile(p, (len(s), 1)))
    np.testing.assert_array_equal(out.stages, tr.stages)


def test_deployed_with_generator_table_has_zero_error(gdd_small, ferguson_small):
    st_ = published(gdd_small)
    for s in gdd_small.seasons:
        pred = st_.predict(s.weather, s.cultivar)
        assert eb.rmse_phenology(pred.onsets, s.target.onsets) == 0.0
    fr = published(ferguson_small)
    for s in ferguson_small.seasons:
        assert eb.rmse_hardiness(fr.predict(s.weather, s.cultivar).values, s.target.values) < 1e-12


def test_missing_cultivar_is_an_error(gdd_small, tmp_path):
    s = gdd_small.seasons[0]
    with pytest.raises(KeyError):
        bl.deployed_bio({5: gdd_small.table.params[0]}, s.weather, 0)
    gdd_small.table.save(tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    (tmp_path / "p.json").write_text(json.dumps(doc["cultivars"]))
    tab = bl.load_published(tmp_path / "p.json", "gdd", list(gdd_small.table.names))
    np.testing.assert_allclose(tab.lookup(1), gdd_small.table.params[1])
    with pytest.raises(KeyError):
        bl.load_published(tmp_path / "p.json", "gdd", ["C00", "Nope"])


# -- Deep-MTL ----------------------------------------------------------------------------

def test_deep_classifier_probabilities(gdd_norm):
    cfg = bl.deep_config("phenology", 10, 3, **SMALL)
    w = pn.init_weights(cfg, 0)
    m = bl.DeepMtl(w, "phenology")
    s = gdd_norm[0]
    pr = m.probabilities(s.weather, s.cultivar)
    assert pr.shape == (len(s), bl.N_CLASSES)
    np.testing.assert_allclose(pr.sum(axis=1), 1.0, rtol=1e-12)
    z = bl.DeepMtl(w.zeros_like(), "phenology")
    np.testing.assert_allclose(z.probabilities(s.weather, s.cultivar), 0.25, rtol=1e-12)


def test_deep_regression_is_unbounded_and_flagged(fer_norm):
    cfg = bl.deep_config("hardiness", 10, 2, **SMALL)
    w = pn.init_weights(cfg, 0).zeros_like()
    w.arrays["out.b"] = np.array([5.0])
    m = bl.DeepMtl(w, "hardiness")
    s = fer_norm[0]
    pred = m.predict(s.weather, s.cultivar)
    assert np.all(pred.values == 5.0)
    assert len(eb.realism_check(pred)) == len(s)


def test_class_onsets():
    st_ = np.array([0, 0, 1, 2, 1, 2, 3])
    np.testing.assert_array_equal(bl.class_onsets(st_)[:4], [0, 2, 3, 6])
    assert np.isnan(bl.class_onsets(st_)[4])


def test_pinn_weight():
    assert bl.PINN_P == 0.5


# -- residual ----------------------------------------------------------------------------

def _res_weights(n_cult):
    cfg = pn.NetConfig(input_dim=10, out_dim=1, n_cultivars=n_cult, head="linear", **SMALL)
    return pn.init_weights(cfg, 0)


def test_zero_residual_equals_static(fer_norm, ferguson_small):
    st_ = published(ferguson_small)
    w = _res_weights(2).zeros_like()
    for s in fer_norm:
        np.testing.assert_array_equal(bl.residual_rollout(w, s.weather, s.cultivar, st_).values,
                                      st_.predict(s.weather, s.cultivar).values)


def test_constant_residual_shifts_by_exactly_one(fer_norm, ferguson_small):
    st_ = published(ferguson_small)
    w = _res_weights(2).zeros_like()
    w.arrays["out.b"] = np.array([1.0])
    s = fer_norm[1]
    got = bl.residual_rollout(w, s.weather, s.cultivar, st_).values
    np.testing.assert_array_equal(got, st_.predict(s.weather, s.cultivar).values + 1.0)


def test_residual_can_break_monotonic_phenology(gdd_norm, gdd_small):
    st_ = published(gdd_small)
    w = _res_weights(3)
    w.arrays["out.w"] = w.arrays["out.w"] * 0 + 0.5
    w.arrays["out.b"] = np.array([-0.5])
    flagged = 0
    for s in gdd_norm:
        pred = bl.residual_rollout(w, s.weather, s.cultivar, st_, "phenology")
        flagged += len(eb.realism_check(pred))
    assert flagged > 0


# -- TempHybrid ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fitted_response():
    target = lambda t: np.clip(t - 10.0, 0.0, 30.0)  # noqa: E731
    return target, bl.fit_response(target, steps=6000, seed=0)


def test_response_fits_analytic_curve(fitted_response):
    target, P = fitted_response
    grid = np.linspace(-20, 45, 261)
    err = np.abs(bl.response(P, grid).value - target(grid))
    # measured with seed 0: max 0.752 degC (at the 40 degC kink), mean 0.0763
    assert err.max() < 0.8 and err.mean() < 0.08


def test_temphybrid_matches_static_gdd(fitted_response, gdd_small):
    _, P = fitted_response
    worst = 0.0
    for s in gdd_small.seasons:
        p = gdd_small.table.params[s.cultivar].copy()
        p[0], p[1] = 10.0, 40.0
        ref = bp.oracle_gdd(s.weather, p)
        got = bl.temphybrid_rollout(P, p, s.weather)
        assert np.all(np.diff(got.values) >= 0)
        np.testing.assert_array_equal(np.isfinite(got.onsets), np.isfinite(ref.onsets))
        fin = np.isfinite(ref.onsets)
        worst = max(worst, np.abs(got.onsets[fin] - ref.onsets[fin]).max())
    # measured: onsets differ by at most one day
    assert worst <= 1.0


def test_temphybrid_reads_temperature_only(gdd_norm):
    P = bl.init_response(0)
    s = gdd_norm[0]
    a = bl.temphybrid_rollout(P, bp.GDD_SPEC.midpoint, s.weather)
    raw = s.weather.raw.copy()
    raw[:, [i for i, n in enumerate(s.weather.raw_names) if n != "tmean"]] = 0.0
    other = replace(s.weather, features=np.zeros_like(s.weather.features), raw=raw)
    np.testing.assert_array_equal(other.tmean(), s.weather.tmean())
    b = bl.temphybrid_rollout(P, bp.GDD_SPEC.midpoint, other)
    np.testing.assert_array_equal(a.values, b.values)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_temphybrid_monotone_for_any_response(seed):
    P = bl.init_response(seed)
    t = np.random.default_rng(seed).normal(12, 9, 200)
    out = bl.temphybrid_rollout(P, bp.GDD_SPEC.midpoint, t)
    assert np.all(np.diff(out.values) >= 0)


# -- DMC variants -------------------------------------------------------------------------

def test_variant_shapes():
    agg = bl.make_variant("dmc-agg", "gdd", 10, 5, **SMALL)
    assert agg.net.config.trunk_input_dim == 10
    stl = bl.make_variant("dmc-stl", "gdd", 10, 5, **SMALL)
    assert stl.net.config.n_cultivars == 1
    mh = bl.make_variant("dmc-multih", "gdd", 10, 5, **SMALL)
    assert len([k for k in mh.net.arrays if k.startswith("out") and k.endswith(".w")]) == 5
    assert bl.make_variant("dmc-mult", "gdd", 10, 5, **SMALL).net.config.embed_mode == "mult"
    assert bl.make_variant("dmc-add", "gdd", 10, 5, **SMALL).net.config.embed_mode == "add"
    with pytest.raises(ValueError):
        bl.make_variant("deep-mtl", "gdd", 10, 5)


def test_stl_reads_only_own_cultivar(gdd_norm, monkeypatch):
    seen = []
    real = bl.fit

    def spy(tr, train, val, config, out_dir=None, resume=False):
        seen.append({s.cultivar_name for s in train} | {s.cultivar_name for s in val})
        return real(tr, train, val, config, out_dir, resume)

    monkeypatch.setattr(bl, "fit", spy)
    m = bl.fit_dmc("dmc-stl", "gdd", gdd_norm[:6], 3, config=ONE_EPOCH, val=gdd_norm[6:], **SMALL)
    assert len(seen) == len(m.models)
    assert all(len(names) == 1 for names in seen)
    with pytest.raises(KeyError):
        m.predict(gdd_norm[0].weather, 7)


def test_every_baseline_shares_the_interface(gdd_norm, gdd_small, tmp_path):
    st_ = published(gdd_small)
    for kind in ("deployed", "gd", "deep-mtl", "pinn", "residual", "temphybrid", "dmc-mtl",
                 "dmc-stl", "dmc-agg", "dmc-mult", "dmc-add", "dmc-multih"):
        kw = {} if kind in ("deployed", "gd", "temphybrid") else SMALL
        cfg = TrainConfig.preset(kind, epochs=1) if kind != "deployed" else None
        p = bl.fit_baseline(kind, "gdd", gdd_norm[:4], 3, 0, cfg, static=st_, **kw)
        s = gdd_norm[5]
        pred = p.predict(s.weather, s.cultivar)
        assert pred.kind == "phenology" and len(pred) == len(s) and len(pred.onsets) == 5
        p.save(tmp_path / f"{kind}.ckpt")
        back = bl.load_predictor(tmp_path / f"{kind}.ckpt")
        np.testing.assert_array_equal(back.predict(s.weather, s.cultivar).values, pred.values, err_msg=kind)


def test_baselines_needing_static_params():
    for kind in ("deployed", "pinn", "residual"):
        with pytest.raises(ValueError):
            bl.fit_baseline(kind, "gdd", [None], 1)
