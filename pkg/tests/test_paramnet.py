import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcrop import autodiff as ad
from hybridcrop import biophys as bp
from hybridcrop import gradtrain as gt
from hybridcrop import paramnet as pn


def tiny(mode="concat", n_cult=3, **kw):
    base = dict(input_dim=4, out_dim=7, n_cultivars=n_cult, embed_mode=mode, pre_dims=(5,),
                recur_dim=6, post_dims=(5,))
    base.update(kw)
    return pn.NetConfig(**base)


X = np.random.default_rng(0).normal(size=(30, 4))


# -- init ---------------------------------------------------------------------------

def test_same_seed_same_weights():
    a = pn.init_weights(tiny(), 3)
    b = pn.init_weights(tiny(), 3)
    assert all(np.array_equal(a[k], b[k]) for k in a.arrays)
    c = pn.init_weights(tiny(), 4)
    assert not np.array_equal(a["pre0.w"], c["pre0.w"])


def test_concat_doubles_first_fan_in():
    cfg = pn.NetConfig(input_dim=16, out_dim=7, n_cultivars=31)
    assert pn.weight_shapes(cfg)["pre0.w"] == (32, 256)
    assert pn.weight_shapes(cfg)["gru.h.w"] == (1024, 3072)


def test_multihead_has_one_output_layer_per_cultivar():
    cfg = pn.NetConfig(input_dim=16, out_dim=10, n_cultivars=20, embed_mode="multihead")
    heads = [k for k in pn.weight_shapes(cfg) if k.startswith("out") and k.endswith(".w")]
    assert len(heads) == 20
    assert "embed" not in pn.weight_shapes(cfg)


def test_init_scheme():
    w = pn.init_weights(tiny(), 0)
    lim = np.sqrt(6 / (8 + 5))
    assert np.abs(w["pre0.w"]).max() <= lim
    assert np.all(w["pre0.b"] == 0) and np.all(w["gru.h.b"] == 0)
    H = 6
    for i in range(3):
        q = w["gru.h.w"][:, i * H:(i + 1) * H]
        np.testing.assert_allclose(q.T @ q, np.eye(H), atol=1e-12)


def test_invalid_configs():
    with pytest.raises(ValueError):
        tiny(mode="bogus")
    with pytest.raises(ValueError):
        tiny(mode="add", embed_dim=3)
    with pytest.raises(ValueError):
        tiny(recur_dim=0)


# -- embedding ------------------------------------------------------------------------

def test_add_zero_row_and_mult_ones_row_are_identity():
    x = X[None]
    for mode, fill in (("add", 0.0), ("mult", 1.0)):
        cfg = tiny(mode)
        p = dict(pn.init_weights(cfg, 0).arrays)
        p["embed"] = np.full_like(p["embed"], fill)
        np.testing.assert_array_equal(pn.embed(x, [1], p, cfg).value, x)


def test_concat_embedding_length():
    cfg = pn.NetConfig(input_dim=16, out_dim=7, n_cultivars=2)
    p = pn.init_weights(cfg, 0).arrays
    out = pn.embed(np.zeros((1, 5, 16)), [1], p, cfg)
    assert out.shape == (1, 5, 32)
    np.testing.assert_array_equal(out.value[0, 3, 16:], p["embed"][1])


def test_unknown_cultivar_rejected():
    w = pn.init_weights(tiny(), 0)
    with pytest.raises(ValueError):
        pn.forward(w, X, 3)


def test_feature_dimension_mismatch():
    w = pn.init_weights(tiny(), 0)
    with pytest.raises(ValueError):
        pn.forward(w, X[:, :3], 0)


# -- forward ------------------------------------------------------------------------------

@pytest.mark.parametrize("mode", pn.EMBED_MODES)
def test_outputs_bounded(mode):
    w = pn.init_weights(tiny(mode), 1)
    y = pn.forward(w, X * 10, 2)
    assert y.shape == (30, 7)
    assert np.all(np.abs(y) < 1)


def test_zero_network_outputs_zero():
    w = pn.init_weights(tiny(), 0).zeros_like()
    np.testing.assert_array_equal(pn.forward(w, X, 0), 0.0)
    f = pn.init_weights(pn.ffn_config(tiny()), 0).zeros_like()
    np.testing.assert_array_equal(pn.forward_ffn(f, X, 0), 0.0)


def test_prefix_property():
    w = pn.init_weights(tiny(), 2)
    full = pn.forward(w, X, 1)
    for k in (1, 7, 29):
        np.testing.assert_allclose(pn.forward(w, X[:k], 1), full[:k], rtol=1e-13, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 29), st.integers(0, 1000))
def test_causality(t, seed):
    w = pn.init_weights(tiny(), 5)
    x2 = X.copy()
    x2[t:] = np.random.default_rng(seed).normal(size=(30 - t, 4)) * 5
    np.testing.assert_array_equal(pn.forward(w, X, 0)[:t], pn.forward(w, x2, 0)[:t])


def test_multihead_shares_trunk():
    cfg = tiny("multihead")
    w = pn.init_weights(cfg, 0)
    h0 = pn.trunk(w.arrays, cfg, X, [0]).value
    h2 = pn.trunk(w.arrays, cfg, X, [2]).value
    np.testing.assert_array_equal(h0, h2)
    y2 = pn.forward(w, X, 2)
    np.testing.assert_allclose(y2, np.tanh(h2[0] @ w["out2.w"] + w["out2.b"]), rtol=1e-12)
    assert not np.allclose(y2, pn.forward(w, X, 0))


def test_padding_does_not_change_valid_days():
    cfg = tiny()
    w = pn.init_weights(cfg, 0)
    xb = np.stack([X, np.concatenate([X[:20], np.zeros((10, 4))])])
    valid = np.ones((2, 30), bool)
    valid[1, 20:] = False
    y = pn.apply(w.arrays, cfg, xb, [0, 0], valid).value
    np.testing.assert_allclose(y[1, :20], pn.forward(w, X[:20], 0), rtol=1e-13)


def test_resume_from_hidden_state():
    cfg = tiny()
    w = pn.init_weights(cfg, 0)
    y1, h = pn.apply(w.arrays, cfg, X[None, :12], [1], return_state=True)
    y2 = pn.apply(w.arrays, cfg, X[None, 12:], [1], h0=h.value).value
    np.testing.assert_allclose(np.concatenate([y1.value, y2], 1)[0], pn.forward(w, X, 1), rtol=1e-13)


# -- windowed and feed-forward variants --------------------------------------------------------

def test_full_window_equals_forward():
    w = pn.init_weights(tiny(), 0)
    np.testing.assert_allclose(pn.forward_windowed(w, X, 1, 30), pn.forward(w, X, 1), rtol=1e-12)
    np.testing.assert_allclose(pn.forward_windowed(w, X, 1, 100), pn.forward(w, X, 1), rtol=1e-12)


def test_unit_window_is_per_day_map():
    w = pn.init_weights(tiny(), 0)
    y = pn.forward_windowed(w, X, 0, 1)
    each = np.array([pn.forward(w, X[t:t + 1], 0)[0] for t in range(30)])
    np.testing.assert_allclose(y, each, rtol=1e-12)


def test_window_seven_on_constant_input_is_constant_after_day_seven():
    w = pn.init_weights(tiny(), 0)
    x = np.tile(X[0], (20, 1))
    y = pn.forward_windowed(w, x, 0, 7)
    np.testing.assert_allclose(y[6:], np.tile(y[6], (14, 1)), rtol=0, atol=1e-15)
    assert not np.allclose(y[5], y[6])


def test_window_must_be_positive():
    w = pn.init_weights(tiny(), 0)
    with pytest.raises(ValueError):
        pn.forward_windowed(w, X, 0, 0)


def test_ffn_ignores_past_days():
    cfg = pn.ffn_config(tiny())
    w = pn.init_weights(cfg, 0)
    perm = np.random.default_rng(1).permutation(29)
    x2 = np.concatenate([X[:29][perm], X[29:]])
    y1, y2 = pn.forward_ffn(w, X, 0), pn.forward_ffn(w, x2, 0)
    np.testing.assert_array_equal(y1[-1], y2[-1])
    assert np.all(np.abs(y1) < 1)
    assert len([k for k in w.arrays if k.startswith("pre") and k.endswith(".w")]) == 3
    with pytest.raises(ValueError):
        pn.forward_ffn(pn.init_weights(tiny(), 0), X, 0)


# -- rescale --------------------------------------------------------------------------------------

def test_rescale_examples():
    spec = bp.GDD_SPEC
    lo = pn.rescale(-np.ones(7), spec)
    hi = pn.rescale(np.ones(7), spec)
    mid = pn.rescale(np.zeros(7), spec)
    assert lo[0] == 0.0 and hi[0] == 15.0 and mid[1] == 30.0


def test_rescale_clamps_and_freezes():
    spec = bp.FERGUSON_SPEC
    raw = np.full(10, 3.0)
    out = pn.rescale(raw, spec)
    np.testing.assert_array_equal(out, spec.hi)
    raw = np.random.default_rng(0).uniform(-1, 1, 10)
    out = pn.rescale(raw, spec)
    assert out[spec.index("enacclim")] == 0.2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=7, max_size=7))
def test_rescale_unrescale_round_trip(raw):
    spec = bp.GDD_SPEC
    p = pn.rescale(np.array(raw), spec)
    assert spec.contains(p)
    np.testing.assert_allclose(pn.unrescale(p, spec), raw, rtol=0, atol=1e-12)
    np.testing.assert_allclose(pn.rescale(pn.unrescale(p, spec), spec), p, rtol=0, atol=1e-12)


# -- gradients --------------------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["concat", "add", "mult", "multihead", "none"])
def test_network_gradients_match_finite_differences(mode):
    cfg = tiny(mode, recur_dim=4)
    w = pn.init_weights(cfg, 7)
    x = X[None, :12]
    target = np.random.default_rng(1).uniform(-0.5, 0.5, (1, 12, 7))

    def loss(P):
        return ad.vsum(ad.square(ad.sub(pn.apply(P, cfg, x, [1]), target)))

    rep = gt.finite_diff_check(loss, w.arrays, eps=1e-4, n_coords=120, seed=1)
    assert rep.n_checked > 100
    assert rep.max_rel_err <= 1e-4, rep.worst


# -- checkpoints ----------------------------------------------------------------------------------

def test_checkpoint_round_trip_is_exact_and_deterministic(tmp_path):
    w = pn.init_weights(tiny(), 0)
    pn.save_weights(tmp_path / "a.ckpt", w, {"note": "x"})
    pn.save_weights(tmp_path / "b.ckpt", w, {"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back, meta = pn.load_weights(tmp_path / "a.ckpt")
    assert back.config == w.config and meta["note"] == "x"
    for k in w.arrays:
        np.testing.assert_array_equal(back[k], w[k])
    assert (tmp_path / "a.ckpt").read_bytes().startswith(pn.MAGIC)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        pn.load_checkpoint(tmp_path / "x")


def test_config_dict_round_trip():
    cfg = tiny("multihead")
    assert pn.NetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        pn.NetConfig.from_dict({**cfg.to_dict(), "extra": 1})
