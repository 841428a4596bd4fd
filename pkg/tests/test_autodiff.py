import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridcrop import autodiff as ad


def numgrad(fn, params, eps=1e-6):
    """Central differences of a scalar numpy function of named arrays."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            up = {kk: vv.copy() for kk, vv in params.items()}
            dn = {kk: vv.copy() for kk, vv in params.items()}
            up[k][i] += eps
            dn[k][i] -= eps
            g[i] = (fn(up) - fn(dn)) / (2 * eps)
        out[k] = g
    return out


def check(fn, params, rtol=1e-5, atol=1e-7):
    _, g = ad.value_and_grad(fn, params)
    ng = numgrad(lambda p: float(fn({k: ad.const(v) for k, v in p.items()}).value), params)
    for k in params:
        np.testing.assert_allclose(g[k], ng[k], rtol=rtol, atol=atol, err_msg=k)


R = np.random.default_rng(0)
A = R.normal(size=(3, 4))
B = R.normal(size=(3, 4))
POS = R.uniform(0.5, 2.0, size=(3, 4))

UNARY = {
    "square": ad.square, "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    f = UNARY[name]
    check(lambda p: ad.vsum(ad.mul(f(p["a"]), B)), {"a": A.copy()})


@pytest.mark.parametrize("f", [ad.sqrt, ad.log])
def test_positive_domain_gradients(f):
    check(lambda p: ad.vsum(ad.mul(f(p["a"]), B)), {"a": POS.copy()})


@pytest.mark.parametrize("f", [ad.add, ad.sub, ad.mul, ad.maximum, ad.minimum])
def test_binary_gradients(f):
    check(lambda p: ad.vsum(ad.mul(f(p["a"], p["b"]), A)), {"a": A + 0.1, "b": B.copy()})


def test_division_and_broadcasting():
    check(lambda p: ad.vsum(ad.div(p["a"], p["b"])), {"a": A.copy(), "b": POS[0].copy()})


def test_clip_gradient_reaches_interior_and_bounds():
    x = np.array([-2.0, 0.0, 0.5, 3.0])
    lo, hi = np.full(4, -1.0), np.full(4, 1.0)
    g = ad.grad(lambda p: ad.vsum(ad.clip(p["x"], p["lo"], p["hi"])), {"x": x, "lo": lo, "hi": hi})
    np.testing.assert_array_equal(g["x"], [0, 1, 1, 0])
    np.testing.assert_array_equal(g["lo"], [1, 0, 0, 0])
    np.testing.assert_array_equal(g["hi"], [0, 0, 0, 1])


def test_clip_on_boundary_sends_gradient_to_value():
    g = ad.grad(lambda p: ad.vsum(ad.clip(p["x"], 0.0, 1.0)), {"x": np.array([0.0, 1.0])})
    np.testing.assert_array_equal(g["x"], [1, 1])


def test_shape_ops():
    def f(p):
        x = ad.reshape(p["a"], (4, 3))
        y = ad.transpose(x)
        z = ad.concat([y, ad.getitem(p["b"], (slice(None), slice(0, 2)))], axis=1)
        s = ad.stack(ad.unstack(z, axis=0), axis=1)
        return ad.vsum(ad.mul(s, ad.square(s)))
    check(f, {"a": A.copy(), "b": B.copy()})


def test_fancy_index_accumulates_repeats():
    g = ad.grad(lambda p: ad.vsum(ad.getitem(p["a"], np.array([0, 0, 2]))), {"a": np.zeros(3)})
    np.testing.assert_array_equal(g["a"], [2, 0, 1])


def test_take_along_and_where():
    idx = np.array([[1], [3], [0]])
    cond = A > 0
    check(lambda p: ad.vsum(ad.square(ad.take_along(ad.where(cond, p["a"], p["b"]), idx, axis=1))),
          {"a": A.copy(), "b": B.copy()})


def test_matmul_dense_and_log_softmax():
    w = R.normal(size=(4, 5))
    b = R.normal(size=5)
    x3 = R.normal(size=(2, 3, 4))
    check(lambda p: ad.vsum(ad.mul(ad.log_softmax(ad.dense(p["x"], p["w"], p["b"])), 0.3)),
          {"x": x3, "w": w, "b": b})
    check(lambda p: ad.vsum(ad.tanh(ad.matmul(p["x"], p["w"]))), {"x": A.copy(), "w": w})


def test_gru_cell_gradients():
    H = 3
    p = {"x": R.normal(size=(2, 3 * H)), "h": R.normal(size=(2, H)) * 0.5,
         "wh": R.normal(size=(H, 3 * H)) * 0.5, "bh": R.normal(size=3 * H) * 0.1}
    check(lambda q: ad.vsum(ad.mul(ad.gru_cell(q["x"], q["h"], q["wh"], q["bh"]), B[:2, :3])), p)


def test_gru_cell_matches_plain_formula():
    H = 2
    x, h = R.normal(size=(1, 3 * H)), R.normal(size=(1, H))
    wh = R.normal(size=(H, 3 * H))
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    a = h @ wh
    r = sig(x[:, :H] + a[:, :H])
    z = sig(x[:, H:2 * H] + a[:, H:2 * H])
    n = np.tanh(x[:, 2 * H:] + r * a[:, 2 * H:])
    np.testing.assert_allclose(ad.gru_cell(x, h, wh).value, (1 - z) * n + z * h, rtol=1e-12)


def test_reused_node_accumulates():
    check(lambda p: ad.vsum(ad.mul(p["a"], p["a"])), {"a": A.copy()})
    g = ad.grad(lambda p: ad.vsum(ad.add(ad.getitem(p["a"], 0), ad.getitem(p["a"], 0))),
                {"a": np.ones((2, 2))})
    np.testing.assert_array_equal(g["a"], [[2, 2], [0, 0]])


def test_mean_gradient():
    g = ad.grad(lambda p: ad.mean(p["a"]), {"a": np.zeros(4)})
    np.testing.assert_allclose(g["a"], 0.25)


def test_detach_blocks_gradient():
    g = ad.grad(lambda p: ad.vsum(ad.mul(ad.detach(p["a"]), p["a"])), {"a": np.array([2.0, 3.0])})
    np.testing.assert_array_equal(g["a"], [2, 3])


def test_unused_parameter_gets_zero_gradient():
    _, g = ad.value_and_grad(lambda p: ad.vsum(p["a"]), {"a": np.ones(2), "b": np.ones(3)})
    np.testing.assert_array_equal(g["b"], np.zeros(3))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_names_op():
    with pytest.raises(ad.NonFiniteError) as ei:
        ad.value_and_grad(lambda p: ad.vsum(ad.log(p["a"])), {"a": np.array([-1.0])})
    assert ei.value.op == "log"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_is_reported():
    with pytest.raises(ad.NonFiniteError) as ei:
        ad.value_and_grad(lambda p: ad.vsum(ad.sqrt(p["a"])), {"a": np.array([0.0])})
    assert ei.value.where == "gradient"


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.mul(ad.leaf([1.0, 2.0]), 2.0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.floats(-3, 3))
def test_polynomial_gradient_property(xs, c):
    x = np.array(xs)
    g = ad.grad(lambda p: ad.vsum(ad.add(ad.mul(ad.square(p["x"]), c), p["x"])), {"x": x})
    np.testing.assert_allclose(g["x"], 2 * c * x + 1, rtol=1e-12, atol=1e-12)
