"""Gradient checks for every registered tensor op plus engine semantics."""

import numpy as np
import pytest

from geolid import autodiff as ad
from geolid.autodiff import (NumericError, OP_NAMES, ParameterSet, ShapeError,
                             Tape, Tensor, gradcheck)

TOL = 1e-4  # max relative error accepted for central finite differences


def make_params(**arrays) -> ParameterSet:
    params = ParameterSet()
    for name, arr in arrays.items():
        params.add(name, np.asarray(arr, dtype=np.float64))
    return params


def away_from(values, points, margin=1e-3):
    """Nudge entries that sit too close to non-differentiable points."""
    values = np.asarray(values, dtype=np.float64).copy()
    for p in points:
        mask = np.abs(values - p) < margin
        values[mask] = p + margin * np.where(values[mask] >= p, 2.0, -2.0)
    return values


def scalarize(out, seed=0):
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ad.sum_(ad.mul(out, w))


# ---------------------------------------------------------------------------
# one gradcheck builder per registered op

def _rng():
    return np.random.default_rng(42)


def build_add():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)), b=rng.standard_normal((4,)))
    return p, lambda: scalarize(ad.add(p["a"], p["b"]))


def build_sub():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)), b=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.sub(p["a"], p["b"]))


def build_mul():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)), b=rng.standard_normal((4,)))
    return p, lambda: scalarize(ad.mul(p["a"], p["b"]))


def build_div():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)),
                    b=rng.uniform(0.5, 2.0, size=(3, 4)))
    return p, lambda: scalarize(ad.div(p["a"], p["b"]))


def build_scale():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.scale(p["a"], -1.7))


def build_matmul():
    rng = _rng()
    p = make_params(a=rng.standard_normal((2, 3, 4)),
                    b=rng.standard_normal((4, 5)))
    return p, lambda: scalarize(ad.matmul(p["a"], p["b"]))


def build_conv1d():
    rng = _rng()
    p = make_params(x=rng.standard_normal((2, 3, 12)),
                    w=rng.standard_normal((4, 3, 3)),
                    b=rng.standard_normal((4,)))
    return p, lambda: scalarize(
        ad.conv1d(p["x"], p["w"], p["b"], stride=2, dilation=2, padding=2))


def build_relu():
    rng = _rng()
    p = make_params(a=away_from(rng.standard_normal((3, 4)), [0.0]))
    return p, lambda: scalarize(ad.relu(p["a"]))


def build_gelu():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.gelu(p["a"]))


def build_tanh():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.tanh(p["a"]))


def build_sigmoid():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.sigmoid(p["a"]))


def build_softmax():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 5)))
    return p, lambda: scalarize(ad.softmax(p["a"], axis=-1))


def build_log_softmax():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 5)))
    return p, lambda: scalarize(ad.log_softmax(p["a"], axis=-1))


def build_log():
    rng = _rng()
    p = make_params(a=rng.uniform(0.5, 3.0, size=(3, 4)))
    return p, lambda: scalarize(ad.log(p["a"]))


def build_exp():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.exp(p["a"]))


def build_sqrt():
    rng = _rng()
    p = make_params(a=rng.uniform(0.5, 3.0, size=(3, 4)))
    return p, lambda: scalarize(ad.sqrt(p["a"]))


def build_cos():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.cos(p["a"]))


def build_arccos():
    rng = _rng()
    p = make_params(a=rng.uniform(-0.8, 0.8, size=(3, 4)))
    return p, lambda: scalarize(ad.arccos(p["a"]))


def build_clip():
    rng = _rng()
    p = make_params(a=away_from(rng.uniform(-2.0, 2.0, size=(3, 4)),
                                [-0.9, 0.9]))
    return p, lambda: scalarize(ad.clip(p["a"], -0.9, 0.9))


def build_mean():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4, 5)))
    return p, lambda: scalarize(ad.mean(p["a"], axis=1))


def build_variance():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4, 5)))
    return p, lambda: scalarize(ad.variance(p["a"], axis=2))


def build_sum():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4, 5)))
    return p, lambda: scalarize(ad.sum_(p["a"], axis=0, keepdims=True))


def build_max():
    rng = _rng()
    base = _rng().standard_normal((3, 5))
    base += np.arange(5) * 0.5  # well-separated maxima
    p = make_params(a=base)
    return p, lambda: scalarize(ad.max_(p["a"], axis=1))


def build_concat():
    rng = _rng()
    p = make_params(a=rng.standard_normal((2, 3)), b=rng.standard_normal((2, 4)))
    return p, lambda: scalarize(ad.concat([p["a"], p["b"]], axis=1))


def build_narrow():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 6)))
    return p, lambda: scalarize(ad.narrow(p["a"], 1, 2, 3))


def build_transpose():
    rng = _rng()
    p = make_params(a=rng.standard_normal((2, 3, 4)))
    return p, lambda: scalarize(ad.transpose(p["a"], (0, 2, 1)))


def build_reshape():
    rng = _rng()
    p = make_params(a=rng.standard_normal((3, 4)))
    return p, lambda: scalarize(ad.reshape(p["a"], (2, 6)))


def build_layernorm():
    rng = _rng()
    p = make_params(x=rng.standard_normal((2, 5, 6)),
                    g=rng.uniform(0.5, 1.5, size=(6,)),
                    b=rng.standard_normal((6,)))
    return p, lambda: scalarize(ad.layernorm(p["x"], p["g"], p["b"]))


def build_batchnorm():
    rng = _rng()
    p = make_params(x=rng.standard_normal((5, 4)),
                    g=rng.uniform(0.5, 1.5, size=(4,)),
                    b=rng.standard_normal((4,)))
    rm = np.zeros(4)
    rv = np.ones(4)
    return p, lambda: scalarize(
        ad.batchnorm(p["x"], p["g"], p["b"], rm, rv, training=True))


def build_broadcast_add():
    rng = _rng()
    p = make_params(x=rng.standard_normal((2, 5, 4)),
                    v=rng.standard_normal((4,)))
    return p, lambda: scalarize(ad.broadcast_add(p["x"], p["v"]))


OP_BUILDERS = {
    "add": build_add, "sub": build_sub, "mul": build_mul, "div": build_div,
    "scale": build_scale, "matmul": build_matmul, "conv1d": build_conv1d,
    "relu": build_relu, "gelu": build_gelu, "tanh": build_tanh,
    "sigmoid": build_sigmoid, "softmax": build_softmax,
    "log_softmax": build_log_softmax, "log": build_log, "exp": build_exp,
    "sqrt": build_sqrt, "cos": build_cos, "arccos": build_arccos,
    "clip": build_clip, "mean": build_mean, "variance": build_variance,
    "sum": build_sum, "max": build_max, "concat": build_concat,
    "narrow": build_narrow, "transpose": build_transpose,
    "reshape": build_reshape, "layernorm": build_layernorm,
    "batchnorm": build_batchnorm, "broadcast-add": build_broadcast_add,
}


def test_every_registered_op_has_a_gradcheck():
    assert set(OP_BUILDERS) == set(OP_NAMES)


@pytest.mark.parametrize("op", sorted(OP_BUILDERS))
def test_op_gradcheck(op):
    params, fn = OP_BUILDERS[op]()
    assert gradcheck(fn, params) <= TOL


# ---------------------------------------------------------------------------
# conv1d against a naive sliding-window oracle

def naive_conv1d(x, w, bias, stride, dilation, padding):
    b, cin, t = x.shape
    cout, _, k = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    span = (k - 1) * dilation + 1
    t_out = (x.shape[2] - span) // stride + 1
    out = np.zeros((b, cout, t_out))
    for bi in range(b):
        for oc in range(cout):
            for ti in range(t_out):
                acc = 0.0
                for ic in range(cin):
                    for ki in range(k):
                        acc += x[bi, ic, ti * stride + ki * dilation] * w[oc, ic, ki]
                out[bi, oc, ti] = acc + (bias[oc] if bias is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,dilation,padding", [
    (1, 1, 0), (2, 1, 0), (1, 2, 0), (1, 1, 3), (3, 2, 2),
])
def test_conv1d_matches_naive_oracle(stride, dilation, padding):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 17))
    w = rng.standard_normal((4, 3, 3))
    bias = rng.standard_normal(4)
    got = ad.conv1d(x, w, bias, stride=stride, dilation=dilation,
                    padding=padding)
    np.testing.assert_allclose(
        got.data, naive_conv1d(x, w, bias, stride, dilation, padding),
        atol=1e-12)


def test_conv1d_output_length_formula():
    for t, k, r in [(100, 10, 5), (33, 4, 2), (8, 8, 1)]:
        x = np.zeros((1, 1, t))
        w = np.zeros((1, 1, k))
        out = ad.conv1d(x, w, stride=r)
        assert out.shape[2] == (t - k) // r + 1


def test_conv1d_rejects_too_short_input():
    with pytest.raises(ShapeError):
        ad.conv1d(np.zeros((1, 1, 3)), np.zeros((1, 1, 5)))


# ---------------------------------------------------------------------------
# engine semantics

def test_detach_blocks_gradient_flow():
    rng = np.random.default_rng(0)
    params = make_params(a=rng.standard_normal((3,)),
                         b=rng.standard_normal((3,)))

    def loss(detached):
        mid = ad.mul(params["a"], params["a"])
        if detached:
            mid = ad.detach(mid)
        return ad.sum_(ad.mul(mid, params["b"]))

    with Tape():
        grads = ad.backward(loss(True), params)
    assert np.all(grads["a"] == 0.0)
    assert np.any(grads["b"] != 0.0)

    with Tape():
        grads = ad.backward(loss(False), params)
    assert np.any(grads["a"] != 0.0)


def test_detach_preserves_forward_value():
    rng = np.random.default_rng(1)
    params = make_params(a=rng.standard_normal((4,)))
    with Tape():
        plain = ad.sum_(ad.mul(params["a"], params["a"]))
        cut = ad.sum_(ad.mul(ad.detach(params["a"]), params["a"]))
    assert plain.data == cut.data


def test_unused_parameter_gets_zero_gradient():
    params = make_params(used=np.ones(3), unused=np.ones(2))
    with Tape():
        grads = ad.backward(ad.sum_(params["used"]), params)
    assert np.array_equal(grads["unused"], np.zeros(2))
    assert np.array_equal(grads["used"], np.ones(3))


def test_backward_is_deterministic():
    rng = np.random.default_rng(9)
    params = make_params(a=rng.standard_normal((4, 4)))

    def run():
        with Tape():
            h = ad.softmax(ad.matmul(params["a"], params["a"]), axis=1)
            return ad.backward(ad.sum_(ad.mul(h, h)), params)

    g1, g2 = run(), run()
    np.testing.assert_array_equal(g1["a"], g2["a"])


def test_tapes_isolate_state():
    params = make_params(a=np.arange(3.0))
    with Tape() as t1:
        out1 = ad.scale(params["a"], 2.0)
        n1 = len(t1)
    with Tape() as t2:
        ad.scale(params["a"], 3.0)
        assert len(t2) > 0
    assert len(t1) == n1
    np.testing.assert_array_equal(out1.data, params["a"].data * 2.0)


def test_grad_wrt_intermediate_tensor():
    params = make_params(a=np.array([2.0, 3.0]))
    with Tape():
        mid = ad.mul(params["a"], params["a"])
        loss = ad.sum_(mid)
        (g_mid,) = ad.grad(loss, [mid])
    np.testing.assert_array_equal(g_mid, np.ones(2))


def test_gradcheck_skips_non_trainable_parameters():
    params = ParameterSet()
    params.add("w", np.array([1.0, 2.0]))
    params.add("buffer", np.array([0.5]), trainable=False)

    def fn():
        # the buffer influences the loss but is excluded from the check
        return ad.sum_(ad.mul(params["w"], ad.detach(params["buffer"])))

    assert gradcheck(fn, params) <= TOL


def test_python_scalar_operands_keep_float32_dtype():
    x = ad.as_tensor(np.ones((2, 2), dtype=np.float32))
    for op in (ad.add, ad.sub, ad.mul, ad.div):
        assert op(x, 2.0).data.dtype == np.float32


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        ad.concat([ad.as_tensor(np.zeros((2, 3))),
                   ad.as_tensor(np.zeros((3, 3)))], axis=1)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(2)
    out = ad.softmax(rng.standard_normal((4, 7)), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out.data > 0)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 7))
    np.testing.assert_allclose(ad.log_softmax(x).data,
                               np.log(ad.softmax(x).data), atol=1e-12)


def test_softmax_stable_under_large_logits():
    x = np.array([[1000.0, 1000.0, -1000.0]])
    out = ad.softmax(x).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[0, :2], 0.5, atol=1e-12)


def test_batchnorm_running_stats_track_batches():
    rng = np.random.default_rng(4)
    rm, rv = np.zeros(3), np.ones(3)
    x = rng.standard_normal((64, 3)) * 2.0 + 5.0
    for _ in range(200):
        ad.batchnorm(x, np.ones(3), np.zeros(3), rm, rv, training=True)
    np.testing.assert_allclose(rm, x.mean(axis=0), rtol=1e-6)
    np.testing.assert_allclose(rv, x.var(axis=0, ddof=1), rtol=1e-6)
