import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcases import build_cases, max_case_error
from stsamplenet import tensorcore as tc

CASES = build_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient(name):
    params, loss_fn = CASES[name]
    assert max_case_error(params, loss_fn) < 1e-4


def test_every_primitive_has_a_case():
    covered = {n.split("(")[0] for n in CASES}
    names = {p.name.replace("_", "").lower() for p in tc.Primitive}
    assert names <= {c.lower() for c in covered}


# ---------------------------------------------------------------- forward examples

def test_softmax_symmetric():
    out = tc.softmax(tc.constant(np.zeros(2)), axis=0)
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_gelu_zero_and_reference_value():
    assert tc.gelu(tc.constant(np.zeros(1))).data[0] == 0.0
    # 0.5 * (1 + tanh(sqrt(2/pi) * (1 + 0.044715)))
    expected = 0.5 * (1.0 + math.tanh(math.sqrt(2 / math.pi) * 1.044715))
    assert tc.gelu(tc.constant(np.ones(1))).data[0] == pytest.approx(expected, abs=1e-15)


def test_identity_conv(rng):
    img = rng.normal(size=(1, 1, 5, 6))
    out = tc.conv2d(tc.constant(img), tc.constant(np.ones((1, 1, 1, 1))),
                    tc.constant(np.zeros(1)))
    np.testing.assert_array_equal(out.data, img)


def _naive_conv(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    out = np.zeros((n, o, h, wd))
    for i in range(n):
        for oc in range(o):
            for r in range(h):
                for s in range(wd):
                    out[i, oc, r, s] = np.sum(xp[i, :, r:r + k, s:s + k] * w[oc]) + b[oc]
    return out


def test_conv_matches_loops(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    out = tc.conv2d(tc.constant(x), tc.constant(w), tc.constant(b))
    np.testing.assert_allclose(out.data, _naive_conv(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_linear_without_bias(rng):
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    y1 = tc.conv2d(tc.constant(2.5 * x), tc.constant(w)).data
    y2 = 2.5 * tc.conv2d(tc.constant(x), tc.constant(w)).data
    np.testing.assert_allclose(y1, y2, rtol=1e-10)


def test_batchnorm_running_stats(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    g, b = tc.constant(np.ones(2)), tc.constant(np.zeros(2))
    tc.batch_norm2d(tc.constant(x), g, b, rm, rv, training=True)
    mu = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(rm, 0.1 * mu)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var_unbiased)
    out = tc.batch_norm2d(tc.constant(x), g, b, rm, rv, training=False).data
    expected = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out, expected)


# ---------------------------------------------------------------- backward

def test_square_gradient():
    w = tc.parameter(np.array([3.0]), "w")
    grads = tc.backward(tc.sum_(tc.mul(w, w)), {"w": w})
    assert grads["w"][0] == 6.0


def test_tanh_mean_gradient():
    w = tc.parameter(np.zeros(4), "w")
    grads = tc.backward(tc.mean(tc.tanh(w)), [w])
    np.testing.assert_allclose(grads["w"], 0.25)


def test_unreachable_parameter_gets_zero():
    w, u = tc.parameter(np.ones(3), "w"), tc.parameter(np.ones((2, 2)), "u")
    grads = tc.backward(tc.sum_(w), [w, u])
    np.testing.assert_array_equal(grads["u"], np.zeros((2, 2)))


def test_non_scalar_loss():
    w = tc.parameter(np.ones(3), "w")
    with pytest.raises(tc.NonScalarLoss):
        tc.backward(tc.scalar_mul(w, 2.0), [w])


def test_quadratic_check_is_tight():
    w = tc.parameter(np.array([0.3, -1.2, 2.0]), "w")
    assert tc.check_gradient(w, lambda: tc.sum_(tc.mul(w, w))) < 1e-7


def test_nondeterministic_loss_detected():
    w = tc.parameter(np.ones(2), "w")
    noise = np.random.default_rng(0)
    with pytest.raises(tc.NondeterministicLoss):
        tc.check_gradient(w, lambda: tc.sum_(tc.scalar_mul(w, noise.normal())))


def test_no_grad_records_nothing():
    w = tc.parameter(np.ones(2), "w")
    with tc.no_grad():
        y = tc.mul(w, w)
    assert y.node is None
    assert tc.grad_enabled()


def test_shape_mismatch_names_primitive():
    with pytest.raises(tc.ShapeMismatch, match="MatMul"):
        tc.matmul(tc.constant(np.ones((2, 3))), tc.constant(np.ones((4, 2))))


def test_nonfinite_input_rejected():
    with pytest.raises(tc.NonFiniteInput):
        tc.gelu(tc.constant(np.array([1.0, np.nan])))


def test_validate_detects_inf():
    t = tc.Tensor(np.array([1.0, np.inf]))
    with pytest.raises(tc.NonFiniteInput):
        t.validate()


def test_replay_is_bit_identical(rng):
    x = tc.parameter(rng.normal(size=(3, 4)), "x")

    def run():
        y = tc.softmax(tc.gelu(tc.matmul(x, tc.transpose(x))), axis=-1)
        return tc.sum_(tc.mul(y, y))

    a, b = run(), run()
    assert a.data.tobytes() == b.data.tobytes()
    ga = tc.backward(a, [x])["x"].copy()
    gb = tc.backward(b, [x])["x"]
    assert ga.tobytes() == gb.tobytes()


# ---------------------------------------------------------------- properties

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_sum_to_one(arr):
    out = tc.softmax(tc.constant(arr), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(out > 0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)),
                  elements=st.floats(-10, 10)))
def test_layernorm_standardises(arr):
    rows = arr[arr.var(axis=-1) > 1e-2]
    if len(rows) == 0:
        return
    d = rows.shape[-1]
    out = tc.layer_norm(tc.constant(rows), tc.constant(np.ones(d)), tc.constant(np.zeros(d))).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-6)


@st.composite
def broadcast_pair(draw):
    shape = draw(hnp.array_shapes(min_dims=1, max_dims=3, max_side=4))
    other = tuple(1 if draw(st.booleans()) else s for s in shape)
    cut = draw(st.integers(0, len(other) - 1))
    return shape, other[cut:]


@settings(max_examples=40, deadline=None)
@given(broadcast_pair())
def test_broadcast_gradients_keep_input_shapes(pair):
    sa, sb = pair
    a, b = tc.parameter(np.ones(sa), "a"), tc.parameter(np.full(sb, 2.0), "b")
    grads = tc.backward(tc.sum_(tc.mul(a, b)), [a, b])
    assert grads["a"].shape == sa and grads["b"].shape == sb
    # d/db sum(a*b) = number of a-elements each b-element is paired with
    np.testing.assert_allclose(grads["b"], np.full(sb, np.prod(sa) / np.prod(sb)))
