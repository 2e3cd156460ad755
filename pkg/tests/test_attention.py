import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpmatch import attention, ops
from kpmatch.attention import AttentionMap, init_rsa, rsa_forward, weighted_reduce
from kpmatch.errors import DimensionError
from kpmatch.gradcheck import grad_check
from kpmatch.nn import Layers, ParamSet
from kpmatch.tensor import Tensor


def rsa_params(channels=4, hidden=6, seed=0):
    params = ParamSet()
    init_rsa(params, np.random.default_rng(seed), "rsa", channels, hidden)
    return params


def reduce_loops(delta, a_tilde):
    c, h, w = delta.shape
    out = np.zeros(c)
    for i in range(h):
        for j in range(w):
            out += (1 + a_tilde[i, j]) * delta[:, i, j]
    return out


def test_zero_weights_give_uniform_attention():
    params = rsa_params()
    for k in params.weights:
        if k.endswith(".weight"):
            params.weights[k][:] = 0.0
    x = np.random.default_rng(1).normal(size=(4, 3, 5))
    att = rsa_forward(Tensor(x), Layers(params))
    assert np.allclose(att.normalized.data, 1 / 15, atol=1e-15)


def test_shift_invariance():
    params = rsa_params()
    x = np.random.default_rng(2).normal(size=(4, 3, 5))
    att = rsa_forward(Tensor(x), Layers(params))
    shifted = ops.softmax_scaled(ops.add_scalar(att.raw, 3.7), axis=(1, 2), tau=att.tau_rsa)
    assert np.max(np.abs(shifted.data - att.normalized.data)) <= 1e-12


def test_default_temperature():
    assert attention.DEFAULT_TAU_RSA == 1.0
    att = rsa_forward(Tensor(np.ones((4, 2, 2))), Layers(rsa_params()))
    assert att.tau_rsa == 1.0


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        rsa_forward(Tensor(np.ones((3, 2, 2))), Layers(rsa_params(channels=4)))


def test_batched_train_mode_shapes():
    params = rsa_params()
    x = np.random.default_rng(3).normal(size=(3, 4, 2, 5))
    att = rsa_forward(Tensor(x), Layers(params, train=True))
    assert att.normalized.shape == (3, 1, 2, 5)
    assert np.allclose(att.normalized.data.sum(axis=(2, 3)), 1.0, atol=1e-9)


def _uniform(h, w):
    u = Tensor(np.full((1, h, w), 1.0 / (h * w)))
    return AttentionMap(u, u, 1.0)


def test_reduce_uniform_attention():
    delta = np.random.default_rng(4).normal(size=(3, 2, 4))
    out = weighted_reduce(Tensor(delta), _uniform(2, 4)).data
    assert np.allclose(out, (1 + 1 / 8) * delta.sum(axis=(1, 2)), atol=1e-14)


def test_reduce_zero_delta():
    att = rsa_forward(Tensor(np.random.default_rng(5).normal(size=(4, 2, 2))), Layers(rsa_params()))
    assert not weighted_reduce(Tensor(np.zeros((7, 2, 2))), att).data.any()


def test_reduce_vs_loops():
    rng = np.random.default_rng(6)
    delta = rng.normal(size=(5, 3, 4))
    logits = rng.normal(size=(1, 3, 4))
    a = ops.softmax_scaled(Tensor(logits), axis=(1, 2), tau=1.0)
    out = weighted_reduce(Tensor(delta), AttentionMap(Tensor(logits), a, 1.0)).data
    assert np.max(np.abs(out - reduce_loops(delta, a.data[0]))) <= 1e-12


def test_reduce_shape_mismatch():
    with pytest.raises(DimensionError):
        weighted_reduce(Tensor(np.ones((2, 3, 3))), _uniform(2, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 5), st.integers(1, 5))
def test_alpha_range_and_total(seed, h, w):
    rng = np.random.default_rng(seed)
    params = rsa_params(seed=seed % 1000)
    att = rsa_forward(Tensor(rng.normal(size=(4, h, w))), Layers(params))
    alpha = att.alpha
    assert abs(att.normalized.data.sum() - 1) <= 1e-9
    assert np.all(alpha > 1) and np.all(alpha <= 2)
    assert abs(alpha.sum() - (h * w + 1)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_reduce_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    d1, d2 = rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 2, 3))
    att = rsa_forward(Tensor(rng.normal(size=(4, 2, 3))), Layers(rsa_params()))
    lhs = weighted_reduce(Tensor(a * d1 + b * d2), att).data
    rhs = a * weighted_reduce(Tensor(d1), att).data + b * weighted_reduce(Tensor(d2), att).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_gradients_through_attention_and_reduce():
    rng = np.random.default_rng(7)
    params = rsa_params(channels=3, hidden=4, seed=7)
    proj = rng.normal(size=(2, 3))

    def f(t):
        x, delta = t.pop("x"), t.pop("delta")
        layers = Layers(params.copy(), train=True, tensors=t)
        att = rsa_forward(x, layers, tau_rsa=0.8)
        return ops.sum(ops.mul(weighted_reduce(delta, att), Tensor(proj)))

    for _ in range(5):
        inputs = {"x": rng.normal(size=(2, 3, 2, 3)), "delta": rng.normal(size=(2, 3, 2, 3))}
        inputs.update({k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.weights.items()})
        report = grad_check(f, inputs)
        assert report.passed, report
