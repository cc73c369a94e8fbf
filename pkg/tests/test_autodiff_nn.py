import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from metapi import autodiff as ad
from metapi.autodiff import Tensor
from metapi.nn import (
    Adam, Dense, FormatError, GRUCell, LOG_2PI, dense_forward, gaussian_logprob, gru_step,
    read_tensors, write_tensors,
)

from gradcheck import check_gradients


def test_simple_product_gradient():
    w = Tensor(2.0, requires_grad=True)
    ad.backward(w * 3.0)
    assert w.grad == 3.0


def test_gradient_reuse_is_an_error():
    w = Tensor(2.0, requires_grad=True)
    loss = w * w
    ad.backward(loss)
    with pytest.raises(ad.GradientReuseError):
        ad.backward(loss)


def test_shape_mismatch_is_an_error():
    with pytest.raises(ad.ShapeError):
        ad.linear(np.zeros((2, 3)), Tensor(np.zeros((4, 5))))


@pytest.mark.parametrize("seed", range(5))
def test_composite_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True)
    W = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

    def loss():
        h = ad.tanh(a * b) + ad.sigmoid(a) / b
        h = ad.leaky_relu(ad.linear(h, W), 0.01)
        z = ad.concat([h, ad.exp(h * 0.3)], axis=1)
        z = ad.minimum(z, ad.clip(z * 1.5, -0.3, 0.9)) + ad.log(ad.square(z) + 1.0)
        return ad.mean(ad.stack([z, z * 2.0])[:, 1:, :]) + ad.tsum(z, axis=0).sum()

    assert check_gradients([a, b, W], loss) < 1e-4


def test_dense_identity():
    layer = Dense(3, 3, "identity")
    layer.W.data = np.eye(3)
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(layer(x).data, x)


def test_activations():
    assert ad.leaky_relu(Tensor(-1.0), 0.01).item() == pytest.approx(-0.01)
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_gru_zero_weights_halves_state():
    cell = GRUCell(3, 4)
    for p in cell.parameters():
        p.data[:] = 0.0
    h = gru_step(cell, np.random.default_rng(0).normal(size=(2, 3)), np.ones((2, 4)))
    assert np.allclose(h.data, 0.5)


def test_gru_forget_one_is_plain_step():
    cell = GRUCell(3, 4, np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(2, 3))
    h = np.random.default_rng(3).normal(size=(2, 4))
    assert np.array_equal(gru_step(cell, x, h, 1.0).data, gru_step(cell, x, h).data)


def test_gru_vanishing_forget_depends_only_on_input():
    cell = GRUCell(3, 4, np.random.default_rng(1))
    cell.b.data[:] = 0.0
    x = np.random.default_rng(2).normal(size=(1, 3))
    h_a = gru_step(cell, x, np.full((1, 4), 5.0), 1e-12).data
    h_b = gru_step(cell, x, np.full((1, 4), -3.0), 1e-12).data
    assert np.allclose(h_a, h_b, atol=1e-10)


def test_gru_rejects_bad_forget_and_shape():
    cell = GRUCell(3, 4)
    with pytest.raises(ValueError):
        gru_step(cell, np.zeros((1, 3)), np.zeros((1, 4)), 0.0)
    with pytest.raises(ad.ShapeError):
        gru_step(cell, np.zeros((1, 2)), np.zeros((1, 4)))


def test_forty_step_gru_chain_gradient():
    rng = np.random.default_rng(7)
    cell = GRUCell(4, 4, rng)
    xs = rng.normal(size=(40, 2, 4))

    def loss():
        h = Tensor(np.zeros((2, 4)))
        for x in xs:
            h = cell(x, h, 0.99)
        return ad.tsum(ad.square(h))

    assert check_gradients(cell.parameters(), loss) < 1e-3


def test_gaussian_logprob_values():
    assert gaussian_logprob([0.0], [0.0], [0.0]).item() == pytest.approx(-0.9189, abs=1e-4)
    s = 0.3
    assert gaussian_logprob([1.2], [math.log(s)], [1.2]).item() == pytest.approx(-math.log(s) - 0.5 * LOG_2PI)
    two = gaussian_logprob([0.1, -0.2], [0.0, -1.0], [0.4, 0.3]).item()
    one = gaussian_logprob([0.1], [0.0], [0.4]).item() + gaussian_logprob([-0.2], [-1.0], [0.3]).item()
    assert two == pytest.approx(one)


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_is_lr_against_gradient_sign(g):
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = Adam([p], lr=3e-4)
    p.grad = np.array([g, g])
    opt.step()
    assert p.data[0] == pytest.approx(-3e-4 * math.copysign(1, g), rel=1e-3)
    assert p.data[0] == p.data[1]


def test_tensor_file_round_trip():
    t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi]), "c": np.zeros((0,))}
    buf = io.BytesIO()
    write_tensors(buf, t, {"epoch": 3})
    buf.seek(0)
    back, meta = read_tensors(buf)
    assert meta == {"epoch": 3}
    assert set(back) == set(t)
    for k in t:
        assert np.array_equal(back[k], t[k])


def test_tensor_file_is_canonical():
    t1, t2 = {"x": np.ones(2), "y": np.zeros(3)}, {"y": np.zeros(3), "x": np.ones(2)}
    b1, b2 = io.BytesIO(), io.BytesIO()
    write_tensors(b1, t1, {"b": 1, "a": 2})
    write_tensors(b2, t2, {"a": 2, "b": 1})
    assert b1.getvalue() == b2.getvalue()


def test_tensor_file_rejects_garbage_and_versions():
    with pytest.raises(FormatError):
        read_tensors(io.BytesIO(b"nope"))
    buf = io.BytesIO()
    write_tensors(buf, {"x": np.ones(1)})
    raw = bytearray(buf.getvalue())
    raw[4] = 99
    with pytest.raises(FormatError):
        read_tensors(io.BytesIO(bytes(raw)))
