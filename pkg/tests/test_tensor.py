import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from donet.errors import ContractError, DataError, ShapeError, SizeError
from donet.tensor import (Tensor, add, backward, cast, channel_scale, clamp, concat_channels, create,
                          dump_tensor, elementwise, hadamard, load_tensor, log, make_rng,
                          mean_all, no_grad, pow_scalar, relu, scale_by_map, sigmoid,
                          split_channels, sum_all, tanh)


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_rank_is_enforced():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3)))


def test_integer_data_becomes_float32():
    assert Tensor(np.ones((1, 1, 2, 2), dtype=np.int64)).dtype == np.float32


def test_create_inits():
    z = create((1, 2, 3, 4))
    assert z.shape == (1, 2, 3, 4) and not z.data.any()
    c = create((1, 1, 2, 2), "constant", value=3.5)
    assert np.all(c.data == 3.5)
    a = create((2, 2, 4, 4), "normal", seed=7, std=2.0)
    b = create((2, 2, 4, 4), "normal", seed=7, std=2.0)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, create((2, 2, 4, 4), "normal", seed=8).data)


def test_create_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        create((1, 2, 3))
    with pytest.raises(ShapeError):
        create((1, -1, 2, 2))
    with pytest.raises(SizeError):
        create((1, 1, 2**32, 1))
    with pytest.raises(SizeError):
        create((2**16, 2**16, 1, 1))
    with pytest.raises(ContractError):
        create((1, 1, 1, 1), "normal", std=-1.0)


def test_zero_sized_tensor_is_allowed():
    assert create((0, 3, 4, 4)).size == 0


def test_backward_needs_scalar():
    x = leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(ContractError):
        backward(relu(x))
    with pytest.raises(ContractError):
        backward(sum_all(Tensor(np.ones((1, 1, 2, 2)))))


def test_gradients_accumulate_over_shared_inputs():
    x = leaf([[[[1.0, 2.0]]]])
    y = sum_all(add(hadamard(x, x), x))  # sum(x^2 + x)
    backward(y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_leaf_grad_accumulates_across_calls():
    x = leaf([[[[3.0]]]])
    backward(sum_all(x * 2.0))
    backward(sum_all(x * 2.0))
    assert x.grad.item() == 4.0


def test_retain_grad_on_intermediate():
    x = leaf([[[[0.5, -1.0]]]])
    mid = (x * 3.0).retain_grad()
    backward(sum_all(relu(mid)))
    assert np.array_equal(mid.grad, [[[[1.0, 0.0]]]])
    assert np.array_equal(x.grad, [[[[3.0, 0.0]]]])


def test_no_grad_builds_no_graph():
    x = leaf(np.ones((1, 1, 1, 2)))
    with no_grad():
        y = sum_all(x * 2.0)
    assert not y.requires_grad
    with pytest.raises(ContractError):
        backward(y)


def test_scalar_operator_sugar():
    x = leaf([[[[2.0]]]])
    y = (1.0 - x) * 3.0 + 1.0 / x
    assert y.item() == pytest.approx(-3.0 + 0.5)
    backward(sum_all(y))
    assert x.grad.item() == pytest.approx(-3.0 - 0.25)


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([[[[-1.0, 0.0, 2.0]]]])
    backward(sum_all(relu(x)))
    assert np.array_equal(x.grad, [[[[0.0, 0.0, 1.0]]]])


def test_sigmoid_is_stable_for_large_inputs():
    x = Tensor(np.array([[[[-1000.0, 0.0, 1000.0]]]]))
    s = sigmoid(x).data
    assert np.all(np.isfinite(s))
    assert s[0, 0, 0].tolist() == [0.0, 0.5, 1.0]


def test_clamp_blocks_gradient_where_clipped():
    x = leaf([[[[-1.0, 0.5, 2.0]]]])
    backward(sum_all(clamp(x, 0.0, 1.0)))
    assert np.array_equal(x.grad, [[[[0.0, 1.0, 0.0]]]])


def test_log_and_pow_gradients():
    x = leaf([[[[2.0]]]])
    backward(sum_all(log(x)) + sum_all(pow_scalar(x, 3.0)))
    assert x.grad.item() == pytest.approx(0.5 + 12.0)


def test_elementwise_dispatch():
    a, b = leaf(np.ones((1, 1, 1, 1))), leaf(np.full((1, 1, 1, 1), 2.0))
    assert elementwise("hadamard", a, b).item() == 2.0
    assert elementwise("tanh", a).item() == pytest.approx(np.tanh(1.0))
    with pytest.raises(ContractError):
        elementwise("hadamard", a)
    with pytest.raises(ContractError):
        elementwise("nope", a)


def test_cast_round_trips_gradient_dtype():
    x = Tensor(np.array([[[[0.1, 0.2]]]], dtype=np.float32), requires_grad=True)
    y = cast(x, np.float64)
    assert y.dtype == np.float64
    backward(sum_all(y * 3.0))
    assert x.grad.dtype == np.float32 and np.allclose(x.grad, 3.0)


def test_elementwise_binary_sub_and_div():
    a, b = leaf([[[[3.0, 4.0]]]]), leaf([[[[2.0, 8.0]]]])
    assert elementwise("sub", a, b).data.ravel().tolist() == [1.0, -4.0]
    assert elementwise("div", a, b).data.ravel().tolist() == [1.5, 0.5]


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        add(leaf(np.ones((1, 1, 2, 2))), leaf(np.ones((1, 1, 2, 3))))


def test_concat_split_round_trip_and_gradient():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.random((2, 2, 3, 3))), leaf(rng.random((2, 3, 3, 3)))
    cat = concat_channels([a, b])
    assert cat.shape == (2, 5, 3, 3)
    pa, pb = split_channels(cat, [2, 3])
    assert np.array_equal(pa.data, a.data) and np.array_equal(pb.data, b.data)
    backward(sum_all(pa * 2.0) + sum_all(pb * 3.0))
    assert np.all(a.grad == 2.0) and np.all(b.grad == 3.0)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([leaf(np.ones((1, 1, 2, 2))), leaf(np.ones((1, 1, 3, 3)))])


def test_scale_by_map_and_channel_scale():
    x = leaf(np.arange(8.0).reshape(1, 2, 2, 2))
    m = leaf(np.full((1, 1, 2, 2), 0.5))
    w = leaf(np.array([2.0, -1.0]).reshape(1, 2, 1, 1))
    backward(sum_all(scale_by_map(x, m)) + sum_all(channel_scale(x, w)))
    assert np.allclose(m.grad, x.data.sum(axis=1, keepdims=True))
    assert np.allclose(w.grad[0, :, 0, 0], [6.0, 22.0])
    assert np.allclose(x.grad, 0.5 + w.data)
    with pytest.raises(ShapeError):
        scale_by_map(x, leaf(np.ones((1, 2, 2, 2))))


def test_mean_all():
    assert mean_all(Tensor(np.arange(4.0).reshape(1, 1, 2, 2))).item() == 1.5


def test_dump_round_trip_is_bit_exact():
    t = create((2, 3, 4, 5), "normal", seed=1)
    buf = io.BytesIO()
    dump_tensor(t, buf)
    assert buf.getvalue()[:4] == b"DOT1"
    assert len(buf.getvalue()) == 4 + 16 + 4 * t.size
    buf.seek(0)
    back = load_tensor(buf)
    assert back.shape == t.shape and np.array_equal(back.data, t.data)


def test_load_rejects_corrupt_dumps():
    buf = io.BytesIO()
    dump_tensor(create((1, 1, 2, 2)), buf)
    raw = buf.getvalue()
    with pytest.raises(DataError):
        load_tensor(io.BytesIO(b"XXXX" + raw[4:]))
    with pytest.raises(DataError):
        load_tensor(io.BytesIO(raw[:-1]))


def test_make_rng_streams_are_independent_and_replayable():
    a = make_rng(5, 1, 2).random(4)
    assert np.array_equal(a, make_rng(5, 1, 2).random(4))
    assert not np.array_equal(a, make_rng(5, 2, 1).random(4))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_tanh_sigmoid_identity(values):
    x = Tensor(np.array(values, dtype=np.float64).reshape(1, 1, 1, -1))
    assert np.allclose(sigmoid(x * 2.0).data * 2.0 - 1.0, tanh(x).data, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_sum_gradient_is_ones(c, s, seed):
    x = leaf(make_rng(seed).standard_normal((2, c, s, s)))
    backward(sum_all(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))
