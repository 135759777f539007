import zlib

import numpy as np
import pytest

from models import tensor_autodiff as td
from models.network import gru_cell


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


def test_relu_values():
    out = td.relu(td.Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_conv3d_identity_kernel_leaves_input_unchanged():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 4, 4))
    weight = np.eye(3).reshape(3, 3, 1, 1, 1)
    out = td.conv3d(x, weight, np.zeros(3))
    np.testing.assert_array_equal(out.data, x)


def test_smooth_l1_piecewise():
    assert td.smooth_l1(td.Tensor([0.0]), td.Tensor([0.0])).item() == 0.0
    assert td.smooth_l1(td.Tensor([2.0]), td.Tensor([0.0]), beta=1.0).item() == pytest.approx(1.5)
    assert td.smooth_l1(td.Tensor([0.5]), td.Tensor([0.0]), beta=1.0).item() == pytest.approx(0.125)


def test_backward_of_sum_is_ones():
    x = td.parameter(np.arange(6.0).reshape(2, 3))
    (grad,) = td.backward(x.sum(), [x])
    np.testing.assert_array_equal(grad, np.ones((2, 3)))


def test_backward_mean_squared_error_by_hand():
    # loss = mean((x W - y)^2) at W = 0 has gradient -x^T y (two output entries, factor 2/2)
    x = np.array([[1.0, 2.0]])
    y = np.array([[3.0, -1.0]])
    w = td.parameter(np.zeros((2, 2)))
    loss = td.square(td.matmul(x, w) - y).mean()
    (grad,) = td.backward(loss, [w])
    np.testing.assert_allclose(grad, -x.T @ y)


def test_unreached_parameter_gets_zero_gradient():
    a = td.parameter([1.0, 2.0])
    b = td.parameter([[3.0]])
    _, gb = td.backward((a * a).sum(), [a, b])
    np.testing.assert_array_equal(gb, np.zeros((1, 1)))


def test_second_backward_is_rejected():
    a = td.parameter([1.0, 2.0])
    loss = (a * 3.0).sum()
    td.backward(loss, [a])
    with pytest.raises(td.GraphConsumedError):
        td.backward(loss, [a])


def test_rerun_forward_gives_identical_gradients():
    rng = np.random.default_rng(1)
    w = td.parameter(rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))

    def loss():
        return td.tanh(td.matmul(x, w)).mean()

    (g1,) = td.backward(loss(), [w])
    g1 = g1.copy()
    (g2,) = td.backward(loss(), [w])
    np.testing.assert_array_equal(g1, g2)


def test_non_scalar_loss_rejected():
    a = td.parameter([1.0, 2.0])
    with pytest.raises(td.ShapeError):
        td.backward(a * 2.0, [a])


def test_shape_mismatch_reports_shapes():
    with pytest.raises(td.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        td.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_no_grad_records_nothing():
    a = td.parameter([1.0])
    with td.no_grad():
        out = a * 2.0
    assert out.node is None and not out.requires_grad


def test_numpy_left_operand_defers_to_tensor():
    a = td.parameter([1.0, 2.0])
    out = np.array([2.0, 3.0]) * a
    assert isinstance(out, td.Tensor)
    (grad,) = td.backward(out.sum(), [a])
    np.testing.assert_array_equal(grad, [2.0, 3.0])


OP_CASES = {
    "add": lambda p: td.add(p["a"], p["b"]),
    "sub_broadcast": lambda p: td.sub(p["a"], p["row"]),
    "mul": lambda p: td.mul(p["a"], p["b"]),
    "div": lambda p: td.div(p["a"], p["pos"]),
    "relu": lambda p: td.relu(p["a"]),
    "tanh": lambda p: td.tanh(p["a"]),
    "sigmoid": lambda p: td.sigmoid(p["a"]),
    "matmul": lambda p: td.matmul(p["a"], p["w"]),
    "linear": lambda p: td.linear(p["a"], p["w"], p["bias"]),
    "concat": lambda p: td.concat([p["a"], p["b"]], axis=1),
    "getitem": lambda p: p["a"][np.array([0, 2, 2])],
    "mean_axis": lambda p: td.mean(p["a"], axis=0),
    "smooth_l1": lambda p: td.smooth_l1(p["a"], p["b"] * 3.0),
    "layer_norm": lambda p: td.layer_norm(p["a"], p["gain"], p["shift"]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_dense_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = {
        "a": td.parameter(_away_from_zero(rng, (3, 4))),
        "b": td.parameter(rng.normal(size=(3, 4))),
        "row": td.parameter(rng.normal(size=(1, 4))),
        "pos": td.parameter(rng.uniform(0.5, 2.0, size=(3, 4))),
        "w": td.parameter(rng.normal(size=(4, 2))),
        "bias": td.parameter(rng.normal(size=2)),
        "gain": td.parameter(rng.normal(size=4)),
        "shift": td.parameter(rng.normal(size=4)),
    }
    weights_rng = np.random.default_rng(5)
    probe = OP_CASES[name](params)
    weights = weights_rng.normal(size=probe.shape)
    report = td.gradient_check(lambda: (OP_CASES[name](params) * weights).sum(), params)
    assert report.passed, report.errors


def test_convolution_and_normalization_gradients():
    rng = np.random.default_rng(3)
    params = {
        "x3": td.parameter(rng.normal(size=(2, 2, 3, 3, 3))),
        "w3": td.parameter(rng.normal(size=(3, 2, 3, 3, 3))),
        "b3": td.parameter(rng.normal(size=3)),
        "x1": td.parameter(rng.normal(size=(2, 4, 5))),
        "w1": td.parameter(rng.normal(size=(4, 4, 3))),
        "b1": td.parameter(rng.normal(size=4)),
        "wt": td.parameter(rng.normal(size=(4, 2, 3))),
        "gn_w": td.parameter(rng.normal(size=4)),
        "gn_b": td.parameter(rng.normal(size=4)),
        "gamma": td.parameter(rng.normal(size=(2, 4))),
        "beta": td.parameter(rng.normal(size=(2, 4))),
    }
    w_conv3 = rng.normal(size=(2, 3, 3, 3, 3))
    w_chain = rng.normal(size=(2, 2, 5))

    def f():
        p = params
        c3 = td.conv3d(p["x3"], p["w3"], p["b3"], padding=1)
        c1 = td.conv1d(p["x1"], p["w1"], p["b1"], padding=1)
        c1 = td.group_norm(c1, 2, p["gn_w"], p["gn_b"])
        c1 = td.film(c1, p["gamma"], p["beta"])
        down = td.conv1d(c1, p["w1"], None, padding=1, stride=2)
        up = td.conv_transpose1d(down, p["wt"], None, padding=1, stride=2)
        return (c3 * w_conv3).sum() + (up * w_chain).sum()

    report = td.gradient_check(f, params, max_entries=12, rng=np.random.default_rng(0))
    assert report.passed, report.errors


def test_linear_layer_with_eight_weights():
    rng = np.random.default_rng(4)
    params = {"w": td.parameter(rng.normal(size=(4, 2))), "b": td.parameter(rng.normal(size=2))}
    x = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 2))
    report = td.gradient_check(lambda: td.square(td.linear(x, params["w"], params["b"]) - target).mean(), params)
    assert report.max_error < 1e-4


def test_gru_cell_over_three_steps():
    rng = np.random.default_rng(6)
    hidden, width = 3, 4
    params = {
        "w_input": td.parameter(rng.normal(scale=0.5, size=(width, 3 * hidden))),
        "w_hidden": td.parameter(rng.normal(scale=0.5, size=(hidden, 3 * hidden))),
        "b_input": td.parameter(rng.normal(scale=0.5, size=3 * hidden)),
        "b_hidden": td.parameter(rng.normal(scale=0.5, size=3 * hidden)),
    }
    inputs = rng.normal(size=(3, 2, width))
    weights = rng.normal(size=(2, hidden))

    def f():
        h = td.Tensor(np.zeros((2, hidden)))
        for x in inputs:
            h = gru_cell(x, h, params["w_input"], params["w_hidden"], params["b_input"], params["b_hidden"])
        return (h * weights).sum()

    report = td.gradient_check(f, params)
    assert report.max_error < 1e-4


def test_gradient_check_rejects_non_positive_step():
    a = td.parameter([1.0])
    with pytest.raises(ValueError):
        td.gradient_check(lambda: (a * a).sum(), [a], step=0.0)
