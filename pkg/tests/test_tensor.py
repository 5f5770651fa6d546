"""Autodiff engine tests: forward values vs brute-force oracles, gradients
vs central finite differences, graph bookkeeping (accumulation, detach),
and error handling."""

import numpy as np
import pytest

import oracles
from bwrf import tensor as T
from bwrf.tensor import Tensor


# -- conv2d forward -----------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 1), np.float32))
    out = T.conv2d(x, w)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_full_window_sum():
    x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2))
    w = Tensor(np.ones((1, 1, 2, 2), np.float32))
    out = T.conv2d(x, w)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.item() == 10.0


def test_conv_ramp_strided_vs_bruteforce():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    w = np.array([[1, 0], [0, -1]], np.float32).reshape(1, 1, 2, 2)
    out = T.conv2d(Tensor(x), Tensor(w), stride=2)
    ref = oracles.conv2d_bruteforce(x, w, None, stride=2, padding=0)
    np.testing.assert_array_equal(out.data, ref.astype(np.float32))
    np.testing.assert_array_equal(out.data.reshape(2, 2), np.full((2, 2), -5.0, np.float32))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_random_vs_bruteforce(stride, padding):
    rng = np.random.default_rng(7 * stride + padding)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    ref = oracles.conv2d_bruteforce(x, w, b, stride, padding)
    assert out.data.shape == ref.shape
    np.testing.assert_allclose(out.data, ref, rtol=1e-5, atol=1e-5)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 3, 4, 4), np.float32))
    with pytest.raises(ValueError, match="channels"):
        T.conv2d(x, Tensor(np.zeros((2, 4, 3, 3), np.float32)))
    with pytest.raises(ValueError, match="stride"):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3), np.float32)), stride=0)
    with pytest.raises(ValueError, match="bias"):
        T.conv2d(x, Tensor(np.zeros((2, 3, 3, 3), np.float32)),
                 Tensor(np.zeros(3, np.float32)))
    with pytest.raises(ValueError, match="NCHW"):
        T.conv2d(Tensor(np.zeros((3, 4, 4), np.float32)),
                 Tensor(np.zeros((2, 3, 3, 3), np.float32)))


# -- linear forward -----------------------------------------------------------

def test_linear_identity_and_zero_weight():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    eye = Tensor(np.eye(3, dtype=np.float32))
    zero_b = Tensor(np.zeros(3, np.float32))
    np.testing.assert_array_equal(T.linear(Tensor(x), eye, zero_b).data, x)

    b = np.array([1.0, -2.0, 0.5, 3.0], np.float32)
    out = T.linear(Tensor(x), Tensor(np.zeros((4, 3), np.float32)), Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))


def test_linear_random_vs_triple_loop():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3)).astype(np.float32)
    w = rng.standard_normal((4, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    out = T.linear(Tensor(x), Tensor(w), Tensor(b))
    ref = oracles.linear_bruteforce(x, w, b)
    np.testing.assert_allclose(out.data, ref, rtol=1e-6, atol=1e-6)


def test_linear_dim_mismatch():
    with pytest.raises(ValueError, match="feature size"):
        T.linear(Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((4, 5), np.float32)))


# -- batchnorm ----------------------------------------------------------------

def test_batchnorm_eval_unit_stats_is_near_identity():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32)),
                        np.zeros(3, np.float32), np.ones(3, np.float32), training=False)
    np.testing.assert_allclose(out.data, x, rtol=1e-4, atol=1e-4)


def test_batchnorm_train_constant_input_normalizes_to_beta():
    x = np.full((2, 2, 3, 3), 7.5, np.float32)
    beta = np.array([0.25, -1.0], np.float32)
    out = T.batchnorm2d(Tensor(x), Tensor(np.ones(2, np.float32)), Tensor(beta),
                        np.zeros(2, np.float32), np.ones(2, np.float32), training=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], x.shape),
                               atol=1e-6)


def test_batchnorm_running_stats_update():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    rm = np.zeros(2, np.float32)
    rv = np.ones(2, np.float32)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32)),
                  rm, rv, training=True, momentum=0.1)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    exp_rm = 0.1 * x.mean(axis=(0, 2, 3))
    exp_rv = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1)
    np.testing.assert_allclose(rm, exp_rm, rtol=1e-5)
    np.testing.assert_allclose(rv, exp_rv, rtol=1e-5)


def test_batchnorm_errors():
    ones = Tensor(np.ones(2, np.float32))
    zeros = Tensor(np.zeros(2, np.float32))
    with pytest.raises(ValueError, match="eps"):
        T.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2), np.float32)), ones, zeros,
                      np.zeros(2, np.float32), np.ones(2, np.float32), training=True, eps=0.0)
    with pytest.raises(ValueError, match="batch"):
        T.batchnorm2d(Tensor(np.zeros((0, 2, 2, 2), np.float32)), ones, zeros,
                      np.zeros(2, np.float32), np.ones(2, np.float32), training=True)


# -- simple ops ---------------------------------------------------------------

def test_relu_values():
    out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0], np.float32)))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_add_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        T.add(Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((3, 2), np.float32)))


def test_log_softmax_uniform_logits():
    out = T.log_softmax(Tensor(np.zeros((3, 5), np.float32)))
    np.testing.assert_allclose(out.data, np.full((3, 5), np.log(1 / 5)), rtol=1e-6)


def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(5)
    x = (rng.standard_normal((6, 10)) * 4).astype(np.float32)
    out = T.log_softmax(Tensor(x))
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), np.ones(6), atol=1e-5)


def test_global_avg_pool_value():
    x = Tensor(np.array([[1, 2], [3, 4]], np.float32).reshape(1, 1, 2, 2))
    assert T.global_avg_pool(x).item() == 2.5


def test_nll_label_range_check():
    lp = T.log_softmax(Tensor(np.zeros((2, 3), np.float32)))
    with pytest.raises(ValueError, match="range"):
        T.nll_loss(lp, np.array([0, 3]))


# -- backward bookkeeping -------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3), np.float32), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3), np.float32))


def test_backward_accumulates_over_consumers():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    T.add(x, x).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0, np.float32))


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2), np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.relu(x).backward()


def test_split_consumers_match_combined_expression():
    # d/dx sum(3x) == d/dx [sum(x) + sum(2x)]
    rng = np.random.default_rng(9)
    data = rng.standard_normal((3, 3)).astype(np.float32)
    a = Tensor(data, requires_grad=True)
    (a * 3.0).sum().backward()
    combined = a.grad.copy()
    b = Tensor(data, requires_grad=True)
    T.add(b * 1.0, b * 2.0).sum().backward()
    np.testing.assert_allclose(b.grad, combined, rtol=1e-6)


def test_detach_severs_one_path():
    vals = np.array([[1.0, -2.0], [0.5, 3.0]], np.float32)
    x = Tensor(vals, requires_grad=True)
    d = x.detach()
    assert not d.requires_grad
    np.testing.assert_array_equal(d.data, vals)
    T.mul(d, x).sum().backward()
    np.testing.assert_array_equal(x.grad, vals)


def test_frozen_leaf_receives_no_grad():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 2), np.float32), requires_grad=False)
    T.mul(x, w).sum().backward()
    assert w.grad is None
    assert x.grad is not None


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    runs = []
    for _ in range(2):
        out = T.global_avg_pool(T.relu(T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1)))
        runs.append(out.data.copy())
    assert np.array_equal(runs[0], runs[1])


# -- gradients vs finite differences -------------------------------------------

@pytest.mark.parametrize("name", sorted(oracles.FD_CASES))
def test_gradients_match_finite_differences(name, fd_rng):
    case = oracles.FD_CASES[name]
    for trial in range(5):
        arrays, (op32, op64) = case(fd_rng)
        err = oracles.run_fd_case(arrays, op32, op64, fd_rng)
        assert err < 1e-3, f"{name} trial {trial}: rel err {err:.2e}"
