"""Gradient and semantics checks for the autodiff engine."""

import numpy as np
import pytest

from msrnas import autodiff as ad
from msrnas.autodiff import Tensor
from msrnas.errors import DimensionError, StateError

from conftest import central_difference, relative_error


def fd_check(build_loss, arrays, rng, n_coords=6, h=1e-6, tol=1e-6):
    """Compare analytic gradients of build_loss() against central differences."""
    loss = build_loss()
    loss.backward()
    grads = [t.grad.copy() for t in arrays]
    for t, g in zip(arrays, grads):
        flat = t.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for c in coords:
            idx = np.unravel_index(c, t.data.shape)
            num = central_difference(lambda: float(build_loss().data), t.data, idx, h)
            assert relative_error(g[idx], num) < tol, (
                f"gradient mismatch at {idx}: analytic {g[idx]}, numeric {num}"
            )


def test_relu_values():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_nonnegative_passthrough(rng):
    x = np.abs(rng.standard_normal((3, 4)))
    out = ad.relu(Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_relu_gradient_mask_by_finite_differences(rng):
    x = Tensor(rng.standard_normal(40), requires_grad=True)
    # Keep probes away from the kink where central differences are invalid.
    x.data[np.abs(x.data) < 1e-3] += 0.1
    weights = rng.standard_normal(40)
    fd_check(lambda: ad.sum_(ad.relu(x) * weights), [x], rng)
    loss = ad.sum_(ad.relu(x))
    x.zero_grad()
    loss.backward()
    np.testing.assert_array_equal(x.grad, (x.data > 0).astype(x.data.dtype))


def test_sum_of_params_gradient_is_one(rng):
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_zero_times_function_gradient_is_zero(rng):
    x = Tensor(rng.standard_normal(7), requires_grad=True)
    loss = ad.sum_(ad.relu(x) * x) * 0.0
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))


def test_backward_requires_scalar(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with pytest.raises(StateError):
        (x * 2.0).backward()


def test_backward_without_graph_raises():
    with pytest.raises(StateError):
        Tensor(np.array(1.0)).backward()


def test_broadcast_add_mul_gradients(rng):
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    fd_check(lambda: ad.sum_((a + b) * (a * b)), [a, b], rng)


def test_matmul_gradients(rng):
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    fd_check(lambda: ad.sum_(ad.matmul(a, b) ** 2.0), [a, b], rng)


def test_matmul_shape_errors(rng):
    a = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal((4, 2)))
    with pytest.raises(DimensionError):
        ad.matmul(a, b)


def test_exp_log_power_gradients(rng):
    x = Tensor(np.abs(rng.standard_normal(10)) + 0.5, requires_grad=True)
    fd_check(lambda: ad.sum_(ad.log(ad.exp(x) + 1.0) * x ** 2.0), [x], rng)


def test_mean_reduction_gradients(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    fd_check(lambda: ad.sum_(ad.mean(x, axis=(0, 2, 3), keepdims=True) ** 2.0),
             [x], rng)


def test_concat_and_slice_gradients(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)

    weights = rng.standard_normal((2, 3))

    def loss():
        cat = ad.concat([a, b], axis=1)
        return ad.sum_(cat[:, 1:4] * weights)

    fd_check(loss, [a, b], rng)


def test_pad2d_roundtrip_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    padded = ad.pad2d(x, (0, 1, 0, 1))
    assert padded.data.shape == (1, 2, 4, 4)
    fd_check(lambda: ad.sum_(ad.pad2d(x, (0, 1, 0, 1))[:, :, 1:, 1:] ** 2.0),
             [x], rng)


def test_take_per_row_gradients(rng):
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    idx = np.array([0, 3, 1, 1, 2])
    fd_check(lambda: ad.sum_(ad.take_per_row(x, idx) ** 2.0), [x], rng)


def test_gradient_accumulates_over_reuse(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    loss = ad.sum_(x * x) + ad.sum_(x) * 2.0
    loss.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 2.0, rtol=1e-12)


def test_no_grad_suppresses_graph(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with ad.no_grad():
        out = ad.sum_(x * 2.0)
    assert not out.requires_grad
    assert out._parents == ()


def test_deep_graph_backward_does_not_recurse(rng):
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(3000):
        y = y + 0.0
    y.backward()
    assert x.grad == 1.0
