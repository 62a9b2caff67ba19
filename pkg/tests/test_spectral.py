"""Power iteration, spectral-norm adjustment, Frobenius/stable-rank and
noise-sensitivity checks against the dense SVD oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msrnas.convolution import ConvSpec, conv2d_forward
from msrnas.errors import CapacityError, DegenerateInputError, DegenerateOperatorError
from msrnas.spectral import (
    ConvHandle,
    SpectralConfig,
    exact_singular_values,
    frobenius_norm_of_map,
    materialize_conv_matrix,
    noise_sensitivity,
    noise_sensitivity_stats,
    power_iteration,
    spectral_norm_adjust,
    stable_rank,
)

from conftest import fitting_input_hw, random_conv_spec


def identity_spec(channels: int = 1) -> ConvSpec:
    w = np.eye(channels, dtype=np.float64).reshape(channels, channels, 1, 1)
    return ConvSpec(channels, channels, 1, 1, weight=w)


def test_scalar_conv_sigma_after_one_iteration():
    spec = ConvSpec(1, 1, 1, 1, weight=np.array([[[[2.0]]]]))
    handle = ConvHandle(spec, (3, 3), seed=7)
    assert power_iteration(handle, 1) == pytest.approx(2.0, abs=1e-12)


def test_identity_conv_sigma_is_one():
    handle = ConvHandle(identity_spec(3), (4, 4), seed=1)
    assert power_iteration(handle, 1) == pytest.approx(1.0, abs=1e-12)


def test_power_iteration_matches_dense_svd(rng):
    spec = ConvSpec(2, 2, 3, 3, padding=1,
                    weight=rng.standard_normal((2, 2, 3, 3)))
    handle = ConvHandle(spec, (8, 8), seed=3)
    sigma = power_iteration(handle, 50)
    exact = exact_singular_values(materialize_conv_matrix(spec, (8, 8)))[0]
    assert abs(sigma - exact) / exact < 0.01


def test_power_iteration_zero_kernel_raises():
    spec = ConvSpec(1, 1, 3, 3, weight=np.zeros((1, 1, 3, 3)))
    with pytest.raises(DegenerateOperatorError):
        power_iteration(ConvHandle(spec, (5, 5)), 5)


def test_underestimate_and_monotone_sequence(rng):
    for _ in range(10):
        spec = random_conv_spec(rng)
        h, w = fitting_input_hw(spec, rng)
        exact = exact_singular_values(materialize_conv_matrix(spec, (h, w)))[0]
        handle = ConvHandle(spec, (h, w), seed=11)
        estimates = [power_iteration(handle, 1) for _ in range(20)]
        for k, est in enumerate(estimates):
            assert est <= exact + 1e-8, f"overshoot at iteration {k + 1}"
        diffs = np.diff(estimates)
        assert (diffs >= -1e-10).all(), "estimate sequence decreased"


def test_adjust_exact_scalar_case():
    spec = ConvSpec(1, 1, 1, 1, weight=np.array([[[[4.0]]]]))
    handle = ConvHandle(spec, (4, 4), seed=0)
    cfg = SpectralConfig(target_norm=1.0, iterations=1)
    spectral_norm_adjust(handle, cfg)
    assert spec.weight[0, 0, 0, 0] == pytest.approx(0.25 * 4.0 * 0.25 / 0.25)
    assert spec.weight[0, 0, 0, 0] == pytest.approx(1.0)


def test_adjust_fixed_point(rng):
    spec = identity_spec(2)
    handle = ConvHandle(spec, (5, 5), seed=0)
    cfg = SpectralConfig(target_norm=1.0, iterations=3)
    before = spec.weight.copy()
    spectral_norm_adjust(handle, cfg)
    np.testing.assert_allclose(spec.weight, before, atol=1e-12)


def test_adjust_converges_over_warm_started_rounds(rng):
    spec = ConvSpec(3, 3, 3, 3, padding=1,
                    weight=3.0 * rng.standard_normal((3, 3, 3, 3)))
    handle = ConvHandle(spec, (8, 8), seed=5)
    cfg = SpectralConfig(target_norm=1.0, iterations=5)
    for _ in range(10):
        spectral_norm_adjust(handle, cfg)
    oracle = ConvHandle(spec, (8, 8), seed=99)
    sigma = power_iteration(oracle, 50)
    assert 0.99 <= sigma <= 1.01


def test_frobenius_identity_conv():
    n = 3 * 4 * 4
    assert frobenius_norm_of_map(identity_spec(3), (4, 4)) == pytest.approx(np.sqrt(n))


def test_frobenius_1x1_diagonal_map():
    k = -1.7
    spec = ConvSpec(1, 1, 1, 1, weight=np.array([[[[k]]]]))
    assert frobenius_norm_of_map(spec, (5, 7)) == pytest.approx(abs(k) * np.sqrt(35))


def test_frobenius_matches_dense_matrix(rng):
    for _ in range(15):
        spec = random_conv_spec(rng)
        h, w = fitting_input_hw(spec, rng)
        dense = np.linalg.norm(materialize_conv_matrix(spec, (h, w)))
        assert abs(frobenius_norm_of_map(spec, (h, w)) - dense) < 1e-8 * max(1.0, dense)


def test_frobenius_kernel_mode(rng):
    spec = random_conv_spec(rng)
    assert frobenius_norm_of_map(spec, (8, 8), mode="kernel") == pytest.approx(
        np.linalg.norm(spec.weight)
    )


def test_stable_rank_identity_map():
    cfg = SpectralConfig()
    n = 2 * 4 * 4
    assert stable_rank(identity_spec(2), (4, 4), cfg) == pytest.approx(n, rel=1e-6)


def test_stable_rank_rank_one_map(rng):
    # Outer-product weight on a 1x1 conv at 1x1 input: exactly rank one.
    u = rng.standard_normal((3, 1))
    v = rng.standard_normal((1, 4))
    w = (u @ v).reshape(3, 4, 1, 1)
    spec = ConvSpec(3, 4, 1, 1, weight=w)
    assert stable_rank(spec, (1, 1), SpectralConfig()) == pytest.approx(1.0, rel=1e-6)


def test_stable_rank_closed_form_two_singular_values():
    w = np.diag([2.0, 1.0]).reshape(2, 2, 1, 1)
    spec = ConvSpec(2, 2, 1, 1, weight=w)
    assert stable_rank(spec, (1, 1), SpectralConfig()) == pytest.approx(1.25, rel=1e-6)


def test_stable_rank_matches_svd_oracle(rng):
    cfg = SpectralConfig()
    for _ in range(10):
        spec = random_conv_spec(rng)
        h, w = fitting_input_hw(spec, rng)
        sv = exact_singular_values(materialize_conv_matrix(spec, (h, w)))
        expected = float((sv ** 2).sum() / sv[0] ** 2)
        got = stable_rank(spec, (h, w), cfg)
        assert abs(got - expected) / expected < 0.01


def test_stable_rank_bounds(rng):
    cfg = SpectralConfig()
    for _ in range(10):
        spec = random_conv_spec(rng)
        h, w = fitting_input_hw(spec, rng)
        sr = stable_rank(spec, (h, w), cfg)
        rows, cols = spec.matrix_shape(h, w)
        assert 1.0 <= sr <= min(rows, cols)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1),
       st.floats(0.05, 20).filter(lambda k: abs(k) > 1e-3))
def test_stable_rank_scale_invariance(seed, k):
    rng = np.random.Generator(np.random.PCG64(seed))
    spec = random_conv_spec(rng)
    h, w = fitting_input_hw(spec, rng)
    cfg = SpectralConfig()
    base = stable_rank(spec, (h, w), cfg)
    scaled_spec = ConvSpec(
        spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w,
        spec.stride, spec.padding, spec.dilation, spec.groups,
        weight=k * spec.weight,
    )
    assert stable_rank(scaled_spec, (h, w), cfg) == pytest.approx(base, rel=1e-6)


def test_materialize_identity_is_identity():
    m = materialize_conv_matrix(identity_spec(2), (3, 3))
    np.testing.assert_allclose(m, np.eye(2 * 9), atol=1e-12)


def test_materialize_definition_check(rng):
    spec = random_conv_spec(rng)
    h, w = fitting_input_hw(spec, rng)
    m = materialize_conv_matrix(spec, (h, w))
    x = rng.standard_normal((1, spec.in_channels, h, w))
    np.testing.assert_allclose(
        m @ x.reshape(-1), conv2d_forward(x, spec).reshape(-1), atol=1e-10
    )


def test_materialize_cap():
    spec = ConvSpec(8, 8, 3, 3, padding=1, weight=np.ones((8, 8, 3, 3)))
    with pytest.raises(CapacityError):
        materialize_conv_matrix(spec, (64, 64), cap=1000)


def test_exact_singular_values_diag():
    np.testing.assert_allclose(
        exact_singular_values(np.diag([3.0, 1.0])), [3.0, 1.0]
    )


def test_exact_singular_values_orthogonal(rng):
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    np.testing.assert_allclose(exact_singular_values(q), np.ones(6), atol=1e-12)


def test_exact_singular_values_frobenius_consistency(rng):
    m = rng.standard_normal((7, 5))
    sv = exact_singular_values(m)
    assert abs((sv ** 2).sum() - (m ** 2).sum()) < 1e-8


def test_noise_sensitivity_identity_is_dimension(rng):
    spec = identity_spec(1)
    x = rng.standard_normal((1, 1, 4, 4))
    n = x.size
    psi, stderr = noise_sensitivity_stats(spec, x, samples=4000, seed=2)
    assert abs(psi - n) < 4 * max(stderr, 1e-9)


def test_noise_sensitivity_scale_invariant(rng):
    spec = random_conv_spec(rng, allow_groups=False)
    h, w = fitting_input_hw(spec, rng)
    x = rng.standard_normal((1, spec.in_channels, h, w))
    psi = noise_sensitivity(spec, x, samples=500, seed=3)
    scaled = ConvSpec(
        spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w,
        spec.stride, spec.padding, spec.dilation, spec.groups,
        weight=3.0 * spec.weight,
    )
    assert noise_sensitivity(scaled, x, samples=500, seed=3) == pytest.approx(psi, rel=1e-9)


def test_noise_sensitivity_matches_closed_form(rng):
    spec = random_conv_spec(rng)
    h, w = fitting_input_hw(spec, rng)
    x = rng.standard_normal((1, spec.in_channels, h, w))
    y = conv2d_forward(x, spec)
    closed = float(
        (x ** 2).sum() * frobenius_norm_of_map(spec, (h, w)) ** 2 / (y ** 2).sum()
    )
    psi = noise_sensitivity(spec, x, samples=10_000, seed=4)
    assert abs(psi - closed) / closed < 0.03


def test_noise_sensitivity_zero_output_raises():
    spec = ConvSpec(1, 1, 1, 1, weight=np.array([[[[1.0]]]]))
    with pytest.raises(DegenerateInputError):
        noise_sensitivity(spec, np.zeros((1, 1, 3, 3)), samples=10)


def test_warm_start_persists_across_calls(rng):
    spec = ConvSpec(2, 2, 3, 3, padding=1,
                    weight=rng.standard_normal((2, 2, 3, 3)))
    handle = ConvHandle(spec, (6, 6), seed=8)
    first = power_iteration(handle, 1)
    fifth = None
    for _ in range(4):
        fifth = power_iteration(handle, 1)
    cold = ConvHandle(spec, (6, 6), seed=8)
    five_at_once = power_iteration(cold, 5)
    assert fifth == pytest.approx(five_at_once, rel=1e-12)
    assert fifth >= first - 1e-10
