"""Shared fixtures and independent numerical oracles for the test suite."""

import numpy as np
import pytest

from msrnas.convolution import ConvSpec


def naive_conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Nested-loop cross-correlation; the from-first-principles reference."""
    n, c_in, h, w = x.shape
    ho, wo = spec.out_hw(h, w)
    p, s, d = spec.padding, spec.stride, spec.dilation
    g = spec.groups
    cg = c_in // g
    og = spec.out_channels // g
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(spec.out_channels):
            grp = o // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        cin = grp * cg + ci
                        for ky in range(spec.kernel_h):
                            for kx in range(spec.kernel_w):
                                iy = y * s - p + ky * d
                                ix = xx * s - p + kx * d
                                if 0 <= iy < h and 0 <= ix < w:
                                    acc += x[b, cin, iy, ix] * spec.weight[o, ci, ky, kx]
                    out[b, o, y, xx] = acc
    return out


def central_difference(f, theta: np.ndarray, index: tuple, h: float) -> float:
    """Two-sided finite difference of scalar f at one coordinate of theta."""
    orig = theta[index]
    theta[index] = orig + h
    plus = f()
    theta[index] = orig - h
    minus = f()
    theta[index] = orig
    return (plus - minus) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_conv_spec(rng: np.random.Generator, *, dtype=np.float64,
                     max_channels: int = 4, max_kernel: int = 3,
                     allow_groups: bool = True) -> ConvSpec:
    """Random small ConvSpec exercising stride, padding, dilation, groups."""
    groups = 1
    if allow_groups and rng.random() < 0.4:
        groups = int(rng.integers(1, max_channels + 1))
    c_in = groups * int(rng.integers(1, max(2, max_channels // groups + 1)))
    c_out = groups * int(rng.integers(1, max(2, max_channels // groups + 1)))
    kh = int(rng.integers(1, max_kernel + 1))
    kw = int(rng.integers(1, max_kernel + 1))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    weight = rng.standard_normal((c_out, c_in // groups, kh, kw)).astype(dtype)
    return ConvSpec(
        out_channels=c_out, in_channels=c_in, kernel_h=kh, kernel_w=kw,
        stride=stride, padding=padding, dilation=dilation, groups=groups,
        weight=weight,
    )


def fitting_input_hw(spec: ConvSpec, rng: np.random.Generator,
                     lo: int = 4, hi: int = 8) -> tuple[int, int]:
    eff_h = (spec.kernel_h - 1) * spec.dilation + 1
    eff_w = (spec.kernel_w - 1) * spec.dilation + 1
    h = int(rng.integers(max(lo, eff_h), hi + 1))
    w = int(rng.integers(max(lo, eff_w), hi + 1))
    return h, w


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
