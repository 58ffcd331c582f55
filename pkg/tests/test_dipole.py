import itertools

import numpy as np
import pytest

from qsmforge.dipole import build_kernel, cone_mask, forward_field
from qsmforge.volume import Orientation, Volume


def test_kernel_range_dc_and_evenness():
    k = build_kernel((8, 10, 6), (1.0, 0.9, 1.2), Orientation.tilted(20, "y"))
    v = k.values
    assert v[0, 0, 0] == 0.0
    assert v.min() >= -2 / 3 and v.max() <= 1 / 3
    neg = v[np.ix_(-np.arange(8) % 8, -np.arange(10) % 10, -np.arange(6) % 6)]
    assert np.array_equal(v, neg)


def test_kernel_special_directions():
    v = build_kernel((8, 8, 8)).values
    assert v[0, 0, 1] == pytest.approx(-2 / 3)  # k along b
    assert v[1, 0, 0] == pytest.approx(1 / 3)  # k orthogonal to b
    # magic angle on a cubic grid: (1, 1, 1) has (k.b)^2 / |k|^2 = 1/3
    assert abs(v[1, 1, 1]) < 1e-15


def test_rejects_non_unit_orientation():
    with pytest.raises(ValueError):
        build_kernel((4, 4, 4), orientation=(0.0, 0.0, 2.0))
    with pytest.raises(ValueError):
        build_kernel((1, 4, 4))


def test_forward_of_zero_and_constant():
    k = build_kernel((8, 8, 8))
    assert np.all(forward_field(Volume(np.zeros((8, 8, 8))), k).data == 0)
    assert np.abs(forward_field(Volume(np.full((8, 8, 8), 0.3)), k).data).max() < 1e-15


def test_linearity(rng):
    k = build_kernel((12, 10, 8), orientation=Orientation.tilted(15, "x"))
    x1, x2 = rng.normal(size=(2, 12, 10, 8))
    lhs = forward_field(Volume(2.0 * x1 - 0.5 * x2), k).data
    rhs = 2.0 * forward_field(Volume(x1), k).data - 0.5 * forward_field(Volume(x2), k).data
    assert np.abs(lhs - rhs).max() < 1e-9


def test_axis_permutation_consistency(rng):
    chi = rng.normal(size=(8, 8, 8))
    kz = build_kernel((8, 8, 8), orientation=(0.0, 0.0, 1.0))
    kx = build_kernel((8, 8, 8), orientation=(1.0, 0.0, 0.0))
    fz = forward_field(Volume(chi), kz).data
    # swapping x and z maps a z-directed B0 problem onto an x-directed one
    fx = forward_field(Volume(chi.transpose(2, 1, 0)), kx).data
    assert np.abs(fx.transpose(2, 1, 0) - fz).max() < 1e-12


def test_cone_mask():
    k = build_kernel((32, 32, 32))
    assert cone_mask(k, 0.0).data.sum() == 0
    assert cone_mask(k, 2 / 3 + 1e-9).data.min() == 1.0
    # direct enumeration of the kernel formula
    f = np.fft.fftfreq(32)
    count = 0
    for a, b, c in itertools.product(f, f, f):
        k2 = a * a + b * b + c * c
        d = 0.0 if k2 == 0 else 1 / 3 - c * c / k2
        count += abs(d) < 0.15
    assert cone_mask(k, 0.15).data.sum() == count
