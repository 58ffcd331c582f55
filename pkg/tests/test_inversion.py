import warnings

import numpy as np
import pytest

from qsmforge.dipole import build_kernel, forward_field
from qsmforge.inversion import (OrientedField, TkdConfig, UnderdeterminedWarning, cosmos_invert, cosmos_spectrum,
                                tikhonov_invert, tikhonov_spectrum, tkd_invert, tkd_spectrum)
from qsmforge.volume import Orientation, Volume, fft_forward


def test_tkd_config_bounds():
    with pytest.raises(ValueError):
        TkdConfig(0.0)
    with pytest.raises(ValueError):
        TkdConfig(0.7)


def test_tkd_bin_rules():
    assert tkd_spectrum(0.6, 0.3, 0.15) == pytest.approx(2.0)
    assert tkd_spectrum(0.6, 0.1, 0.15) == pytest.approx(4.0)
    assert tkd_spectrum(0.6, -0.1, 0.15) == pytest.approx(-4.0)
    assert tkd_spectrum(0.6, 0.0, 0.15) == 0.0


def test_zero_field_gives_zero():
    k = build_kernel((8, 8, 8))
    z = Volume(np.zeros((8, 8, 8)))
    assert np.all(tkd_invert(z, k).data == 0)
    assert np.all(tikhonov_invert(z, k, 0.1).data == 0)


def test_tikhonov_rejects_nonpositive_lambda():
    k = build_kernel((4, 4, 4))
    with pytest.raises(ValueError):
        tikhonov_invert(Volume(np.zeros((4, 4, 4))), k, 0.0)


def test_tikhonov_large_lambda_shrinks(rng):
    k = build_kernel((8, 8, 8))
    f = Volume(rng.normal(size=(8, 8, 8)))
    lam = 1e6
    out = tikhonov_invert(f, k, lam)
    y = np.abs(fft_forward(f).data).max()
    assert np.abs(out.data).max() < y * (2 / 3) / lam


def test_tikhonov_matches_scalar_grid_search(rng):
    for _ in range(5):
        d = rng.uniform(-2 / 3, 1 / 3)
        y = rng.normal()
        lam = 0.05
        xs = np.linspace(-40, 40, 800001)
        best = xs[np.argmin((d * xs - y) ** 2 + lam * xs ** 2)]
        assert tikhonov_spectrum(y, d, lam) == pytest.approx(best, abs=2e-4)


def test_cosmos_matches_scalar_least_squares(rng):
    for _ in range(5):
        ds = rng.uniform(-2 / 3, 1 / 3, size=3)
        ys = rng.normal(size=3)
        xs = np.linspace(-30, 30, 600001)
        cost = sum((d * xs - y) ** 2 for d, y in zip(ds, ys))
        assert cosmos_spectrum(list(ys), list(ds)) == pytest.approx(xs[np.argmin(cost)], abs=2e-4)
    assert cosmos_spectrum([1.0], [0.0]) == 0.0


def test_cosmos_single_orientation_reduces_to_division(rng):
    k = build_kernel((8, 8, 8))
    chi = Volume(rng.normal(size=(8, 8, 8)))
    f = forward_field(chi, k)
    with pytest.warns(UnderdeterminedWarning):
        out = cosmos_invert([OrientedField(f, Orientation())])
    y, d = fft_forward(f).data, k.values
    ok = np.abs(d) > 1e-5
    got = fft_forward(out).data
    np.testing.assert_allclose(got[ok], (y / np.where(ok, d, 1))[ok], atol=1e-8)


def test_cosmos_errors():
    with pytest.raises(ValueError):
        cosmos_invert([])
    a = OrientedField(Volume(np.zeros((4, 4, 4))), Orientation())
    b = OrientedField(Volume(np.zeros((4, 4, 6))), Orientation())
    with pytest.raises(ValueError):
        cosmos_invert([a, b])


def test_linearity(rng):
    k = build_kernel((10, 8, 6))
    f1, f2 = (Volume(a) for a in rng.normal(size=(2, 10, 8, 6)))
    f12 = Volume(3 * f1.data - f2.data)
    for inv in (lambda f: tkd_invert(f, k), lambda f: tikhonov_invert(f, k, 0.02)):
        assert np.abs(inv(f12).data - (3 * inv(f1).data - inv(f2).data)).max() < 1e-9
    o2 = Orientation.tilted(20, "x")
    k2 = build_kernel((10, 8, 6), orientation=o2)
    def cos(f):
        return cosmos_invert([OrientedField(f, Orientation()), OrientedField(f, o2)]).data
    assert np.abs(cos(f12) - (3 * cos(f1) - cos(f2))).max() < 1e-9


def test_tkd_preserves_well_conditioned_bins(rng):
    k = build_kernel((12, 12, 12))
    chi = Volume(rng.normal(size=(12, 12, 12)))
    f = forward_field(chi, k)
    f2 = forward_field(tkd_invert(f, k, TkdConfig(0.15)), k)
    good = np.abs(k.values) >= 0.15
    assert np.abs(fft_forward(f2).data[good] - fft_forward(f).data[good]).max() < 1e-9
