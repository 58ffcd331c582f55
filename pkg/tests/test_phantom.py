import json

import numpy as np
import pytest

from qsmforge.dipole import build_kernel, forward_field
from qsmforge.phantom import (PhantomElement, PhantomSpec, PhantomSpecError, Shape, analytic_sphere_field, generate,
                              random_spec, synth_dataset)
from qsmforge.volume import Orientation


def _sphere_spec(n=32, r=4.0, dchi=1.0):
    c = (n - 1) / 2.0 if n % 2 else n // 2
    return PhantomSpec((n, n, n), (1.0, 1.0, 1.0), 7, [PhantomElement(Shape.SPHERE, (c, c, c), r, dchi)], 0.0)


def test_empty_spec_gives_zero_volume_and_ellipsoid_mask():
    chi, mask = generate(PhantomSpec((32, 32, 32), (1, 1, 1), 0, [], 0.0))
    assert np.all(chi.data == 0)
    frac = mask.data.mean()
    assert 0.45 < frac < 0.55
    assert mask.data[16, 16, 16] == 1 and mask.data[0, 0, 0] == 0


def test_sphere_voxels():
    chi, _ = generate(_sphere_spec())
    assert chi.data[16, 16, 16] == 1.0
    assert chi.data[26, 16, 16] == 0.0


def test_overlaps_add_and_background():
    els = [PhantomElement(Shape.SPHERE, (8, 8, 8), 3, 0.1), PhantomElement(Shape.SPHERE, (9, 8, 8), 3, 0.2)]
    chi, _ = generate(PhantomSpec((16, 16, 16), (1, 1, 1), 0, els, 0.05))
    assert chi.data[8, 8, 8] == pytest.approx(0.35)
    assert chi.data[0, 0, 0] == pytest.approx(0.05)


def test_generate_is_deterministic():
    spec = random_spec((24, 24, 24), np.random.default_rng(3))
    a, _ = generate(spec)
    b, _ = generate(PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))))
    assert np.array_equal(a.data, b.data)


def test_spec_errors_name_the_field():
    d = _sphere_spec().to_dict()
    d["elements"][0]["size_voxels"] = -1
    with pytest.raises(PhantomSpecError, match=r"elements\[0\]\.size_voxels"):
        PhantomSpec.from_dict(d)
    d = _sphere_spec().to_dict()
    d["elements"][0]["center_voxel"] = [100, 0, 0]
    with pytest.raises(PhantomSpecError, match="center_voxel"):
        PhantomSpec.from_dict(d)


def test_analytic_field_examples():
    a, dchi = 4.0, 1.0
    f = analytic_sphere_field(a, dchi, (16, 16, 16), (33, 33, 33)).data
    assert f[16, 16, 24] == pytest.approx(dchi / 12)
    assert f[24, 16, 16] == pytest.approx(-dchi / 24)
    assert f[16, 16, 16] == 0.0


def test_analytic_field_vanishes_on_magic_cone():
    b = np.array([0.0, 0.0, 1.0])
    theta = np.arccos(1 / np.sqrt(3))
    for r in (5.0, 9.0):
        p = 16 + r * np.array([np.sin(theta), 0.0, np.cos(theta)])
        # evaluate the closed form at an off-grid point by shifting the center instead
        center = tuple(np.array([16.0, 16.0, 16.0]) - (p - 16))
        f = analytic_sphere_field(3.0, 1.0, center, (33, 33, 33), orientation=Orientation(tuple(b))).data
        assert abs(f[16, 16, 16]) < 1e-12


def test_forward_matches_analytic_sphere_shell():
    n, a = 64, 8.0
    chi, _ = generate(_sphere_spec(n, a))
    k = build_kernel(chi.dims)
    f = forward_field(chi, k).data
    ref = analytic_sphere_field(a, 1.0, (32, 32, 32), chi.dims).data
    x, y, z = np.meshgrid(*(np.arange(n) - 32.0,) * 3, indexing="ij")
    r = np.sqrt(x * x + y * y + z * z)
    shell = (r > 1.5 * a) & (r < 3 * a)
    rel = np.linalg.norm(f[shell] - ref[shell]) / np.linalg.norm(ref[shell])
    assert rel < 0.05
    assert abs(f[r < 0.5 * a].mean()) < 0.02


def test_synth_dataset():
    spec = random_spec((24, 24, 24), np.random.default_rng(0), seed=5)
    a = synth_dataset(3, spec)
    b = synth_dataset(3, spec)
    assert len(a) == 3
    assert not np.array_equal(a[0].chi.data, a[1].chi.data)
    for s, t in zip(a, b):
        assert np.array_equal(s.chi.data, t.chi.data) and np.array_equal(s.field.data, t.field.data)
    k = build_kernel(spec.dims)
    assert np.array_equal(a[0].field.data, forward_field(a[0].chi, k).data)


def test_synth_noise_level():
    spec = PhantomSpec((48, 48, 48), (1, 1, 1), 9, [], 0.0)
    s = synth_dataset(1, spec, noise_std_ppm=0.001)[0]
    resid = (s.field.data - forward_field(s.chi, build_kernel(spec.dims)).data)[s.mask.data == 0]
    assert abs(resid.std() - 0.001) < 0.05 * 0.001
