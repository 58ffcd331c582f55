import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qsmforge.patching import (PatchGeometry, SamplerConfig, StitchError, candidate_centers, cut_tiles, extract_patch,
                               plan_to_json, sample_training_patches, stitch, tile_boundary_mask, tile_plan)
from qsmforge.phantom import brain_mask
from qsmforge.volume import Quantity, Volume


def test_geometry_validation():
    assert PatchGeometry(64, 48).margin == 8
    for a, b in [(16, 24), (24, 18), (25, 17), (24, 22)]:
        with pytest.raises(ValueError):
            PatchGeometry(a, b)


def test_interior_candidate_count():
    centers = candidate_centers((64, 64, 64), 8, input_size=32, interior_only=True)
    # independent count: grid points whose [c - 16, c + 16) window fits in [0, 64)
    per_axis = sum(1 for c in range(64) if c % 8 == 0 and c - 16 >= 0 and c + 16 <= 64)
    assert per_axis == 5
    assert len(centers) == per_axis ** 3 == 125
    assert np.all(centers % 8 == 0)


def _vols(n=32, seed=0):
    r = np.random.default_rng(seed)
    chi = Volume(r.normal(size=(n, n, n)), quantity=Quantity.SUSCEPTIBILITY_PPM)
    field = Volume(r.normal(size=(n, n, n)))
    mask = Volume(brain_mask((n, n, n)), quantity=Quantity.MASK)
    return field, chi, mask


def test_sampler_brain_only_and_concentric():
    field, chi, mask = _vols()
    geom = PatchGeometry(24, 16)
    for inp, tgt, c in sample_training_patches(field, chi, mask, geom, SamplerConfig(8, 1.0, 3), n=50):
        assert mask.data[c] == 1.0
        assert tgt[8, 8, 8] == chi.data[c]
        assert inp[12, 12, 12] == field.data[c]
        assert inp.shape == (24,) * 3 and tgt.shape == (16,) * 3


def test_sampler_ratio_and_determinism():
    field, chi, mask = _vols()
    geom = PatchGeometry(16, 16)
    cfg = SamplerConfig(8, 0.9, 11)
    a = [c for _, _, c in sample_training_patches(field, chi, mask, geom, cfg, n=2000)]
    b = [c for _, _, c in sample_training_patches(field, chi, mask, geom, cfg, n=2000)]
    assert a == b
    frac = np.mean([mask.data[c] for c in a])
    assert abs(frac - 0.9) < 0.03


def test_sampler_rejects_small_volume():
    field, chi, mask = _vols(16)
    with pytest.raises(ValueError):
        next(sample_training_patches(field, chi, mask, PatchGeometry(24, 16), SamplerConfig()))


def test_zero_padding_at_edges():
    a = np.ones((8, 8, 8))
    p = extract_patch(a, (0, 0, 0), 4)
    assert p[:2].sum() == 0 and p[2:, 2:, 2:].sum() == 8


def _coverage(dims, geom):
    hits = np.zeros(dims, int)
    for t in tile_plan(dims, geom):
        hits[t.output_slices] += 1
    return hits


def test_tile_plan_examples():
    t = tile_plan((96, 96, 96), PatchGeometry(64, 48))
    assert len(t) == 8
    assert all(np.array_equal(np.subtract(x.net_start, x.input_start), (8, 8, 8)) for x in t)
    assert len(tile_plan((48, 48, 48), PatchGeometry(48, 48))) == 1
    plan = tile_plan((100, 100, 100), PatchGeometry(64, 48))
    assert len(plan) == 27
    hits = _coverage((100, 100, 100), PatchGeometry(64, 48))
    assert hits.sum() == 100 ** 3 and hits.max() == 1
    last = plan[-1]
    assert last.net_start == (52, 52, 52) and last.output_window == ((96, 100),) * 3
    json.loads(plan_to_json(plan, PatchGeometry(64, 48), (100, 100, 100)))


@given(st.integers(16, 70), st.integers(16, 70), st.integers(16, 70),
       st.sampled_from([(16, 16), (24, 16), (32, 16), (32, 24), (48, 32)]))
def test_tiles_partition_and_input_dilates_output(nx, ny, nz, sizes):
    geom = PatchGeometry(*sizes)
    dims = (nx, ny, nz)
    assert _coverage(dims, geom).min() == 1 and _coverage(dims, geom).max() == 1
    for t in tile_plan(dims, geom):
        for ax in range(3):
            (ia, ib), (pa, pb) = t.input_window[ax], t.pad[ax]
            assert ia - pa == t.input_start[ax] and ib + pb - (ia - pa) == geom.input_size
            assert t.net_start[ax] - t.input_start[ax] == geom.margin
            oa, ob = t.output_window[ax]
            assert t.net_start[ax] <= oa and ob <= t.net_start[ax] + geom.output_size


@given(st.integers(16, 60), st.integers(0, 2 ** 31 - 1))
def test_cut_then_stitch_identity(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n + 3, n))
    plan = tile_plan(a.shape, PatchGeometry(24, 16))
    assert np.array_equal(stitch(cut_tiles(a, plan), a.shape).data, a)


def test_stitch_errors():
    a = np.zeros((8, 8, 8))
    with pytest.raises(StitchError, match="not covered"):
        stitch([(((0, 8), (0, 8), (0, 4)), a[:, :, :4])], a.shape)
    with pytest.raises(StitchError, match="overlapping"):
        stitch([(((0, 8), (0, 8), (0, 8)), a), (((0, 1), (0, 1), (0, 1)), a[:1, :1, :1])], a.shape)
    assert np.array_equal(stitch([(((0, 8),) * 3, a + 1)], a.shape).data, a + 1)


def test_boundary_mask():
    m = tile_boundary_mask((32, 32, 32), PatchGeometry(24, 16))
    edge = np.zeros(32, bool)
    edge[[0, 15, 16, 31]] = True
    assert np.array_equal(m[:, 5, 5], edge)
    assert m[5, 5, 0] and not m[5, 5, 5]
