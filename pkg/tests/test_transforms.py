import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from featherstorm.attack import AttackConfig
from featherstorm.data import DatasetHandle, ImageTensor, RandomStream, sample_donor
from featherstorm.frequency import self_mix
from featherstorm.transforms import block_grid, block_mix, pixel_drop, safer_probe

rng = np.random.default_rng(3)


def _img(label=0, shape=(10, 10, 3), seed=0, id=0):
    return ImageTensor(np.random.default_rng(seed).random(shape), label, id)


def _dataset(shape=(8, 8, 3)):
    return DatasetHandle([_img(k % 3, shape, seed=k, id=k) for k in range(9)], 3)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40))
def test_grid_tiles_exactly(h, w, n_b):
    if n_b > min(h, w):
        with pytest.raises(ValueError):
            block_grid(h, w, n_b)
        return
    g = block_grid(h, w, n_b)
    for bounds, n in ((g.row_bounds, h), (g.col_bounds, w)):
        assert bounds[0] == 0 and bounds[-1] == n
        ext = np.diff(bounds)
        assert np.all(ext > 0) and ext.max() - ext.min() <= 1 and ext.sum() == n


def test_block_mix_keep_all_and_replace_all():
    x, donor = _img(0), _img(1, seed=1)
    np.testing.assert_array_equal(block_mix(x, donor, 5, 1.0, RandomStream(0)).pixels, x.pixels)
    out = block_mix(x, donor, 5, 0.0, RandomStream(0))
    np.testing.assert_array_equal(out.pixels, donor.pixels)
    assert out.label == 0


def test_block_mix_replaced_fraction():
    x, donor = ImageTensor(np.zeros((10, 10, 1)), 0), ImageTensor(np.ones((10, 10, 1)), 1)
    r = RandomStream(11)
    frac = np.mean([block_mix(x, donor, 5, 0.9, r).pixels.mean() for _ in range(10_000)])
    assert abs(frac - 0.1) <= 0.01


def test_block_mix_pixels_come_from_sources():
    x, donor = _img(0, (11, 13, 3)), _img(2, (11, 13, 3), seed=5)
    out = block_mix(x, donor, 4, 0.5, RandomStream(2))
    g = block_grid(11, 13, 4)
    for _, _, rows, cols in g.blocks():
        blk = out.pixels[rows, cols]
        assert np.array_equal(blk, x.pixels[rows, cols]) or np.array_equal(blk, donor.pixels[rows, cols])


def test_block_mix_errors():
    with pytest.raises(ValueError):
        block_mix(_img(shape=(4, 4, 3)), _img(shape=(5, 4, 3)), 2, 0.5, RandomStream(0))
    with pytest.raises(ValueError):
        block_mix(_img(shape=(4, 4, 3)), _img(shape=(4, 4, 3)), 5, 0.5, RandomStream(0))


def test_pixel_drop_endpoints():
    x = _img()
    np.testing.assert_array_equal(pixel_drop(x, 0.0, RandomStream(0)).pixels, x.pixels)
    assert not pixel_drop(x, 1.0, RandomStream(0)).pixels.any()
    with pytest.raises(ValueError):
        pixel_drop(x, 1.1, RandomStream(0))


def test_pixel_drop_fraction_and_channels_joint():
    x = ImageTensor(np.ones((200, 200, 3)), 4)
    out = pixel_drop(x, 0.3, RandomStream(8))
    zeroed = (out.pixels == 0).all(axis=2)
    assert abs(zeroed.mean() - 0.3) <= 0.02
    assert np.array_equal(zeroed, (out.pixels == 0).any(axis=2))
    assert out.label == 4


def test_transforms_deterministic_for_same_stream():
    x, donor = _img(0), _img(1, seed=2)
    a = block_mix(x, donor, 3, 0.5, RandomStream(1, 2)).pixels
    b = block_mix(x, donor, 3, 0.5, RandomStream(1, 2)).pixels
    assert a.tobytes() == b.tobytes()


def test_safer_probe_disabled_is_identity():
    ds = _dataset()
    cfg = AttackConfig(keep_p=1.0, mix_mu=0.0)
    x = ds[0]
    np.testing.assert_array_equal(safer_probe(x, ds, cfg, RandomStream(0)), x.pixels)


def test_safer_probe_deterministic():
    ds = _dataset()
    cfg = AttackConfig()
    a = safer_probe(ds[1], ds, cfg, RandomStream(7, 1))
    b = safer_probe(ds[1], ds, cfg, RandomStream(7, 1))
    assert a.tobytes() == b.tobytes()


def test_safer_probe_matches_hand_composition():
    ds = _dataset()
    cfg = AttackConfig()
    x = ds[4]
    got = safer_probe(x, ds, cfg, RandomStream(21))

    r = RandomStream(21)
    donor = sample_donor(ds, x.label, r)
    keep = r.random((5, 5)) < 0.9
    mixed = x.pixels.copy()
    cuts = [0, 2, 3, 5, 6, 8]  # round-half-up of i*8/5
    for i in range(5):
        for j in range(5):
            if not keep[i, j]:
                mixed[cuts[i]:cuts[i + 1], cuts[j]:cuts[j + 1]] = donor.pixels[cuts[i]:cuts[i + 1], cuts[j]:cuts[j + 1]]
    beta = r.uniform(-math.pi / 4, math.pi / 4)
    np.testing.assert_allclose(got, self_mix(mixed, 0.4, beta), atol=1e-12)
    assert block_grid(8, 8, 5).row_bounds == tuple(cuts)


def test_safer_probe_with_plain_namespace_config():
    ds = _dataset()
    cfg = SimpleNamespace(n_b=2, keep_p=0.5, mix_mu=0.2, beta_range=(0.0, 0.1))
    assert safer_probe(ds[0], ds, cfg, RandomStream(0)).shape == (8, 8, 3)
