from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundplan.masks import rle_decode, rle_encode


def test_all_zero_mask_is_single_run():
    mask = np.zeros((256, 256), dtype=bool)
    assert rle_encode(mask) == [65536]


def test_all_ones_mask_starts_with_zero_run():
    mask = np.ones((4, 4), dtype=bool)
    assert rle_encode(mask) == [0, 16]


def test_known_pattern():
    mask = np.array([[0, 1, 1, 0], [0, 0, 1, 1]], dtype=bool)
    # Flattened: 0 1 1 0 0 0 1 1
    assert rle_encode(mask) == [1, 2, 3, 2]


def test_decode_validates_total():
    with pytest.raises(ValueError):
        rle_decode([3, 2], (2, 4))
    with pytest.raises(ValueError):
        rle_decode([-1, 9], (2, 4))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32))
def test_roundtrip_random_masks(seed):
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
    mask = rng.random((h, w)) < rng.random()
    back = rle_decode(rle_encode(mask), (h, w))
    assert np.array_equal(mask, back)


def test_runs_sum_to_pixel_count(rng):
    for _ in range(100):
        mask = rng.random((9, 13)) < 0.4
        assert sum(rle_encode(mask)) == 9 * 13
