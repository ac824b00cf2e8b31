import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geoseg.numerics import correlate_valid, frob_sq
from geoseg.priors import (extract_noise_patches, make_pattern, make_pattern_set,
                           make_ridge_bank, orientations)


def test_pattern_center_is_peak():
    p = make_pattern(0, 15, 3, 10)
    assert p.pixels[7, 7] == 1.0
    assert p.pixels.max() == 1.0 and p.pixels.min() > 0


def test_theta_zero_is_vertical_ridge():
    p = make_pattern(0, 14, 3, 10).pixels
    # across-ridge (rows fixed) decays faster than along-ridge
    center_row = p[6]
    center_col = p[:, 6]
    assert center_row[0] < center_col[0]
    # monotone decay away from the ridge line, symmetric about the centre
    half = center_row[7:]
    assert np.all(np.diff(half) < 0)
    np.testing.assert_allclose(center_row, center_row[::-1], atol=1e-15)


def test_pattern_values_by_hand():
    # 2x2 grid: offsets +-0.5, theta 0 -> exp(-(0.25/c1^2 + 0.25/c2^2)) everywhere
    p = make_pattern(0, 2, 1.0, 2.0).pixels
    np.testing.assert_allclose(p, np.exp(-(0.25 + 0.0625)), rtol=1e-15)


@pytest.mark.parametrize("theta", [0.0, 30.0, 75.0])
@pytest.mark.parametrize("size", [7, 14])
def test_quarter_turn_maps_grid_to_grid(theta, size):
    a = make_pattern(theta, size, 2.0, 5.0).pixels
    b = make_pattern(theta + 90, size, 2.0, 5.0).pixels
    n = size
    # substitution x_t = -y, y_t = x gives b[i, j] = a[n-1-j, i], i.e. a clockwise quarter turn
    expected = np.array([[a[n - 1 - j, i] for j in range(n)] for i in range(n)])
    np.testing.assert_allclose(b, expected, atol=1e-14)
    np.testing.assert_allclose(b, np.rot90(a, k=-1), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(theta=st.floats(0, 180), size=st.integers(2, 20), c1=st.floats(0.5, 6), c2=st.floats(0.5, 12))
def test_half_turn_symmetry(theta, size, c1, c2):
    a = make_pattern(theta, size, c1, c2)
    b = make_pattern(theta + 180, size, c1, c2)
    np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-12)
    assert np.all(a.pixels > 0) and np.all(a.pixels <= 1)
    assert 0 <= a.theta < 180


def test_pattern_rejects_bad_parameters():
    with pytest.raises(ValueError):
        make_pattern(0, 7, 0.0, 1.0)
    with pytest.raises(ValueError):
        make_pattern(0, 7, 1.0, -1.0)
    with pytest.raises(ValueError):
        make_pattern(0, 1, 1.0, 1.0)


def test_pattern_set_angles():
    pairs = make_pattern_set(12, 14, 3, 10)
    assert [p.aligned.theta for p in pairs] == list(range(0, 180, 15))
    for p in pairs:
        assert p.orthogonal.theta == (p.aligned.theta + 90) % 180
    two = make_pattern_set(2, 10, 2, 10)
    np.testing.assert_array_equal(two[0].aligned.pixels, two[1].orthogonal.pixels)
    with pytest.raises(ValueError):
        make_pattern_set(1, 10, 2, 10)


@pytest.mark.parametrize("scale_id,m", [(1, 3), (2, 5), (3, 7), (4, 9), (5, 11)])
def test_ridge_bank_sizes_and_zero_mean(scale_id, m):
    bank = make_ridge_bank(scale_id, 12)
    assert bank.filters.shape == (12, m, m)
    np.testing.assert_allclose(bank.thetas, orientations(12))
    assert np.all(np.abs(bank.filters.sum(axis=(1, 2))) < 1e-9)


def test_ridge_filter_prefers_aligned_pattern():
    for scale_id, size, c1 in [(1, 6, 1), (3, 14, 3), (5, 22, 5)]:
        f = make_ridge_bank(scale_id, 12).filters[0]
        aligned = make_pattern(0, size, c1, 10).pixels
        orth = make_pattern(90, size, c1, 10).pixels
        assert frob_sq(correlate_valid(aligned, f)) > frob_sq(correlate_valid(orth, f))


def test_ridge_bank_rejects_unknown_scale():
    with pytest.raises(ValueError):
        make_ridge_bank(6, 12)


def _stroke_image(rng, size=128):
    img = 0.3 + 0.01 * rng.standard_normal((size, size))
    img[80:120, 30] = 0.9  # vertical stroke in vessel-free territory
    img[80:120, 31] = 0.9
    mask = np.zeros((size, size), bool)
    mask[5:20, 100:103] = True  # a labelled vessel elsewhere
    img[5:20, 100:103] = 0.9
    return img, mask


def test_constant_images_score_zero_and_tie_break():
    imgs = [np.full((64, 64), 0.4), np.full((64, 64), 0.7)]
    masks = [np.zeros((64, 64), bool)] * 2
    ns = extract_noise_patches(imgs, masks, None, 3, patch_size=32, n_candidates=10, n_keep=4)
    assert np.all(ns.scores == 0)
    assert ns.provenance == [(0, 0, 0), (0, 0, 16), (0, 0, 32), (0, 16, 0)]


def test_mining_finds_stroke_and_avoids_vessels():
    rng = np.random.default_rng(0)
    img, mask = _stroke_image(rng)
    ns = extract_noise_patches([img], [mask], None, 3, patch_size=32, n_candidates=20, n_keep=10)
    _, r0, c0 = ns.provenance[0]
    assert r0 < 120 and r0 + 32 > 80 and c0 <= 31 and c0 + 32 > 30
    np.testing.assert_array_equal(ns.patches[0], img[r0:r0 + 32, c0:c0 + 32])
    for _, r, c in ns.provenance:
        assert not mask[r:r + 32, c:c + 32].any()
    assert np.all(np.diff(ns.scores) <= 0)


def test_mining_is_deterministic_and_respects_fov():
    rng = np.random.default_rng(5)
    img, mask = _stroke_image(rng)
    fov = np.zeros_like(mask)
    fov[:, :64] = True
    a = extract_noise_patches([img], [mask], [fov], 2, patch_size=32, n_candidates=8, n_keep=5)
    b = extract_noise_patches([img], [mask], [fov], 2, patch_size=32, n_candidates=8, n_keep=5)
    assert a.provenance == b.provenance
    np.testing.assert_array_equal(a.patches, b.patches)
    assert all(c + 32 <= 64 for _, _, c in a.provenance)


def test_mining_exclusions_and_shortfall():
    rng = np.random.default_rng(0)
    img, mask = _stroke_image(rng)
    full = extract_noise_patches([img], [mask], None, 3, patch_size=32, n_candidates=5, n_keep=5)
    dropped = extract_noise_patches([img], [mask], None, 3, patch_size=32, n_candidates=5,
                                    n_keep=5, exclude=[full.provenance[0]])
    assert dropped.provenance == full.provenance[1:]
    assert dropped.short and len(dropped.patches) == 4
    with pytest.raises(ValueError):
        extract_noise_patches([], [], None, 3)
    with pytest.raises(ValueError):
        extract_noise_patches([img], [mask], None, 3, n_candidates=5, n_keep=6)
