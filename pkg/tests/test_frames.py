import numpy as np
import pytest

from masklift.frames import (asymmetric_test_pattern, close, dilate, erode, find_rear_frames, gaussian_window,
                             make_mirrored_sequence, open_, preprocess, residual_handle, ssim, ssim_map)


def window_max(img, size=5, op=np.max):
    """Direct clipped-window oracle."""
    h, w = img.shape
    r = size // 2
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            out[i, j] = op(img[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1])
    return out


def random_mask(rng, h=40, w=48):
    m = (rng.random((h, w)) < rng.uniform(0.05, 0.6)).astype(np.uint8) * 255
    return m


def test_morphology_matches_window_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = random_mask(rng)
        np.testing.assert_array_equal(dilate(m), window_max(m))
        np.testing.assert_array_equal(erode(m), window_max(m, op=np.min))


def test_open_close_idempotent():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = random_mask(rng)
        np.testing.assert_array_equal(close(close(m)), close(m))
        np.testing.assert_array_equal(open_(open_(m)), open_(m))


def test_small_hole_filled_and_speck_removed():
    m = np.zeros((30, 30))
    m[5:25, 5:25] = 1
    m[12:14, 12:15] = 0  # hole
    m[1, 27] = 1  # speck
    out = residual_handle(m)
    assert out.dtype == np.uint8 and set(np.unique(out)) <= {0, 1}
    assert out[12:14, 12:15].all()
    assert out[1, 27] == 0
    assert out[5:25, 5:25].all()


def windowed_ssim_oracle(a, b):
    """Independent SSIM: explicit 11x11 windows and weighted moments."""
    g = gaussian_window()
    w = np.outer(g, g)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    h, wd = a.shape
    vals = []
    for i in range(h - 10):
        for j in range(wd - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(3):
        a = rng.uniform(0, 255, (20, 24))
        b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
        assert abs(ssim(a, b) - windowed_ssim_oracle(a, b)) < 1e-9


def test_ssim_identity_and_shape_checks():
    a = asymmetric_test_pattern(40, 60)
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert ssim_map(a, a).shape == (30, 50)
    with pytest.raises(ValueError):
        ssim(a, a[:, :-1])
    with pytest.raises(ValueError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_preprocess_keeps_aspect():
    assert preprocess(np.zeros((96, 160)), 128).shape == (77, 128)
    assert preprocess(np.zeros((10, 20, 3)), 128).shape == (64, 128)


def test_rear_frames_on_mirrored_sequence():
    ref = asymmetric_test_pattern()
    frames = make_mirrored_sequence(ref, noise=2.0)
    assert find_rear_frames(ref, frames, threads=2) == (10, 20)


def test_no_rear_frames_without_mirroring():
    ref = asymmetric_test_pattern()
    frames = make_mirrored_sequence(ref, n_frames=5, first=99, last=99)
    assert find_rear_frames(ref, frames) is None
    with pytest.raises(ValueError):
        find_rear_frames(ref, [])
