"""2D mask clean-up and SSIM-based rear-frame detection."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

KERNEL_SIZE = 5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DYNAMIC_RANGE = 255.0


def _check_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2D image, got shape {a.shape}")
    return a


# -- morphology ----------------------------------------------------------------
# 'nearest' extension gives the same max/min as a window clipped at the border.

def dilate(mask: np.ndarray, size: int = KERNEL_SIZE) -> np.ndarray:
    return ndimage.grey_dilation(mask, size=(size, size), mode="nearest")


def erode(mask: np.ndarray, size: int = KERNEL_SIZE) -> np.ndarray:
    return ndimage.grey_erosion(mask, size=(size, size), mode="nearest")


def close(mask: np.ndarray, size: int = KERNEL_SIZE) -> np.ndarray:
    return erode(dilate(mask, size), size)


def open_(mask: np.ndarray, size: int = KERNEL_SIZE) -> np.ndarray:
    return dilate(erode(mask, size), size)


def binarize(mask) -> np.ndarray:
    return np.where(_check_image(mask) > 0, 255, 0).astype(np.uint8)


def residual_handle(mask) -> np.ndarray:
    """Binarize, close then open with a 5x5 square, return a {0, 1} uint8 mask."""
    m = binarize(mask)
    return (open_(close(m)) // 255).astype(np.uint8)


# -- SSIM ----------------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    h = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[h:img.shape[0] - h, h:img.shape[1] - h]


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window; inputs on a 0..255 scale."""
    a, b = _check_image(a), _check_image(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    g = gaussian_window()
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


# -- rear frames ---------------------------------------------------------------

def to_gray(img) -> np.ndarray:
    """Grayscale on a 0..255 scale; RGB(A) uses Rec.601 luma."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        a = a[..., :3] @ np.array([0.299, 0.587, 0.114])
    return _check_image(a)


def preprocess(img, down_width: int = 128) -> np.ndarray:
    """Grayscale, then bilinear resize to ``down_width`` columns keeping the aspect ratio."""
    g = to_gray(img)
    h, w = g.shape
    new_h = max(1, int(round(h * down_width / w)))
    out = Image.fromarray(g.astype(np.float32), mode="F").resize((down_width, new_h), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def mirror_gain(ref_pre: np.ndarray, frame, down_width: int) -> float:
    """``ssim(ref, mirror(frame)) - ssim(ref, frame)`` after preprocessing both."""
    frame = np.asarray(frame)
    s_raw = ssim(ref_pre, preprocess(frame, down_width))
    s_mirror = ssim(ref_pre, preprocess(frame[:, ::-1], down_width))
    return s_mirror - s_raw


def find_rear_frames(reference, frames: Sequence, threshold: float = 0.05, down_width: int = 128,
                     threads: Optional[int] = None) -> Optional[tuple[int, int]]:
    """First and last index of frames whose mirror matches the reference better than the frame itself."""
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    ref_pre = preprocess(reference, down_width)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        gains = list(pool.map(lambda f: mirror_gain(ref_pre, f, down_width), frames))
    flagged = [i for i, g in enumerate(gains) if g > threshold]
    if not flagged:
        return None
    return min(flagged), max(flagged)


def make_mirrored_sequence(reference, n_frames: int = 30, first: int = 10, last: int = 20,
                           noise: float = 2.0, seed: int = 0) -> list[np.ndarray]:
    """Frames equal to ``reference`` except ``first..last`` (inclusive), which are mirrored.

    ``noise`` is the Gaussian pixel noise standard deviation on the 0..255 scale.
    """
    rng = np.random.default_rng(seed)
    ref = to_gray(reference)
    out = []
    for k in range(n_frames):
        base = ref[:, ::-1] if first <= k <= last else ref
        out.append(np.clip(base + rng.normal(0.0, noise, ref.shape), 0, 255))
    return out


def asymmetric_test_pattern(height: int = 96, width: int = 160, seed: int = 0) -> np.ndarray:
    """Deterministic pattern with strong left/right asymmetry on a 0..255 scale."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 40 + 120 * (x / width) ** 2 + 20 * np.sin(y / 7.0)
    for _ in range(6):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width * 0.6)
        r = rng.uniform(5, 14)
        img[(y - cy) ** 2 + (x - cx) ** 2 < r * r] = rng.uniform(150, 250)
    img[int(height * 0.2):int(height * 0.35), int(width * 0.05):int(width * 0.45)] = 230
    return np.clip(img, 0, 255)

