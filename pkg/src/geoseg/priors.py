"""Oriented ridge patterns, a ridge-detector filter bank and noise-patch mining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numerics import correlate_valid

log = logging.getLogger(__name__)

# filter size per scale id
SCALE_FILTER_SIZES = {1: 3, 2: 5, 3: 7, 4: 9, 5: 11}


@dataclass
class OrientedPattern:
    theta: float
    size: int
    c1: float
    c2: float
    pixels: np.ndarray


@dataclass
class PatternPair:
    aligned: OrientedPattern
    orthogonal: OrientedPattern


@dataclass
class RidgeBank:
    scale_id: int
    thetas: np.ndarray
    filters: np.ndarray  # (K, m, m)


@dataclass
class NoisePatchSet:
    scale_id: int
    patch_size: int
    n_candidates: int
    n_keep: int
    patches: np.ndarray  # (P, Ps, Ps)
    provenance: list = field(default_factory=list)  # (image id, row, col)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    short: bool = False  # fewer qualifying windows than requested


def centered_grid(size):
    """Column offsets ``x`` and upward row offsets ``y`` on a centred unit grid.

    For even sizes the centre falls between pixels, so offsets are half-integers.
    """
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    x = np.broadcast_to(r[None, :], (size, size))
    y = np.broadcast_to(-r[:, None], (size, size))
    return x, y


def rotate(x, y, theta):
    """Apply ``R(theta) = [[cos, -sin], [sin, cos]]`` to coordinate arrays (theta in degrees)."""
    t = np.deg2rad(theta)
    c, s = np.cos(t), np.sin(t)
    return c * x - s * y, s * x + c * y


def make_pattern(theta, size, c1, c2):
    """Elongated Gaussian ridge ``exp(-(x_t^2/c1^2 + y_t^2/c2^2))`` at angle ``theta``.

    ``c1`` scales the across-ridge coordinate, ``c2`` the along-ridge one, so
    ``theta=0`` with ``c2 > c1`` gives a vertical ridge.
    """
    if c1 <= 0 or c2 <= 0:
        raise ValueError(f"Gaussian parameters must be positive, got c1={c1}, c2={c2}")
    if size < 2:
        raise ValueError(f"pattern size must be >= 2, got {size}")
    x, y = centered_grid(size)
    xt, yt = rotate(x, y, theta)
    pix = np.exp(-(xt ** 2 / c1 ** 2 + yt ** 2 / c2 ** 2))
    return OrientedPattern(theta=float(theta) % 180.0, size=size, c1=c1, c2=c2, pixels=pix)


def orientations(K):
    return np.arange(K) * (180.0 / K)


def make_pattern_set(K, size, c1, c2):
    if K < 2:
        raise ValueError("need at least two orientations")
    pairs = []
    for theta in orientations(K):
        pairs.append(PatternPair(
            aligned=make_pattern(theta, size, c1, c2),
            orthogonal=make_pattern((theta + 90.0) % 180.0, size, c1, c2),
        ))
    return pairs


def ridge_filter(theta, size, sigma_across, sigma_along):
    """Negated second derivative of a Gaussian across the ridge, zero-mean, unit norm."""
    x, y = centered_grid(size)
    u, v = rotate(x, y, theta)
    s2 = sigma_across ** 2
    f = (1.0 - u ** 2 / s2) * np.exp(-u ** 2 / (2 * s2) - v ** 2 / (2 * sigma_along ** 2))
    f = f - f.mean()
    return f / np.sqrt(np.sum(f ** 2))


def make_ridge_bank(scale_id, K, size=None):
    if scale_id not in SCALE_FILTER_SIZES:
        raise ValueError(f"scale id must be in 1..5, got {scale_id}")
    m = size or SCALE_FILTER_SIZES[scale_id]
    sigma = max(0.5, (m - 1) / 4.0)
    thetas = orientations(K)
    filters = np.stack([ridge_filter(t, m, sigma, 2.0 * sigma) for t in thetas])
    return RidgeBank(scale_id=scale_id, thetas=thetas, filters=filters)


def ridge_energy(image, bank):
    """Per-position sum over the bank of squared valid responses."""
    return sum(correlate_valid(image, f) ** 2 for f in bank.filters)


def _box_sums(a, k):
    """Sum of every ``k x k`` window of ``a`` via an integral image."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    s[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def extract_noise_patches(images, masks, fovs, scale_id, patch_size=64, n_candidates=200,
                          n_keep=100, stride=None, bank=None, exclude=()):
    """Mine vessel-free windows that a ridge detector responds to most strongly.

    A window qualifies when it lies fully inside the FOV and the label mask is
    empty there.  Its score is the summed squared valid response of every
    filter in the bank.  The best ``n_candidates`` are ranked, ``exclude``
    entries ``(image id, row, col)`` are dropped, and the first ``n_keep``
    are returned.  Ties break on (image id, row, col).
    """
    if not images:
        raise ValueError("no images to mine")
    if n_keep > n_candidates:
        raise ValueError(f"n_keep={n_keep} exceeds n_candidates={n_candidates}")
    if fovs is None:
        fovs = [np.ones(np.shape(im)[:2], dtype=bool) for im in images]
    ps = patch_size
    stride = stride or max(1, ps // 2)
    bank = bank or make_ridge_bank(scale_id, 12)
    m = bank.filters.shape[-1]
    if ps < m:
        raise ValueError(f"patch size {ps} smaller than filter size {m}")
    exclude = {tuple(e) for e in exclude}

    cands = []  # (-score, image id, row, col)
    for idx, (im, mk, fov) in enumerate(zip(images, masks, fovs)):
        im = np.asarray(im, dtype=np.float64)
        if im.shape != np.shape(mk) or im.shape != np.shape(fov):
            raise ValueError(f"image {idx}: shape {im.shape} vs mask {np.shape(mk)} / fov {np.shape(fov)}")
        if ps > min(im.shape):
            raise ValueError(f"patch size {ps} exceeds image {idx} shape {im.shape}")
        # zero-mean filters ignore the offset; removing it keeps flat fields exactly zero
        energy = ridge_energy(im - np.median(im), bank)
        k = ps - m + 1
        vessel = _box_sums(np.asarray(mk, dtype=np.float64) > 0, ps)
        outside = _box_sums(~(np.asarray(fov) > 0), ps)
        for r in range(0, im.shape[0] - ps + 1, stride):
            for c in range(0, im.shape[1] - ps + 1, stride):
                if vessel[r, c] == 0 and outside[r, c] == 0:
                    cands.append((-float(energy[r:r + k, c:c + k].sum()), idx, r, c))
    cands.sort()
    top = [c for c in cands[:n_candidates] if (c[1], c[2], c[3]) not in exclude]
    kept = top[:n_keep]
    short = len(kept) < n_keep
    if short:
        log.warning("scale %d: only %d qualifying noise patches (wanted %d)", scale_id, len(kept), n_keep)
    patches = np.stack([np.asarray(images[i], dtype=np.float64)[r:r + ps, c:c + ps]
                        for _, i, r, c in kept]) if kept else np.zeros((0, ps, ps))
    return NoisePatchSet(
        scale_id=scale_id, patch_size=ps, n_candidates=n_candidates, n_keep=n_keep,
        patches=patches, provenance=[(i, r, c) for _, i, r, c in kept],
        scores=np.array([-s for s, *_ in kept]), short=short,
    )


@dataclass
class PriorAssets:
    """Pattern pairs and noise patches for each representation scale, in scale order."""

    scale_ids: list
    patterns: list  # per scale: list[PatternPair]
    noise: list  # per scale: NoisePatchSet

    def aligned(self, i):
        return np.stack([p.aligned.pixels for p in self.patterns[i]])

    def orthogonal(self, i):
        return np.stack([p.orthogonal.pixels for p in self.patterns[i]])

    def noise_patches(self, i):
        return self.noise[i].patches
