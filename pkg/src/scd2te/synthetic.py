"""Seeded synthetic data: planted-filter images and a nuclei-like segmentation corpus."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.signal import fftconvolve


def planted_filters(side: int = 7, width: float = 1.6) -> np.ndarray:
    """Four unit-norm filters ``(side, side, 4)``: blob, two edges and a saddle."""
    r = side // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    env = np.exp(-(xx ** 2 + yy ** 2) / (2 * width ** 2))
    fs = [env, env * xx, env * yy, env * (xx ** 2 - yy ** 2) / 4]
    return np.stack([f / np.linalg.norm(f) for f in fs], axis=2)


def planted_images(seed: int, count: int = 8, size: int = 64, density: float = 0.002,
                   side: int = 7):
    """Images that are sums of the planted filters placed at sparse random spikes.

    Returns ``(images, filters)``; images are not confined to [0, 1].
    """
    rng = np.random.default_rng(seed)
    filters = planted_filters(side)
    images = []
    for _ in range(count):
        x = np.zeros((size, size))
        for k in range(filters.shape[2]):
            on = rng.random((size, size)) < density
            amp = rng.uniform(0.5, 1.5, (size, size)) * rng.choice([-1.0, 1.0], (size, size))
            x += fftconvolve(on * amp, filters[:, :, k], mode="same")
        images.append(x)
    return images, filters


def _ellipse(shape, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[:shape[0], :shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / ax
    v = (-s * dx + c * dy) / ay
    return np.sqrt(u * u + v * v)


def nuclei_image(rng: np.random.Generator, size: int = 200, nuclei: tuple = (14, 22),
                 clutter: tuple = (25, 40), noise: float = 0.035):
    """One grey-level tissue-like image with its ground-truth nucleus mask.

    Nuclei are dark textured ellipses whose chromatin collects at the rim
    (pale centre, dark border).  Clutter mimics the failure cases of a
    purely local detector: small dark specks and thin dark fibres of
    nucleus-like intensity, plus slowly varying stain.
    """
    shape = (size, size)
    stain = gaussian_filter(rng.standard_normal(shape), 12)
    stain *= 0.06 / max(np.abs(stain).max(), 1e-12)
    fine = gaussian_filter(rng.standard_normal(shape), 1.5)
    fine *= 0.04 / max(np.abs(fine).max(), 1e-12)
    x = 0.78 + stain + fine
    mask = np.zeros(shape, dtype=np.uint8)

    placed = []
    target = int(rng.integers(nuclei[0], nuclei[1] + 1))
    for _ in range(target * 20):
        if len(placed) == target:
            break
        ay, ax = rng.uniform(5.0, 10.0), rng.uniform(5.0, 10.0)
        cy, cx = rng.uniform(6, size - 6, 2)
        if any(np.hypot(cy - py, cx - px) < max(ay, ax) + pr + 2 for py, px, pr in placed):
            continue
        placed.append((cy, cx, max(ay, ax)))
        rho = _ellipse(shape, cy, cx, ay, ax, rng.uniform(0, np.pi))
        inside = rho <= 1.0
        depth = rng.uniform(0.35, 0.5)
        profile = np.where(inside, 0.65 + 0.35 * np.clip(rho, 0, 1) ** 3, 0.0)
        x -= depth * profile
        mask |= inside

    chromatin = gaussian_filter(rng.standard_normal(shape), 1.0)
    x += 0.05 * chromatin / max(np.abs(chromatin).max(), 1e-12) * mask

    for _ in range(int(rng.integers(clutter[0], clutter[1] + 1))):
        cy, cx = rng.uniform(0, size, 2)
        if rng.random() < 0.6:
            rad = rng.uniform(1.0, 2.5)
            rho = _ellipse(shape, cy, cx, rad, rad, 0.0)
            x -= rng.uniform(0.3, 0.5) * np.clip(1.0 - rho, 0, 1) ** 0.5 * (mask == 0)
        else:
            length, theta = rng.uniform(15, 40), rng.uniform(0, np.pi)
            rho = _ellipse(shape, cy, cx, 0.9, length, theta)
            x -= rng.uniform(0.2, 0.35) * np.clip(1.0 - rho, 0, 1) * (mask == 0)

    x = gaussian_filter(x, 0.7) + noise * rng.standard_normal(shape)
    return np.clip(x, 0.0, 1.0), mask


def nuclei_corpus(seed: int = 0, train: int = 8, test: int = 4, size: int = 200):
    """``(train_pairs, test_pairs)`` of ``(image, mask)`` from one seeded stream."""
    rng = np.random.default_rng(seed)
    pairs = [nuclei_image(rng, size) for _ in range(train + test)]
    return pairs[:train], pairs[train:]
