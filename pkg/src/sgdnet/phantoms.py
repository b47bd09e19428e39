"""Seeded synthetic test images: random ellipses and Gaussian blobs on a
zero background, intensities in [0.2, 1.0], final image clipped to [0, 1].
"""

import numpy as np

__all__ = ["make_phantom", "make_phantoms"]


def _quadratic_form(size, rng):
    # Random center, axes and rotation for one shape, returned as the
    # normalized elliptical radius q(x, y) on the pixel grid (q <= 1 is the
    # interior).
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    ay, ax = rng.uniform(0.08 * size, 0.30 * size, size=2)
    phi = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    u = np.cos(phi) * dx + np.sin(phi) * dy
    v = -np.sin(phi) * dx + np.cos(phi) * dy
    return (u / ax) ** 2 + (v / ay) ** 2


def make_phantom(size, seed, kind="mixed"):
    """One (size, size) image with 3 to 8 shapes. kind selects hard-edged
    ellipses, smooth Gaussian blobs, or a random mix of both."""
    if size < 4:
        raise ValueError("size must be >= 4")
    if kind not in ("ellipses", "blobs", "mixed"):
        raise ValueError(f"unknown phantom kind: {kind}")
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size), dtype=np.float64)
    for _ in range(int(rng.integers(3, 9))):
        q = _quadratic_form(size, rng)
        intensity = rng.uniform(0.2, 1.0)
        if kind == "ellipses" or (kind == "mixed" and rng.random() < 0.5):
            img += intensity * (q <= 1.0)
        else:
            img += intensity * np.exp(-0.5 * q * 4.0)
    return np.clip(img, 0.0, 1.0)


def make_phantoms(size, count, seed, kind="mixed"):
    """count independent phantoms; sample j depends only on (seed, j)."""
    return [make_phantom(size, np.random.SeedSequence([int(seed), int(j)]),
                         kind)
            for j in range(int(count))]
