"""Synthetic test textures: checkerboards, stripes, window grids and facades.

All generators return images in [0, 1] and are deterministic in their seed.
Edges are anti-aliased (smooth step profiles) so warps and finite
differences behave.
"""

import numpy as np
from scipy import ndimage

from lrsift.imaging import AffineWarp, image_center, warp_crop


def _square_wave(t, period, sharpness=4.0):
    return np.tanh(sharpness * np.sin(2 * np.pi * t / period))


def checkerboard(shape, cell=10, sharpness=4.0, offset=(0.0, 0.0)):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    period = 2.0 * cell
    sx = _square_wave(xx + 0.5 - offset[0], period, sharpness)
    sy = _square_wave(yy + 0.5 - offset[1], period, sharpness)
    return 0.5 + 0.5 * sx * sy


def hard_checkerboard(shape, cell=10):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return (((xx // cell) + (yy // cell)) % 2).astype(float)


def stripes(shape, period=6, vertical=True, sharpness=3.0):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    t = xx if vertical else yy
    return 0.5 + 0.5 * _square_wave(t + 0.25, period, sharpness)


def window_grid(shape, spacing=(16, 20), size=(9, 12), wall=0.8, glass=0.15, blur=0.8, origin=(4, 4)):
    """Dark rectangular windows on a bright wall."""
    h, w = shape
    img = np.full(shape, wall)
    sx, sy = spacing
    wx, wy = size
    for y in range(origin[1], h, sy):
        for x in range(origin[0], w, sx):
            img[y:y + wy, x:x + wx] = glass
    return np.clip(ndimage.gaussian_filter(img, blur, mode="nearest"), 0, 1)


def brick(shape, course=8, length=20, mortar=2, blur=0.7, seed=0):
    rng = np.random.default_rng(seed)
    h, w = shape
    img = np.empty(shape)
    img[:] = 0.85
    for row, y in enumerate(range(0, h, course)):
        shift = (length // 2) * (row % 2)
        for x in range(-shift, w, length):
            tone = 0.35 + 0.15 * rng.random()
            img[y + mortar:y + course, max(x + mortar, 0):max(x + length, 0)] = tone
    return np.clip(ndimage.gaussian_filter(img, blur, mode="nearest"), 0, 1)


def noise(shape, seed=0, blur=0.0):
    rng = np.random.default_rng(seed)
    img = rng.random(shape)
    if blur > 0:
        img = ndimage.gaussian_filter(img, blur)
        img = (img - img.min()) / max(np.ptp(img), 1e-12)
    return img


def facade(shape=(160, 160), seed=0):
    """A building front: floors of windows with per-facade spacing, sizes,
    shading and ornaments, so that different seeds give distinguishable
    images while every facade stays rectilinear (low-rank when rectified)."""
    rng = np.random.default_rng(seed)
    h, w = shape
    wall = 0.65 + 0.25 * rng.random()
    img = np.full(shape, wall)
    floor_h = int(rng.integers(16, 26))
    col_w = int(rng.integers(14, 24))
    win_w = int(rng.integers(5, col_w - 5))
    win_h = int(rng.integers(7, floor_h - 4))
    ox = int(rng.integers(0, col_w))
    oy = int(rng.integers(0, floor_h))
    cross = rng.random() < 0.5
    for fi, y in enumerate(range(oy - floor_h, h, floor_h)):
        # horizontal cornice per floor
        if rng.random() < 0.5:
            img[max(y, 0):max(y + 2, 0)] = wall - 0.25
        for ci, x in enumerate(range(ox - col_w, w, col_w)):
            tone = 0.05 + 0.3 * rng.random()
            ys, xs = slice(max(y + 3, 0), max(y + 3 + win_h, 0)), slice(max(x, 0), max(x + win_w, 0))
            img[ys, xs] = tone
            if cross and win_w > 6 and 0 <= x + win_w // 2 < w:
                img[ys, x + win_w // 2] = wall
            if rng.random() < 0.25:
                # balcony / sign block below the window
                img[max(y + 3 + win_h, 0):max(y + 5 + win_h, 0), max(x - 2, 0):max(x + win_w + 2, 0)] = 0.95 - wall / 2
    return np.clip(ndimage.gaussian_filter(img, 0.8, mode="nearest"), 0, 1)


def sky_border(img, rows=40, level=0.9, gradient=0.05):
    """Replace the top ``rows`` with a smooth, featureless sky."""
    out = np.array(img, dtype=float)
    rows = min(rows, out.shape[0])
    ramp = level - gradient * np.linspace(0, 1, rows)
    out[:rows] = ramp[:, None]
    return out


def clutter(img, region, seed=0, blur=1.0):
    """Fill ``region`` (y0, y1, x0, x1) with blurred noise, a stand-in for foliage."""
    out = np.array(img, dtype=float)
    y0, y1, x0, x1 = region
    out[y0:y1, x0:x1] = noise((y1 - y0, x1 - x0), seed=seed, blur=blur)
    return out


def affine_deform(img, linear, out_shape=None):
    """Apply a linear deformation about the image center: ``out(c + L p) = img(c + p)``."""
    out_shape = out_shape or np.shape(img)
    return warp_crop(img, AffineWarp(linear, np.zeros(2)), image_center(img), (out_shape[1], out_shape[0]))[0]


def shear(s, axis=0):
    return np.array([[1.0, s], [0.0, 1.0]]) if axis == 0 else np.array([[1.0, 0.0], [s, 1.0]])
