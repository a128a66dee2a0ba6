"""Raster I/O, warps with bilinear resampling, and Harris corner detection.

Images are plain 2-D ``float64`` numpy arrays (rows x cols) with values in
[0, 1].  Pixel coordinates are ``(x, y)`` = (column, row).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
PATCH_MARGIN = 25


class ImageError(Exception):
    """Base class for raster input problems."""


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


class SingularWarpError(ValueError):
    pass


# ---------------------------------------------------------------------------
# warps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineWarp:
    """Affine map ``q = L @ p + t`` acting on coordinates relative to a window center.

    ``p`` is an offset from the center in the source image, ``q`` is the
    offset from the center of the output (rectified) window.
    """

    linear: np.ndarray = field(default_factory=lambda: np.eye(2))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        L = np.array(self.linear, dtype=float).reshape(2, 2)
        t = np.array(self.translation, dtype=float).reshape(2)
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(t))):
            raise ValueError("warp entries must be finite")
        object.__setattr__(self, "linear", L)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(2), np.zeros(2))

    @property
    def det(self):
        return float(np.linalg.det(self.linear))

    def matrix(self):
        m = np.eye(3)
        m[:2, :2] = self.linear
        m[:2, 2] = self.translation
        return m

    def inverse(self):
        if abs(self.det) < 1e-12:
            raise SingularWarpError("affine warp is singular")
        Li = np.linalg.inv(self.linear)
        return AffineWarp(Li, -Li @ self.translation)

    def __matmul__(self, other):
        """Composition ``self o other`` (apply ``other`` first)."""
        return AffineWarp(self.linear @ other.linear, self.linear @ other.translation + self.translation)

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.linear.T + self.translation

    def entries(self):
        """The six parameters ``(l00, l01, l10, l11, t0, t1)``."""
        return np.concatenate([self.linear.ravel(), self.translation])

    @classmethod
    def from_entries(cls, e):
        e = np.asarray(e, dtype=float)
        return cls(e[:4].reshape(2, 2), e[4:6])


@dataclass(frozen=True)
class ProjectiveWarp:
    """Homography acting on homogeneous center-relative coordinates, ``H[2, 2] == 1``."""

    H: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        H = np.array(self.H, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(H)) or abs(H[2, 2]) < 1e-15:
            raise ValueError("homography must be finite with nonzero H[2,2]")
        H = H / H[2, 2]
        if abs(np.linalg.det(H)) < 1e-12:
            raise SingularWarpError("homography is singular")
        object.__setattr__(self, "H", H)

    def inverse(self):
        return ProjectiveWarp(np.linalg.inv(self.H))

    def __matmul__(self, other):
        return ProjectiveWarp(self.H @ _as_matrix(other))

    def apply(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ph = np.c_[pts, np.ones(len(pts))] @ self.H.T
        return ph[:, :2] / ph[:, 2:3]


def _as_matrix(warp):
    if isinstance(warp, AffineWarp):
        return warp.matrix()
    return warp.H


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------

def _read_pgm(raw, path):
    magic = raw[:2]
    tokens = []
    pos = 2
    # header: width, height, maxval with '#' comments
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise CorruptImageError(f"{path}: truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise CorruptImageError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise CorruptImageError(f"{path}: invalid PGM dimensions or maxval")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        n = w * h * dtype.itemsize
        if len(raw) - pos < n:
            raise CorruptImageError(f"{path}: truncated PGM pixel data")
        data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    else:
        try:
            data = np.array(raw[pos:].split(), dtype=np.int64)
        except ValueError:
            raise CorruptImageError(f"{path}: non-numeric PGM pixel data") from None
        if data.size < w * h:
            raise CorruptImageError(f"{path}: truncated PGM pixel data")
        data = data[: w * h]
    if np.any(data > maxval):
        raise CorruptImageError(f"{path}: pixel exceeds maxval")
    return data.reshape(h, w).astype(float) / maxval


def _read_png(path):
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=float)
                return np.clip(arr / 65535.0, 0.0, 1.0)
            if im.mode != "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=float) / 255.0
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptImageError(f"{path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr @ LUMA
    return arr


def load_image(path):
    """Read a PGM (P2/P5) or PNG file as a grayscale image in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageNotFoundError(f"no such image: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] in (b"P2", b"P5"):
        img = _read_pgm(raw, path)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        img = _read_png(path)
    else:
        raise UnsupportedFormatError(f"{path}: not a PGM or PNG file")
    return np.clip(img, 0.0, 1.0)


def save_pgm(path, img, maxval=255):
    img = np.clip(np.asarray(img, dtype=float), 0, 1)
    h, w = img.shape
    q = np.round(img * maxval).astype(">u2" if maxval > 255 else "u1")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def save_png(path, img):
    from PIL import Image as PILImage

    arr = np.asarray(img, dtype=float)
    q = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(q).save(path)


def check_image(img):
    img = np.asarray(img, dtype=float)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be a non-empty 2-D array")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return img


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def bilinear(img, xs, ys, grad=False):
    """Bilinear samples of ``img`` at ``(xs, ys)`` with border replication.

    Returns ``(values, valid)`` or ``(values, valid, dx, dy)`` where ``dx, dy``
    are the exact partial derivatives of the interpolant (the mean of the
    one-sided slopes on grid lines, zero where the sample is clamped).
    """
    h, w = img.shape
    eps = 1e-9
    valid = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = xc - x0
    ty = yc - y0
    i00 = img[y0, x0]
    i01 = img[y0, x1]
    i10 = img[y1, x0]
    i11 = img[y1, x1]
    top = i00 + tx * (i01 - i00)
    bot = i10 + tx * (i11 - i10)
    vals = top + ty * (bot - top)
    if not grad:
        return vals, valid
    dx = (1 - ty) * (i01 - i00) + ty * (i11 - i10)
    dy = bot - top
    # on a grid line average with the slope of the preceding cell
    on_x = (tx == 0) & (x0 >= 1)
    if np.any(on_x):
        xm = x0[on_x] - 1
        ya, yb, t = y0[on_x], y1[on_x], ty[on_x]
        left = (1 - t) * (img[ya, x0[on_x]] - img[ya, xm]) + t * (img[yb, x0[on_x]] - img[yb, xm])
        dx[on_x] = 0.5 * (dx[on_x] + left)
    on_y = (ty == 0) & (y0 >= 1)
    if np.any(on_y):
        ym = y0[on_y] - 1
        xa, xb, t = x0[on_y], x1[on_y], tx[on_y]
        up = (1 - t) * (img[y0[on_y], xa] - img[ym, xa]) + t * (img[y0[on_y], xb] - img[ym, xb])
        dy[on_y] = 0.5 * (dy[on_y] + up)
    dx = np.where((xs < 0) | (xs > w - 1), 0.0, dx)
    dy = np.where((ys < 0) | (ys > h - 1), 0.0, dy)
    return vals, valid, dx, dy


def window_offsets(out_size):
    """Center-relative output coordinates ``(qx, qy)`` of a ``(w, h)`` window."""
    w, h = out_size
    qx, qy = np.meshgrid(np.arange(w) - (w - 1) / 2.0, np.arange(h) - (h - 1) / 2.0)
    return qx, qy


def source_coords(warp, center, out_size):
    """Source-image coordinates sampled by each output pixel of a warped window."""
    qx, qy = window_offsets(out_size)
    cx, cy = float(center[0]), float(center[1])
    if isinstance(warp, AffineWarp):
        if abs(warp.det) < 1e-12:
            raise SingularWarpError("affine warp is singular")
        inv = warp.inverse()
        (a, b), (c, d) = inv.linear
        tx, ty = inv.translation
        return cx + a * qx + b * qy + tx, cy + c * qx + d * qy + ty
    Hi = np.linalg.inv(warp.H)
    den = Hi[2, 0] * qx + Hi[2, 1] * qy + Hi[2, 2]
    if np.any(np.abs(den) < 1e-12):
        raise SingularWarpError("homography maps window points to infinity")
    px = (Hi[0, 0] * qx + Hi[0, 1] * qy + Hi[0, 2]) / den
    py = (Hi[1, 0] * qx + Hi[1, 1] * qy + Hi[1, 2]) / den
    return cx + px, cy + py


def warp_crop(img, warp, center, out_size):
    """Resample the window of ``img`` around ``center`` under ``warp``.

    Output pixel ``(u, v)`` reads ``img`` at ``center + warp^-1(q)`` where
    ``q`` is the pixel's offset from the output window center.  Returns the
    resampled window and a boolean mask of samples that fell inside ``img``
    (outside samples take the nearest border value).
    """
    w, h = int(out_size[0]), int(out_size[1])
    if w < 2 or h < 2:
        raise ValueError("out_size must be at least 2x2")
    img = np.asarray(img, dtype=float)
    xs, ys = source_coords(warp, center, (w, h))
    return bilinear(img, xs, ys)


def image_center(img):
    h, w = np.shape(img)
    return np.array([(w - 1) / 2.0, (h - 1) / 2.0])


# ---------------------------------------------------------------------------
# Harris
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float = 0.0

    @property
    def xy(self):
        return np.array([self.x, self.y])


@dataclass
class HarrisParams:
    k: float = 0.04
    sigma: float = 1.5
    nms_radius: int = 5
    rel_threshold: float = 0.01
    max_points: int = 500
    border: int = PATCH_MARGIN

    def validate(self):
        if not 0 < self.k < 0.25:
            raise ValueError("harris k must lie in (0, 0.25)")
        if self.sigma <= 0 or self.nms_radius < 1 or self.max_points < 1 or self.border < 0:
            raise ValueError("invalid Harris parameters")
        if not 0 < self.rel_threshold < 1:
            raise ValueError("rel_threshold must lie in (0, 1)")


def harris_response(img, k=0.04, sigma=1.5):
    img = np.asarray(img, dtype=float)
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def harris_corners(img, params=None):
    """Harris corners sorted by descending response.

    Local maxima over a disk of ``nms_radius`` whose response exceeds
    ``rel_threshold`` times the image maximum; positions are refined by a
    1-D parabola fit along each axis and points within ``border`` pixels of
    the image edge are discarded.
    """
    params = params or HarrisParams()
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    if h < 16 or w < 16:
        raise ValueError("harris_corners needs an image of at least 16x16")
    R = harris_response(img, params.k, params.sigma)
    rmax = R.max()
    if not rmax > 0:
        return []
    peak = ndimage.maximum_filter(R, footprint=_disk(params.nms_radius), mode="constant", cval=-np.inf)
    mask = (R == peak) & (R > params.rel_threshold * rmax)
    mask[[0, -1], :] = False
    mask[:, [0, -1]] = False
    ys, xs = np.nonzero(mask)
    resp = R[ys, xs]
    # plateaus: keep one point per equal-valued cluster, first in raster order
    order = np.lexsort((xs, ys, -resp))
    kept = []
    taken = np.zeros_like(mask)
    r = params.nms_radius
    lo = params.border
    for idx in order:
        x, y = xs[idx], ys[idx]
        if taken[y, x]:
            continue
        y0, y1 = max(y - r, 0), min(y + r + 1, h)
        x0, x1 = max(x - r, 0), min(x + r + 1, w)
        taken[y0:y1, x0:x1] |= _disk(r)[y0 - y + r:y1 - y + r, x0 - x + r:x1 - x + r]
        dx = _parabola(R[y, x - 1], R[y, x], R[y, x + 1])
        dy = _parabola(R[y - 1, x], R[y, x], R[y + 1, x])
        fx, fy = x + dx, y + dy
        if fx < lo or fy < lo or fx > w - 1 - lo or fy > h - 1 - lo:
            continue
        kept.append(Keypoint(float(fx), float(fy), float(R[y, x])))
        if len(kept) >= params.max_points:
            break
    return kept


def _parabola(a, b, c):
    den = a - 2 * b + c
    if den >= 0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))
