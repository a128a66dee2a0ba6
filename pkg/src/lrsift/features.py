"""Low-rank SIFT extraction: Harris keypoints, block-propagated rectification,
SIFT descriptors on the rectified 50x50 patch, and rank-band selection."""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lrsift.config import PipelineConfig
from lrsift.imaging import AffineWarp, Keypoint, harris_corners, warp_crop
from lrsift.integralmap import build_integral_map, default_threads, transform_at
from lrsift.lowrank import TiltParams, numerical_rank, rpca_alm

PATCH_SIZE = 50
DESC_SIGMA = 25.0 / 3.0
CELL = 8.0  # 4 cells of 8 px: the rotated 32 px window stays inside the patch
FEATURE_MAGIC = b"LRSF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHH")
_RECORD = struct.Struct("<8fHf128s")


class PreconditionError(ValueError):
    pass


@dataclass
class Feature:
    keypoint: Keypoint
    warp: AffineWarp
    patch_rank: int
    descriptor: np.ndarray


@dataclass
class FeatureSet:
    image_id: str
    features: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.features)

    def descriptors(self):
        if not self.features:
            return np.zeros((0, 128))
        return np.stack([f.descriptor for f in self.features])

    # -- serialization ---------------------------------------------------

    def to_bytes(self):
        """Binary layout (little endian)::

            magic 'LRSF' | version u16 | id length u16 | id utf-8 |
            count u32 | descriptor scale f32
            count x (x f32, y f32, l00 l01 l10 l11 t0 t1 f32, rank u16,
                     response f32, 128 x u8 descriptor)

        Descriptor entries are stored as ``round(255 * value)``; multiply by
        the scale (1/255) to recover them.
        """
        ident = self.image_id.encode("utf-8")
        out = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(ident)), ident,
               struct.pack("<If", len(self.features), 1.0 / 255.0)]
        for f in self.features:
            q = np.clip(np.round(255.0 * np.asarray(f.descriptor)), 0, 255).astype(np.uint8)
            out.append(_RECORD.pack(f.keypoint.x, f.keypoint.y, *f.warp.entries(),
                                    int(f.patch_rank), f.keypoint.response, q.tobytes()))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw):
        try:
            magic, version, n_id = _HEADER.unpack_from(raw, 0)
        except struct.error:
            raise ValueError("truncated feature file") from None
        if magic != FEATURE_MAGIC:
            raise ValueError("not a feature file")
        if version != FEATURE_VERSION:
            raise ValueError(f"unsupported feature file version {version}")
        pos = _HEADER.size
        ident = raw[pos:pos + n_id].decode("utf-8")
        pos += n_id
        count, scale = struct.unpack_from("<If", raw, pos)
        pos += 8
        if len(raw) - pos != count * _RECORD.size:
            raise ValueError("feature file length does not match its count")
        feats = []
        for _ in range(count):
            x, y, *w, rank, resp, q = _RECORD.unpack_from(raw, pos)
            pos += _RECORD.size
            desc = np.frombuffer(q, dtype=np.uint8).astype(float) * scale
            feats.append(Feature(Keypoint(x, y, resp), AffineWarp.from_entries(w), rank, desc))
        return cls(ident, feats)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_json(self):
        return json.dumps({
            "image_id": self.image_id,
            "diagnostics": self.diagnostics,
            "features": [{
                "x": f.keypoint.x, "y": f.keypoint.y, "response": f.keypoint.response,
                "warp": [float(v) for v in f.warp.entries()], "rank": int(f.patch_rank),
                "descriptor": [round(float(v), 6) for v in f.descriptor],
            } for f in self.features],
        }, indent=1)


def rectify_patch(img, kp, warp, size=PATCH_SIZE, return_mask=False):
    """The ``size`` x ``size`` window around ``kp`` resampled under ``warp``
    (the keypoint maps to the window centre)."""
    patch, mask = warp_crop(img, warp, (kp.x, kp.y), (size, size))
    return (patch, mask) if return_mask else patch


def _orientation(mag, ang, weight):
    hist = np.zeros(36)
    b = ang * 36.0 / (2 * np.pi) - 0.5
    b0 = np.floor(b).astype(int)
    t = b - b0
    w = mag * weight
    np.add.at(hist, b0 % 36, w * (1 - t))
    np.add.at(hist, (b0 + 1) % 36, w * t)
    # circular smoothing, then parabolic peak interpolation
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    k = int(np.argmax(hist))
    a, c = hist[(k - 1) % 36], hist[(k + 1) % 36]
    den = a - 2 * hist[k] + c
    off = 0.5 * (a - c) / den if den < 0 else 0.0
    return ((k + 0.5 + off) * 2 * np.pi / 36.0) % (2 * np.pi)


def sift_descriptor(patch, kp_center=None):
    """128-d SIFT descriptor of ``patch`` around ``kp_center``.

    The reference orientation is the peak of a 36-bin, Gaussian-weighted
    gradient histogram.  A 4x4 grid of 8 px cells, rotated to that
    orientation, accumulates 8 orientation bins with trilinear weights.  The
    vector is normalized, clamped at 0.2 and renormalized.  Returns ``None``
    for a patch without gradient energy.
    """
    P = np.asarray(patch, dtype=float)
    h, w = P.shape
    if h < 32 or w < 32:
        raise ValueError("sift_descriptor needs a patch of at least 32x32")
    cx, cy = ((w - 1) / 2.0, (h - 1) / 2.0) if kp_center is None else (float(kp_center[0]), float(kp_center[1]))
    gy, gx = np.gradient(P)
    mag = np.hypot(gx, gy)
    if mag.max() < 1e-9:
        return None
    ang = np.arctan2(gy, gx) % (2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    r2 = dx * dx + dy * dy
    weight = np.exp(-r2 / (2 * DESC_SIGMA ** 2))
    inside = r2 <= (min(cx, cy, w - 1 - cx, h - 1 - cy)) ** 2
    theta = _orientation(mag[inside], ang[inside], weight[inside])

    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / CELL
    v = (-s * dx + c * dy) / CELL
    bx = u + 2.0 - 0.5
    by = v + 2.0 - 0.5
    bo = ((ang - theta) % (2 * np.pi)) * 8.0 / (2 * np.pi)
    sel = (bx > -1) & (bx < 4) & (by > -1) & (by < 4)
    bx, by, bo = bx[sel], by[sel], bo[sel]
    wm = (mag * weight)[sel]
    x0, y0, o0 = np.floor(bx).astype(int), np.floor(by).astype(int), np.floor(bo).astype(int)
    fx, fy, fo = bx - x0, by - y0, bo - o0
    hist = np.zeros((6, 6, 8))  # padded by one cell on each side
    for ix in (0, 1):
        wx = fx if ix else 1 - fx
        for iy in (0, 1):
            wy = fy if iy else 1 - fy
            for io in (0, 1):
                wo = fo if io else 1 - fo
                np.add.at(hist, (y0 + iy + 1, x0 + ix + 1, (o0 + io) % 8), wm * wx * wy * wo)
    desc = hist[1:5, 1:5].ravel()
    n = np.linalg.norm(desc)
    if n < 1e-12:
        return None
    desc = np.minimum(desc / n, 0.2)
    return desc / np.linalg.norm(desc)


def patch_rank(patch, rel_tol=0.03, inner_tol=1e-4):
    """Numerical rank of the low-rank component of ``patch``."""
    P = np.asarray(patch, dtype=float)
    if np.ptp(P) < 1e-8:
        return 0
    res = rpca_alm(P, params=TiltParams(inner_tol=inner_tol))
    return numerical_rank(res.low_rank, rel_tol)


def _describe(img, kp, warp, cfg):
    patch = rectify_patch(img, kp, warp, cfg.patch_size)
    desc = sift_descriptor(patch)
    if desc is None:
        return None
    rank = patch_rank(patch, cfg.rank_rel_tol, cfg.rank_inner_tol)
    return Feature(kp, warp, rank, desc)


def extract_lowrank_sift(img, config=None, image_id="", keypoints=None, imap=None):
    """Low-rank SIFT features of ``img``.

    With ``config.lowrank`` false every patch keeps the identity warp, which
    is the plain Harris + SIFT baseline.
    """
    cfg = (config or PipelineConfig()).validate()
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    if cfg.lowrank and (w < 2 * cfg.block_size or h < 2 * cfg.block_size):
        raise PreconditionError(f"image {w}x{h} is smaller than 2x2 blocks of {cfg.block_size}px")
    if keypoints is None:
        keypoints = harris_corners(img, cfg.harris)
    diagnostics = {"keypoints": len(keypoints), "degenerate": 0, "blocks": 0,
                   "nonconverged_blocks": 0, "solve_calls": 0}
    if cfg.lowrank:
        if imap is None:
            imap = build_integral_map(img, cfg.block_size, cfg.tilt, cfg.warm_start, cfg.threads)
            diagnostics["solve_calls"] = imap.solve_calls
        diagnostics["blocks"] = imap.n_blocks
        diagnostics["nonconverged_blocks"] = sum(not e.converged for _, _, e in imap.entries())
        warps = [transform_at(imap, (kp.x, kp.y)) for kp in keypoints]
    else:
        warps = [AffineWarp.identity()] * len(keypoints)
    threads = cfg.threads or default_threads()
    jobs = list(zip(keypoints, warps))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(lambda a: _describe(img, a[0], a[1], cfg), jobs))
    else:
        feats = [_describe(img, kp, wp, cfg) for kp, wp in jobs]
    kept = [f for f in feats if f is not None]
    diagnostics["degenerate"] = len(feats) - len(kept)
    return FeatureSet(image_id, kept, diagnostics)


def select_features(fs, rank_min=2, rank_max=5):
    """Keep features whose patch rank lies in ``[rank_min, rank_max]``."""
    if rank_min > rank_max:
        raise ValueError("rank_min must not exceed rank_max")
    kept = [f for f in fs.features if rank_min <= f.patch_rank <= rank_max]
    diag = dict(fs.diagnostics, selected=len(kept))
    return FeatureSet(fs.image_id, kept, diag)
