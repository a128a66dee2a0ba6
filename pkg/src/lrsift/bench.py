"""Experiment drivers: viewpoint simulation, the patch-similarity study, the
propagation check, the warm-start ablation and the retrieval study."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from lrsift import textures
from lrsift.config import PipelineConfig
from lrsift.features import extract_lowrank_sift, rectify_patch, select_features
from lrsift.geo import localization_correct
from lrsift.imaging import AffineWarp, Keypoint, ProjectiveWarp, harris_corners, image_center, save_png, warp_crop
from lrsift.integralmap import build_integral_map, default_threads, transform_at
from lrsift.lowrank import TiltProblem, solve_tilt
from lrsift.retrieval import DatabaseIndex, EmptyQueryError, build_index, score_query

VARIANTS = ("plain", "lowrank", "lowrank+selection")


# ---------------------------------------------------------------------------
# viewpoint simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WarpSpec:
    tilt_deg: float = 0.0
    rotation_deg: float = 0.0
    scale: float = 1.0
    perspective: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive")
        if not 0.0 <= self.tilt_deg <= 60.0:
            raise ValueError("tilt must lie in [0, 60] degrees")
        if not (math.isfinite(self.rotation_deg) and math.isfinite(self.perspective)):
            raise ValueError("rotation and perspective must be finite")

    def tilt_axis(self):
        """Seeded direction (radians) about which the camera tilts."""
        return float(np.random.default_rng(self.seed).uniform(0.0, np.pi))


def rotation(rad):
    c, s = math.cos(rad), math.sin(rad)
    return np.array([[c, -s], [s, c]])


def tilt_matrix(tilt_deg, axis_rad):
    """Area-preserving foreshortening by ``cos(tilt)`` across ``axis_rad``:
    ``R(a) diag(sqrt(cos t), 1 / sqrt(cos t)) R(-a)``."""
    c = math.cos(math.radians(tilt_deg))
    return rotation(axis_rad) @ np.diag([math.sqrt(c), 1.0 / math.sqrt(c)]) @ rotation(-axis_rad)


def viewpoint_homography(spec, size):
    """Center-relative homography perspective o tilt o rotation o scale.

    ``size`` is ``(w, h)``; the perspective row is scaled by the half
    diagonal so that ``spec.perspective`` is unitless.
    """
    axis = spec.tilt_axis()
    A = tilt_matrix(spec.tilt_deg, axis) @ rotation(math.radians(spec.rotation_deg)) * spec.scale
    H = np.eye(3)
    H[:2, :2] = A
    if spec.perspective:
        half_diag = 0.5 * math.hypot(*size)
        P = np.eye(3)
        P[2, :2] = spec.perspective / half_diag * np.array([math.cos(axis), math.sin(axis)])
        H = P @ H
    return ProjectiveWarp(H)


def simulate_viewpoint(img, spec, return_mask=False):
    """Warp ``img`` about its center under the viewpoint of ``spec``.

    Returns the warped image (same size; pixels without a source take the
    image mean) and the exact homography.  Raises ``ValueError`` when less
    than a quarter of the output sees the source.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    H = viewpoint_homography(spec, (w, h))
    out, mask = warp_crop(img, H, image_center(img), (w, h))
    if mask.mean() < 0.25:
        raise ValueError("viewpoint pushes the image out of frame")
    out = np.where(mask, out, img.mean())
    return (out, H, mask) if return_mask else (out, H)


def source_point(H, center, q):
    """Source pixel seen at output pixel ``q`` of a simulated view."""
    return np.asarray(center) + H.inverse().apply(np.asarray(q, float) - center)[0]


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def ncc(a, b):
    """Zero-mean normalized cross-correlation; 0 when either input is flat."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den < 1e-12:
        return 0.0
    return float(np.clip(a @ b / den, -1.0, 1.0))


def _stats(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "count": int(v.size)}


def _agg_similarity(records):
    before = [r["ncc_before"] for r in records]
    after = [r["ncc_after"] for r in records]
    b, a = _stats(before), _stats(after)
    return {"before": b, "after": a, "improvement": a["mean"] - b["mean"]}


def _agg_propagation(records):
    vals = [r["ncc"] for r in records]
    s = _stats(vals)
    s["fraction_ge_0.9"] = float(np.mean(np.asarray(vals) >= 0.9)) if vals else float("nan")
    s["percentiles"] = {str(p): float(np.percentile(vals, p)) for p in (5, 25, 50, 75)} if vals else {}
    return s


def _agg_ablation(records):
    warm = _stats([r["warm_mean_iterations"] for r in records])
    cold = _stats([r["cold_mean_iterations"] for r in records])
    ratio = warm["mean"] / cold["mean"] if cold["mean"] > 0 else float("nan")
    return {"warm": warm, "cold": cold, "ratio": ratio}


def _agg_retrieval(records):
    out = {}
    for v in dict.fromkeys(r["variant"] for r in records):
        rs = [r for r in records if r["variant"] == v]
        out[v] = {"top1": float(np.mean([r["top1_correct"] for r in rs])),
                  "top3": float(np.mean([r["top3_correct"] for r in rs])),
                  "queries": len(rs),
                  "mean_features": float(np.mean([r["features"] for r in rs]))}
    return out


_AGGREGATORS = {"similarity": _agg_similarity, "propagation": _agg_propagation,
                "ablation": _agg_ablation, "retrieval": _agg_retrieval}


@dataclass
class ExperimentReport:
    name: str
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def recompute(self):
        return _AGGREGATORS[self.name](self.records)

    def to_json(self):
        return json.dumps({"experiment": self.name, "aggregates": self.aggregates,
                           "config": self.config, "records": self.records}, indent=2, sort_keys=True)

    def write(self, out_dir):
        """Write ``<name>.json`` and a flat ``<name>.csv`` of the records."""
        os.makedirs(out_dir, exist_ok=True)
        jpath = os.path.join(out_dir, f"{self.name}.json")
        with open(jpath, "w") as fh:
            fh.write(self.to_json())
        cpath = os.path.join(out_dir, f"{self.name}.csv")
        keys = list(dict.fromkeys(k for r in self.records for k in r))
        with open(cpath, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            wr.writerows(self.records)
        return jpath, cpath


def _report(name, records, cfg, **extra):
    rep = ExperimentReport(name, records, {}, dict(cfg.to_dict(), **extra))
    rep.aggregates = rep.recompute()
    return rep


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def _window_inside(mask, q, size):
    r = size // 2 + 1
    x, y = int(round(q[0])), int(round(q[1]))
    h, w = mask.shape
    if x - r < 0 or y - r < 0 or x + r >= w or y + r >= h:
        return False
    return bool(mask[y - r:y + r + 1, x - r:x + r + 1].all())


def similarity_study(images, specs, patch_count=20, config=None):
    """Patch NCC against the undeformed texture, before and after rectification.

    For every (image, spec) pair the image is warped, the strongest
    ``patch_count`` Harris corners whose windows see the source on both
    sides are kept, and each warped patch is compared with the ground-truth
    patch at the corresponding source point: once as cropped, once
    rectified through the integral map of the warped image.
    """
    cfg = (config or PipelineConfig()).validate()
    if patch_count < 10:
        raise ValueError("patch_count must be at least 10")
    size = cfg.patch_size
    trials = [(i, j) for i in range(len(images)) for j in range(len(specs))]
    inner = cfg.replace(threads=1)

    def run(trial):
        i, j = trial
        src = np.asarray(images[i], dtype=float)
        warped, H, mask = simulate_viewpoint(src, specs[j], return_mask=True)
        c = image_center(src)
        ones = np.ones_like(src, dtype=bool)
        picked = []
        for kp in harris_corners(warped, cfg.harris.__class__(**{**asdict(cfg.harris), "max_points": 10 * patch_count})):
            p = source_point(H, c, kp.xy)
            if _window_inside(mask, kp.xy, size) and _window_inside(ones, p, size):
                picked.append((kp, p))
            if len(picked) == patch_count:
                break
        if len(picked) < patch_count:
            raise ValueError(f"image {i} / spec {j}: only {len(picked)} usable keypoints")
        imap = build_integral_map(warped, inner.block_size, inner.tilt, inner.warm_start, 1)
        recs = []
        for k, (kp, p) in enumerate(picked):
            truth = rectify_patch(src, Keypoint(p[0], p[1]), AffineWarp.identity(), size)
            before = rectify_patch(warped, kp, AffineWarp.identity(), size)
            after = rectify_patch(warped, kp, transform_at(imap, kp.xy), size)
            recs.append({"image": i, "spec": j, "point": k, "x": kp.x, "y": kp.y,
                         "ncc_before": ncc(before, truth), "ncc_after": ncc(after, truth)})
        return recs

    threads = cfg.threads or default_threads()
    records = [r for recs in _map(run, trials, threads) for r in recs]
    return _report("similarity", records, cfg, specs=[asdict(s) for s in specs], patch_count=patch_count)


def propagation_study(images, n_points=100, config=None, seed=0):
    """Integral-map warps against a fresh rectification at each sampled point.

    Points are drawn uniformly (seeded) from the region where a block-sized
    window fits; NCC compares the two rectified patches.
    """
    cfg = (config or PipelineConfig()).validate()
    rng = np.random.default_rng(seed)
    bs, size = cfg.block_size, cfg.patch_size
    per_image = [n_points // len(images) + (k < n_points % len(images)) for k in range(len(images))]
    jobs = []
    for i, img in enumerate(images):
        h, w = np.shape(img)
        lo = bs / 2.0
        for _ in range(per_image[i]):
            jobs.append((i, rng.uniform(lo, w - 1 - lo), rng.uniform(lo, h - 1 - lo)))
    maps = [build_integral_map(img, bs, cfg.tilt, cfg.warm_start, cfg.threads) for img in images]

    def run(job):
        i, x, y = job
        img = np.asarray(images[i], dtype=float)
        kp = Keypoint(x, y)
        w_map = transform_at(maps[i], kp.xy)
        sol = solve_tilt(TiltProblem(img, AffineWarp.identity(), None, cfg.tilt, np.array([x, y]), (bs, bs)))
        a = rectify_patch(img, kp, w_map, size)
        b = rectify_patch(img, kp, sol.warp, size)
        return {"image": i, "x": x, "y": y, "ncc": ncc(a, b), "fresh_converged": bool(sol.converged)}

    records = _map(run, jobs, cfg.threads or default_threads())
    return _report("propagation", records, cfg, n_points=n_points, seed=seed)


def warm_start_ablation(images, config=None):
    """Mean outer iterations per block with and without neighbour warm start."""
    cfg = (config or PipelineConfig()).validate()
    records = []
    for i, img in enumerate(images):
        row = {"image": i}
        for tag, warm in (("warm", True), ("cold", False)):
            imap = build_integral_map(img, cfg.block_size, cfg.tilt, warm, cfg.threads)
            its = [e.outer_iterations for _, _, e in imap.entries()]
            row[f"{tag}_mean_iterations"] = float(np.mean(its))
            row[f"{tag}_nonconverged"] = sum(not e.converged for _, _, e in imap.entries())
        row["blocks"] = imap.n_blocks
        records.append(row)
    return _report("ablation", records, cfg)


def variant_config(cfg, variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return cfg.replace(lowrank=variant != "plain")


def build_variant_indexes(images, geotags, config=None, ids=None, variants=VARIANTS):
    """One index per feature kind needed by ``variants`` (plain and/or lowrank)."""
    cfg = (config or PipelineConfig()).validate()
    ids = ids or [f"img{i:04d}" for i in range(len(images))]
    out = {}
    for kind in dict.fromkeys("plain" if v == "plain" else "lowrank" for v in variants):
        kc = cfg.replace(lowrank=kind == "lowrank")
        sets = [extract_lowrank_sift(img, kc, image_id=ident) for img, ident in zip(images, ids)]
        if cfg.select_database and kind == "lowrank":
            sets = [select_features(s, cfg.rank_min, cfg.rank_max) for s in sets]
        out[kind] = build_index(sets, geotags, cfg.tree_k, cfg.tree_depth, cfg.seed, feature_kind=kind)
    return out


def retrieval_study(index, queries, variants=VARIANTS, config=None):
    """Top-1 / top-3 localization accuracy of each pipeline variant.

    ``index`` is one :class:`DatabaseIndex` used for every variant, or a
    mapping ``{"plain": ..., "lowrank": ...}`` so that each variant queries a
    database built from the same kind of features.
    """
    cfg = (config or PipelineConfig()).validate()
    if len(queries) < 10:
        raise ValueError("retrieval_study needs at least 10 queries")
    for v in variants:
        variant_config(cfg, v)

    def pick(kind):
        if isinstance(index, DatabaseIndex):
            return index
        return index[kind] if kind in index else index["lowrank"]

    def run(qi):
        img, truth = queries[qi]
        cache, recs = {}, []
        for v in variants:
            kind = "plain" if v == "plain" else "lowrank"
            if kind not in cache:
                cache[kind] = extract_lowrank_sift(img, variant_config(cfg, v).replace(threads=1), image_id=f"q{qi}")
            fs = cache[kind]
            if v == "lowrank+selection":
                fs = select_features(fs, cfg.rank_min, cfg.rank_max)
            try:
                matches = score_query(pick(kind), fs)
            except EmptyQueryError:
                matches = []
            hits = [localization_correct(m.geotag, truth, cfg.radius_m) for m in matches[:3]]
            recs.append({"variant": v, "query": qi, "features": len(fs),
                         "top1": matches[0].image_id if matches else "",
                         "score": matches[0].score if matches else float("nan"),
                         "top1_correct": bool(hits[:1] and hits[0]), "top3_correct": any(hits)})
        return recs

    per_query = _map(run, list(range(len(queries))), cfg.threads or default_threads())
    records = [r for v in variants for recs in per_query for r in recs if r["variant"] == v]
    return _report("retrieval", records, cfg, variants=list(variants))


# ---------------------------------------------------------------------------
# bundled corpus and overlays
# ---------------------------------------------------------------------------

def synthetic_textures(n=6, shape=(160, 160), seed=0):
    """Rectified test textures: mostly facades, plus window grids and brick."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        kind = k % 3
        if kind == 0:
            out.append(textures.facade(shape, seed=seed * 1000 + k))
        elif kind == 1:
            sx, sy = int(rng.integers(12, 20)), int(rng.integers(14, 22))
            out.append(textures.window_grid(shape, spacing=(sx, sy), size=(sx // 2 + 1, sy // 2 + 2)))
        else:
            out.append(textures.brick(shape, course=int(rng.integers(7, 11)), length=int(rng.integers(16, 26)),
                                      seed=seed * 1000 + k))
    return out


def random_specs(n, max_tilt=30.0, max_rotation=30.0, seed=0):
    rng = np.random.default_rng(seed)
    return [WarpSpec(float(rng.uniform(0.5 * max_tilt, max_tilt)), float(rng.uniform(-max_rotation, max_rotation)),
                     1.0, 0.0, int(rng.integers(1 << 31))) for _ in range(n)]


def save_overlay(path, img, features, axis_len=12.0):
    """PNG of ``img`` with each feature's rectified frame drawn at its keypoint."""
    rgb = np.repeat(np.clip(np.asarray(img, float), 0, 1)[..., None], 3, axis=2) * 0.8
    h, w = rgb.shape[:2]
    for f in features:
        Li = np.linalg.inv(f.warp.linear)
        for col, color in ((0, (1.0, 0.1, 0.1)), (1, (0.1, 1.0, 0.1))):
            d = Li[:, col] / max(np.linalg.norm(Li[:, col]), 1e-12)
            for t in np.linspace(0, axis_len, int(2 * axis_len)):
                x, y = int(round(f.keypoint.x + t * d[0])), int(round(f.keypoint.y + t * d[1]))
                if 0 <= x < w and 0 <= y < h:
                    rgb[y, x] = color
    save_png(path, rgb)
