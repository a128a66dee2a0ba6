"""Local geotagged image corpus: manifest parsing and database ingestion."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from lrsift.config import PipelineConfig
from lrsift.features import extract_lowrank_sift, select_features
from lrsift.geo import GeoTag, haversine_m, localization_correct
from lrsift.imaging import ImageError, load_image
from lrsift.integralmap import default_threads
from lrsift.retrieval import build_index

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

__all__ = ["GeoTag", "ManifestEntry", "ManifestError", "load_manifest", "ingest",
           "localization_correct", "haversine_m"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    geotag: GeoTag
    label: str = ""

    @property
    def image_id(self):
        return os.path.splitext(os.path.basename(self.path))[0]


def _entry(rec, base, where):
    if not isinstance(rec, dict) or "path" not in rec:
        raise ManifestError(f"{where}: record needs a 'path'")
    try:
        tag = GeoTag(float(rec["latitude"]), float(rec["longitude"]), str(rec.get("source_id", "")))
    except KeyError as exc:
        raise ManifestError(f"{where} ({rec['path']}): missing {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{where} ({rec['path']}): {exc}") from None
    path = rec["path"]
    if not os.path.isabs(path):
        path = os.path.normpath(os.path.join(base, path))
    return ManifestEntry(path, tag, str(rec.get("label", "") or ""))


def load_manifest(path):
    """Read a manifest (JSON array / ``{"version", "images"}`` object, or CSV
    with columns path, latitude, longitude[, source_id, label]).

    Relative image paths are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="") as fh:
        text = fh.read()
    if path.lower().endswith(".csv"):
        records = list(csv.DictReader(text.splitlines()))
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        if isinstance(data, dict):
            if data.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
                raise ManifestError(f"{path}: unsupported manifest version {data.get('version')}")
            records = data.get("images")
        else:
            records = data
        if not isinstance(records, list):
            raise ManifestError(f"{path}: expected an array of image records")
    entries = [_entry(rec, base, f"entry {i}") for i, rec in enumerate(records)]
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    seen = set()
    for e in entries:
        if e.path in seen:
            raise ManifestError(f"duplicate path {e.path}")
        seen.add(e.path)
    ids = [e.image_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError("image ids (file stems) must be unique")
    return entries


def _extract(entry, cfg):
    try:
        img = load_image(entry.path)
    except ImageError as exc:
        return entry, None, str(exc)
    try:
        fs = extract_lowrank_sift(img, cfg, image_id=entry.image_id)
    except ValueError as exc:
        return entry, None, str(exc)
    if cfg.select_database:
        fs = select_features(fs, cfg.rank_min, cfg.rank_max)
    return entry, fs, None


def ingest(manifest_path, config=None, index_path=None, report_path=None):
    """Extract features for every manifest image and build the index.

    Unreadable images are skipped and listed in the report.  Returns
    ``(index, report)``; the index and report are also written when paths
    are given.
    """
    cfg = (config or PipelineConfig()).validate()
    entries = load_manifest(manifest_path)
    if len(entries) < 2:
        raise ManifestError("a database needs at least two images")
    inner = cfg.replace(threads=1)
    threads = cfg.threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda e: _extract(e, inner), entries))
    else:
        results = [_extract(e, inner) for e in entries]

    report = {"manifest": os.path.abspath(manifest_path), "images": [], "skipped": [],
              "total_features": 0, "total_solve_calls": 0, "total_blocks": 0}
    kept_sets, tags, labels = [], [], []
    for entry, fs, err in results:
        if fs is None:
            log.warning("skipping %s: %s", entry.path, err)
            report["skipped"].append({"path": entry.path, "error": err})
            continue
        d = fs.diagnostics
        report["images"].append({"image_id": fs.image_id, "features": len(fs), "keypoints": d["keypoints"],
                                 "dropped_degenerate": d["degenerate"], "blocks": d["blocks"],
                                 "nonconverged_blocks": d["nonconverged_blocks"], "solve_calls": d["solve_calls"]})
        report["total_features"] += len(fs)
        report["total_solve_calls"] += d["solve_calls"]
        report["total_blocks"] += d["blocks"]
        kept_sets.append(fs)
        tags.append(entry.geotag)
        labels.append(entry.label)
    if len(kept_sets) < 1 or report["total_features"] == 0:
        raise ManifestError("no usable images in manifest")
    index = build_index(kept_sets, tags, cfg.tree_k, cfg.tree_depth, cfg.seed, labels,
                        feature_kind="lowrank" if cfg.lowrank else "plain")
    report["indexed"] = len(index)
    report["tree_nodes"] = index.tree.n_nodes
    if index_path:
        index.save(index_path)
    if report_path:
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return index, report
