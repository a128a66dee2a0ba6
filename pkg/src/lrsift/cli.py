"""Command-line entry point: extract, build-db, query, bench, print-config."""

from __future__ import annotations

import argparse
import enum
import json
import logging
import os
import sys

import numpy as np

from lrsift import bench
from lrsift.config import ConfigError, PipelineConfig
from lrsift.corpus import ManifestError, ingest
from lrsift.features import PreconditionError, extract_lowrank_sift, select_features
from lrsift.imaging import ImageError, SingularWarpError, load_image
from lrsift.retrieval import DatabaseIndex, EmptyQueryError, score_query

log = logging.getLogger("lrsift")


class ExitCode(enum.IntEnum):
    OK = 0
    USAGE = 2
    IO = 3
    VALIDATION = 4
    SOLVER = 5
    EMPTY_QUERY = 6


def _load_config(path):
    return PipelineConfig.load(path)


def _write_atomic(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def cmd_extract(image_path, config_path, output_path):
    cfg = _load_config(config_path)
    img = load_image(image_path)
    ident = os.path.splitext(os.path.basename(image_path))[0]
    fs = extract_lowrank_sift(img, cfg, image_id=ident)
    _write_atomic(output_path, fs.to_bytes())
    log.info("%s: %d features", ident, len(fs))
    return ExitCode.OK


def cmd_build_db(manifest_path, config_path, index_path, report_path=None):
    cfg = _load_config(config_path)
    report_path = report_path or os.path.splitext(index_path)[0] + ".report.json"
    index, report = ingest(manifest_path, cfg)
    _write_atomic(index_path, index.to_bytes())
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for s in report["skipped"]:
        log.warning("skipped %s: %s", s["path"], s["error"])
    return ExitCode.OK


def cmd_query(index_path, image_path, config_path, top_n=5, out=None):
    out = out or sys.stdout
    if top_n < 1:
        raise ConfigError("top_n must be positive")
    cfg = _load_config(config_path)
    index = DatabaseIndex.load(index_path)
    img = load_image(image_path)
    fs = extract_lowrank_sift(img, cfg.replace(lowrank=index.feature_kind != "plain"), image_id="query")
    if cfg.select_query and index.feature_kind != "plain":
        fs = select_features(fs, cfg.rank_min, cfg.rank_max)
    try:
        matches = score_query(index, fs)
    except EmptyQueryError:
        out.write("[]\n")
        return ExitCode.EMPTY_QUERY
    for m in matches[:top_n]:
        out.write(json.dumps({"image_id": m.image_id, "score": round(m.score, 9),
                              "lat": m.geotag.latitude, "lon": m.geotag.longitude}) + "\n")
    return ExitCode.OK


EXPERIMENTS = ("similarity", "retrieval", "propagation", "ablation")


def cmd_bench(experiment, config_path, output_dir, index_path=None, queries_path=None, n=None):
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    cfg = _load_config(config_path)
    if experiment == "retrieval" and not index_path:
        raise ConfigError("the retrieval experiment needs --index")
    if experiment == "similarity":
        imgs = bench.synthetic_textures(n or 6, seed=cfg.seed)
        report = bench.similarity_study(imgs, bench.random_specs(2, seed=cfg.seed), 20, cfg)
    elif experiment == "propagation":
        imgs = [bench.simulate_viewpoint(t, bench.WarpSpec(20.0, 10.0, 1.0, 0.1, cfg.seed + k))[0]
                for k, t in enumerate(bench.synthetic_textures(n or 5, (200, 200), seed=cfg.seed))]
        report = bench.propagation_study(imgs, 100, cfg, seed=cfg.seed)
    elif experiment == "ablation":
        imgs = [bench.simulate_viewpoint(t, bench.WarpSpec(20.0, 10.0, 1.0, 0.1, cfg.seed + k))[0]
                for k, t in enumerate(bench.synthetic_textures(n or 5, (200, 200), seed=cfg.seed))]
        report = bench.warm_start_ablation(imgs, cfg)
    else:
        index = DatabaseIndex.load(index_path)
        if not queries_path:
            raise ConfigError("the retrieval experiment needs --queries (a manifest of query images)")
        from lrsift.corpus import load_manifest
        queries = [(load_image(e.path), e.geotag) for e in load_manifest(queries_path)]
        variants = ("plain",) if index.feature_kind == "plain" else ("lowrank", "lowrank+selection")
        report = bench.retrieval_study(index, queries, variants, cfg)
    jpath, _ = report.write(output_dir)
    print(json.dumps(report.aggregates, sort_keys=True))
    log.info("wrote %s", jpath)
    return ExitCode.OK


def cmd_print_config(config_path=None, out=None):
    (out or sys.stdout).write(_load_config(config_path).to_json() + "\n")
    return ExitCode.OK


def build_parser():
    p = argparse.ArgumentParser(prog="lrsift", description="Low-rank SIFT extraction and place recognition.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="extract features from one image")
    e.add_argument("image")
    e.add_argument("-c", "--config")
    e.add_argument("-o", "--output", required=True)

    b = sub.add_parser("build-db", help="ingest a manifest into a retrieval index")
    b.add_argument("manifest")
    b.add_argument("-c", "--config")
    b.add_argument("-o", "--index", required=True)
    b.add_argument("--report")

    q = sub.add_parser("query", help="rank indexed images for a query image (JSON lines)")
    q.add_argument("index")
    q.add_argument("image")
    q.add_argument("-c", "--config")
    q.add_argument("-n", "--top-n", type=int, default=5)

    r = sub.add_parser("bench", help="run an experiment driver")
    r.add_argument("experiment")
    r.add_argument("-c", "--config")
    r.add_argument("-o", "--output-dir", required=True)
    r.add_argument("--index")
    r.add_argument("--queries")
    r.add_argument("-n", "--images", type=int)

    pc = sub.add_parser("print-config", help="print the effective configuration")
    pc.add_argument("-c", "--config")
    return p


def run(args):
    if args.command == "extract":
        return cmd_extract(args.image, args.config, args.output)
    if args.command == "build-db":
        return cmd_build_db(args.manifest, args.config, args.index, args.report)
    if args.command == "query":
        return cmd_query(args.index, args.image, args.config, args.top_n)
    if args.command == "bench":
        return cmd_bench(args.experiment, args.config, args.output_dir, args.index, args.queries, args.images)
    return cmd_print_config(args.config)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return int(run(args))
    except (ConfigError, ManifestError, PreconditionError) as exc:
        log.error("%s", exc)
        return int(ExitCode.VALIDATION)
    except (ImageError, OSError) as exc:
        log.error("%s", exc)
        return int(ExitCode.IO)
    except (SingularWarpError, np.linalg.LinAlgError) as exc:
        log.error("solver failure: %s", exc)
        return int(ExitCode.SOLVER)
    except ValueError as exc:
        # corrupt index / feature files are the remaining ValueErrors
        log.error("%s", exc)
        return int(ExitCode.IO)


if __name__ == "__main__":
    sys.exit(main())
