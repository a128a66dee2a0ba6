"""Low-rank SIFT: locally rectified SIFT features and vocabulary-tree place recognition."""

from lrsift.imaging import AffineWarp, Keypoint, ProjectiveWarp, load_image, warp_crop, harris_corners
from lrsift.lowrank import TiltParams, TiltProblem, TiltSolution, rpca_alm, solve_tilt, fix_aspect_ratio, numerical_rank
from lrsift.integralmap import LowRankIntegralMap, build_integral_map, transform_at
from lrsift.features import Feature, FeatureSet, extract_lowrank_sift, select_features, sift_descriptor, rectify_patch
from lrsift.retrieval import VocabTree, DatabaseIndex, build_tree, quantize, score_query
from lrsift.config import PipelineConfig
from lrsift.geo import GeoTag, localization_correct
from lrsift.corpus import ingest, load_manifest

__version__ = "0.1.0"

__all__ = [
    "AffineWarp", "Keypoint", "ProjectiveWarp", "load_image", "warp_crop", "harris_corners",
    "TiltParams", "TiltProblem", "TiltSolution", "rpca_alm", "solve_tilt", "fix_aspect_ratio",
    "numerical_rank", "LowRankIntegralMap", "build_integral_map", "transform_at",
    "Feature", "FeatureSet", "extract_lowrank_sift", "select_features", "sift_descriptor",
    "rectify_patch", "VocabTree", "DatabaseIndex", "build_tree", "quantize", "score_query",
    "PipelineConfig", "GeoTag", "localization_correct", "ingest", "load_manifest",
]
