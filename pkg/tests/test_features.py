import numpy as np
import pytest
from hypothesis import given, strategies as st

from lrsift import textures as tx
from lrsift.bench import ncc
from lrsift.config import PipelineConfig
from lrsift.features import (Feature, FeatureSet, PreconditionError, extract_lowrank_sift, patch_rank,
                             rectify_patch, select_features, sift_descriptor)
from lrsift.imaging import AffineWarp, HarrisParams, Keypoint, image_center, warp_crop

CFG = PipelineConfig(threads=1, harris=HarrisParams(max_points=120))


def rot(deg):
    t = np.radians(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def deformed_pairs(img, L, fs_a, fs_b, tol=5.0):
    """Pairs (a, b): b is the nearest feature of fs_b to where a lands under L."""
    c = image_center(img)
    pts = np.array([f.keypoint.xy for f in fs_b.features])
    out = []
    for fa in fs_a.features:
        q = c + L @ (fa.keypoint.xy - c)
        d = np.linalg.norm(pts - q, axis=1)
        k = int(np.argmin(d))
        if d[k] <= tol:
            out.append((fa, fs_b.features[k]))
    return out


# -- rectify_patch -------------------------------------------------------------

def test_identity_rectification_is_raw_crop():
    img = tx.noise((120, 120), seed=0)
    patch = rectify_patch(img, Keypoint(60, 40), AffineWarp.identity())
    expected, _ = warp_crop(img, AffineWarp.identity(), (60, 40), (50, 50))
    np.testing.assert_array_equal(patch, expected)
    # integer-centred crop equals plain slicing (window centre sits half a pixel off)
    kp = Keypoint(60.5, 40.5)
    np.testing.assert_array_equal(rectify_patch(img, kp, AffineWarp.identity()), img[16:66, 36:86])


def test_inverse_shear_restores_stripes():
    base = tx.stripes((200, 200), period=8, vertical=True)
    S = np.array([[1.0, 0.35], [0.0, 1.0]])
    sheared = tx.affine_deform(base, S)
    kp = Keypoint(99.5, 99.5)
    fixed = rectify_patch(sheared, kp, AffineWarp(np.linalg.inv(S)))
    ref = rectify_patch(base, kp, AffineWarp.identity())
    assert ncc(fixed, ref) >= 0.9
    assert ncc(rectify_patch(sheared, kp, AffineWarp.identity()), ref) < 0.5


def test_keypoint_at_margin_fully_valid():
    img = tx.noise((100, 100), seed=1)
    for x, y in [(25, 25), (100 - 26, 100 - 26)]:
        _, mask = rectify_patch(img, Keypoint(x, y), AffineWarp.identity(), return_mask=True)
        assert mask.all()


# -- descriptor --------------------------------------------------------------------

def test_constant_patch_is_degenerate():
    assert sift_descriptor(np.full((50, 50), 0.7)) is None


@given(st.integers(0, 1000))
def test_descriptor_shape_norm_range(seed):
    patch = tx.noise((50, 50), seed=seed, blur=1.0)
    d = sift_descriptor(patch)
    assert d.shape == (128,)
    assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-6)
    assert d.min() >= 0
    assert d.max() <= 1.0


def test_descriptor_rotation_robust_on_grid():
    img = tx.window_grid((200, 200))
    kp = Keypoint(99.5, 99.5)
    a = sift_descriptor(rectify_patch(img, kp, AffineWarp.identity()))
    b = sift_descriptor(rectify_patch(img, kp, AffineWarp(rot(45))))
    assert np.linalg.norm(a - b) <= 0.35


def test_descriptor_deterministic():
    p = tx.facade((50, 50), seed=3)
    np.testing.assert_array_equal(sift_descriptor(p), sift_descriptor(p.copy()))


def test_descriptor_rejects_small_patch():
    with pytest.raises(ValueError):
        sift_descriptor(np.zeros((20, 20)))


# -- patch rank ------------------------------------------------------------------

def test_patch_rank_calibration():
    assert patch_rank(np.full((50, 50), 0.2)) == 0
    ramp = np.tile(np.linspace(0.9, 0.85, 50)[:, None], (1, 50))
    assert patch_rank(ramp) == 1
    grid = rectify_patch(tx.window_grid((120, 120)), Keypoint(60, 60), AffineWarp.identity())
    assert 2 <= patch_rank(grid) <= 5
    assert patch_rank(tx.noise((50, 50), seed=2)) > 5


# -- extraction -------------------------------------------------------------------

def test_rectified_grid_features_near_identity():
    img = tx.window_grid((180, 180), spacing=(15, 19), size=(8, 11))
    fs = extract_lowrank_sift(img, CFG)
    assert len(fs) > 10
    for f in fs.features:
        assert np.abs(f.warp.linear - np.eye(2)).max() <= 0.05
        assert np.linalg.norm(f.descriptor) == pytest.approx(1.0, abs=1e-6)
    assert fs.diagnostics["blocks"] == 9


def test_rectification_brings_sheared_features_closer():
    L = np.array([[1.0, 0.3], [0.0, 1.0]])
    plain = CFG.replace(lowrank=False)
    wins = []
    for seed in range(4):
        base = tx.facade((180, 180), seed=seed)
        sheared = tx.affine_deform(base, L)
        dist = []
        for cfg in (CFG, plain):
            pairs = deformed_pairs(base, L, extract_lowrank_sift(base, cfg), extract_lowrank_sift(sheared, cfg))
            dist.append({(a.keypoint.x, a.keypoint.y, b.keypoint.x, b.keypoint.y):
                         np.linalg.norm(a.descriptor - b.descriptor) for a, b in pairs})
        wins += [dist[0][k] < dist[1][k] for k in dist[0] if k in dist[1]]
    assert len(wins) >= 40
    assert np.mean(wins) >= 0.7


@pytest.mark.parametrize("kind", ["grid", "stripes", "facade"])
def test_affine_robustness_mean_distance(kind):
    base = {"grid": tx.window_grid((220, 220)), "stripes": tx.checkerboard((220, 220), 12),
            "facade": tx.facade((220, 220), seed=4)}[kind]
    L = np.array([[1.0, -0.2], [0.2, 1.0]]) if kind != "stripes" else np.array([[1.0, 0.4], [0.0, 1.0]])
    out = tx.affine_deform(base, L)
    means = []
    for cfg in (CFG, CFG.replace(lowrank=False)):
        pairs = deformed_pairs(base, L, extract_lowrank_sift(base, cfg), extract_lowrank_sift(out, cfg))
        assert pairs
        means.append(np.mean([np.linalg.norm(a.descriptor - b.descriptor) for a, b in pairs]))
    assert means[0] < means[1]


def test_small_image_precondition():
    with pytest.raises(PreconditionError):
        extract_lowrank_sift(tx.facade((100, 200)), CFG)
    # the plain baseline has no block precondition
    extract_lowrank_sift(tx.facade((100, 100)), CFG.replace(lowrank=False))


def test_extraction_deterministic_and_serializable(tmp_path):
    img = tx.facade((140, 140), seed=7)
    a = extract_lowrank_sift(img, CFG, image_id="f7")
    b = extract_lowrank_sift(img, CFG, image_id="f7")
    assert a.to_bytes() == b.to_bytes()
    a.save(tmp_path / "f.lrsf")
    back = FeatureSet.load(tmp_path / "f.lrsf")
    assert back.image_id == "f7" and len(back) == len(a)
    for x, y in zip(a.features, back.features):
        assert x.keypoint.x == pytest.approx(y.keypoint.x, abs=1e-4)
        np.testing.assert_allclose(x.warp.entries(), y.warp.entries(), atol=1e-6)
        assert x.patch_rank == y.patch_rank
        np.testing.assert_allclose(x.descriptor, y.descriptor, atol=0.5 / 255 + 1e-9)
    assert back.to_bytes() == a.to_bytes()


def test_feature_file_errors():
    fs = FeatureSet("x", [Feature(Keypoint(1, 2, 3), AffineWarp.identity(), 2, np.full(128, 1 / np.sqrt(128)))])
    raw = fs.to_bytes()
    with pytest.raises(ValueError):
        FeatureSet.from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        FeatureSet.from_bytes(raw[:-5])
    with pytest.raises(ValueError):
        FeatureSet.from_bytes(raw[:4] + b"\x09\x00" + raw[6:])


# -- selection ----------------------------------------------------------------------

def _fake(ranks):
    d = np.full(128, 1 / np.sqrt(128))
    return FeatureSet("s", [Feature(Keypoint(i, i), AffineWarp.identity(), r, d) for i, r in enumerate(ranks)])


def test_select_all_rank_one_is_empty():
    assert len(select_features(_fake([1, 1, 1]), 2, 5)) == 0


@given(st.lists(st.integers(0, 20), max_size=30), st.integers(0, 10), st.integers(0, 10))
def test_select_subset_idempotent(ranks, lo, span):
    fs = _fake(ranks)
    once = select_features(fs, lo, lo + span)
    assert all(f in fs.features for f in once.features)
    assert select_features(once, lo, lo + span).features == once.features
    assert select_features(fs, 0, 10 ** 9).features == fs.features


def test_select_rejects_inverted_band():
    with pytest.raises(ValueError):
        select_features(_fake([2]), 5, 2)


def test_selection_keeps_grid_region():
    h = 160
    flat = np.full((h, 80), 0.6)
    grid = tx.window_grid((h, 80), spacing=(14, 18), size=(8, 10))
    noise = tx.noise((h, 80), seed=3, blur=0.8)
    img = np.hstack([flat, grid, noise])
    fs = extract_lowrank_sift(img, CFG.replace(harris=HarrisParams(max_points=200)))
    kept = select_features(fs, 2, 5)
    assert len(kept) >= 5
    in_grid = [80 <= f.keypoint.x < 160 for f in kept.features]
    assert np.mean(in_grid) >= 0.8
