import filecmp
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aacn import afc, synth
from aacn import attention_gt as agt
from aacn.benchmarks import collect_features
from aacn.matcher import GalleryEntry, evaluate
from aacn.pose_model import NUM_PARTS, part_keypoints

GRID = agt.GtConfig(map_w=24, map_h=48, image_w=48, image_h=96)


def scene(pose, occlusions=(), clutter=0.0, seed=0):
    return synth.SceneSpec("id0", "cam0", pose, list(occlusions), clutter, seed)


def identity(rng, channels=8):
    return synth.make_identities(1, rng, channels)[0]


@pytest.fixture
def body(rng):
    return synth.sample_pose(rng, GRID.image_w, GRID.image_h)


def test_poses_stay_in_frame(rng):
    for _ in range(50):
        p = synth.sample_pose(rng, 48, 96)
        assert (p.points >= 0).all() and (p.points[:, 0] <= 48).all() and (p.points[:, 1] <= 96).all()


def test_identities_distinct(rng):
    ids = synth.make_identities(20, rng, 4)
    sigs = np.stack([i.part_signatures for i in ids])
    for a in range(20):
        for b in range(a + 1, 20):
            assert np.min(np.linalg.norm(sigs[a] - sigs[b], axis=1)) > 0


def test_background_zero_without_clutter(rng, body):
    r = synth.render_scene(identity(rng), scene(body), GRID)
    outside = ~synth.part_regions(body, GRID).any(axis=0)
    assert outside.any()
    assert not r.features[:, outside].any()


def test_clutter_fills_background(rng, body):
    r = synth.render_scene(identity(rng), scene(body, clutter=0.3), GRID)
    outside = ~synth.part_regions(body, GRID).any(axis=0)
    assert np.all(r.features[:, outside] != 0)


def test_isolated_signature_recovered_at_pooling_scale(rng, body):
    ident = identity(rng)
    sig = np.zeros_like(ident.part_signatures)
    sig[3] = ident.part_signatures[3]
    r = synth.render_scene(synth.IdentitySpec("solo", sig), scene(body), GRID)
    area = r.attention[3].sum()
    f3 = afc.mask_and_pool(r.features, afc.normalize_attention(r.attention[3]))
    expected = area / (GRID.map_h * GRID.map_w) * sig[3]
    assert np.linalg.norm(f3 - expected) / np.linalg.norm(expected) < 1e-6


def test_pooled_parts_match_overlap_closed_form(rng, body):
    ident = identity(rng)
    r = synth.render_scene(ident, scene(body), GRID)
    regions = synth.part_regions(body, GRID)
    hw = GRID.map_h * GRID.map_w
    for p in range(NUM_PARTS):
        overlap = np.array([(regions[p] & regions[q]).sum() for q in range(NUM_PARTS)], float)
        expected = overlap @ ident.part_signatures / hw
        got = afc.mask_and_pool(r.features, afc.normalize_attention(r.attention[p]))
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-15)


def test_full_occlusion_erases_signature(rng, body):
    ident = identity(rng)
    other = ident.part_signatures.copy()
    other[3] += 5.0
    palette = synth.make_palette(rng, 8)
    a = synth.render_scene(ident, scene(body, [(3, 1.0)], 0.2, seed=7), GRID, palette=palette)
    b = synth.render_scene(synth.IdentitySpec("x", other), scene(body, [(3, 1.0)], 0.2, seed=7), GRID,
                           palette=palette)
    region = synth.part_regions(body, GRID)[3]
    assert a.occluded[region].all()
    np.testing.assert_array_equal(a.features[:, region], b.features[:, region])


def test_full_occlusion_hides_keypoints(rng, body):
    r = synth.render_scene(identity(rng), scene(body, [(3, 1.0), (5, 0.5)]), GRID)
    for k in part_keypoints(3):
        assert not r.pose.visible[k]
    assert r.pose.visible.sum() == 14 - len(part_keypoints(3))


@pytest.mark.parametrize("leak", [0.0, 0.1])
def test_visibility_decreases_with_occlusion(rng, body, leak):
    ident = identity(rng)
    for part in (0, 3, 8, 12):
        scores = [agt.visibility_score(synth.render_scene(ident, scene(body, [(part, f)], seed=3), GRID,
                                                          occluded_attention=leak).attention[part])
                  for f in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert all(a > b for a, b in zip(scores, scores[1:])), (part, scores)


def test_render_deterministic(rng, body):
    ident = identity(rng)
    s = scene(body, [(2, 0.4)], 0.3, seed=11)
    a, b = synth.render_scene(ident, s, GRID), synth.render_scene(ident, s, GRID)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.attention, b.attention)


def test_scene_validation(body):
    with pytest.raises(ValueError):
        scene(body, [(14, 0.5)])
    with pytest.raises(ValueError):
        scene(body, [(1, 1.5)])
    with pytest.raises(ValueError):
        scene(body, clutter=-0.1)


def test_occlusion_rate_law_of_large_numbers():
    rng = np.random.default_rng(0)
    occluded = sum(len(synth.sample_occlusions(rng, 0.5)) for _ in range(1000))
    assert 0.45 <= occluded / (1000 * NUM_PARTS) <= 0.55


def test_invalid_counts():
    for args in ((1, 2, 0.5, 0.3), (2, 1, 0.5, 0.3), (2, 2, 1.5, 0.3), (2, 2, 0.5, -1.0)):
        with pytest.raises(ValueError):
            synth.generate_samples(*args, 0, GRID, 4)


def test_benchmark_byte_identical(tmp_path):
    for sub in ("a", "b"):
        synth.generate_benchmark(tmp_path / sub, 3, 2, 0.5, 0.3, 5, GRID, channels=4, train_ids=2)
    names = sorted(n for n in os.listdir(tmp_path / "a") if os.path.isfile(tmp_path / "a" / n))
    assert names == ["manifest.json", "poses.jsonl"]
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors
    for sub in ("features", "attention", "images"):
        files = sorted(os.listdir(tmp_path / "a" / sub))
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, files, shallow=False)
        assert files and not mismatch and not errors


def test_manifest_contents(tmp_path):
    path = synth.generate_benchmark(tmp_path, 3, 4, 0.0, 0.0, 1, GRID, channels=4, train_ids=2)
    manifest = json.loads(open(path).read())
    recs = manifest["samples"]
    assert all(r["occlusions"] == [] for r in recs)
    splits = [r["split"] for r in recs]
    assert splits.count("query") == splits.count("gallery") == 6 and splits.count("train") == 8
    test_ids = {r["identity"] for r in recs if r["split"] != "train"}
    train_ids = {r["identity"] for r in recs if r["split"] == "train"}
    assert not test_ids & train_ids
    assert {r["camera"] for r in recs} == {"cam0", "cam1"}
    assert manifest["grid"] == [48, 24]
    for r in recs:
        assert os.path.exists(tmp_path / r["feature_file"])


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clean_benchmark_perfectly_separable(seed):
    bank = collect_features(synth.iter_samples(8, 4, 0.0, 0.0, seed, GRID, channels=16))
    fa = np.stack(bank.aligned)
    q = [GalleryEntry(i, d, c, f) for i, d, c, s, f in
         zip(bank.ids, bank.identities, bank.cameras, bank.splits, fa) if s == "query"]
    g = [GalleryEntry(i, d, c, f) for i, d, c, s, f in
         zip(bank.ids, bank.identities, bank.cameras, bank.splits, fa) if s == "gallery"]
    assert evaluate(q, g).cmc[1] == 1.0
