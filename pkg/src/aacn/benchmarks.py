"""Desk-scale studies on synthetic data.

``visibility_weighting_study`` compares retrieval with composed (visibility
weighted) descriptors against unweighted aligned part features and plain
global pooling on occluded pedestrians. ``localization_study`` compares
pose-guided limb bands and keypoint bounding boxes against the rendered limb
shapes. ``ppa_training_study`` fits the part attention network on toy colour
images and scores both stages on held-out renders.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import afc
from . import attention_gt as agt
from . import synth
from .matcher import GalleryEntry, evaluate
from .pose_model import LIMBS
from .ppa_net import PpaTrainConfig, evaluate_stages, train_ppa

STUDY_GRID = agt.GtConfig(map_w=24, map_h=48, image_w=48, image_h=96)
PPA_RENDER_GRID = agt.GtConfig(map_w=48, map_h=96, image_w=48, image_h=96)
PPA_GRID = agt.GtConfig(map_w=12, map_h=24, image_w=48, image_h=96)


@dataclass
class FeatureBank:
    ids: List[str] = field(default_factory=list)
    identities: List[str] = field(default_factory=list)
    cameras: List[str] = field(default_factory=list)
    splits: List[str] = field(default_factory=list)
    aligned: List[np.ndarray] = field(default_factory=list)
    visibility: List[np.ndarray] = field(default_factory=list)
    pooled: List[np.ndarray] = field(default_factory=list)
    fully_occluded: List[np.ndarray] = field(default_factory=list)

    def arrays(self):
        return np.stack(self.aligned), np.stack(self.visibility), np.stack(self.pooled)


def collect_features(samples) -> FeatureBank:
    """Aligned features from each render's occlusion-aware attention; drops the feature maps."""
    bank = FeatureBank()
    for s in samples:
        r = s.render
        fa, vis = afc.align_batch(r.features[None], r.attention[None])
        full = np.zeros(len(vis[0]), bool)
        for p, frac in r.occlusions:
            full[p] |= frac >= 1.0
        bank.ids.append(s.sample_id)
        bank.identities.append(s.identity)
        bank.cameras.append(s.camera)
        bank.splits.append(s.split)
        bank.aligned.append(fa[0])
        bank.visibility.append(vis[0])
        bank.pooled.append(afc.global_pool_batch(r.features[None])[0])
        bank.fully_occluded.append(full)
    return bank


def _rank1(bank: FeatureBank, feats: np.ndarray) -> float:
    q = [GalleryEntry(i, d, c, f) for i, d, c, s, f in
         zip(bank.ids, bank.identities, bank.cameras, bank.splits, feats) if s == "query"]
    g = [GalleryEntry(i, d, c, f) for i, d, c, s, f in
         zip(bank.ids, bank.identities, bank.cameras, bank.splits, feats) if s == "gallery"]
    return evaluate(q, g).cmc[1]


@dataclass
class WeightingResult:
    rank1_composed: float
    rank1_aligned: float
    rank1_global: float
    mean_w_occluded: float
    mean_w_visible: float
    loss_before: float
    loss_after: float


def visibility_weighting_study(seed: int, n_ids: int = 50, samples_per_id: int = 4,
                               occlusion_rate: float = 0.5, clutter_level: float = 0.3,
                               train_ids: int = 100, channels: int = 256,
                               occluded_attention: float = 0.1, grid: agt.GtConfig = STUDY_GRID,
                               train_cfg: Optional[afc.CompositionTrainConfig] = None) -> WeightingResult:
    """Train a composition head on separate training identities, then compare
    rank-1 of composed, unweighted aligned and globally pooled features."""
    train_cfg = train_cfg or afc.CompositionTrainConfig(seed=seed)
    train = collect_features(synth.iter_samples(
        train_ids, samples_per_id, occlusion_rate, clutter_level, seed + synth.TRAIN_SEED_OFFSET, grid, channels,
        occluded_attention, split="train"))
    test = collect_features(synth.iter_samples(
        n_ids, samples_per_id, occlusion_rate, clutter_level, seed, grid, channels, occluded_attention))

    fa, vis, _ = train.arrays()
    labels = np.array(train.identities)
    head = afc.CompositionHead(channels, seed=seed)
    head.fit_input_stats(vis, fa)
    before = afc.composition_loss(vis, fa, labels, head, train_cfg.margin)
    afc.train_composition(vis, fa, labels, head, train_cfg)
    after = afc.composition_loss(vis, fa, labels, head, train_cfg.margin)

    tfa, tvis, tpool = test.arrays()
    composed, w = head.embed(tvis, tfa)
    occ = np.stack(test.fully_occluded)
    return WeightingResult(
        rank1_composed=_rank1(test, composed),
        rank1_aligned=_rank1(test, tfa),
        rank1_global=_rank1(test, tpool),
        mean_w_occluded=float(w[occ].mean()) if occ.any() else float("nan"),
        mean_w_visible=float(w[~occ].mean()),
        loss_before=before,
        loss_after=after,
    )


def localization_study(n_poses: int = 500, seed: int = 0,
                       grid: agt.GtConfig = agt.GtConfig(48, 96, 48, 96)) -> Dict[str, Dict[str, float]]:
    """Mean IoU per limb of pose-guided bands and of keypoint-box RoIs against the true limb shape."""
    rng = np.random.default_rng(seed)
    scores = {limb: {"ppa": [], "roi": []} for limb in LIMBS}
    for _ in range(n_poses):
        pose = synth.sample_pose(rng, grid.image_w, grid.image_h)
        for limb in LIMBS:
            truth = synth.true_limb_support(pose, limb, grid).astype(np.float64)
            scores[limb]["ppa"].append(agt.part_iou(synth.limb_gt_region(pose, limb, grid), truth))
            scores[limb]["roi"].append(agt.part_iou(synth.limb_roi_region(pose, limb, grid), truth))
    return {limb: {k: float(np.mean(v)) for k, v in d.items()} for limb, d in scores.items()}


def ppa_dataset(n: int, seed: int, clutter_level: float = 0.1):
    """``n`` toy images (two renders per identity, no occlusion) with their K/N/R targets."""
    X, T = [], {"K": [], "N": [], "R": []}
    for s in synth.iter_samples(max(2, n // 2), 2, 0.0, clutter_level, seed, PPA_RENDER_GRID, channels=4):
        X.append(synth.toy_image(s.render, PPA_GRID))
        t = agt.gt_targets(s.render.pose, PPA_GRID)
        for k in T:
            T[k].append(t[k])
    return np.stack(X)[:n], {k: np.stack(v)[:n] for k, v in T.items()}


@dataclass
class PpaStudyResult:
    initial_loss: float
    final_loss: float
    heldout_stage1: float
    heldout_stage2: float


def ppa_training_study(seed: int = 0, n_train: int = 32, n_heldout: int = 16, epochs: int = 200,
                       cfg: Optional[PpaTrainConfig] = None) -> PpaStudyResult:
    """Train on ``n_train`` renders; report the loss drop and held-out stage losses."""
    X, T = ppa_dataset(n_train, 10 + seed)
    Xh, Th = ppa_dataset(n_heldout, 100 + seed)
    cfg = cfg or PpaTrainConfig(epochs=epochs, seed=seed)
    res = train_ppa(X, T, cfg)
    s1, s2 = evaluate_stages(res.net, Xh, Th, cfg.weights)
    return PpaStudyResult(res.history[0], res.history[-1], s1, s2)
