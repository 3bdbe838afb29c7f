"""Synthetic pedestrians rendered straight into feature space.

Each identity owns one constant signature vector per body part. A scene
paints those signatures onto the part regions of a jittered skeleton, adds
Gaussian clutter on the background and overwrites contiguous slabs of some
parts with occluder objects. The world is piecewise constant, so pooled part
features have closed forms.

The nuisance level ``clutter_level`` does double duty: it is the standard
deviation of background and occluder noise, and the relative size of the
per-sample appearance perturbation of each part signature. At
``clutter_level=0`` every render of an identity carries its exact signatures.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import attention_gt as agt
from .formats import write_tensor
from .pose_model import (LIMBS, NUM_KEYPOINTS, NUM_NONRIGID, NUM_PARTS, PoseAnnotation,
                         canonical_part_table, part_keypoints, validate_pose, write_poses)

# (child, parent, length, angle in degrees, angle noise std) on a 96 px tall
# reference frame; angle 0 points along +x and 90 points down the image.
_SKELETON = (
    (0, 2, 10.0, -90.0, 5.0),
    (1, 2, 7.0, 175.0, 3.0),
    (3, 2, 7.0, 5.0, 3.0),
    (10, 1, 13.0, 105.0, 15.0),
    (11, 10, 12.0, 95.0, 15.0),
    (12, 3, 13.0, 75.0, 15.0),
    (13, 12, 12.0, 85.0, 15.0),
    (4, 2, 30.4, 99.5, 2.0),
    (7, 2, 30.4, 80.5, 2.0),
    (5, 4, 20.0, 92.0, 8.0),
    (6, 5, 20.0, 90.0, 8.0),
    (8, 7, 20.0, 88.0, 8.0),
    (9, 8, 20.0, 90.0, 8.0),
)
_NECK_Y = 16.0
_REF_HEIGHT = 96.0

# garment group of every part: 0 skin/hair, 1 upper garment, 2 lower garment
_PART_GROUP = (0, 1, 1, 1, 0, 1, 0, 2, 2, 2, 2, 0, 1, 2)
# toy-image channel of every part (same grouping, drawn as colours)
TOY_CHANNELS = 3

PALETTE_SIZE = 8
DETAIL = 0.6
FULL_OCCLUSION_PROB = 0.5
# training identities come from a disjoint seed stream
TRAIN_SEED_OFFSET = 10_000


def sample_pose(rng: np.random.Generator, image_w: int, image_h: int) -> PoseAnnotation:
    """Jitter the canonical standing skeleton; bone lengths stay fixed."""
    s = image_h / _REF_HEIGHT * rng.uniform(0.95, 1.05)
    pts = np.zeros((NUM_KEYPOINTS, 2))
    pts[2] = (image_w / 2.0 + rng.uniform(-1.5, 1.5) * s, _NECK_Y * s + rng.uniform(-1.0, 1.0))
    for child, parent, length, angle, noise in _SKELETON:
        theta = np.deg2rad(angle + np.clip(rng.normal(0.0, noise), -2 * noise, 2 * noise))
        pts[child] = pts[parent] + length * s * np.array([np.cos(theta), np.sin(theta)])
    return validate_pose(PoseAnnotation(pts, np.ones(NUM_KEYPOINTS, bool)), image_w, image_h)


@dataclass
class IdentitySpec:
    identity: str
    part_signatures: np.ndarray  # (14, C)


@dataclass
class SceneSpec:
    identity: str
    camera: str
    pose: PoseAnnotation
    occlusions: List[Tuple[int, float]] = field(default_factory=list)
    clutter_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for part, frac in self.occlusions:
            if not 0 <= part < NUM_PARTS:
                raise ValueError(f"occluded part {part} out of range")
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"occlusion fraction {frac} outside [0, 1]")
        if self.clutter_level < 0:
            raise ValueError("clutter_level must be non-negative")


def _garment_vector(rng, palette):
    return palette[rng.integers(len(palette))] + DETAIL * rng.normal(size=palette.shape[1])


def make_palette(rng: np.random.Generator, channels: int, size: int = PALETTE_SIZE) -> np.ndarray:
    return rng.normal(size=(size, channels))


def make_identities(n: int, rng: np.random.Generator, channels: int,
                    palette: Optional[np.ndarray] = None) -> List[IdentitySpec]:
    """Identities share a small garment palette, so parts are only partly distinctive."""
    if palette is None:
        palette = make_palette(rng, channels)
    out: List[IdentitySpec] = []
    while len(out) < n:
        garments = np.stack([_garment_vector(rng, palette) for _ in range(3)])
        sig = garments[list(_PART_GROUP)] + 0.25 * rng.normal(size=(NUM_PARTS, channels))
        # rejection keeps identities pairwise distinct
        if all(np.min(np.linalg.norm(o.part_signatures - sig, axis=1)) > 0 for o in out):
            out.append(IdentitySpec(f"id{len(out):04d}", sig))
    return out


def part_regions(pose: PoseAnnotation, cfg: agt.GtConfig) -> np.ndarray:
    """Boolean ``(14, H, W)`` part regions of the pose (all keypoints visible)."""
    return agt.part_maps(pose.with_visibility(np.ones(NUM_KEYPOINTS, bool)), cfg) > 0.5


def _slab(region: np.ndarray, part: int, pose: PoseAnnotation, cfg, frac: float, from_start: bool):
    """Cells of ``region`` forming a contiguous slab holding ``frac`` of its area."""
    ys, xs = np.nonzero(region)
    n_occ = int(round(frac * len(ys)))
    if n_occ == 0:
        return np.zeros_like(region)
    cx, cy = agt.cell_centers(cfg)
    px, py = cx[ys, xs], cy[ys, xs]
    if part < NUM_NONRIGID:
        a, b = (pose.points[k] for k in part_keypoints(part))
        key = (px - a[0]) * (b[0] - a[0]) + (py - a[1]) * (b[1] - a[1])
    else:
        key = py
    order = np.lexsort((px, py, key))
    if not from_start:
        order = order[::-1]
    out = np.zeros_like(region)
    out[ys[order[:n_occ]], xs[order[:n_occ]]] = True
    return out


@dataclass
class RenderResult:
    features: np.ndarray           # (C, H, W)
    pose: PoseAnnotation           # keypoints of fully occluded parts made invisible
    occlusions: List[Tuple[int, float]]
    attention: np.ndarray          # (14, H, W) occlusion-aware part attention
    occluded: np.ndarray           # (H, W) bool, cells covered by any occluder
    image: np.ndarray              # (3, H, W) toy colour image


def render_scene(identity: IdentitySpec, scene: SceneSpec, cfg: agt.GtConfig,
                 occluded_attention: float = 0.0, palette: Optional[np.ndarray] = None) -> RenderResult:
    """Render one scene; deterministic given ``scene.seed``.

    ``attention`` equals the ground-truth part regions with every occluded
    cell set to ``occluded_attention`` (0 = zeroed).
    """
    rng = np.random.default_rng(scene.seed)
    sig = identity.part_signatures
    channels = sig.shape[1]
    if palette is None:
        palette = np.zeros((1, channels))
    c = scene.clutter_level
    regions = part_regions(scene.pose, cfg)
    appearance = sig + c * rng.normal(size=sig.shape)

    feats = np.zeros((channels, cfg.map_h, cfg.map_w))
    image = np.zeros((TOY_CHANNELS, cfg.map_h, cfg.map_w))
    for p in range(NUM_PARTS):
        feats[:, regions[p]] += appearance[p][:, None]
        image[_PART_GROUP[p], regions[p]] = 1.0
    background = ~regions.any(axis=0)
    if c > 0:
        feats[:, background] = c * rng.normal(size=(channels, int(background.sum())))
        image[:, background] = c * rng.normal(size=(TOY_CHANNELS, int(background.sum())))

    occluded = np.zeros((cfg.map_h, cfg.map_w), bool)
    for part, frac in scene.occlusions:
        slab = _slab(regions[part], part, scene.pose, cfg, frac, bool(rng.integers(2)))
        n = int(slab.sum())
        obj = _garment_vector(rng, palette)
        feats[:, slab] = obj[:, None] + c * rng.normal(size=(channels, n))
        image[:, slab] = rng.uniform(0.0, 1.0, size=(TOY_CHANNELS, 1)) + c * rng.normal(size=(TOY_CHANNELS, n))
        occluded |= slab

    attention = regions.astype(np.float64)
    attention[:, occluded] *= occluded_attention

    visible = scene.pose.visible.copy()
    for part, frac in scene.occlusions:
        if frac >= 1.0:
            visible[list(part_keypoints(part))] = False
    pose = scene.pose.with_visibility(visible)
    return RenderResult(feats, pose, list(scene.occlusions), attention, occluded, image)


def true_limb_support(pose: PoseAnnotation, limb: str, cfg: agt.GtConfig) -> np.ndarray:
    """The rendered body's actual limb: round-capped segments of width equal to the band."""
    half = agt.band_width(pose, cfg) / 2.0
    xs, ys = agt.cell_centers(cfg)
    out = np.zeros((cfg.map_h, cfg.map_w), bool)
    nonrigid, _ = canonical_part_table()
    for p in LIMBS[limb]:
        a, b = (pose.points[k] for k in nonrigid[p].endpoints)
        d = b - a
        t = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / max(d @ d, 1e-12), 0.0, 1.0)
        dist2 = (xs - a[0] - t * d[0]) ** 2 + (ys - a[1] - t * d[1]) ** 2
        out |= dist2 <= half * half
    return out


def limb_gt_region(pose: PoseAnnotation, limb: str, cfg: agt.GtConfig) -> np.ndarray:
    """Union of the limb's non-rigid ground-truth bands."""
    nonrigid, _ = canonical_part_table()
    return np.max([agt.nonrigid_gt_map(pose, nonrigid[p], cfg) for p in LIMBS[limb]], axis=0)


def limb_roi_region(pose: PoseAnnotation, limb: str, cfg: agt.GtConfig) -> np.ndarray:
    """Keypoint bounding-box RoI of a limb, padded by half the band width."""
    nonrigid, _ = canonical_part_table()
    kps = sorted({k for p in LIMBS[limb] for k in nonrigid[p].endpoints})
    pts = pose.points[kps]
    pad = agt.band_width(pose, cfg) / 2.0
    (x0, y0), (x1, y1) = pts.min(axis=0) - pad, pts.max(axis=0) + pad
    xs, ys = agt.cell_centers(cfg)
    return ((xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)).astype(np.float64)


def toy_image(render: RenderResult, grid: agt.GtConfig) -> np.ndarray:
    """Block-average the toy colour image of a render onto a coarser grid."""
    return block_average(render.image, grid.map_h, grid.map_w)


def block_average(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    c, H, W = arr.shape
    if H % h or W % w:
        raise ValueError(f"cannot block-average {H}x{W} onto {h}x{w}")
    return arr.reshape(c, h, H // h, w, W // w).mean(axis=(2, 4))


# -- benchmarks ------------------------------------------------------------------

@dataclass
class Sample:
    sample_id: str
    identity: str
    camera: str
    split: str
    render: RenderResult


def sample_occlusions(rng: np.random.Generator, occlusion_rate: float) -> List[Tuple[int, float]]:
    occ = []
    for p in range(NUM_PARTS):
        if rng.random() < occlusion_rate:
            frac = 1.0 if rng.random() < FULL_OCCLUSION_PROB else float(rng.uniform(0.2, 0.9))
            occ.append((p, frac))
    return occ


def _scene_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def iter_samples(n_ids: int, samples_per_id: int, occlusion_rate: float, clutter_level: float,
                 seed: int, cfg: agt.GtConfig, channels: int = 256, occluded_attention: float = 0.0,
                 split: Optional[str] = None) -> Iterator[Sample]:
    """Yield benchmark samples one at a time.

    Cameras alternate ``cam0``/``cam1``. Unless ``split`` forces one value, the
    first half of each identity's samples are queries and the rest gallery.
    """
    if n_ids < 2 or samples_per_id < 2:
        raise ValueError("need at least 2 identities and 2 samples per identity")
    if not 0.0 <= occlusion_rate <= 1.0:
        raise ValueError("occlusion_rate must lie in [0, 1]")
    if clutter_level < 0:
        raise ValueError("clutter_level must be non-negative")
    rng = np.random.default_rng(_scene_seed(seed, 0))
    palette = make_palette(rng, channels)
    identities = make_identities(n_ids, rng, channels, palette)
    n_query = samples_per_id // 2
    prefix = "" if split is None else f"{split}_"
    for i, ident in enumerate(identities):
        ident = IdentitySpec(prefix + ident.identity, ident.part_signatures)
        for j in range(samples_per_id):
            srng = np.random.default_rng(_scene_seed(seed, 1, i, j))
            pose = sample_pose(srng, cfg.image_w, cfg.image_h)
            occ = sample_occlusions(srng, occlusion_rate)
            scene = SceneSpec(ident.identity, f"cam{j % 2}", pose, occ, clutter_level,
                              _scene_seed(seed, 2, i, j))
            render = render_scene(ident, scene, cfg, occluded_attention, palette)
            which = split or ("query" if j < n_query else "gallery")
            yield Sample(f"{ident.identity}_s{j:02d}", ident.identity, scene.camera, which, render)


def generate_samples(*args, **kwargs) -> List[Sample]:
    return list(iter_samples(*args, **kwargs))


def generate_benchmark(out_dir, n_ids: int, samples_per_id: int, occlusion_rate: float,
                       clutter_level: float, seed: int, cfg: agt.GtConfig, channels: int = 256,
                       occluded_attention: float = 0.0, train_ids: int = 0) -> str:
    """Write feature, attention and toy-image tensors, poses and a manifest; returns the manifest path.

    ``train_ids`` extra identities (disjoint, drawn from a derived seed) are
    added with split ``"train"`` for fitting the composition head.
    """
    samples = generate_samples(n_ids, samples_per_id, occlusion_rate, clutter_level, seed, cfg,
                               channels, occluded_attention)
    if train_ids:
        samples += generate_samples(train_ids, samples_per_id, occlusion_rate, clutter_level,
                                    seed + TRAIN_SEED_OFFSET, cfg, channels, occluded_attention,
                                    split="train")
    for sub in ("features", "attention", "images"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    records = []
    poses = {}
    for s in samples:
        r = s.render
        write_tensor(os.path.join(out_dir, "features", f"{s.sample_id}.aacn"), r.features)
        write_tensor(os.path.join(out_dir, "attention", f"{s.sample_id}.aacn"), r.attention)
        write_tensor(os.path.join(out_dir, "images", f"{s.sample_id}.aacn"), r.image)
        poses[s.sample_id] = r.pose
        records.append({
            "id": s.sample_id,
            "identity": s.identity,
            "camera": s.camera,
            "split": s.split,
            "feature_file": f"features/{s.sample_id}.aacn",
            "pose_file": "poses.jsonl",
            "attention_file": f"attention/{s.sample_id}.aacn",
            "image_file": f"images/{s.sample_id}.aacn",
            "occlusions": [[int(p), float(f)] for p, f in r.occlusions],
        })
    write_poses(os.path.join(out_dir, "poses.jsonl"), poses)
    manifest = {
        "samples": records,
        "grid": [cfg.map_h, cfg.map_w],
        "image": [cfg.image_h, cfg.image_w],
        "seed": seed,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path
