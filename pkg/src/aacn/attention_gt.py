"""Ground-truth keypoint confidence maps and part attention maps.

All geometry is evaluated in image pixel space at the centers of the map
cells. For a map of ``map_w`` columns over an image ``image_w`` pixels wide,
cell ``i`` is centered at pixel ``(i + 0.5) * image_w / map_w - 0.5``; on a
1-pixel grid the cell centers are exactly the integer pixel positions.

Maps are plain ``(H, W)`` float arrays with values in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .pose_model import (NUM_KEYPOINTS, NUM_NONRIGID, NUM_PARTS, NonRigidPartDef,
                         PoseAnnotation, RigidPartDef, canonical_part_table)

TORSO_KEYPOINTS = (1, 3, 4, 7)
BAND_FRACTION = 0.15
GAUSS_CELLS = 2.0


@dataclass(frozen=True)
class GtConfig:
    """Rasterization settings.

    ``sigma_band`` is the full width of a limb band in pixels; ``None`` means
    0.15 times the torso bounding-box diagonal of each pose. ``sigma_gauss``
    is the keypoint kernel spread in pixels; ``None`` means two map cells.
    """

    map_w: int
    map_h: int
    image_w: int
    image_h: int
    sigma_band: Optional[float] = None
    sigma_gauss: Optional[float] = None

    def __post_init__(self):
        for name in ("map_w", "map_h", "image_w", "image_h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.image_w % self.map_w or self.image_h % self.map_h:
            raise ValueError("map dimensions must divide image dimensions evenly")
        for name in ("sigma_band", "sigma_gauss"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def stride(self) -> Tuple[float, float]:
        return self.image_w / self.map_w, self.image_h / self.map_h

    @property
    def gauss_px(self) -> float:
        if self.sigma_gauss is not None:
            return float(self.sigma_gauss)
        return GAUSS_CELLS * self.image_w / self.map_w


def cell_centers(cfg: GtConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of every cell center as two ``(H, W)`` grids."""
    sx, sy = cfg.stride
    xs = (np.arange(cfg.map_w) + 0.5) * sx - 0.5
    ys = (np.arange(cfg.map_h) + 0.5) * sy - 0.5
    return np.meshgrid(xs, ys)


def band_width(pose: PoseAnnotation, cfg: GtConfig) -> float:
    if cfg.sigma_band is not None:
        return float(cfg.sigma_band)
    idx = [k for k in TORSO_KEYPOINTS if pose.visible[k]]
    if len(idx) >= 2:
        pts = pose.points[idx]
        diag = float(np.hypot(*(pts.max(axis=0) - pts.min(axis=0))))
        if diag > 0:
            return BAND_FRACTION * diag
    # no usable torso: fall back to a fraction of the image height
    return BAND_FRACTION * 0.4 * cfg.image_h


def gaussian_keypoint_map(pose: PoseAnnotation, k: int, cfg: GtConfig) -> np.ndarray:
    if not pose.visible[k]:
        return np.zeros((cfg.map_h, cfg.map_w))
    xs, ys = cell_centers(cfg)
    px, py = pose.points[k]
    d2 = (xs - px) ** 2 + (ys - py) ** 2
    return np.exp(-d2 / (2.0 * cfg.gauss_px ** 2))


def _band_mask(a, b, sigma_band: float, xs, ys) -> np.ndarray:
    # squared comparisons keep integer-valued inputs exact at the boundary
    ax, ay = float(a[0]), float(a[1])
    dx, dy = float(b[0]) - ax, float(b[1]) - ay
    ux, uy = xs - ax, ys - ay
    half = sigma_band / 2.0
    l2 = dx * dx + dy * dy
    if l2 == 0.0:
        return ux * ux + uy * uy <= half * half
    dot = ux * dx + uy * dy
    cross = dx * uy - dy * ux
    return (dot >= 0.0) & (dot <= l2) & (cross * cross <= half * half * l2)


def nonrigid_region_membership(a, b, sigma_band: float, x) -> bool:
    """Whether point ``x`` lies in the band of full width ``sigma_band`` along ``a``-``b``.

    A degenerate segment (``a == b``) becomes a disc of radius ``sigma_band / 2``.
    """
    return bool(_band_mask(a, b, sigma_band, np.float64(x[0]), np.float64(x[1])))


def nonrigid_gt_map(pose: PoseAnnotation, part: NonRigidPartDef, cfg: GtConfig) -> np.ndarray:
    i, j = part.endpoints
    if not (pose.visible[i] and pose.visible[j]):
        return np.zeros((cfg.map_h, cfg.map_w))
    xs, ys = cell_centers(cfg)
    mask = _band_mask(pose.points[i], pose.points[j], band_width(pose, cfg), xs, ys)
    return mask.astype(np.float64)


def rigid_gt_map(pose: PoseAnnotation, part: RigidPartDef, cfg: GtConfig) -> np.ndarray:
    idx = sorted(k for k in part.keypoint_set if pose.visible[k])
    if len(idx) < 2:
        return np.zeros((cfg.map_h, cfg.map_w))
    pts = pose.points[idx]
    (x0, y0), (x1, y1) = pts.min(axis=0), pts.max(axis=0)
    xs, ys = cell_centers(cfg)
    mask = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    return mask.astype(np.float64)


def keypoint_maps(pose: PoseAnnotation, cfg: GtConfig) -> np.ndarray:
    """All 14 keypoint confidence maps, shape ``(14, H, W)``."""
    return np.stack([gaussian_keypoint_map(pose, k, cfg) for k in range(NUM_KEYPOINTS)])


def part_maps(pose: PoseAnnotation, cfg: GtConfig) -> np.ndarray:
    """Binary maps for the 11 non-rigid then 3 rigid parts, shape ``(14, H, W)``."""
    nonrigid, rigid = canonical_part_table()
    maps = [nonrigid_gt_map(pose, p, cfg) for p in nonrigid]
    maps += [rigid_gt_map(pose, p, cfg) for p in rigid]
    return np.stack(maps)


def gt_targets(pose: PoseAnnotation, cfg: GtConfig) -> dict:
    """Training targets for the part attention network: ``K``, ``N`` and ``R``."""
    parts = part_maps(pose, cfg)
    return {"K": keypoint_maps(pose, cfg), "N": parts[:NUM_NONRIGID], "R": parts[NUM_NONRIGID:NUM_PARTS]}


def visibility_score(m: np.ndarray) -> float:
    return float(np.abs(m).sum())


def part_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU between ``pred`` binarized at ``threshold`` and a binary ``gt``.

    Two empty masks have IoU 1.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    p = pred >= threshold
    g = gt >= threshold
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union
