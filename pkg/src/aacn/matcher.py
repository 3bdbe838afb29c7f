"""Gallery ranking and CMC / mAP evaluation.

Cross-camera protocol: for each query, gallery entries sharing both its
identity and its camera are removed before ranking. Ties in distance are
broken by ``sample_id`` so results are reproducible bit for bit.
"""
from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CMC_RANKS = (1, 5, 10, 20)
METRICS = ("euclidean", "cosine")


@dataclass
class GalleryEntry:
    sample_id: str
    identity: str
    camera: str
    feature: np.ndarray

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.feature)):
            raise ValueError(f"{self.sample_id}: non-finite feature")
        if self.identity == "" or self.camera == "":
            raise ValueError(f"{self.sample_id}: identity and camera must be non-empty")


@dataclass
class EvalReport:
    cmc: Dict[int, float]
    map_score: float
    query_count: int

    def to_dict(self) -> dict:
        return OrderedDict([
            ("cmc", OrderedDict((str(k), self.cmc[k]) for k in CMC_RANKS)),
            ("mAP", self.map_score),
            ("queries", self.query_count),
        ])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def distance(a, b, metric: str = "euclidean") -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(pairwise_distances(a[None], b[None], metric)[0, 0])


def pairwise_distances(q: np.ndarray, g: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """``(Q, G)`` distance matrix; cosine distance is ``1 - cos``."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {g.shape[1]}")
    if metric == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        qn[qn == 0] = 1.0
        gn[gn == 0] = 1.0
        return np.clip(1.0 - (q / qn) @ (g / gn).T, 0.0, 2.0)
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def rank_by_distance(dists: np.ndarray, sample_ids: Sequence[str]) -> np.ndarray:
    """Indices sorting ``dists`` ascending, ties by ``sample_id``."""
    return np.lexsort((np.asarray(sample_ids, dtype=str), np.asarray(dists)))


def _keep_mask(identity, camera, gallery: Sequence[GalleryEntry], cross_camera: bool) -> np.ndarray:
    if not cross_camera:
        return np.ones(len(gallery), bool)
    return np.array([not (g.identity == identity and g.camera == camera) for g in gallery], bool)


def rank_gallery(query, gallery: Sequence[GalleryEntry], query_identity: Optional[str] = None,
                 query_camera: Optional[str] = None, cross_camera: bool = True,
                 metric: str = "euclidean") -> List[GalleryEntry]:
    """Gallery entries in ascending distance to ``query`` after the camera filter."""
    keep = _keep_mask(query_identity, query_camera, gallery, cross_camera and query_identity is not None)
    kept = [g for g, k in zip(gallery, keep) if k]
    if not kept:
        raise ValueError("gallery is empty after cross-camera filtering")
    feats = np.stack([g.feature for g in kept])
    d = pairwise_distances(np.asarray(query, dtype=np.float64).reshape(1, -1), feats, metric)[0]
    order = rank_by_distance(d, [g.sample_id for g in kept])
    return [kept[i] for i in order]


def average_precision(hits: np.ndarray) -> float:
    """AP of a ranked boolean hit list: mean of precision at each correct hit."""
    ranks = np.flatnonzero(hits) + 1
    if len(ranks) == 0:
        return 0.0
    precisions = np.arange(1, len(ranks) + 1) / ranks
    return math.fsum(precisions.tolist()) / len(ranks)


def aggregate_queries(queries: Sequence[GalleryEntry]) -> List[GalleryEntry]:
    """Multi-query mode: one averaged feature per (identity, camera) group."""
    groups: Dict[tuple, List[GalleryEntry]] = OrderedDict()
    for q in queries:
        groups.setdefault((q.identity, q.camera), []).append(q)
    out = []
    for (ident, cam), members in groups.items():
        sid = min(m.sample_id for m in members)
        out.append(GalleryEntry(sid, ident, cam, np.mean([m.feature for m in members], axis=0)))
    return out


def evaluate(queries: Sequence[GalleryEntry], gallery: Sequence[GalleryEntry], mode: str = "single",
             metric: str = "euclidean", cross_camera: bool = True) -> EvalReport:
    """CMC at ranks 1/5/10/20 and mAP.

    Queries without any correct match in their filtered gallery are skipped
    with a warning and excluded from the counts.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "multi":
        queries = aggregate_queries(queries)
    if not gallery:
        raise ValueError("empty gallery")
    gfeat = np.stack([g.feature for g in gallery])
    gid = np.array([g.identity for g in gallery], dtype=object)
    gcam = np.array([g.camera for g in gallery], dtype=object)
    gsid = np.array([g.sample_id for g in gallery], dtype=str)
    qfeat = np.stack([q.feature for q in queries]) if queries else np.zeros((0, gfeat.shape[1]))
    dist = pairwise_distances(qfeat, gfeat, metric) if len(queries) else np.zeros((0, len(gallery)))

    first_hit = []
    aps = []
    for qi, q in enumerate(queries):
        keep = ~((gid == q.identity) & (gcam == q.camera)) if cross_camera else np.ones(len(gallery), bool)
        idx = np.flatnonzero(keep)
        if len(idx) == 0:
            log.warning("query %s: gallery empty after filtering; skipped", q.sample_id)
            continue
        order = idx[rank_by_distance(dist[qi, idx], gsid[idx])]
        hits = gid[order] == q.identity
        if not hits.any():
            log.warning("query %s: identity %s absent from gallery; skipped", q.sample_id, q.identity)
            continue
        first_hit.append(int(np.argmax(hits)) + 1)
        aps.append(average_precision(hits))
    n = len(first_hit)
    if n == 0:
        raise ValueError("no query has a correct match in the gallery")
    first = np.array(first_hit)
    cmc = {k: int(np.count_nonzero(first <= k)) / n for k in CMC_RANKS}
    return EvalReport(cmc, math.fsum(aps) / n, n)
