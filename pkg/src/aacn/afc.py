"""Attention-aware feature alignment and visibility-weighted composition.

Alignment masks a global feature map with each part's max-normalized
attention, average-pools over the whole grid and concatenates the 14 part
vectors in canonical order. Composition estimates one weight per part from
the visibility scores and the aligned vector, scales each part block by its
weight and fuses the result with a linear layer into a 1024-d descriptor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import nn_core as nn
from .pose_model import NUM_PARTS

log = logging.getLogger(__name__)

OUT_DIM = 1024


def normalize_attention(m: np.ndarray) -> np.ndarray:
    """Divide by the map's maximum; an all-zero (absent) map stays all-zero."""
    m = np.asarray(m, dtype=np.float64)
    peak = m.max() if m.size else 0.0
    if peak <= 0:
        return np.zeros_like(m)
    return m / peak


def mask_and_pool(F: np.ndarray, m_norm: np.ndarray) -> np.ndarray:
    """``f[c] = sum_xy F[c] * m_norm / (H * W)``."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-2:] != np.shape(m_norm):
        raise ValueError(f"grid mismatch: features {F.shape[-2:]} vs attention {np.shape(m_norm)}")
    h, w = F.shape[-2:]
    return np.tensordot(F, m_norm, axes=([-2, -1], [0, 1])) / (h * w)


@dataclass
class PartFeatureSet:
    """Per-part pooled vectors ``(P, C)`` and raw visibility scores ``(P,)``."""

    features: np.ndarray
    visibility: np.ndarray
    cells: int

    @property
    def aligned(self) -> np.ndarray:
        return self.features.reshape(-1)


def align_features(F: np.ndarray, maps: Sequence[np.ndarray]) -> PartFeatureSet:
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != NUM_PARTS:
        raise ValueError(f"expected {NUM_PARTS} attention maps, got shape {maps.shape}")
    feats = np.stack([mask_and_pool(F, normalize_attention(m)) for m in maps])
    vis = np.abs(maps).sum(axis=(1, 2))
    return PartFeatureSet(feats, vis, maps.shape[1] * maps.shape[2])


def normalize_batch(maps: np.ndarray) -> np.ndarray:
    """:func:`normalize_attention` over ``(..., H, W)`` maps."""
    peak = maps.max(axis=(-2, -1), keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return np.where(peak > 0, maps / safe, 0.0)


def align_batch(F: np.ndarray, maps: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched alignment: ``F (N, C, H, W)`` and ``maps (N, P, H, W)`` to
    aligned features ``(N, P*C)`` and visibility ``(N, P)`` divided by ``H*W``."""
    n, c, h, w = F.shape
    if maps.shape[0] != n or maps.shape[2:] != (h, w):
        raise ValueError(f"grid mismatch: features {F.shape} vs attention {maps.shape}")
    mn = normalize_batch(maps).reshape(n, maps.shape[1], h * w)
    f = mn @ F.reshape(n, c, h * w).transpose(0, 2, 1) / (h * w)
    vis = np.abs(maps).sum(axis=(2, 3)) / (h * w)
    return f.reshape(n, -1), vis


def global_pool_batch(F: np.ndarray) -> np.ndarray:
    return F.mean(axis=(2, 3))


class CompositionHead:
    """Part-weight estimator followed by the 1x1 fusion layer.

    ``weight_fc`` maps ``[v_1..v_P, f^a]`` to ``P`` logits; a sigmoid turns them
    into weights. ``fuse`` maps the weighted ``P*C`` vector to ``out_dim``.
    Inputs to ``weight_fc`` pass through a fixed standardization
    (``in_mean``, ``in_scale``) that defaults to identity and can be fitted on
    training data with :meth:`fit_input_stats`.

    ``weight_fc`` starts at zero, so every part begins with weight 0.5 and the
    untrained head is a random projection of ``0.5 * f^a``.
    """

    def __init__(self, channels: int = 256, parts: int = NUM_PARTS, out_dim: int = OUT_DIM, seed: int = 0):
        self.channels, self.parts, self.out_dim = channels, parts, out_dim
        rng = np.random.default_rng(seed)
        d_in = parts + parts * channels
        self.params: Dict[str, nn.Parameter] = {
            "weight_fc.w": nn.Parameter(np.zeros((parts, d_in)), "weight_fc.w"),
            "weight_fc.b": nn.Parameter(np.zeros(parts), "weight_fc.b"),
            "fuse.w": nn.Parameter(nn.glorot_uniform((out_dim, parts * channels), parts * channels, out_dim, rng),
                                   "fuse.w"),
            "fuse.b": nn.Parameter(np.zeros(out_dim), "fuse.b"),
        }
        self.in_mean = np.zeros(d_in)
        self.in_scale = np.ones(d_in)

    def parameters(self) -> List[nn.Parameter]:
        return list(self.params.values())

    def fit_input_stats(self, vis: np.ndarray, aligned: np.ndarray) -> None:
        """Standardize each visibility score to unit variance and the whole
        aligned vector to unit total variance.

        Per-column standardization of all ``P*C`` feature columns would let
        them outvote the ``P`` visibility scores by a factor ``sqrt(P*C)``.
        """
        x = np.concatenate([vis, aligned], axis=1)
        self.in_mean = x.mean(axis=0)
        std = x.std(axis=0)
        scale = np.where(std > 1e-12, 1.0 / np.where(std > 1e-12, std, 1.0), 1.0)
        scale[self.parts:] /= np.sqrt(self.parts * self.channels)
        self.in_scale = scale

    def forward(self, vis, aligned) -> Tuple[nn.Tensor, nn.Tensor]:
        """``vis (N, P)`` (already divided by the cell count) and ``aligned (N, P*C)``."""
        aligned = nn.as_tensor(aligned)
        n = aligned.shape[0]
        if aligned.shape[1] != self.parts * self.channels:
            raise ValueError(f"aligned width {aligned.shape[1]} != {self.parts}x{self.channels}")
        x = nn.concat([nn.as_tensor(vis), aligned], axis=1)
        x = nn.mul(nn.sub(x, self.in_mean), self.in_scale)
        p = self.params
        w = nn.sigmoid(nn.linear(x, p["weight_fc.w"], p["weight_fc.b"]))
        blocks = nn.reshape(aligned, (n, self.parts, self.channels))
        weighted = nn.reshape(nn.mul(blocks, nn.reshape(w, (n, self.parts, 1))), (n, self.parts * self.channels))
        return nn.linear(weighted, p["fuse.w"], p["fuse.b"]), w

    def embed(self, vis: np.ndarray, aligned: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        out, w = self.forward(vis, aligned)
        return out.data, w.data

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.params.items()}
        state["weight_fc.in_mean"] = self.in_mean
        state["weight_fc.in_scale"] = self.in_scale
        return state

    def load_state_dict(self, state) -> None:
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        self.in_mean = np.asarray(state["weight_fc.in_mean"], dtype=np.float64).copy()
        self.in_scale = np.asarray(state["weight_fc.in_scale"], dtype=np.float64).copy()

    @classmethod
    def from_state_dict(cls, state) -> "CompositionHead":
        parts, d_in = state["weight_fc.w"].shape
        out_dim = state["fuse.w"].shape[0]
        head = cls((d_in - parts) // parts, parts, out_dim)
        head.load_state_dict(state)
        return head


def compose(parts: PartFeatureSet, head: CompositionHead) -> np.ndarray:
    """Composed descriptor of one image."""
    vis = (parts.visibility / parts.cells)[None]
    out, _ = head.embed(vis, parts.aligned[None])
    return out[0]


# -- training -----------------------------------------------------------------------

def contrastive_loss(emb: nn.Tensor, labels: Sequence, margin: float = 1.0) -> nn.Tensor:
    """Mean squared distance over positive pairs plus mean squared hinge
    ``max(0, margin - d)^2`` over negative pairs, all pairs of the batch."""
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    if not same.any() or same.all():
        raise ValueError("contrastive loss needs both positive and negative pairs")
    diff = nn.sub(nn.take_rows(emb, i), nn.take_rows(emb, j))
    d2 = nn.sum_axis(nn.square(diff), axis=1)
    pos_idx, neg_idx = np.nonzero(same)[0], np.nonzero(~same)[0]
    pos = nn.mean_all(nn.take_rows(d2, pos_idx))
    d_neg = nn.sqrt(nn.take_rows(d2, neg_idx), eps=1e-12)
    hinge = nn.relu(nn.sub(margin, d_neg))
    return nn.add(pos, nn.mean_all(nn.square(hinge)))


@dataclass
class CompositionTrainConfig:
    """``lr`` drives the fusion layer, ``weight_lr`` the part-weight estimator.

    The estimator sees standardized inputs and its gradient reaches it
    through a sigmoid and a per-part block product, so it needs a far larger
    step than the fusion layer.
    """
    epochs: int = 40
    lr: float = 0.05
    weight_lr: float = 10.0
    margin: float = 1.0
    seed: int = 0
    ids_per_batch: int = 16


def _identity_batches(labels: np.ndarray, ids_per_batch: int, rng) -> List[np.ndarray]:
    ids = np.unique(labels)
    ids = ids[rng.permutation(len(ids))]
    out = []
    for start in range(0, len(ids), ids_per_batch):
        chunk = ids[start:start + ids_per_batch]
        if len(chunk) < 2:
            # a lone identity has no negatives; fold it into the previous batch
            out[-1] = np.concatenate([out[-1], np.nonzero(np.isin(labels, chunk))[0]])
            continue
        out.append(np.nonzero(np.isin(labels, chunk))[0])
    return out


def train_composition(vis: np.ndarray, aligned: np.ndarray, labels: Sequence, head: CompositionHead,
                      cfg: CompositionTrainConfig = CompositionTrainConfig()) -> List[float]:
    """Train the head with the contrastive verification loss; returns per-epoch mean loss.

    ``vis`` is ``(N, P)`` already divided by the cell count.
    """
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ValueError("train_composition needs at least two identities (no negative pairs)")
    if counts.min() < 2:
        raise ValueError("every identity needs at least two samples")
    rng = np.random.default_rng(cfg.seed)
    p = head.params
    estimator = [p["weight_fc.w"], p["weight_fc.b"]]
    fusion = [p["fuse.w"], p["fuse.b"]]
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _identity_batches(labels, cfg.ids_per_batch, rng):
            emb, _ = head.forward(vis[idx], aligned[idx])
            loss = contrastive_loss(emb, labels[idx], cfg.margin)
            losses.append(loss.item())
            loss.backward()
            nn.sgd_step(estimator, cfg.weight_lr)
            nn.sgd_step(fusion, cfg.lr)
        history.append(float(np.mean(losses)))
        log.debug("composition epoch %d loss %.4f", epoch, history[-1])
    return history


def composition_loss(vis, aligned, labels, head: CompositionHead, margin: float = 1.0) -> float:
    emb, _ = head.forward(vis, aligned)
    return contrastive_loss(emb, labels, margin).item()


# -- toy global context network ------------------------------------------------------

class ToyGcn:
    """Three conv layers turning a small image into a ``channels``-deep feature map."""

    def __init__(self, in_channels: int, channels: int = 256, hidden: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        shapes = (("conv1", hidden, in_channels, 3), ("conv2", hidden, hidden, 3), ("conv3", channels, hidden, 1))
        self.params: Dict[str, nn.Parameter] = {}
        for name, o, i, k in shapes:
            self.params[f"{name}.w"] = nn.conv_weight(o, i, k, rng, f"gcn.{name}.w")
            self.params[f"{name}.b"] = nn.Parameter(np.zeros(o), f"gcn.{name}.b")

    def parameters(self) -> List[nn.Parameter]:
        return list(self.params.values())

    def forward(self, images) -> nn.Tensor:
        p = self.params
        h = nn.relu(nn.conv2d(images, p["conv1.w"], p["conv1.b"]))
        h = nn.relu(nn.conv2d(h, p["conv2.w"], p["conv2.b"]))
        return nn.conv2d(h, p["conv3.w"], p["conv3.b"])


def align_tensor(F: nn.Tensor, maps: np.ndarray) -> Tuple[nn.Tensor, np.ndarray]:
    """Differentiable :func:`align_batch` with respect to the feature map."""
    n, c, h, w = F.shape
    mn = normalize_batch(maps).reshape(n, maps.shape[1], h * w)
    pooled = nn.bmm(nn.reshape(F, (n, c, h * w)), mn.transpose(0, 2, 1))   # (N, C, P)
    fa = nn.reshape(nn.transpose(pooled, (0, 2, 1)), (n, -1))
    vis = np.abs(maps).sum(axis=(2, 3)) / (h * w)
    return nn.scale(fa, 1.0 / (h * w)), vis


def train_joint(images: np.ndarray, maps: np.ndarray, labels: Sequence, gcn: ToyGcn,
                head: CompositionHead, cfg: CompositionTrainConfig = CompositionTrainConfig()) -> List[float]:
    """Fine-tune the toy context network and the head together (attention fixed)."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("train_joint needs at least two identities")
    rng = np.random.default_rng(cfg.seed)
    estimator = [head.params["weight_fc.w"], head.params["weight_fc.b"]]
    rest = gcn.parameters() + [head.params["fuse.w"], head.params["fuse.b"]]
    history = []
    for _ in range(cfg.epochs):
        losses = []
        for idx in _identity_batches(labels, cfg.ids_per_batch, rng):
            fa, vis = align_tensor(gcn.forward(images[idx]), maps[idx])
            emb, _ = head.forward(vis, fa)
            loss = contrastive_loss(emb, labels[idx], cfg.margin)
            losses.append(loss.item())
            loss.backward()
            nn.sgd_step(estimator, cfg.weight_lr)
            nn.sgd_step(rest, cfg.lr)
        history.append(float(np.mean(losses)))
    return history
