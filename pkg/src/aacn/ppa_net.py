"""Two-stage, three-branch part attention network at toy scale.

Stage 1 predicts keypoint maps ``K``, non-rigid attentions ``N`` and rigid
attentions ``R`` from the input features alone. Stage 2 predicts them again
from the features concatenated with every stage-1 map. Each branch is two
3x3 conv + ReLU layers followed by a 1x1 conv and a sigmoid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn_core as nn
from .pose_model import NUM_KEYPOINTS, NUM_NONRIGID, NUM_RIGID

log = logging.getLogger(__name__)

BRANCH_CHANNELS = {"K": NUM_KEYPOINTS, "N": NUM_NONRIGID, "R": NUM_RIGID}
_WEIGHT_KEY = {"K": None, "N": "mu1", "R": "mu2"}
# initial output bias; most cells are background and sigmoid(-2) ~ 0.12
PRIOR_LOGIT = -2.0


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class PpaLossWeights:
    mu1: float = 1.0
    mu2: float = 1.0

    def __post_init__(self):
        for name in ("mu1", "mu2"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and non-negative")


class PpaNet:
    """Two-stage, three-branch part attention network.

    Each branch is conv3x3 -> relu -> conv3x3 -> relu -> conv1x1 -> sigmoid.
    Stage 2 reads the input features concatenated with every stage-1 map.
    With ``residual=True`` (default) a stage-2 branch predicts a correction
    that is added to the matching stage-1 logits before the sigmoid; its
    output layer starts at zero so training begins with stage 2 equal to
    stage 1.
    """

    def __init__(self, in_channels: int, hidden: int = 16, use_keypoints: bool = True, seed: int = 0,
                 residual: bool = True):
        self.in_channels = in_channels
        self.hidden = hidden
        self.use_keypoints = use_keypoints
        self.residual = residual
        self.branches = tuple(b for b in ("K", "N", "R") if use_keypoints or b != "K")
        self.stage1_maps = sum(BRANCH_CHANNELS[b] for b in self.branches)
        rng = np.random.default_rng(seed)
        self.params: Dict[str, nn.Parameter] = {}
        for stage, c_in in ((1, in_channels), (2, in_channels + self.stage1_maps)):
            for b in self.branches:
                self._add_branch(f"s{stage}.{b}", c_in, BRANCH_CHANNELS[b], rng,
                                 correction=residual and stage == 2)

    def _add_branch(self, prefix, c_in, c_out, rng, correction=False):
        h = self.hidden
        for name, (o, i, k) in (("conv1", (h, c_in, 3)), ("conv2", (h, h, 3)), ("head", (c_out, h, 1))):
            w = nn.conv_weight(o, i, k, rng, f"{prefix}.{name}.w")
            bias = np.full(o, PRIOR_LOGIT if name == "head" else 0.0)
            if correction and name == "head":
                w.data[:] = 0.0
                bias[:] = 0.0
            self.params[f"{prefix}.{name}.w"] = w
            self.params[f"{prefix}.{name}.b"] = nn.Parameter(bias, f"{prefix}.{name}.b")

    def parameters(self) -> List[nn.Parameter]:
        return list(self.params.values())

    def _logits(self, prefix, x):
        p = self.params
        h = nn.relu(nn.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
        h = nn.relu(nn.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"]))
        return nn.conv2d(h, p[f"{prefix}.head.w"], p[f"{prefix}.head.b"])

    def forward(self, features) -> Tuple[Dict[str, nn.Tensor], Dict[str, nn.Tensor]]:
        """Run both stages on ``(N, C, H, W)`` (or ``(C, H, W)``) features."""
        x = nn.as_tensor(features)
        if x.data.ndim not in (3, 4) or x.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got shape {x.shape}")
        logits1 = {b: self._logits(f"s1.{b}", x) for b in self.branches}
        stage1 = {b: nn.sigmoid(v) for b, v in logits1.items()}
        axis = x.data.ndim - 3
        x2 = nn.concat([x] + [stage1[b] for b in self.branches], axis=axis)
        stage2 = {}
        for b in self.branches:
            z = self._logits(f"s2.{b}", x2)
            stage2[b] = nn.sigmoid(nn.add(logits1[b], z) if self.residual else z)
        return stage1, stage2

    def predict(self, features) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        s1, s2 = self.forward(features)
        return ({k: v.data for k, v in s1.items()}, {k: v.data for k, v in s2.items()})

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def stage_loss(outs: Dict[str, nn.Tensor], gt: Dict[str, np.ndarray], w: PpaLossWeights) -> nn.Tensor:
    """Loss of one stage: per-map squared error averaged over maps within each branch.

    With a leading batch axis the per-sample losses are averaged over the batch.
    """
    terms = []
    for b, pred in outs.items():
        target = np.asarray(gt[b], dtype=np.float64)
        if target.shape != pred.shape:
            raise ValueError(f"{b}: prediction grid {pred.shape} != target {target.shape}")
        n_samples = pred.data.size // (BRANCH_CHANNELS[b] * pred.shape[-2] * pred.shape[-1])
        term = nn.scale(nn.mse_loss(pred, target), 1.0 / (BRANCH_CHANNELS[b] * n_samples))
        key = _WEIGHT_KEY[b]
        if key is not None:
            term = nn.scale(term, getattr(w, key))
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = nn.add(total, t)
    return total


def ppa_loss(outs, gt: Dict[str, np.ndarray], w: PpaLossWeights = PpaLossWeights()) -> nn.Tensor:
    """Sum of the stage losses over both stages; ``outs`` is ``(stage1, stage2)``."""
    s1, s2 = outs
    return nn.add(stage_loss(s1, gt, w), stage_loss(s2, gt, w))


@dataclass
class PpaTrainConfig:
    epochs: int = 200
    lr: float = 0.05
    weights: PpaLossWeights = field(default_factory=PpaLossWeights)
    seed: int = 0
    hidden: int = 16
    use_keypoints: bool = True
    residual: bool = True
    batch_size: Optional[int] = None


@dataclass
class PpaTrainResult:
    net: PpaNet
    history: List[float]


def train_ppa(features: np.ndarray, targets: Dict[str, np.ndarray], cfg: PpaTrainConfig,
              net: Optional[PpaNet] = None) -> PpaTrainResult:
    """Full-batch (or minibatch) SGD on the two-stage multi-task loss.

    ``features`` is ``(N, C, H, W)``; ``targets`` maps ``K``/``N``/``R`` to
    ``(N, c, H, W)`` arrays. ``history[e]`` is the mean training loss measured
    during epoch ``e``.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 1:
        raise ValueError("train_ppa needs at least one sample")
    if net is None:
        net = PpaNet(features.shape[1], cfg.hidden, cfg.use_keypoints, cfg.seed, cfg.residual)
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.batch_size or n
    params = net.parameters()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            batch_gt = {b: targets[b][idx] for b in net.branches}
            try:
                loss = ppa_loss(net.forward(features[idx]), batch_gt, cfg.weights)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: forward pass diverged ({exc})") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}: loss became {value}")
            loss.backward()
            try:
                nn.sgd_step(params, cfg.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            total += value * len(idx)
        history.append(total / n)
        if epoch % 50 == 0:
            log.debug("ppa epoch %d loss %.4f", epoch, history[-1])
    return PpaTrainResult(net, history)


def evaluate_stages(net: PpaNet, features, targets, w: PpaLossWeights = PpaLossWeights()) -> Tuple[float, float]:
    """Stage-1 and stage-2 losses of a trained network on held-out data."""
    s1, s2 = net.forward(features)
    gt = {b: targets[b] for b in net.branches}
    return stage_loss(s1, gt, w).item(), stage_loss(s2, gt, w).item()
