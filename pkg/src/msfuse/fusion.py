"""Illumination-gated merging of the color and thermal stream outputs.

The color weight is w = iv / (1 + alpha * exp(-(iv - 0.5) / beta)) with
learnable alpha, beta > 0 (optimized in log space); the thermal weight is
1 - w. Scores and box offsets of the two streams are merged as convex
combinations, after which the usual threshold + NMS produces the final
detections. Baseline weighting modes (fixed 0.5/0.5 averaging and hard
0-1 switching at iv = 0.5) share the same merging path.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .boxes import encode_array, ioa_matrix, iou_matrix
from .detector import DetectorModel, ProposalConfig, StreamOutput, detector_forward

WEIGHTING_MODES = ("average", "hard01", "ia")


@dataclass
class GateParams:
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError(f"gate parameters must be positive, got {self}")


@dataclass(frozen=True)
class FusionWeights:
    """Convex pair (w_color, 1 - w_color); the thermal weight is derived,
    so the two always sum to 1 exactly."""

    color: float

    @property
    def thermal(self):
        return 1.0 - self.color


def gate(iv: float, p: GateParams) -> float:
    """Color-stream weight for an illumination value; iv is clamped to
    [0, 1]. Monotonically increasing in iv, bounded by 0 <= w <= iv."""
    iv = min(max(float(iv), 0.0), 1.0)
    return iv / (1.0 + p.alpha * np.exp(-(iv - 0.5) / p.beta))


def gate_grad_log(iv: float, p: GateParams):
    """(w, dw/dlog(alpha), dw/dlog(beta)) for the phase-2 optimizer."""
    iv = min(max(float(iv), 0.0), 1.0)
    z = iv - 0.5
    a = p.alpha * np.exp(-z / p.beta)
    denom = (1.0 + a) ** 2
    w = iv / (1.0 + a)
    dw_dlog_alpha = -iv * a / denom
    dw_dlog_beta = -iv * a * z / (p.beta * denom)
    return w, dw_dlog_alpha, dw_dlog_beta


def weights_for(mode: str, iv: float, p: GateParams = None) -> FusionWeights:
    if mode == "average":
        return FusionWeights(color=0.5)
    if mode == "hard01":
        return FusionWeights(color=1.0 if iv > 0.5 else 0.0)
    if mode == "ia":
        return FusionWeights(color=gate(iv, p if p is not None else GateParams()))
    raise ValueError(f"weighting mode must be one of {WEIGHTING_MODES}, got {mode!r}")


def fuse(out_color: StreamOutput, out_thermal: StreamOutput, w: FusionWeights) -> StreamOutput:
    """Convex combination of the two streams' scores and offsets over a
    shared, identically-ordered proposal set."""
    if out_color.scores.shape != out_thermal.scores.shape:
        raise ValueError(
            f"stream proposal sets differ: {out_color.scores.shape} vs {out_thermal.scores.shape}"
        )
    return StreamOutput(
        scores=w.color * out_color.scores + w.thermal * out_thermal.scores,
        offsets=w.color * out_color.offsets + w.thermal * out_thermal.offsets,
    )


# Phase-2 optimization ----------------------------------------------------


@dataclass
class GateTrainConfig:
    lr: float = 0.2
    lr_decay_epoch: int = 2
    epochs: int = 3
    seed: int = 0
    include_regression: bool = True  # smooth-L1 on fused offsets for positive rois
    roi_pos_iou: float = 0.5
    ignore_ioa: float = 0.5


@dataclass
class _ImageCache:
    iv: float
    scores_color: np.ndarray
    scores_thermal: np.ndarray
    offsets_color: np.ndarray
    offsets_thermal: np.ndarray
    labels: np.ndarray
    reg_targets: np.ndarray


def _build_cache(trunk: DetectorModel, ian, sample, cfg: GateTrainConfig,
                 proposal_cfg: ProposalConfig):
    result = detector_forward(trunk, sample.pair, proposal_cfg)
    if set(result.outputs) != {"color", "thermal"}:
        raise ValueError("gate optimization needs a two-stream (score2) trunk")
    rois = result.proposals
    keep = np.ones(len(rois), dtype=bool)
    if len(sample.ignore_boxes) and len(rois):
        keep = ioa_matrix(rois, sample.ignore_boxes).max(axis=1) <= cfg.ignore_ioa
    rois = rois[keep]
    labels = np.zeros(len(rois), dtype=int)
    reg_targets = np.zeros((len(rois), 4))
    if len(sample.gt_boxes) and len(rois):
        ious = iou_matrix(rois, sample.gt_boxes)
        best = ious.argmax(axis=1)
        labels = (ious.max(axis=1) >= cfg.roi_pos_iou).astype(int)
        pos = labels == 1
        if pos.any():
            reg_targets[pos] = encode_array(rois[pos], sample.gt_boxes[best[pos]])
    oc, ot = result.outputs["color"], result.outputs["thermal"]
    return _ImageCache(
        iv=ian.infer(sample.pair.color),
        scores_color=oc.scores[keep],
        scores_thermal=ot.scores[keep],
        offsets_color=oc.offsets[keep],
        offsets_thermal=ot.offsets[keep],
        labels=labels,
        reg_targets=reg_targets,
    )


def gate_loss_and_grad(cache: _ImageCache, p: GateParams, include_regression=True):
    """Detection loss on the fused outputs of one image and its analytic
    gradient w.r.t. (log alpha, log beta).

    The fused score vector is a convex combination of two probability
    vectors, so cross-entropy of it is well defined; regression adds
    smooth-L1 on the fused offsets of positive rois. The classification
    term is class-balanced (positives and negatives contribute equal
    halves): proposals are overwhelmingly easy negatives on which the two
    streams agree, and a plain mean over them would drown the gradient
    through the fusion weight.
    """
    n = len(cache.labels)
    if n == 0:
        return 0.0, 0.0, 0.0
    w, dwa, dwb = gate_grad_log(cache.iv, p)
    s = w * cache.scores_color + (1 - w) * cache.scores_thermal
    ds_dw = cache.scores_color - cache.scores_thermal
    picked = s[np.arange(n), cache.labels]
    picked_dw = ds_dw[np.arange(n), cache.labels]
    safe = picked > nn.LOG_FLOOR
    ce = -np.log(np.maximum(picked, nn.LOG_FLOOR))
    dce_dw = -np.where(safe, picked_dw / np.maximum(picked, nn.LOG_FLOOR), 0.0)
    groups = [cache.labels == 1, cache.labels == 0]
    present = [g for g in groups if g.any()]
    share = 1.0 / len(present)
    loss = float(sum(share * ce[g].mean() for g in present))
    dl_dw = float(sum(share * dce_dw[g].mean() for g in present))
    if include_regression:
        pos = cache.labels == 1
        npos = int(pos.sum())
        if npos:
            t = w * cache.offsets_color[pos] + (1 - w) * cache.offsets_thermal[pos]
            dt_dw = cache.offsets_color[pos] - cache.offsets_thermal[pos]
            reg_loss, dreg = nn.smooth_l1(t, cache.reg_targets[pos])
            loss += reg_loss / npos
            dl_dw += float((dreg * dt_dw).sum() / npos)
    return loss, dl_dw * dwa, dl_dw * dwb


def optimize_gate(trunk: DetectorModel, ian, dataset, cfg: GateTrainConfig = GateTrainConfig(),
                  init: GateParams = None,
                  proposal_cfg: ProposalConfig = ProposalConfig()):
    """Phase 2: fit (alpha, beta) of the gate by SGD on the detection loss
    of the fused outputs, with the trunk and the illumination network
    frozen. Returns (GateParams, per-epoch mean losses).
    """
    if not dataset:
        raise ValueError("gate optimization needs a non-empty dataset")
    caches = [_build_cache(trunk, ian, s, cfg, proposal_cfg) for s in dataset]
    rng = np.random.default_rng(cfg.seed)
    p = init if init is not None else GateParams()
    log_alpha = float(np.log(p.alpha))
    log_beta = float(np.log(p.beta))
    epoch_losses = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (0.1 if epoch >= cfg.lr_decay_epoch else 1.0)
        order = rng.permutation(len(caches))
        losses = []
        for idx in order:
            params = GateParams(alpha=float(np.exp(log_alpha)), beta=float(np.exp(log_beta)))
            loss, ga, gb = gate_loss_and_grad(caches[idx], params, cfg.include_regression)
            log_alpha -= lr * ga
            log_beta -= lr * gb
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return GateParams(alpha=float(np.exp(log_alpha)), beta=float(np.exp(log_beta))), epoch_losses


def save_gate(path, p: GateParams):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"alpha = {p.alpha!r}\nbeta = {p.beta!r}\n")


def load_gate(path) -> GateParams:
    values = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                key, _, value = line.partition("=")
                values[key.strip()] = float(value)
    if set(values) != {"alpha", "beta"}:
        raise ValueError(f"{path}: expected alpha and beta entries, got {sorted(values)}")
    return GateParams(alpha=values["alpha"], beta=values["beta"])
