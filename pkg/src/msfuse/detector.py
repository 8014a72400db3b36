"""Toy-scale two-stream detector.

A three-block convolutional backbone per stream (channels 16/32/64, 2x2
pooling after every block, so feature stride 8 on 64x64 inputs) feeds a
region proposal head and per-proposal detection heads. The point at which
the color and thermal streams merge is a configuration choice:

* ``input``    - the two images are stacked into one 4-channel input;
* ``early``    - feature maps are concatenated after block 1, with a 1x1
                 reduction conv, then share the remaining trunk;
* ``halfway``  - same, but after block 2 (the penultimate block);
* ``late``     - both streams run the full trunk; proposals come from the
                 concatenated final maps and the per-stream fc vectors are
                 concatenated before the classification/regression heads;
* ``score1``   - two independent detectors whose detections are re-scored
                 by the opposite stream and averaged (cascade);
* ``score2``   - shared proposals from the concatenated final maps, then
                 fully separate per-stream heads; the two score/offset sets
                 are merged downstream (averaged, or gated by illumination).

Each stream also carries a 1x1-conv segmentation layer used only as
training supervision (box-filled weak masks).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .boxes import decode_array, encode_array, ioa_matrix, iou_matrix, nms_array
from .imaging import ImagePair

ARCHITECTURES = ("input", "early", "halfway", "late", "score1", "score2")

BLOCK_CHANNELS = (16, 32, 64)
ROI_GRID = 6
HEAD_HIDDEN = 128
RPN_HIDDEN = 64


@dataclass(frozen=True)
class AnchorConfig:
    stride: int = 8
    scales: tuple = (32, 48, 60)  # anchor heights in pixels
    ratios: tuple = (1.0, 2.0)  # height/width; 0.5 (wide boxes) deliberately absent

    @property
    def per_cell(self):
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class SampleConfig:
    anchors_per_image: int = 120
    pos_fraction: float = 1.0 / 6.0  # positive:negative = 1:5
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    exclude_ignore: bool = True
    ignore_ioa: float = 0.5
    include_occluded: bool = True
    min_train_height: float = 50.0


@dataclass(frozen=True)
class ProposalConfig:
    nms_threshold: float = 0.3
    top_k: int = 300
    score_threshold: float = 0.05  # final-detection cutoff
    final_nms_threshold: float = 0.3


@dataclass(frozen=True)
class LossWeights:
    rpn: float = 1.0
    det_color: float = 1.0
    det_thermal: float = 1.0
    seg_color: float = 1.0
    seg_thermal: float = 1.0
    seg_roi_color: float = 1.0
    seg_roi_thermal: float = 1.0


@dataclass
class StreamOutput:
    """Per-proposal class scores (rows sum to 1), per-class box offsets,
    and the stream's segmentation probability map."""

    scores: np.ndarray  # (R, 2)
    offsets: np.ndarray  # (R, 4)
    seg_prob: np.ndarray = None  # (Hf, Wf)


@dataclass
class TrainSample:
    pair: ImagePair
    gt_boxes: np.ndarray  # (K, 4) xywh, already filtered for training
    ignore_boxes: np.ndarray  # (M, 4) regions never sampled


@dataclass
class TrainConfig:
    arch: str = "score2"
    lr: float = 0.001
    lr_decay_epoch: int = 4
    epochs: int = 6
    momentum: float = 0.9
    seed: int = 0
    rois_per_image: int = 32
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    train_top_k: int = 48  # proposals kept per image while training
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    sampling: SampleConfig = field(default_factory=SampleConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    weights: LossWeights = field(default_factory=LossWeights)


def make_train_sample(pair: ImagePair, gts, cfg: SampleConfig) -> TrainSample:
    """Split annotations into trainable pedestrian boxes and ignore
    regions: person entries tall enough and within the allowed occlusion
    become targets; person?/people/cyclist entries, too-small instances
    and excluded occlusion levels are never sampled."""
    gt_rows = []
    ignore_rows = []
    for gt in gts:
        box = [gt.bbox.x, gt.bbox.y, gt.bbox.w, gt.bbox.h]
        occ_ok = gt.occlusion == "none" or (cfg.include_occluded and gt.occlusion == "partial")
        if gt.label == "person" and gt.bbox.h >= cfg.min_train_height and occ_ok:
            gt_rows.append(box)
        else:
            ignore_rows.append(box)
    return TrainSample(
        pair=pair,
        gt_boxes=np.array(gt_rows, dtype=float).reshape(-1, 4),
        ignore_boxes=np.array(ignore_rows, dtype=float).reshape(-1, 4),
    )


# Anchors ------------------------------------------------------------------


def generate_anchors(feat_h, feat_w, cfg: AnchorConfig) -> np.ndarray:
    """All anchors for a feature grid, cell-major then (scale, ratio),
    centered at ((j+0.5)*stride, (i+0.5)*stride). Returns (N, 4) xywh."""
    if feat_h < 1 or feat_w < 1:
        raise ValueError("feature grid dimensions must be positive")
    shapes = []
    for s in cfg.scales:
        for r in cfg.ratios:
            h = float(s)
            w = h / r
            shapes.append((w, h))
    shapes = np.array(shapes)
    jj, ii = np.meshgrid(np.arange(feat_w), np.arange(feat_h))
    cx = (jj.reshape(-1) + 0.5) * cfg.stride
    cy = (ii.reshape(-1) + 0.5) * cfg.stride
    cx = np.repeat(cx, len(shapes))
    cy = np.repeat(cy, len(shapes))
    wh = np.tile(shapes, (feat_h * feat_w, 1))
    return np.stack([cx - 0.5 * wh[:, 0], cy - 0.5 * wh[:, 1], wh[:, 0], wh[:, 1]], axis=1)


@dataclass
class SampledAnchors:
    indices: np.ndarray  # (S,) anchor indices in the minibatch
    labels: np.ndarray  # (S,) 1 = pedestrian, 0 = background
    reg_targets: np.ndarray  # (S, 4); rows only meaningful where label == 1


def sample_anchors(anchors, gt_boxes, ignore_boxes, cfg: SampleConfig, rng) -> SampledAnchors:
    """Pick the RPN training minibatch: up to ``anchors_per_image`` anchors
    at the configured positive fraction. Anchors overlapping an ignore
    region (IoA > threshold) are never sampled; with no ground truth the
    batch is all-negative."""
    n = len(anchors)
    allowed = np.ones(n, dtype=bool)
    if cfg.exclude_ignore and len(ignore_boxes):
        allowed &= ioa_matrix(anchors, ignore_boxes).max(axis=1) <= cfg.ignore_ioa
    if len(gt_boxes):
        ious = iou_matrix(anchors, gt_boxes)
        best_gt = ious.argmax(axis=1)
        max_iou = ious.max(axis=1)
        pos_mask = allowed & (max_iou >= cfg.pos_iou)
        # every gt keeps its single best anchor, even below the threshold
        for g in range(len(gt_boxes)):
            a = int(ious[:, g].argmax())
            if allowed[a]:
                pos_mask[a] = True
                best_gt[a] = g
        neg_mask = allowed & (max_iou < cfg.neg_iou) & ~pos_mask
    else:
        best_gt = np.zeros(n, dtype=int)
        pos_mask = np.zeros(n, dtype=bool)
        neg_mask = allowed
    n_pos_wanted = int(round(cfg.anchors_per_image * cfg.pos_fraction))
    pos_idx = np.flatnonzero(pos_mask)
    if len(pos_idx) > n_pos_wanted:
        pos_idx = rng.choice(pos_idx, size=n_pos_wanted, replace=False)
    neg_idx = np.flatnonzero(neg_mask)
    n_neg_wanted = cfg.anchors_per_image - len(pos_idx)
    if len(neg_idx) > n_neg_wanted:
        neg_idx = rng.choice(neg_idx, size=n_neg_wanted, replace=False)
    indices = np.concatenate([pos_idx, neg_idx]).astype(int)
    labels = np.concatenate([np.ones(len(pos_idx), dtype=int), np.zeros(len(neg_idx), dtype=int)])
    targets = np.zeros((len(indices), 4))
    if len(pos_idx):
        targets[: len(pos_idx)] = encode_array(anchors[pos_idx], gt_boxes[best_gt[pos_idx]])
    return SampledAnchors(indices=indices, labels=labels, reg_targets=targets)


# RoI pooling ----------------------------------------------------------------


def roi_pool(fmap, rois, stride, out=ROI_GRID):
    """Max-pool each roi's feature-space footprint onto an out x out grid.

    fmap is (H, W, C); rois are (R, 4) xywh in image coordinates. Returns
    (pooled (R, out, out, C), argmax (R, out, out, C, 2) cell coords).
    Rois entirely outside the map raise; empty bins fall back to the
    nearest in-range cell so every bin stays total.
    """
    h, w, c = fmap.shape
    rois = np.asarray(rois, dtype=float).reshape(-1, 4)
    r = len(rois)
    pooled = np.zeros((r, out, out, c))
    argmax = np.zeros((r, out, out, c, 2), dtype=np.int32)
    for k in range(r):
        x1, y1 = rois[k, 0] / stride, rois[k, 1] / stride
        x2, y2 = (rois[k, 0] + rois[k, 2]) / stride, (rois[k, 1] + rois[k, 3]) / stride
        if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
            raise ValueError(f"roi {rois[k]} lies outside the feature map")
        bw = (x2 - x1) / out
        bh = (y2 - y1) / out
        for i in range(out):
            ys = int(np.floor(y1 + i * bh))
            ye = int(np.ceil(y1 + (i + 1) * bh))
            ys, ye = max(ys, 0), min(ye, h)
            if ys >= ye:
                ys = min(max(ys, 0), h - 1)
                ye = ys + 1
            for j in range(out):
                xs = int(np.floor(x1 + j * bw))
                xe = int(np.ceil(x1 + (j + 1) * bw))
                xs, xe = max(xs, 0), min(xe, w)
                if xs >= xe:
                    xs = min(max(xs, 0), w - 1)
                    xe = xs + 1
                window = fmap[ys:ye, xs:xe, :].reshape(-1, c)
                flat = window.argmax(axis=0)
                pooled[k, i, j] = window[flat, np.arange(c)]
                argmax[k, i, j, :, 0] = ys + flat // (xe - xs)
                argmax[k, i, j, :, 1] = xs + flat % (xe - xs)
    return pooled, argmax


def roi_pool_backward(fmap_shape, argmax, dpooled):
    dfmap = np.zeros(fmap_shape)
    r, out, _, c, _ = argmax.shape
    ys = argmax[..., 0].reshape(-1)
    xs = argmax[..., 1].reshape(-1)
    cc = np.tile(np.arange(c), r * out * out)
    np.add.at(dfmap, (ys, xs, cc), dpooled.reshape(-1))
    return dfmap


# Segmentation targets -------------------------------------------------------


def seg_target(gt_boxes, feat_h, feat_w, stride):
    """Box-filled foreground mask at feature resolution: a cell is
    foreground iff its center lies inside some ground-truth box."""
    mask = np.zeros((feat_h, feat_w))
    if len(gt_boxes) == 0:
        return mask
    cx = (np.arange(feat_w) + 0.5) * stride
    cy = (np.arange(feat_h) + 0.5) * stride
    for x, y, w, h in np.asarray(gt_boxes, dtype=float).reshape(-1, 4):
        inside_x = (cx >= x) & (cx < x + w)
        inside_y = (cy >= y) & (cy < y + h)
        mask[np.ix_(inside_y, inside_x)] = 1.0
    return mask


def seg_target_roi(gt_boxes, rois, out=ROI_GRID):
    """Per-roi variant of seg_target on the roi's out x out bin centers."""
    rois = np.asarray(rois, dtype=float).reshape(-1, 4)
    masks = np.zeros((len(rois), out, out))
    gt = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    for k, (rx, ry, rw, rh) in enumerate(rois):
        cx = rx + (np.arange(out) + 0.5) * rw / out
        cy = ry + (np.arange(out) + 0.5) * rh / out
        for x, y, w, h in gt:
            inside_x = (cx >= x) & (cx < x + w)
            inside_y = (cy >= y) & (cy < y + h)
            masks[k][np.ix_(inside_y, inside_x)] = 1.0
    return masks


# Model ----------------------------------------------------------------------


def _conv_block(name, cin, cout, rng):
    return [
        nn.Conv2D(f"{name}.a", 3, 3, cin, cout, rng),
        nn.ReLU(),
        nn.Conv2D(f"{name}.b", 3, 3, cout, cout, rng),
        nn.ReLU(),
        nn.MaxPool2x2(),
    ]


class _Rpn:
    def __init__(self, name, cin, anchors_per_cell, rng):
        self.conv = nn.Sequential(
            [nn.Conv2D(f"{name}.conv", 3, 3, cin, RPN_HIDDEN, rng), nn.ReLU()]
        )
        self.cls = nn.Conv2D(f"{name}.cls", 1, 1, RPN_HIDDEN, 2 * anchors_per_cell, rng)
        self.reg = nn.Conv2D(f"{name}.reg", 1, 1, RPN_HIDDEN, 4 * anchors_per_cell, rng)
        self._hidden = None

    def params(self):
        return self.conv.params() + self.cls.params() + self.reg.params()

    def forward(self, fmap):
        hidden = self.conv.forward(fmap[None])
        self._hidden = hidden
        cls = self.cls.forward(hidden)[0]
        reg = self.reg.forward(hidden)[0]
        h, w, _ = cls.shape
        return cls.reshape(h * w * (cls.shape[2] // 2), 2), reg.reshape(-1, 4)

    def backward(self, dcls, dreg, feat_shape):
        h, w = feat_shape
        dhid = self.cls.backward(dcls.reshape(1, h, w, -1))
        dhid = dhid + self.reg.backward(dreg.reshape(1, h, w, -1))
        return self.conv.backward(dhid)[0]


class _DetHead:
    def __init__(self, name, cin, rng):
        self.fc1 = nn.Dense(f"{name}.fc1", ROI_GRID * ROI_GRID * cin, HEAD_HIDDEN, rng)
        self.relu = nn.ReLU()
        self.cls = nn.Dense(f"{name}.cls", HEAD_HIDDEN, 2, rng)
        self.reg = nn.Dense(f"{name}.reg", HEAD_HIDDEN, 4, rng)

    def params(self):
        return self.fc1.params() + self.cls.params() + self.reg.params()

    def forward(self, pooled_flat):
        hidden = self.relu.forward(self.fc1.forward(pooled_flat))
        return self.cls.forward(hidden), self.reg.forward(hidden)

    def backward(self, dcls, dreg):
        dhid = self.cls.backward(dcls) + self.reg.backward(dreg)
        return self.fc1.backward(self.relu.backward(dhid))


class _LateHead:
    """Per-stream fc layers whose outputs are concatenated before shared
    classification/regression heads."""

    def __init__(self, cin, rng):
        self.fc_color = nn.Dense("head.fc1_color", ROI_GRID * ROI_GRID * cin, HEAD_HIDDEN, rng)
        self.fc_thermal = nn.Dense("head.fc1_thermal", ROI_GRID * ROI_GRID * cin, HEAD_HIDDEN, rng)
        self.relu_c = nn.ReLU()
        self.relu_t = nn.ReLU()
        self.cls = nn.Dense("head.cls", 2 * HEAD_HIDDEN, 2, rng)
        self.reg = nn.Dense("head.reg", 2 * HEAD_HIDDEN, 4, rng)

    def params(self):
        return (
            self.fc_color.params()
            + self.fc_thermal.params()
            + self.cls.params()
            + self.reg.params()
        )

    def forward(self, pooled_color, pooled_thermal):
        hc = self.relu_c.forward(self.fc_color.forward(pooled_color))
        ht = self.relu_t.forward(self.fc_thermal.forward(pooled_thermal))
        hidden = np.concatenate([hc, ht], axis=1)
        return self.cls.forward(hidden), self.reg.forward(hidden)

    def backward(self, dcls, dreg):
        dhid = self.cls.backward(dcls) + self.reg.backward(dreg)
        dc = self.fc_color.backward(self.relu_c.backward(dhid[:, :HEAD_HIDDEN]))
        dt = self.fc_thermal.backward(self.relu_t.backward(dhid[:, HEAD_HIDDEN:]))
        return dc, dt


class DetectorModel:
    """Two-stream detector; see the module docstring for the fusion
    points selected by ``arch``."""

    def __init__(self, arch, rng, anchor_cfg: AnchorConfig = AnchorConfig()):
        if arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}, got {arch!r}")
        self.arch = arch
        self.anchor_cfg = anchor_cfg
        c1, c2, c3 = BLOCK_CHANNELS
        a = anchor_cfg.per_cell
        self._cache = {}

        def blocks(prefix, cin, chans):
            out = []
            for k, cout in enumerate(chans, start=1):
                out.append(nn.Sequential(_conv_block(f"{prefix}.block{k}", cin, cout, rng)))
                cin = cout
            return out

        self.seg = {}
        if arch == "input":
            self.trunk = blocks("trunk", 4, (c1, c2, c3))
            self.rpn = {"shared": _Rpn("rpn", c3, a, rng)}
            self.heads = {"fused": _DetHead("head", c3, rng)}
            self.seg = {"fused": nn.Conv2D("seg.fused", 1, 1, c3, 1, rng)}
        elif arch in ("early", "halfway"):
            split = 1 if arch == "early" else 2
            self.color_blocks = blocks("color", 3, BLOCK_CHANNELS[:split])
            self.thermal_blocks = blocks("thermal", 1, BLOCK_CHANNELS[:split])
            fused_in = 2 * BLOCK_CHANNELS[split - 1]
            nin_out = BLOCK_CHANNELS[split - 1]
            self.nin = nn.Sequential(
                [nn.Conv2D("nin", 1, 1, fused_in, nin_out, rng), nn.ReLU()]
            )
            self.trunk = blocks("trunk", nin_out, BLOCK_CHANNELS[split:])
            self.rpn = {"shared": _Rpn("rpn", c3, a, rng)}
            self.heads = {"fused": _DetHead("head", c3, rng)}
            self.seg = {"fused": nn.Conv2D("seg.fused", 1, 1, c3, 1, rng)}
        else:  # late, score1, score2
            self.color_blocks = blocks("color", 3, BLOCK_CHANNELS)
            self.thermal_blocks = blocks("thermal", 1, BLOCK_CHANNELS)
            self.seg = {
                "color": nn.Conv2D("seg.color", 1, 1, c3, 1, rng),
                "thermal": nn.Conv2D("seg.thermal", 1, 1, c3, 1, rng),
            }
            if arch == "score1":
                self.rpn = {
                    "color": _Rpn("rpn.color", c3, a, rng),
                    "thermal": _Rpn("rpn.thermal", c3, a, rng),
                }
                self.heads = {
                    "color": _DetHead("head.color", c3, rng),
                    "thermal": _DetHead("head.thermal", c3, rng),
                }
            elif arch == "score2":
                self.rpn = {"shared": _Rpn("rpn", 2 * c3, a, rng)}
                self.heads = {
                    "color": _DetHead("head.color", c3, rng),
                    "thermal": _DetHead("head.thermal", c3, rng),
                }
            else:  # late
                self.rpn = {"shared": _Rpn("rpn", 2 * c3, a, rng)}
                self.heads = {"late": _LateHead(c3, rng)}

    # -- parameters --------------------------------------------------------

    def params(self):
        out = []
        for attr in ("trunk", "color_blocks", "thermal_blocks"):
            for block in getattr(self, attr, []):
                out.extend(block.params())
        if hasattr(self, "nin"):
            out.extend(self.nin.params())
        for rpn in self.rpn.values():
            out.extend(rpn.params())
        for head in self.heads.values():
            out.extend(head.params())
        for seg in self.seg.values():
            out.extend(seg.params())
        return out

    def named_params(self):
        return {p.name: p.value for p in self.params()}

    def save(self, path):
        meta = {
            "model": "detector",
            "arch": self.arch,
            "stride": str(self.anchor_cfg.stride),
            "scales": ",".join(str(s) for s in self.anchor_cfg.scales),
            "ratios": ",".join(str(r) for r in self.anchor_cfg.ratios),
        }
        nn.save_checkpoint(path, self.named_params(), meta)

    @classmethod
    def load(cls, path):
        named, meta = nn.load_checkpoint(path)
        if meta.get("model") != "detector":
            raise ValueError(f"{path}: not a detector checkpoint")
        cfg = AnchorConfig(
            stride=int(meta["stride"]),
            scales=tuple(float(s) for s in meta["scales"].split(",")),
            ratios=tuple(float(r) for r in meta["ratios"].split(",")),
        )
        model = cls(meta["arch"], np.random.default_rng(0), cfg)
        for p in model.params():
            if p.name not in named:
                raise ValueError(f"{path}: missing parameter {p.name}")
            p.value[...] = named[p.name]
        return model

    # -- feature extraction --------------------------------------------------

    def _inputs(self, pair: ImagePair):
        xc = pair.color.data.astype(np.float64)[None] / 255.0
        xt = pair.thermal.data.astype(np.float64)[None] / 255.0
        h, w = pair.color.height, pair.color.width
        if h % self.anchor_cfg.stride or w % self.anchor_cfg.stride:
            raise ValueError(
                f"image size {h}x{w} must be divisible by the feature stride "
                f"{self.anchor_cfg.stride}"
            )
        return xc, xt

    def _features(self, xc, xt):
        """Run the trunk; returns (stream final maps, RPN input maps).

        Caches live inside the layers, so one forward pass per step.
        """
        if self.arch == "input":
            x = np.concatenate([xc, xt], axis=3)
            for block in self.trunk:
                x = block.forward(x)
            fmap = x[0]
            return {"fused": fmap}, {"shared": fmap}
        if self.arch in ("early", "halfway"):
            c, t = xc, xt
            for block in self.color_blocks:
                c = block.forward(c)
            for block in self.thermal_blocks:
                t = block.forward(t)
            self._cache["split_channels"] = c.shape[3]
            x = self.nin.forward(np.concatenate([c, t], axis=3))
            for block in self.trunk:
                x = block.forward(x)
            fmap = x[0]
            return {"fused": fmap}, {"shared": fmap}
        c, t = xc, xt
        for block in self.color_blocks:
            c = block.forward(c)
        for block in self.thermal_blocks:
            t = block.forward(t)
        maps = {"color": c[0], "thermal": t[0]}
        if self.arch == "score1":
            return maps, {"color": maps["color"], "thermal": maps["thermal"]}
        return maps, {"shared": np.concatenate([maps["color"], maps["thermal"]], axis=2)}

    def _features_backward(self, d_maps):
        """Propagate summed gradients on the stream final maps back through
        the trunk(s). d_maps keys mirror _features' first return value."""
        if self.arch == "input":
            dx = d_maps["fused"][None]
            for block in reversed(self.trunk):
                dx = block.backward(dx)
            return
        if self.arch in ("early", "halfway"):
            dx = d_maps["fused"][None]
            for block in reversed(self.trunk):
                dx = block.backward(dx)
            dcat = self.nin.backward(dx)
            split = self._cache["split_channels"]
            dc, dt = dcat[..., :split], dcat[..., split:]
            for block in reversed(self.color_blocks):
                dc = block.backward(dc)
            for block in reversed(self.thermal_blocks):
                dt = block.backward(dt)
            return
        dc = d_maps["color"][None]
        dt = d_maps["thermal"][None]
        for block in reversed(self.color_blocks):
            dc = block.backward(dc)
        for block in reversed(self.thermal_blocks):
            dt = block.backward(dt)


# Proposal machinery ---------------------------------------------------------


def _clip_boxes(boxes, img_h, img_w):
    x1 = np.clip(boxes[:, 0], 0, img_w - 1)
    y1 = np.clip(boxes[:, 1], 0, img_h - 1)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 1, img_w)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 1, img_h)
    w = np.maximum(x2 - x1, 1.0)
    h = np.maximum(y2 - y1, 1.0)
    return np.stack([x1, y1, w, h], axis=1)


def proposals_from_rpn(anchors, cls_logits, reg, img_h, img_w, cfg: ProposalConfig):
    """Decode, clip, score and NMS the RPN output into proposals."""
    probs = nn.softmax(cls_logits)[:, 1]
    boxes = _clip_boxes(decode_array(anchors, reg), img_h, img_w)
    keep = nms_array(boxes, probs, cfg.nms_threshold)[: cfg.top_k]
    return boxes[keep], probs[keep]


# Training ---------------------------------------------------------------


@dataclass
class FrozenTargets:
    """Everything stochastic or selection-based in one training step,
    fixed up front so the loss is a deterministic, differentiable function
    of the parameters (finite-difference checkable)."""

    sampled: SampledAnchors
    rois: np.ndarray  # (R, 4)
    roi_labels: np.ndarray  # (R,)
    roi_reg_targets: np.ndarray  # (R, 4), meaningful where label == 1
    gt_boxes: np.ndarray
    dropout_seed: int = 0


def prepare_targets(model: DetectorModel, sample: TrainSample, cfg: TrainConfig, rng):
    """Run a forward pass purely to select the anchor minibatch and the
    roi set for this image. Selection only; gradients never flow here."""
    xc, xt = model._inputs(sample.pair)
    maps, rpn_inputs = model._features(xc, xt)
    any_map = next(iter(maps.values()))
    feat_h, feat_w = any_map.shape[:2]
    anchors = generate_anchors(feat_h, feat_w, cfg.anchors)
    sampled = sample_anchors(anchors, sample.gt_boxes, sample.ignore_boxes, cfg.sampling, rng)
    img_h, img_w = sample.pair.color.height, sample.pair.color.width

    proposal_sets = []
    for name, rpn in model.rpn.items():
        cls_logits, reg = rpn.forward(rpn_inputs[name])
        train_cfg = replace(cfg.proposals, top_k=cfg.train_top_k)
        boxes, _ = proposals_from_rpn(anchors, cls_logits, reg, img_h, img_w, train_cfg)
        proposal_sets.append(boxes)
    rois = np.concatenate(proposal_sets, axis=0)
    if len(sample.gt_boxes):
        rois = np.concatenate([rois, sample.gt_boxes], axis=0)

    # drop rois sitting on ignore regions, then label against gt
    if cfg.sampling.exclude_ignore and len(sample.ignore_boxes):
        ok = ioa_matrix(rois, sample.ignore_boxes).max(axis=1) <= cfg.sampling.ignore_ioa
        rois = rois[ok]
    labels = np.zeros(len(rois), dtype=int)
    reg_targets = np.zeros((len(rois), 4))
    if len(sample.gt_boxes) and len(rois):
        ious = iou_matrix(rois, sample.gt_boxes)
        best = ious.argmax(axis=1)
        labels = (ious.max(axis=1) >= cfg.roi_pos_iou).astype(int)
        pos = labels == 1
        if pos.any():
            reg_targets[pos] = encode_array(rois[pos], sample.gt_boxes[best[pos]])

    # subsample to the per-image roi budget at the positive fraction
    n_pos_wanted = int(round(cfg.rois_per_image * cfg.roi_pos_fraction))
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    if len(pos_idx) > n_pos_wanted:
        pos_idx = rng.choice(pos_idx, size=n_pos_wanted, replace=False)
    n_neg_wanted = max(cfg.rois_per_image - len(pos_idx), 1)
    if len(neg_idx) > n_neg_wanted:
        neg_idx = rng.choice(neg_idx, size=n_neg_wanted, replace=False)
    keep = np.concatenate([pos_idx, neg_idx]).astype(int)
    return FrozenTargets(
        sampled=sampled,
        rois=rois[keep],
        roi_labels=labels[keep],
        roi_reg_targets=reg_targets[keep],
        gt_boxes=np.asarray(sample.gt_boxes, dtype=float).reshape(-1, 4),
        dropout_seed=int(rng.integers(2**31 - 1)),
    )


def _detection_loss(cls_logits, reg, labels, reg_targets):
    """Cross-entropy over all rois plus smooth-L1 over positives
    (averaged per positive). Returns (ce, reg, dcls, dreg)."""
    ce, dcls = nn.softmax_ce(cls_logits, labels)
    dreg = np.zeros_like(reg)
    reg_loss = 0.0
    pos = labels == 1
    npos = int(pos.sum())
    if npos:
        l, g = nn.smooth_l1(reg[pos], reg_targets[pos])
        reg_loss = l / npos
        dreg[pos] = g / npos
    return ce, reg_loss, dcls, dreg


def _seg_image_loss(seg_layer, fmap, mask):
    logits = seg_layer.forward(fmap[None])[0, :, :, 0]
    prob = nn.sigmoid(logits)
    loss, dprob = nn.binary_ce(prob, mask)
    dlogits = dprob * prob * (1 - prob)
    return loss, prob, dlogits


def joint_loss(parts, weights: LossWeights):
    """Combine named loss terms with their weights; parts maps term name
    to raw scalar. Returns (total, weighted breakdown)."""
    mapping = {
        "rpn": weights.rpn,
        "det_color": weights.det_color,
        "det_thermal": weights.det_thermal,
        "det_fused": weights.det_color,
        "seg_color": weights.seg_color,
        "seg_thermal": weights.seg_thermal,
        "seg_fused": weights.seg_color,
        "seg_roi_color": weights.seg_roi_color,
        "seg_roi_thermal": weights.seg_roi_thermal,
        "seg_roi_fused": weights.seg_roi_color,
    }
    breakdown = {}
    total = 0.0
    for name, value in parts.items():
        lam = mapping[name]
        breakdown[name] = lam * value
        total += lam * value
    return total, breakdown


def loss_step(model: DetectorModel, sample: TrainSample, targets: FrozenTargets,
              cfg: TrainConfig, compute_grads=True):
    """Forward the full joint loss for one image against frozen targets;
    optionally backpropagate into the parameter gradients.

    Returns (total, breakdown dict of weighted terms).
    """
    xc, xt = model._inputs(sample.pair)
    maps, rpn_inputs = model._features(xc, xt)
    any_map = next(iter(maps.values()))
    feat_h, feat_w = any_map.shape[:2]
    anchors = generate_anchors(feat_h, feat_w, cfg.anchors)
    w = cfg.weights

    parts = {}
    d_maps = {name: np.zeros_like(m) for name, m in maps.items()}
    d_rpn_inputs = {}

    # --- RPN term(s) ---
    sampled = targets.sampled
    rpn_total = 0.0
    for name, rpn in model.rpn.items():
        cls_logits, reg = rpn.forward(rpn_inputs[name])
        ce, reg_loss, dce, dreg_rows = _detection_loss(
            cls_logits[sampled.indices], reg[sampled.indices],
            sampled.labels, sampled.reg_targets,
        )
        rpn_total += ce + reg_loss
        if compute_grads:
            dcls = np.zeros_like(cls_logits)
            dreg = np.zeros_like(reg)
            np.add.at(dcls, sampled.indices, w.rpn * dce)
            np.add.at(dreg, sampled.indices, w.rpn * dreg_rows)
            d_rpn_inputs[name] = rpn.backward(dcls, dreg, (feat_h, feat_w))
    parts["rpn"] = rpn_total

    # --- detection heads over the frozen rois ---
    rois = targets.rois
    stride = cfg.anchors.stride
    have_rois = len(rois) > 0
    pooled = {}
    pool_argmax = {}
    for name in maps:
        if have_rois:
            pooled[name], pool_argmax[name] = roi_pool(maps[name], rois, stride)

    def head_stream(out_name, head, pooled_maps):
        """pooled_maps: list of (map name, pooled tensor) feeding the head."""
        flats = [p.reshape(len(rois), -1) for _, p in pooled_maps]
        if isinstance(head, _LateHead):
            cls_logits, reg = head.forward(*flats)
        else:
            cls_logits, reg = head.forward(flats[0])
        ce, reg_loss, dcls, dreg = _detection_loss(
            cls_logits, reg, targets.roi_labels, targets.roi_reg_targets
        )
        lam = w.det_thermal if out_name == "det_thermal" else w.det_color
        parts[out_name] = ce + reg_loss
        if compute_grads:
            if isinstance(head, _LateHead):
                dflats = head.backward(lam * dcls, lam * dreg)
            else:
                dflats = (head.backward(lam * dcls, lam * dreg),)
            for (map_name, p), dflat in zip(pooled_maps, dflats):
                d_maps[map_name] += roi_pool_backward(
                    maps[map_name].shape, pool_argmax[map_name], dflat.reshape(p.shape)
                )

    if not have_rois:
        pass
    elif model.arch in ("input", "early", "halfway"):
        head_stream("det_fused", model.heads["fused"], [("fused", pooled["fused"])])
    elif model.arch == "late":
        head_stream(
            "det_fused",
            model.heads["late"],
            [("color", pooled["color"]), ("thermal", pooled["thermal"])],
        )
    else:  # score1, score2: independent per-stream heads on shared rois
        head_stream("det_color", model.heads["color"], [("color", pooled["color"])])
        head_stream("det_thermal", model.heads["thermal"], [("thermal", pooled["thermal"])])

    # --- segmentation supervision ---
    mask = seg_target(targets.gt_boxes, feat_h, feat_w, stride)
    roi_masks = seg_target_roi(targets.gt_boxes, rois)
    for name, seg_layer in model.seg.items():
        lam_img = w.seg_thermal if name == "thermal" else w.seg_color
        lam_roi = w.seg_roi_thermal if name == "thermal" else w.seg_roi_color
        logits = seg_layer.forward(maps[name][None])[0, :, :, 0]
        prob = nn.sigmoid(logits)
        img_loss, dprob = nn.binary_ce(prob, mask)
        parts[f"seg_{name}"] = img_loss

        if have_rois:
            pooled_logits, seg_argmax = roi_pool(logits[:, :, None], rois, stride)
            roi_prob = nn.sigmoid(pooled_logits[..., 0])
            roi_loss, droi_prob = nn.binary_ce(roi_prob, roi_masks)
            parts[f"seg_roi_{name}"] = roi_loss

        if compute_grads:
            dlogits = lam_img * dprob * prob * (1 - prob)
            if have_rois:
                lam_roi_grad = lam_roi * droi_prob * roi_prob * (1 - roi_prob)
                dlogits = dlogits + roi_pool_backward(
                    (feat_h, feat_w, 1), seg_argmax, lam_roi_grad[..., None]
                )[:, :, 0]
            d_maps[name] += seg_layer.backward(dlogits[None, :, :, None])[0]

    total, breakdown = joint_loss(parts, w)

    if compute_grads:
        for name, d in d_rpn_inputs.items():
            if name == "shared" and model.arch in ("late", "score2"):
                c3 = BLOCK_CHANNELS[-1]
                d_maps["color"] += d[..., :c3]
                d_maps["thermal"] += d[..., c3:]
            elif name in d_maps:
                d_maps[name] += d
            else:  # single-trunk archs name their map "fused"
                d_maps["fused"] += d
        model._features_backward(d_maps)

    return total, breakdown


def train_detector(dataset, cfg: TrainConfig, progress=None):
    """Phase-1 training: image-centric SGD over the joint loss.

    Returns (model, loss_log) where loss_log is one dict per epoch with
    the epoch's mean weighted terms and the learning rate used.
    Deterministic given cfg.seed.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    model = DetectorModel(cfg.arch, rng, cfg.anchors)
    params = model.params()
    optimizer = nn.SGD(cfg.lr, cfg.momentum)
    loss_log = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (0.1 if epoch >= cfg.lr_decay_epoch else 1.0)
        optimizer.lr = lr
        order = rng.permutation(len(dataset))
        sums = {}
        totals = []
        for step, idx in enumerate(order):
            sample = dataset[idx]
            targets = prepare_targets(model, sample, cfg, rng)
            nn.zero_grads(params)
            total, breakdown = loss_step(model, sample, targets, cfg)
            optimizer.step(params)
            totals.append(total)
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
            if progress is not None:
                progress(epoch, step, total)
        entry = {k: v / len(order) for k, v in sums.items()}
        entry["total"] = float(np.mean(totals))
        entry["lr"] = lr
        loss_log.append(entry)
    return model, loss_log


# Inference ------------------------------------------------------------------


@dataclass
class DetectorResult:
    proposals: np.ndarray  # (R, 4) xywh
    outputs: dict  # stream name -> StreamOutput


def detector_forward(model: DetectorModel, pair: ImagePair,
                     cfg: ProposalConfig = ProposalConfig()) -> DetectorResult:
    """Run inference. Single-trunk and late architectures return one fused
    StreamOutput; score2 returns both streams over shared proposals;
    score1 returns cascade-averaged scores with already-applied offsets."""
    xc, xt = model._inputs(pair)
    maps, rpn_inputs = model._features(xc, xt)
    any_map = next(iter(maps.values()))
    feat_h, feat_w = any_map.shape[:2]
    anchors = generate_anchors(feat_h, feat_w, model.anchor_cfg)
    img_h, img_w = pair.color.height, pair.color.width
    stride = model.anchor_cfg.stride

    def head_outputs(head, pooled_list):
        flats = [p.reshape(p.shape[0], -1) for p in pooled_list]
        if isinstance(head, _LateHead):
            cls_logits, reg = head.forward(*flats)
        else:
            cls_logits, reg = head.forward(flats[0])
        return nn.softmax(cls_logits), reg

    def seg_prob(name):
        if name not in model.seg:
            return None
        logits = model.seg[name].forward(maps[name][None])[0, :, :, 0]
        return nn.sigmoid(logits)

    if model.arch == "score1":
        merged_boxes = []
        merged_scores = []
        for own, other in (("color", "thermal"), ("thermal", "color")):
            cls_logits, reg = model.rpn[own].forward(rpn_inputs[own])
            props, _ = proposals_from_rpn(anchors, cls_logits, reg, img_h, img_w, cfg)
            if len(props) == 0:
                continue
            pooled, _ = roi_pool(maps[own], props, stride)
            scores_own, offsets = head_outputs(model.heads[own], [pooled])
            refined = _clip_boxes(decode_array(props, offsets), img_h, img_w)
            pooled_other, _ = roi_pool(maps[other], refined, stride)
            scores_other, _ = head_outputs(model.heads[other], [pooled_other])
            merged_boxes.append(refined)
            merged_scores.append(0.5 * (scores_own + scores_other))
        boxes = np.concatenate(merged_boxes) if merged_boxes else np.zeros((0, 4))
        scores = np.concatenate(merged_scores) if merged_scores else np.zeros((0, 2))
        fused = StreamOutput(scores=scores, offsets=np.zeros((len(boxes), 4)),
                             seg_prob=seg_prob("color"))
        return DetectorResult(proposals=boxes, outputs={"fused": fused})

    cls_logits, reg = model.rpn["shared"].forward(rpn_inputs["shared"])
    proposals, _ = proposals_from_rpn(anchors, cls_logits, reg, img_h, img_w, cfg)
    outputs = {}
    if model.arch in ("input", "early", "halfway"):
        pooled, _ = roi_pool(maps["fused"], proposals, stride)
        scores, offsets = head_outputs(model.heads["fused"], [pooled])
        outputs["fused"] = StreamOutput(scores=scores, offsets=offsets, seg_prob=seg_prob("fused"))
    elif model.arch == "late":
        pooled_c, _ = roi_pool(maps["color"], proposals, stride)
        pooled_t, _ = roi_pool(maps["thermal"], proposals, stride)
        scores, offsets = head_outputs(model.heads["late"], [pooled_c, pooled_t])
        outputs["fused"] = StreamOutput(scores=scores, offsets=offsets, seg_prob=seg_prob("color"))
    else:  # score2
        for name in ("color", "thermal"):
            pooled, _ = roi_pool(maps[name], proposals, stride)
            scores, offsets = head_outputs(model.heads[name], [pooled])
            outputs[name] = StreamOutput(scores=scores, offsets=offsets, seg_prob=seg_prob(name))
    return DetectorResult(proposals=proposals, outputs=outputs)


def finalize_detections(proposals, scores, offsets, img_h, img_w,
                        cfg: ProposalConfig = ProposalConfig()):
    """Score threshold + decode + NMS into final (boxes, scores).

    scores is (R, 2); the pedestrian probability is column 1.
    """
    person = np.asarray(scores)[:, 1]
    keep = person >= cfg.score_threshold
    if not keep.any():
        return np.zeros((0, 4)), np.zeros(0)
    boxes = _clip_boxes(decode_array(proposals[keep], np.asarray(offsets)[keep]), img_h, img_w)
    person = person[keep]
    order = nms_array(boxes, person, cfg.final_nms_threshold)
    return boxes[order], person[order]
