"""Axis-aligned box geometry: IoU/IoA, greedy NMS, and the center/log-size
regression parameterization shared by anchors, proposals and detections.

Boxes are (x, y, w, h) with real-valued pixel coordinates; x, y is the
top-left corner. All functions are pure.
"""

from dataclasses import dataclass

import numpy as np

# decode() clamps the log-scale offsets to this magnitude before
# exponentiation so untrained regression heads cannot overflow.
LOG_SCALE_CLAMP = 4.0


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for v in (self.x, self.y, self.w, self.h):
            if not np.isfinite(v):
                raise ValueError(f"BBox coordinates must be finite, got {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BBox needs positive width/height, got {self}")

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def cx(self):
        return self.x + 0.5 * self.w

    @property
    def cy(self):
        return self.y + 0.5 * self.h

    @property
    def area(self):
        return self.w * self.h

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h])


@dataclass(frozen=True)
class RegressionTarget:
    """Dimensionless box offsets: center shifts (tx, ty) in units of the
    anchor size, log scale factors (tw, th)."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        for v in (self.tx, self.ty, self.tw, self.th):
            if not np.isfinite(v):
                raise ValueError(f"RegressionTarget must be finite, got {self}")

    def as_array(self):
        return np.array([self.tx, self.ty, self.tw, self.th])


def intersection_area(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; symmetric, 0 for disjoint boxes."""
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


def ioa(det: BBox, ignore: BBox) -> float:
    """Intersection over the detection's own area (ignore-region matching)."""
    return intersection_area(det, ignore) / det.area


def nms(dets, iou_threshold):
    """Greedy non-maximum suppression over (BBox, score) pairs.

    Returns the kept pairs sorted by descending score. Equal scores are
    broken by lower original index for determinism.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept = []
    for i in order:
        box = dets[i][0]
        if all(iou(box, kb[0]) <= iou_threshold for kb in kept):
            kept.append(dets[i])
    return kept


def encode(anchor: BBox, gt: BBox) -> RegressionTarget:
    """Offsets that map `anchor` onto `gt` (center/log-size form)."""
    return RegressionTarget(
        tx=(gt.cx - anchor.cx) / anchor.w,
        ty=(gt.cy - anchor.cy) / anchor.h,
        tw=float(np.log(gt.w / anchor.w)),
        th=float(np.log(gt.h / anchor.h)),
    )


def decode(anchor: BBox, t: RegressionTarget) -> BBox:
    """Inverse of encode; log scales are clamped to ±LOG_SCALE_CLAMP."""
    tw = min(max(t.tw, -LOG_SCALE_CLAMP), LOG_SCALE_CLAMP)
    th = min(max(t.th, -LOG_SCALE_CLAMP), LOG_SCALE_CLAMP)
    w = anchor.w * np.exp(tw)
    h = anchor.h * np.exp(th)
    cx = anchor.cx + t.tx * anchor.w
    cy = anchor.cy + t.ty * anchor.h
    return BBox(x=cx - 0.5 * w, y=cy - 0.5 * h, w=w, h=h)


# Array variants used on the hot paths (anchor matching, proposal decoding).
# Rows are (x, y, w, h); semantics match the scalar functions above.


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) xywh arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    areas_a = a[:, 2] * a[:, 3]
    areas_b = b[:, 2] * b[:, 3]
    return inter / (areas_a[:, None] + areas_b[None, :] - inter)


def ioa_matrix(dets: np.ndarray, ignores: np.ndarray) -> np.ndarray:
    """Pairwise intersection-over-detection-area, (N, 4) vs (M, 4) xywh."""
    dets = np.asarray(dets, dtype=float).reshape(-1, 4)
    ignores = np.asarray(ignores, dtype=float).reshape(-1, 4)
    dx2, dy2 = dets[:, 0] + dets[:, 2], dets[:, 1] + dets[:, 3]
    gx2, gy2 = ignores[:, 0] + ignores[:, 2], ignores[:, 1] + ignores[:, 3]
    iw = np.minimum(dx2[:, None], gx2[None, :]) - np.maximum(dets[:, None, 0], ignores[None, :, 0])
    ih = np.minimum(dy2[:, None], gy2[None, :]) - np.maximum(dets[:, None, 1], ignores[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    return inter / (dets[:, 2] * dets[:, 3])[:, None]


def decode_array(anchors: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized decode: (N, 4) anchors + (N, 4) offsets -> (N, 4) boxes."""
    anchors = np.asarray(anchors, dtype=float)
    t = np.asarray(t, dtype=float)
    cx = anchors[:, 0] + 0.5 * anchors[:, 2] + t[:, 0] * anchors[:, 2]
    cy = anchors[:, 1] + 0.5 * anchors[:, 3] + t[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(np.clip(t[:, 2], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
    h = anchors[:, 3] * np.exp(np.clip(t[:, 3], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, w, h], axis=1)


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized encode: rows of anchors against matching rows of gts."""
    anchors = np.asarray(anchors, dtype=float)
    gts = np.asarray(gts, dtype=float)
    tx = (gts[:, 0] + 0.5 * gts[:, 2] - anchors[:, 0] - 0.5 * anchors[:, 2]) / anchors[:, 2]
    ty = (gts[:, 1] + 0.5 * gts[:, 3] - anchors[:, 1] - 0.5 * anchors[:, 3]) / anchors[:, 3]
    tw = np.log(gts[:, 2] / anchors[:, 2])
    th = np.log(gts[:, 3] / anchors[:, 3])
    return np.stack([tx, ty, tw, th], axis=1)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over an (N, 4) xywh array; returns kept indices in
    descending-score order (ties by lower index)."""
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(len(scores)), -scores))
    if len(order) == 0:
        return np.zeros(0, dtype=int)
    ious = iou_matrix(boxes, boxes)
    kept = []
    for i in order:
        if all(ious[i, j] <= iou_threshold for j in kept):
            kept.append(int(i))
    return np.array(kept, dtype=int)
