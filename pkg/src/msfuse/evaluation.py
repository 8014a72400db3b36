"""Miss-rate / FPPI evaluation protocol.

Ground truth is filtered into evaluable vs ignore entries (the
"reasonable" configuration: sufficiently tall person instances with at
most partial occlusion). Detections are matched greedily in score order;
matches against ignore entries count neither as hits nor as false
positives. Curves sweep the score threshold over every distinct
detection score, and the single-number summary is the geometric mean of
the miss rate sampled at log-spaced FPPI reference points.
"""

from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox, ioa, iou

LABELS = ("person", "person?", "people", "cyclist")
OCCLUSION_LEVELS = ("none", "partial", "heavy")

MR_FLOOR = 1e-10


@dataclass
class GtEntry:
    bbox: BBox
    label: str = "person"
    occlusion: str = "none"
    ignore: bool = False

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown ground-truth label {self.label!r}")
        if self.occlusion not in OCCLUSION_LEVELS:
            raise ValueError(f"unknown occlusion level {self.occlusion!r}")


@dataclass(frozen=True)
class EvalConfig:
    min_height: float = 55.0
    allowed_occlusion: tuple = ("none", "partial")
    match_iou: float = 0.5
    ignore_ioa: float = 0.5
    fppi_refs: tuple = tuple(np.logspace(-2, 0, 9))
    condition: str = "all"

    def __post_init__(self):
        refs = np.asarray(self.fppi_refs)
        if not np.all(np.diff(refs) > 0):
            raise ValueError("FPPI reference points must be strictly increasing")


@dataclass
class Frame:
    """One image's detections and annotations for the harness."""

    det_boxes: np.ndarray  # (N, 4) xywh
    det_scores: np.ndarray  # (N,)
    gts: list  # list[GtEntry]
    condition: str = "unknown"


@dataclass
class EvalResult:
    lamr: float
    curve: list  # [(fppi, miss_rate)]
    per_condition: dict = field(default_factory=dict)


def apply_reasonable(gts, cfg: EvalConfig):
    """Return copies of the entries with ignore flags set: only person
    entries tall enough and within the allowed occlusion levels stay
    evaluable; everything else is ignore (matching it is free, missing it
    is not counted)."""
    out = []
    for gt in gts:
        evaluable = (
            gt.label == "person"
            and gt.bbox.h >= cfg.min_height
            and gt.occlusion in cfg.allowed_occlusion
        )
        out.append(GtEntry(bbox=gt.bbox, label=gt.label, occlusion=gt.occlusion,
                           ignore=not evaluable))
    return out


@dataclass
class MatchResult:
    det_status: list  # per detection: "tp" | "fp" | "ignore"
    gt_matched: list  # per gt entry: True if an evaluable gt was matched


def match_frame(det_boxes, det_scores, gts, cfg: EvalConfig) -> MatchResult:
    """Greedy matching in descending score order (ties by lower index).

    Each detection takes the highest-IoU unmatched evaluable gt at
    IoU >= match_iou; failing that, overlap with any ignore entry at
    IoA >= ignore_ioa makes it a free match; otherwise it is a false
    positive. Unmatched evaluable gts are the frame's misses.
    """
    det_boxes = np.asarray(det_boxes, dtype=float).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=float)
    order = sorted(range(len(det_scores)), key=lambda i: (-det_scores[i], i))
    matched = [False] * len(gts)
    status = [None] * len(det_boxes)
    for i in order:
        det = BBox(*det_boxes[i])
        best_iou = 0.0
        best_g = None
        for g, gt in enumerate(gts):
            if gt.ignore or matched[g]:
                continue
            v = iou(det, gt.bbox)
            if v >= cfg.match_iou and v > best_iou:
                best_iou = v
                best_g = g
        if best_g is not None:
            matched[best_g] = True
            status[i] = "tp"
            continue
        if any(gt.ignore and ioa(det, gt.bbox) >= cfg.ignore_ioa for gt in gts):
            status[i] = "ignore"
        else:
            status[i] = "fp"
    return MatchResult(det_status=status, gt_matched=matched)


def curve(frames, cfg: EvalConfig):
    """FPPI-vs-miss-rate points, one per distinct detection score,
    sorted by increasing FPPI. Raises if no evaluable gt exists."""
    if not frames:
        raise ValueError("evaluation needs at least one frame")
    n_frames = len(frames)
    n_gt = 0
    scored = []  # (score, is_tp, is_fp)
    for frame in frames:
        gts = apply_reasonable(frame.gts, cfg)
        n_gt += sum(not gt.ignore for gt in gts)
        result = match_frame(frame.det_boxes, frame.det_scores, gts, cfg)
        for score, st in zip(np.asarray(frame.det_scores, dtype=float), result.det_status):
            scored.append((float(score), st == "tp", st == "fp"))
    if n_gt == 0:
        raise ValueError("no evaluable ground-truth instances under this configuration")
    if not scored:
        return [(0.0, 1.0)]
    scored.sort(key=lambda t: -t[0])
    points = []
    tp = fp = 0
    idx = 0
    n = len(scored)
    while idx < n:
        threshold = scored[idx][0]
        while idx < n and scored[idx][0] == threshold:
            tp += scored[idx][1]
            fp += scored[idx][2]
            idx += 1
        points.append((fp / n_frames, 1.0 - tp / n_gt))
    return points


def log_average_miss_rate(points, cfg: EvalConfig) -> float:
    """Geometric mean of the miss rate at the reference FPPI values; for
    each reference the point with the largest FPPI <= reference is used
    (miss rate 1 if there is none)."""
    if not points:
        raise ValueError("empty curve")
    points = sorted(points)
    logs = []
    for ref in cfg.fppi_refs:
        mr = 1.0
        for fppi, miss in points:
            if fppi <= ref:
                mr = miss
            else:
                break
        logs.append(np.log(max(mr, MR_FLOOR)))
    return float(np.exp(np.mean(logs)))


def evaluate(frames, cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Full harness: curve + log-average miss rate for the configured
    condition, with day/night breakdowns when those frames exist."""
    subset = _filter_condition(frames, cfg.condition)
    pts = curve(subset, cfg)
    result = EvalResult(lamr=log_average_miss_rate(pts, cfg), curve=pts)
    for cond in ("all", "day", "night"):
        cond_frames = _filter_condition(frames, cond)
        if not cond_frames:
            continue
        try:
            cond_pts = curve(cond_frames, cfg)
        except ValueError:
            continue  # condition slice has no evaluable gt
        result.per_condition[cond] = log_average_miss_rate(cond_pts, cfg)
    return result


def _filter_condition(frames, condition):
    if condition == "all":
        return list(frames)
    return [f for f in frames if f.condition == condition]
