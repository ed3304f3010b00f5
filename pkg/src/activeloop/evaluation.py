"""Per-class AP (KITTI-style R40) and mAP from confidence-ranked IoU matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .geometry import Box3D, bev_iou, iou_3d
from .surrogate import infer, propose


@dataclass(frozen=True)
class MatchConfig:
    iou_kind: str = "bev"
    iou_threshold: float | tuple[float, ...] = 0.5
    recall_points: int = 40

    def __post_init__(self):
        if self.iou_kind not in ("bev", "3d"):
            raise ValueError(f"iou_kind must be 'bev' or '3d', got {self.iou_kind!r}")
        thresholds = self.iou_threshold
        if isinstance(thresholds, (list, tuple)):
            object.__setattr__(self, "iou_threshold", tuple(float(t) for t in thresholds))
            thresholds = self.iou_threshold
        else:
            thresholds = (float(thresholds),)
        if any(not 0 < t <= 1 for t in thresholds):
            raise ValueError(f"IoU thresholds must lie in (0, 1], got {self.iou_threshold}")
        if self.recall_points < 1:
            raise ValueError("recall_points must be >= 1")

    def threshold(self, class_id: int) -> float:
        if isinstance(self.iou_threshold, tuple):
            return self.iou_threshold[class_id]
        return float(self.iou_threshold)

    def iou(self, a: Box3D, b: Box3D) -> float:
        return bev_iou(a, b) if self.iou_kind == "bev" else iou_3d(a, b)


@dataclass
class EvalReport:
    ap: list[float]  # nan for classes without ground truth
    mAP: float
    tp: list[int]
    fp: list[int]
    fn: list[int]
    num_gt: list[int] = field(default_factory=list)


def match_frame(dets: Sequence, gts: Sequence[Box3D], cfg: MatchConfig = MatchConfig()) -> np.ndarray:
    """True-positive flag per detection.

    Within each class, detections are visited by descending score (ties by
    index) and take the unmatched ground-truth box of highest IoU at or above
    the class threshold.
    """
    flags = np.zeros(len(dets), dtype=bool)
    classes = {d.box.class_id for d in dets}
    for c in sorted(classes):
        di = [i for i, d in enumerate(dets) if d.box.class_id == c]
        di.sort(key=lambda i: (-dets[i].score, i))
        gi = [j for j, g in enumerate(gts) if g.class_id == c]
        taken = set()
        thr = cfg.threshold(c)
        for i in di:
            best, best_iou = None, -1.0
            for j in gi:
                if j in taken:
                    continue
                iou = cfg.iou(dets[i].box, gts[j])
                if iou >= thr and iou > best_iou:
                    best, best_iou = j, iou
            if best is not None:
                taken.add(best)
                flags[i] = True
    return flags


def average_precision(scores, flags, num_gt: int, points: int = 40) -> float:
    """Mean over r = 1/points .. 1 of the max precision at recall >= r."""
    if num_gt < 1:
        raise ValueError("average precision needs at least one ground-truth instance")
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order]).astype(np.int64)
    fp = np.cumsum(~flags[order]).astype(np.int64)
    if len(tp) == 0:
        return 0.0
    # precision kept as exact integer ratios; one rounding at the end
    best = Fraction(0)
    tail_max = [Fraction(0)] * len(tp)
    for i in range(len(tp) - 1, -1, -1):
        best = max(best, Fraction(int(tp[i]), int(tp[i] + fp[i])))
        tail_max[i] = best
    total = Fraction(0)
    for k in range(1, points + 1):
        # recall >= k/points, compared in integers
        hit = np.flatnonzero(tp * points >= k * num_gt)
        if len(hit):
            total += tail_max[hit[0]]
    return float(total / points)


def evaluate_detections(dets_per_frame: Sequence[Sequence], gts_per_frame: Sequence[Sequence[Box3D]],
                        num_classes: int, cfg: MatchConfig = MatchConfig()) -> EvalReport:
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError("detections and ground truth cover different frame counts")
    if not gts_per_frame:
        raise ValueError("empty test set")
    scores = [[] for _ in range(num_classes)]
    flags = [[] for _ in range(num_classes)]
    num_gt = [0] * num_classes
    for dets, gts in zip(dets_per_frame, gts_per_frame):
        f = match_frame(dets, gts, cfg)
        for d, ok in zip(dets, f):
            c = d.box.class_id
            if 0 <= c < num_classes:
                scores[c].append(d.score)
                flags[c].append(bool(ok))
        for g in gts:
            num_gt[g.class_id] += 1
    ap, tp, fp, fn = [], [], [], []
    for c in range(num_classes):
        n_tp = int(sum(flags[c]))
        tp.append(n_tp)
        fp.append(len(flags[c]) - n_tp)
        fn.append(num_gt[c] - n_tp)
        ap.append(average_precision(scores[c], flags[c], num_gt[c], cfg.recall_points)
                  if num_gt[c] else float("nan"))
    present = [a for a, n in zip(ap, num_gt) if n > 0]
    m = float(sum(map(Fraction, present)) / len(present)) if present else 0.0
    return EvalReport(ap=ap, mAP=m, tp=tp, fp=fp, fn=fn, num_gt=num_gt)


def evaluate(model, test_frames, cfg: MatchConfig = MatchConfig(), candidate_cache: dict | None = None) -> EvalReport:
    """Run the surrogate over ``test_frames`` and score the pooled detections."""
    if not test_frames:
        raise ValueError("empty test set")
    dets = []
    for f in test_frames:
        cands = None
        if candidate_cache is not None:
            cands = candidate_cache.get(f.frame_id)
            if cands is None:
                cands = candidate_cache[f.frame_id] = propose(f)
        dets.append(infer(model, f, cands))
    return evaluate_detections(dets, [f.gt_boxes for f in test_frames], model.num_classes, cfg)
