"""Category-set precision/recall and per-class AP@0.5 (11-point).

Detection is scored per dataset: a scene only counts for the classes of its
own taxonomy, and detections of foreign classes in it are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cem import cem_forward, topk_select
from ..geometry import cxcywh_to_xyxy, pairwise_iou
from ..head import detect


def evaluate_multilabel(cat_scores, scenes, top_k: int) -> tuple[float, float]:
    """Mean over scenes of |TopK ∩ gt| / min(top_k, K) and |TopK ∩ gt| / |gt|."""
    cat_scores = np.asarray(cat_scores, dtype=np.float64)
    if not len(scenes):
        return 0.0, 0.0
    K = cat_scores.shape[1]
    prec, rec = [], []
    for s, sc in zip(scenes, cat_scores):
        gt = set(s.classes)
        hit = len(gt & set(topk_select(sc, top_k)))
        prec.append(hit / min(top_k, K))
        rec.append(hit / len(gt) if gt else 1.0)
    return float(np.mean(prec)), float(np.mean(rec))


def ap_11point(tp: np.ndarray, n_gt: int) -> float:
    """11-point interpolated AP from TP flags of score-sorted detections."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        sel = precision[recall >= t - 1e-12]
        total += sel.max() if len(sel) else 0.0
    return total / 11.0


@dataclass
class DetectionMetrics:
    per_class: dict[int, float]
    per_dataset: dict[int, float]
    mean_ap: float

    def mean_over(self, class_ids) -> float:
        vals = [self.per_class[c] for c in class_ids if c in self.per_class]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_detection(detections, scenes, labelspace, iou_threshold: float = 0.5) -> DetectionMetrics:
    """``detections[i]`` lists Detection records for ``scenes[i]``.

    Within a class, detections are ranked by score, then box (lexicographic),
    then scene position, so equal-score inputs score the same in any order.
    Each ground truth absorbs at most one detection: the highest-ranked one
    whose IoU with it is the largest among still-unmatched ground truths.
    """
    per_class = {}
    for c in range(labelspace.K):
        ds_ids = labelspace.categories[c].source_datasets
        gts: dict[int, np.ndarray] = {}
        dets = []
        for i, s in enumerate(scenes):
            if s.dataset_id not in ds_ids:
                continue
            b = [box for cc, box in s.objects if cc == c]
            if b:
                gts[i] = cxcywh_to_xyxy(np.array(b))
            for det in detections[i]:
                if det.category_id == c:
                    dets.append((-det.score, tuple(det.box), i))
        n_gt = sum(len(v) for v in gts.values())
        if n_gt == 0:
            continue
        dets.sort()
        taken = {i: np.zeros(len(v), dtype=bool) for i, v in gts.items()}
        tp = np.zeros(len(dets))
        for k, (_, box, i) in enumerate(dets):
            if i not in gts:
                continue
            ious = pairwise_iou(cxcywh_to_xyxy(np.array(box))[None], gts[i])[0]
            ious[taken[i]] = -1.0
            j = int(np.argmax(ious))
            if ious[j] >= iou_threshold:
                taken[i][j] = True
                tp[k] = 1.0
        per_class[c] = ap_11point(tp, n_gt)
    per_dataset = {}
    for ds in labelspace.datasets:
        vals = [per_class[c] for c in ds.global_ids if c in per_class]
        per_dataset[ds.dataset_id] = float(np.mean(vals)) if vals else float("nan")
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return DetectionMetrics(per_class, per_dataset, mean_ap)


def cem_scores(model, feats) -> np.ndarray:
    scores, _ = cem_forward(model.embeddings, feats, model.cem)
    return scores


def run_detection(model, feats, top_k: int, n_per_class: int, score_threshold: float = 0.0,
                  use_cem: bool = True):
    return [detect(model, f, top_k, n_per_class, score_threshold, use_cem=use_cem) for f in feats]


def evaluate_model(model, feats, scenes, labelspace, top_k: int, n_per_class: int,
                   score_threshold: float = 0.0, use_cem: bool = True) -> dict:
    """Multilabel and detection metrics as a JSON-ready dict."""
    prec, rec = evaluate_multilabel(cem_scores(model, feats), scenes, top_k)
    dets = run_detection(model, feats, top_k, n_per_class, score_threshold, use_cem)
    m = evaluate_detection(dets, scenes, labelspace)
    return {
        "top_k": top_k,
        "use_cem": use_cem,
        "multilabel_precision": prec,
        "multilabel_recall": rec,
        "mean_ap": m.mean_ap,
        "per_dataset_ap": {labelspace.datasets[k].name: v for k, v in m.per_dataset.items()},
        "per_class_ap": {labelspace.names[k]: v for k, v in sorted(m.per_class.items())},
    }
