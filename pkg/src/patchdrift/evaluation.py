"""Attack-strength and visual-quality metrics, plus report aggregation.

mAP is computed at IoU 0.5 with greedy per-class matching (each ground
truth matched at most once, detections processed in descending score).
The average precision integrates the interpolated precision envelope
over recall, carrying the final precision forward to recall 1.  Lower
mAP/recall after an attack means a stronger attack; the l0/l2 norms
measure its visual cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, Detection, DetectionSet, iou
from .scenes import InstanceAnnotation

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# matching and metrics
# ---------------------------------------------------------------------------


def _match_class(per_scene_dets, per_scene_gts, iou_thresh):
    """Greedy match one class across scenes.

    Returns (tp flags in global score order, number of ground truths).
    Detections are processed by descending score (ties by scene order,
    then corner order); each matches the best unmatched ground truth of
    its scene at IoU >= iou_thresh.
    """
    entries = []
    for s, dets in enumerate(per_scene_dets):
        for d in dets:
            entries.append((-d.score, s) + d.box.corners() + (d,))
    entries.sort(key=lambda e: e[:-1])
    matched = [np.zeros(len(g), dtype=bool) for g in per_scene_gts]
    n_gt = sum(len(g) for g in per_scene_gts)
    tp = np.zeros(len(entries), dtype=bool)
    for i, entry in enumerate(entries):
        s, det = entry[1], entry[-1]
        gts = per_scene_gts[s]
        best_j, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if matched[s][j]:
                continue
            v = iou(det.box, g)
            if v >= best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            matched[s][best_j] = True
            tp[i] = True
    return tp, n_gt, matched


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rec = ctp / n_gt
    prec = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [prec[-1]]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _group_by_class(detections_per_scene, ground_truth_per_scene):
    labels = sorted({a.label for gts in ground_truth_per_scene for a in gts})
    for c in labels:
        dets_c = [[d for d in dets if d.label == c] for dets in detections_per_scene]
        gts_c = [[a.box for a in gts if a.label == c] for gts in ground_truth_per_scene]
        yield c, dets_c, gts_c


def map50(detections_per_scene, ground_truth_per_scene, iou_thresh: float = 0.5) -> float:
    """Mean AP over classes that have ground truth; 0.0 when none do."""
    if len(detections_per_scene) != len(ground_truth_per_scene):
        raise ValueError("detections and ground truth must cover the same scenes")
    aps = []
    for _c, dets_c, gts_c in _group_by_class(detections_per_scene, ground_truth_per_scene):
        tp, n_gt, _ = _match_class(dets_c, gts_c, iou_thresh)
        aps.append(_average_precision(tp, n_gt))
    return float(np.mean(aps)) if aps else 0.0


def recall50(detections_per_scene, ground_truth_per_scene, iou_thresh: float = 0.5):
    """Matched ground truth / total ground truth, pooled; None without GT."""
    if len(detections_per_scene) != len(ground_truth_per_scene):
        raise ValueError("detections and ground truth must cover the same scenes")
    total = matched_total = 0
    for _c, dets_c, gts_c in _group_by_class(detections_per_scene, ground_truth_per_scene):
        _, n_gt, matched = _match_class(dets_c, gts_c, iou_thresh)
        total += n_gt
        matched_total += int(sum(m.sum() for m in matched))
    if total == 0:
        return None
    return matched_total / total


def l0_fraction(x: np.ndarray, x_adv: np.ndarray) -> float:
    """Fraction of spatial positions with any channel changed."""
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    changed = (np.abs(x_adv - x) > 1e-12).any(axis=2)
    return float(changed.sum()) / (x.shape[0] * x.shape[1])


def l2_norm(x: np.ndarray, x_adv: np.ndarray) -> float:
    """Euclidean norm of the full difference tensor in [0,1] pixel scale."""
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    return float(np.sqrt(np.sum((x_adv - x) ** 2)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class SceneReport:
    scene_id: str
    ground_truth: list[InstanceAnnotation]
    clean_detections: DetectionSet
    adv_detections: DetectionSet
    success_flags: list[bool]
    l0: float
    l2: float
    loss_trace: list = field(default_factory=list)
    nothing_to_attack: bool = False


@dataclass
class AttackReport:
    per_scene: list[SceneReport]
    aggregate: dict


def aggregate(reports: list[SceneReport]) -> AttackReport:
    """Pool detections across scenes (not per-scene averages) for mAP/recall."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    gts = [r.ground_truth for r in reports]
    clean = [r.clean_detections for r in reports]
    adv = [r.adv_detections for r in reports]
    agg = {
        "map": map50(adv, gts),
        "recall": recall50(adv, gts),
        "clean_map": map50(clean, gts),
        "clean_recall": recall50(clean, gts),
        "mean_l0": float(np.mean([r.l0 for r in reports])),
        "mean_l2": float(np.mean([r.l2 for r in reports])),
    }
    return AttackReport(per_scene=list(reports), aggregate=agg)


# ---------------------------------------------------------------------------
# JSON round-trip (schema versioned)
# ---------------------------------------------------------------------------


def _det_to_dict(d: Detection) -> dict:
    return {
        "cx": d.box.cx, "cy": d.box.cy, "w": d.box.w, "h": d.box.h,
        "probs": [float(p) for p in d.class_probs],
    }


def _det_from_dict(obj: dict) -> Detection:
    return Detection(Box(obj["cx"], obj["cy"], obj["w"], obj["h"]),
                     np.array(obj["probs"], dtype=np.float64))


def _trace_to_dict(entry) -> dict:
    return {
        "total": entry.total, "cls": entry.cls, "box_term": entry.box_term,
        "per_instance_best_iou": [float(v) for v in entry.per_instance_best_iou],
    }


def report_to_dict(report: AttackReport) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "aggregate": report.aggregate,
        "per_scene": [
            {
                "scene_id": r.scene_id,
                "ground_truth": [
                    {"cx": a.box.cx, "cy": a.box.cy, "w": a.box.w, "h": a.box.h,
                     "label": a.label}
                    for a in r.ground_truth
                ],
                "clean_detections": [_det_to_dict(d) for d in r.clean_detections],
                "adv_detections": [_det_to_dict(d) for d in r.adv_detections],
                "success_flags": list(map(bool, r.success_flags)),
                "l0": r.l0,
                "l2": r.l2,
                "loss_trace": [_trace_to_dict(t) for t in r.loss_trace],
                "nothing_to_attack": r.nothing_to_attack,
            }
            for r in report.per_scene
        ],
    }


def report_from_dict(obj: dict) -> AttackReport:
    from .losses import LossBreakdown

    if obj.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {obj.get('schema_version')!r}")
    per_scene = []
    for r in obj["per_scene"]:
        per_scene.append(SceneReport(
            scene_id=r["scene_id"],
            ground_truth=[
                InstanceAnnotation(Box(g["cx"], g["cy"], g["w"], g["h"]), g["label"])
                for g in r["ground_truth"]
            ],
            clean_detections=DetectionSet(
                [_det_from_dict(d) for d in r["clean_detections"]], "clean"),
            adv_detections=DetectionSet(
                [_det_from_dict(d) for d in r["adv_detections"]], "adversarial"),
            success_flags=list(r["success_flags"]),
            l0=r["l0"],
            l2=r["l2"],
            loss_trace=[
                LossBreakdown(
                    total=t["total"], cls=t["cls"], box_term=t["box_term"],
                    per_instance_best_iou=list(t["per_instance_best_iou"]),
                )
                for t in r["loss_trace"]
            ],
            nothing_to_attack=r["nothing_to_attack"],
        ))
    return AttackReport(per_scene=per_scene, aggregate=dict(obj["aggregate"]))
