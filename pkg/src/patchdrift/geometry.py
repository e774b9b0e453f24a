"""Axis-aligned box arithmetic, IoU, detection matching, attack success.

Boxes are stored center-format (cx, cy, w, h) in pixels; corner-format
conversion is provided for evaluation code.  Everything here is a pure
function over immutable values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidBoxError


@dataclass(frozen=True)
class Box:
    """Center-format rectangle; w and h must be strictly positive."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"box must have positive size, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner form."""
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Detection:
    """A detected box with its class-probability vector.

    ``score`` is the maximum of ``class_probs`` and the predicted class is
    its argmax; both are derived, not stored.
    """

    box: Box
    class_probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        object.__setattr__(self, "class_probs", probs)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("class_probs must be a 1-D vector")
        if probs.min() < -1e-12 or probs.max() > 1 + 1e-12:
            raise ValueError("class_probs entries must lie in [0, 1]")

    @property
    def score(self) -> float:
        return float(self.class_probs.max())

    @property
    def label(self) -> int:
        return int(self.class_probs.argmax())


def _det_sort_key(d: Detection):
    return (-d.score,) + d.box.corners()


@dataclass
class DetectionSet:
    """Ordered detections: descending score, ties by corner lexicographic."""

    detections: list[Detection] = field(default_factory=list)
    source_tag: str = "clean"  # clean | adversarial | masked

    def __post_init__(self):
        if self.source_tag not in ("clean", "adversarial", "masked"):
            raise ValueError(f"unknown source_tag {self.source_tag!r}")
        self.detections = sorted(self.detections, key=_det_sort_key)

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    def __getitem__(self, i: int) -> Detection:
        return self.detections[i]

    def boxes_array(self) -> np.ndarray:
        """[N, 4] center-format array of all boxes."""
        if not self.detections:
            return np.zeros((0, 4), dtype=np.float64)
        return np.stack([d.box.to_array() for d in self.detections])


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint, symmetric."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two [N,4] / [M,4] center-format arrays -> [N, M]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0)
    return out


def match_best(ref: Box, candidates: DetectionSet) -> tuple[Detection | None, float]:
    """Candidate with maximum IoU to ref; (None, 0.0) if empty or all disjoint.

    Ties break toward higher score, then lexicographic corner order; the
    candidate ordering of DetectionSet already encodes that, so the first
    maximum wins.
    """
    best: Detection | None = None
    best_iou = 0.0
    for det in candidates:
        v = iou(ref, det.box)
        if v > best_iou:
            best, best_iou = det, v
    return best, best_iou


def attack_success(initial: Detection, after: DetectionSet) -> bool:
    """True iff the instance vanished, drifted below IoU 0.5, or flipped class."""
    matched, matched_iou = match_best(initial.box, after)
    if matched is None:
        return True
    if matched_iou < 0.5:
        return True
    return matched.label != initial.label
