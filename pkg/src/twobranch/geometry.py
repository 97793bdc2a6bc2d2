"""Axis-aligned boxes, IoU and proposal labeling.

Boxes use continuous coordinates: area is ``(x_max - x_min) * (y_max - y_min)``
with no +1 pixel convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise InvalidBoxError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def of(cls, coords: Sequence[float]) -> "Box":
        x0, y0, x1, y1 = (float(c) for c in coords)
        return cls(x0, y0, x1, y1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when either box or the union has zero area."""
    for box in (a, b):
        if not isinstance(box, Box):
            raise InvalidBoxError(f"not a Box: {box!r}")
    area_a, area_b = a.area, b.area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = w * h if (w > 0.0 and h > 0.0) else 0.0
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


class Label(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


@dataclass(frozen=True)
class RegionLabeling:
    """IoU thresholds.

    Training labels use strict inequalities (``> positive``, ``< negative``);
    the evaluation criterion is ``>= eval_threshold``. Augmented positives
    during sampling use ``>= positive`` (see :mod:`twobranch.sampling`).
    """

    positive_threshold: float = 0.7
    negative_threshold: float = 0.3
    eval_threshold: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.negative_threshold < self.eval_threshold
                <= self.positive_threshold <= 1.0):
            raise ValueError(
                "thresholds must satisfy 0 <= negative < eval <= positive <= 1, got "
                f"{self.negative_threshold}, {self.eval_threshold}, {self.positive_threshold}"
            )


def label_proposals(gt: Box, proposals: Iterable[Box],
                    labeling: RegionLabeling = RegionLabeling()) -> list[Label]:
    labels = []
    for box in proposals:
        overlap = iou(gt, box)
        if overlap > labeling.positive_threshold:
            labels.append(Label.POSITIVE)
        elif overlap < labeling.negative_threshold:
            labels.append(Label.NEGATIVE)
        else:
            labels.append(Label.IGNORE)
    return labels


def merge_boxes(boxes: Sequence[Box]) -> Box:
    """Smallest box containing every input box (plural entities)."""
    if not boxes:
        raise ValueError("merge_boxes needs at least one box")
    return Box(
        min(b.x_min for b in boxes),
        min(b.y_min for b in boxes),
        max(b.x_max for b in boxes),
        max(b.y_max for b in boxes),
    )
