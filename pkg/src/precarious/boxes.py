"""Axis-aligned boxes in (x, y, w, h) pixel form, top-left origin."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w}, h={self.h}")

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def to_json(self):
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_json(cls, obj):
        return cls(float(obj["x"]), float(obj["y"]), float(obj["w"]), float(obj["h"]))


def to_array(boxes):
    """Stack boxes (BBox or 4-sequences) into an (N, 4) float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    rows = [b.as_array() if isinstance(b, BBox) else np.asarray(b, dtype=np.float64) for b in boxes]
    return np.stack(rows)


def iou_matrix(a, b):
    """Pairwise intersection-over-union between (N, 4) and (M, 4) xywh arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2 = a[:, 0] + a[:, 2]
    ay2 = a[:, 1] + a[:, 3]
    bx2 = b[:, 0] + b[:, 2]
    by2 = b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b):
    """IoU of two boxes; raises ValueError on non-positive sizes."""
    a = a if isinstance(a, BBox) else BBox(*a)
    b = b if isinstance(b, BBox) else BBox(*b)
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])
