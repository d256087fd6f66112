"""Segmentation quality metrics.

Two notions of "precision" circulate for co-segmentation benchmarks: the
foreground ratio |seg & gt| / |seg| and the fraction of correctly
classified pixels over both classes. They disagree, so both are computed
and reported side by side (``precision`` and ``pixel_accuracy``), along
with the Jaccard index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError
from .raster import as_mask


def _pair(seg, gt):
    s = as_mask(seg)
    g = as_mask(gt)
    if s.shape != g.shape:
        raise ShapeMismatchError(f"seg shape {s.shape} != gt shape {g.shape}")
    return s, g


def precision(seg, gt) -> float:
    """|seg & gt| / |seg|; 1.0 when both sets are empty, 0.0 when only seg is."""
    s, g = _pair(seg, gt)
    n_seg = int(s.sum())
    if n_seg == 0:
        return 1.0 if not g.any() else 0.0
    return int((s & g).sum()) / n_seg


def pixel_accuracy(seg, gt) -> float:
    """Fraction of pixels classified correctly, counting both classes."""
    s, g = _pair(seg, gt)
    return int((s == g).sum()) / s.size


def jaccard(seg, gt) -> float:
    """Foreground overlap |seg & gt| / |seg | gt|; 1.0 when both are empty."""
    s, g = _pair(seg, gt)
    union = int((s | g).sum())
    if union == 0:
        return 1.0
    return int((s & g).sum()) / union


@dataclass(frozen=True)
class ItemMetrics:
    item_id: str
    precision: float
    pixel_accuracy: float
    jaccard: float


@dataclass
class MetricsReport:
    """Per-item metric values plus their arithmetic means."""

    items: list[ItemMetrics] = field(default_factory=list)

    def add(self, item_id: str, seg, gt) -> ItemMetrics:
        item = ItemMetrics(
            item_id=item_id,
            precision=precision(seg, gt),
            pixel_accuracy=pixel_accuracy(seg, gt),
            jaccard=jaccard(seg, gt),
        )
        self.items.append(item)
        return item

    def add_item(self, item: ItemMetrics) -> None:
        self.items.append(item)

    def mean(self) -> dict:
        if not self.items:
            return {"precision": 0.0, "pixel_accuracy": 0.0, "jaccard": 0.0}
        n = len(self.items)
        return {
            "precision": sum(i.precision for i in self.items) / n,
            "pixel_accuracy": sum(i.pixel_accuracy for i in self.items) / n,
            "jaccard": sum(i.jaccard for i in self.items) / n,
        }

    def to_json_dict(self) -> dict:
        return {
            "items": [
                {
                    "id": i.item_id,
                    "precision": i.precision,
                    "pixel_accuracy": i.pixel_accuracy,
                    "jaccard": i.jaccard,
                }
                for i in self.items
            ],
            "mean": self.mean(),
        }


def mean_of_items(items: list[ItemMetrics]) -> ItemMetrics:
    """Average several items into one (used to fold the two views of a pair)."""
    n = len(items)
    return ItemMetrics(
        item_id=items[0].item_id if items else "",
        precision=sum(i.precision for i in items) / n,
        pixel_accuracy=sum(i.pixel_accuracy for i in items) / n,
        jaccard=sum(i.jaccard for i in items) / n,
    )
