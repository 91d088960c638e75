"""Quadtree partition of a quality map into quality-homogeneous rectangles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .qualmap import QualityMap


@dataclass(frozen=True)
class PartitionParams:
    min_side: int = 8
    split_std_threshold: float = 0.5

    def __post_init__(self):
        if self.min_side < 1:
            raise InvalidInputError("min_side must be >= 1")
        if not self.split_std_threshold >= 0:
            raise InvalidInputError("split_std_threshold must be >= 0")


@dataclass(frozen=True)
class Region:
    region_id: int
    x0: int
    y0: int
    height: int
    width: int
    mean_quality: float
    quality_std: float

    @property
    def area(self) -> int:
        return self.height * self.width

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)


@dataclass(frozen=True)
class RegionPartition:
    regions: tuple[Region, ...]
    image_height: int
    image_width: int
    params: PartitionParams = field(default_factory=PartitionParams)

    def __len__(self) -> int:
        return len(self.regions)

    def to_json(self) -> dict:
        return {
            "params": asdict(self.params),
            "image_height": self.image_height,
            "image_width": self.image_width,
            "regions": [
                {
                    "region_id": r.region_id,
                    "x0": r.x0,
                    "y0": r.y0,
                    "h": r.height,
                    "w": r.width,
                    "mean_quality": r.mean_quality,
                    "quality_std": r.quality_std,
                }
                for r in self.regions
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RegionPartition":
        regions = tuple(
            Region(d["region_id"], d["x0"], d["y0"], d["h"], d["w"], d["mean_quality"], d["quality_std"])
            for d in doc["regions"]
        )
        return cls(regions, doc["image_height"], doc["image_width"], PartitionParams(**doc["params"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def _values(qmap: QualityMap | np.ndarray) -> np.ndarray:
    v = qmap.values if isinstance(qmap, QualityMap) else np.asarray(qmap)
    if v.ndim != 2 or v.size == 0:
        raise InvalidInputError(f"quality map must be a non-empty 2-D raster, got shape {v.shape}")
    return v


def region_quality_stats(qmap: QualityMap | np.ndarray, y0: int, x0: int, height: int, width: int) -> tuple[float, float]:
    """Population mean and standard deviation over a rectangle."""
    v = _values(qmap)
    if height <= 0 or width <= 0:
        raise InvalidInputError("empty rectangle")
    if y0 < 0 or x0 < 0 or y0 + height > v.shape[0] or x0 + width > v.shape[1]:
        raise InvalidInputError("rectangle outside the map")
    block = v[y0 : y0 + height, x0 : x0 + width].astype(np.float64)
    return float(block.mean()), float(block.std())


def adaptive_region_partition(qmap: QualityMap | np.ndarray, params: PartitionParams = PartitionParams()) -> RegionPartition:
    """Split until each leaf is homogeneous or too small to split.

    A node is split into four quadrants (the NW quadrant takes the larger half
    of odd sides) when its population std exceeds the threshold and both of
    its sides exceed ``min_side``. Leaves come out depth-first in NW, NE, SW,
    SE order.
    """
    v = _values(qmap).astype(np.float64)
    H, W = v.shape
    leaves: list[tuple[int, int, int, int, float, float]] = []
    stack = [(0, 0, H, W)]
    while stack:
        y0, x0, h, w = stack.pop()
        block = v[y0 : y0 + h, x0 : x0 + w]
        mean, std = float(block.mean()), float(block.std())
        if std > params.split_std_threshold and h > params.min_side and w > params.min_side:
            h1, w1 = (h + 1) // 2, (w + 1) // 2
            quads = [
                (y0, x0, h1, w1),
                (y0, x0 + w1, h1, w - w1),
                (y0 + h1, x0, h - h1, w1),
                (y0 + h1, x0 + w1, h - h1, w - w1),
            ]
            stack.extend(reversed(quads))
        else:
            leaves.append((y0, x0, h, w, mean, std))
    regions = tuple(
        Region(i, x0, y0, h, w, mean, std) for i, (y0, x0, h, w, mean, std) in enumerate(leaves)
    )
    return RegionPartition(regions, H, W, params)


def region_pixel_index(partition: RegionPartition) -> np.ndarray:
    """Per-pixel region id raster; -1 would mark an uncovered pixel."""
    idx = np.full((partition.image_height, partition.image_width), -1, dtype=np.int32)
    for r in partition.regions:
        idx[r.slices()] = r.region_id
    return idx


def bounds_from_index(index: np.ndarray) -> dict[int, tuple[int, int, int, int]]:
    """Recover ``(y0, x0, height, width)`` per region id from an index raster."""
    out = {}
    for rid in np.unique(index):
        ys, xs = np.nonzero(index == rid)
        out[int(rid)] = (int(ys.min()), int(xs.min()), int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1))
    return out
