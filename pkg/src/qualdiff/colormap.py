"""Byte-stable false-colour heatmaps from an embedded viridis-like table."""

from __future__ import annotations

import numpy as np

# 17 evenly spaced anchors, linearly interpolated to a 256-entry table.
_ANCHORS = np.array(
    [
        (0.2670, 0.0049, 0.3294),
        (0.2823, 0.0950, 0.4173),
        (0.2788, 0.1755, 0.4834),
        (0.2590, 0.2515, 0.5247),
        (0.2297, 0.3224, 0.5457),
        (0.1994, 0.3876, 0.5546),
        (0.1727, 0.4488, 0.5579),
        (0.1490, 0.5081, 0.5573),
        (0.1276, 0.5669, 0.5506),
        (0.1206, 0.6258, 0.5335),
        (0.1579, 0.6838, 0.5017),
        (0.2461, 0.7389, 0.4520),
        (0.3692, 0.7889, 0.3829),
        (0.5160, 0.8312, 0.2943),
        (0.6785, 0.8637, 0.1895),
        (0.8456, 0.8873, 0.0997),
        (0.9932, 0.9062, 0.1439),
    ]
)


def _build_lut() -> np.ndarray:
    pos = np.linspace(0.0, 1.0, len(_ANCHORS))
    x = np.arange(256) / 255.0
    lut = np.stack([np.interp(x, pos, _ANCHORS[:, c]) for c in range(3)], axis=1)
    return np.round(lut * 255.0).astype(np.uint8)


LUT = _build_lut()


def apply_colormap(values: np.ndarray, vmin: float = 1.0, vmax: float = 5.0) -> np.ndarray:
    """Map a 2-D array to an ``H x W x 3`` uint8 image."""
    v = np.clip((np.asarray(values, dtype=np.float64) - vmin) / (vmax - vmin), 0.0, 1.0)
    return LUT[np.round(v * 255.0).astype(np.int64)]
