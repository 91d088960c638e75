"""Spatial quality maps on the [1, 5] scale.

Two desk-scale scorers stand in for a learned quality model:

* :class:`NoReferenceScorer` combines a haze term (contrast deficit and
  airlight), a thin-structure energy excess and a darkness term.
* :class:`FullReferenceScorer` maps a per-pixel Gaussian-window SSIM to ``1 + 4 s``.

Maps are memoised in a :class:`QualityCache` keyed by caller-supplied image
identifiers, and can be persisted in the little ``AQMP`` binary format.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidInputError

Q_MIN = 1.0
Q_MAX = 5.0

WINDOW = 8
# Calibrated against the clean images produced by ``degrade.gen_clean``.
REFERENCE_STD = 0.025
TOPHAT = 5
HF_BASELINE = 3.0e-3
HF_SCALE = 8.0e-3
DARK_LEVEL = 0.5
AIRLIGHT_LEVEL = 0.5
AIRLIGHT_SPAN = 0.3

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_SIGMA = 1.5

_MAGIC = b"AQMP"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(eq=False)
class QualityMap:
    values: np.ndarray
    scorer_id: str = ""
    image_key: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise InvalidInputError(f"quality map must be 2-D, got shape {v.shape}")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other: object) -> bool:
        # Provenance fields are not persisted, so equality is raster equality.
        if not isinstance(other, QualityMap):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))

    def mean(self) -> float:
        return float(self.values.mean(dtype=np.float64))


def _finalize(q: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(q, dtype=np.float32), np.float32(Q_MIN), np.float32(Q_MAX))


def _check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError(f"{name} must be a non-empty HxWx3 raster, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError(f"{name} contains non-finite pixels")
    return img


def luminance(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _box(x: np.ndarray, size: int = WINDOW) -> np.ndarray:
    return ndimage.uniform_filter(x, size=size, mode="nearest")


def no_reference_terms(image: np.ndarray) -> dict[str, np.ndarray]:
    """The three per-pixel degradation terms of the proxy scorer, each in [0, 1].

    Thin bright structures (streaks, flakes) are isolated with a white
    top-hat; contrast is measured on the remaining base layer so occluders do
    not masquerade as scene detail. The haze term is the larger of the
    contrast deficit and a raised-dark-channel (airlight) cue.
    """
    img = _check_image(image)
    lum = luminance(img)
    base = ndimage.grey_opening(lum, size=(TOPHAT, TOPHAT), mode="nearest")
    thin = lum - base

    mean = _box(base)
    var = np.maximum(_box(base * base) - mean * mean, 0.0)
    deficit = np.clip(1.0 - np.sqrt(var) / REFERENCE_STD, 0.0, 1.0)
    # Haze also lifts the darkest channel toward the atmospheric light.
    dark_channel = _box(ndimage.grey_opening(img.min(axis=2), size=(TOPHAT, TOPHAT), mode="nearest"))
    airlight = np.clip((dark_channel - AIRLIGHT_LEVEL) / AIRLIGHT_SPAN, 0.0, 1.0)
    haze = np.maximum(deficit, airlight)

    energy = _box(thin * thin)
    streak = np.clip((energy - HF_BASELINE) / HF_SCALE, 0.0, 1.0)

    dark = np.maximum(0.0, DARK_LEVEL - _box(lum)) / DARK_LEVEL
    return {"haze": haze, "streak": streak, "dark": dark}


def no_reference_values(image: np.ndarray) -> np.ndarray:
    t = no_reference_terms(image)
    badness = np.clip(0.5 * t["haze"] + 0.3 * t["streak"] + 0.2 * t["dark"], 0.0, 1.0)
    return _finalize(Q_MAX - 4.0 * badness)


def _gauss(x: np.ndarray) -> np.ndarray:
    # 11x11 support at sigma 1.5
    return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="nearest", truncate=3.5)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM with Gaussian window weights, averaged over colour channels.

    A Gaussian window keeps the statistic local, so pixels next to a damaged
    area are penalised much less than with a flat window.
    """
    out = np.zeros(a.shape[:2])
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _gauss(x), _gauss(y)
        sxx = _gauss(x * x) - mx * mx
        syy = _gauss(y * y) - my * my
        sxy = _gauss(x * y) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        out += num / den
    return out / a.shape[2]


def full_reference_values(degraded: np.ndarray, reference: np.ndarray) -> np.ndarray:
    d = _check_image(degraded, "degraded")
    r = _check_image(reference, "reference")
    if d.shape != r.shape:
        raise InvalidInputError(f"shape mismatch: {d.shape} vs {r.shape}")
    s = np.clip(ssim_map(d, r), 0.0, 1.0)
    return _finalize(1.0 + 4.0 * s)


class QualityScorer(Protocol):
    scorer_id: str
    mode: str

    def score_batch(self, images: Sequence[Any]) -> list[np.ndarray]: ...


class NoReferenceScorer:
    scorer_id = "nr-proxy-v1"
    mode = "no-reference"

    def __init__(self):
        self.calls = 0
        self.items_scored = 0

    def score_batch(self, images: Sequence[np.ndarray]) -> list[np.ndarray]:
        self.calls += 1
        self.items_scored += len(images)
        return [no_reference_values(im) for im in images]


class FullReferenceScorer:
    """Oracle scorer; each item passed to it is a ``(degraded, reference)`` pair."""

    scorer_id = "fr-ssim-v1"
    mode = "full-reference"

    def __init__(self):
        self.calls = 0
        self.items_scored = 0

    def score_batch(self, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
        self.calls += 1
        self.items_scored += len(pairs)
        return [full_reference_values(d, r) for d, r in pairs]


def score_no_reference(image: np.ndarray, image_key: str = "") -> QualityMap:
    return QualityMap(no_reference_values(image), NoReferenceScorer.scorer_id, image_key)


def score_full_reference(degraded: np.ndarray, reference: np.ndarray, image_key: str = "") -> QualityMap:
    return QualityMap(full_reference_values(degraded, reference), FullReferenceScorer.scorer_id, image_key)


class QualityCache:
    """LRU memo of quality maps keyed by image identifier.

    Lookups and insertions take a lock; scoring happens outside it, so two
    threads missing on the same key may both score it (results are identical
    because scorers are deterministic).
    """

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise InvalidInputError("cache capacity must be >= 1")
        self.capacity = capacity
        self.entries: OrderedDict[str, QualityMap] = OrderedDict()
        self.hit_count = 0
        self.miss_count = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def _lookup(self, key: str) -> QualityMap | None:
        with self._lock:
            m = self.entries.get(key)
            if m is None:
                self.miss_count += 1
            else:
                self.hit_count += 1
                self.entries.move_to_end(key)
            return m

    def _insert(self, key: str, qmap: QualityMap) -> None:
        with self._lock:
            self.entries[key] = qmap
            self.entries.move_to_end(key)
            while len(self.entries) > self.capacity:
                self.entries.popitem(last=False)


def _wrap(values: np.ndarray, image: Any, scorer: QualityScorer, key: str) -> QualityMap:
    values = _finalize(values)
    ref = image[0] if isinstance(image, tuple) else image
    if values.shape != np.shape(ref)[:2]:
        raise InvalidInputError(f"scorer {scorer.scorer_id} returned shape {values.shape}")
    return QualityMap(values, scorer.scorer_id, key)


def get_or_score(cache: QualityCache, image_key: str, image: Any, scorer: QualityScorer) -> QualityMap:
    hit = cache._lookup(image_key)
    if hit is not None:
        return hit
    (values,) = scorer.score_batch([image])
    qmap = _wrap(values, image, scorer, image_key)
    cache._insert(image_key, qmap)
    return qmap


def score_batch(cache: QualityCache, items: Sequence[tuple[str, Any]], scorer: QualityScorer) -> list[QualityMap]:
    """Resolve a batch through the cache, scoring all misses in one scorer call."""
    keys = [k for k, _ in items]
    if len(set(keys)) != len(keys):
        raise InvalidInputError("duplicate image keys in batch")
    out: list[QualityMap | None] = [cache._lookup(k) for k in keys]
    missing = [i for i, m in enumerate(out) if m is None]
    if missing:
        values = scorer.score_batch([items[i][1] for i in missing])
        for i, v in zip(missing, values):
            key, image = items[i]
            out[i] = _wrap(v, image, scorer, key)
            cache._insert(key, out[i])
    return out  # type: ignore[return-value]


def write_quality_map(path: str | Path, qmap: QualityMap) -> None:
    v = np.ascontiguousarray(qmap.values, dtype="<f4")
    Path(path).write_bytes(_HEADER.pack(_MAGIC, _VERSION, v.shape[0], v.shape[1]) + v.tobytes())


def read_quality_map(path: str | Path) -> QualityMap:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data), field="header")
    magic, version, h, w = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, field="magic")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4, field="version")
    expected = h * w * 4
    payload = len(data) - _HEADER.size
    if payload != expected:
        raise FormatError(
            f"payload is {payload} bytes but header says {h}x{w} ({expected} bytes)",
            offset=_HEADER.size + min(payload, expected),
            field="values",
        )
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w).astype(np.float32)
    return QualityMap(values, image_key=path.stem)
