"""Quality-weighted training objective.

``total = noise + lambda1 * quality + lambda2 * perceptual`` where the
quality term reweights per-pixel noise error by how degraded the pixel is
and the perceptual term compares fixed random conv features on the
low-quality regions only.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, TrainingError
from .partition import RegionPartition


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    tau_p: float = 2.5
    q_min: float = 1.0
    q_max: float = 5.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if not self.q_min < self.q_max:
            raise InvalidInputError("q_min must be below q_max")


@dataclass
class LossBreakdown:
    noise: torch.Tensor
    quality: torch.Tensor
    perceptual: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k)) for k in ("noise", "quality", "perceptual", "total")}


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def loss_noise(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    _same_shape(eps, eps_hat, "loss_noise")
    return ((eps - eps_hat) ** 2).mean()


def quality_weight(q, q_min: float = 1.0, q_max: float = 5.0):
    return (q_max - q) / (q_max - q_min)


def loss_quality(eps: torch.Tensor, eps_hat: torch.Tensor, qmap: torch.Tensor, config: LossConfig = LossConfig()) -> torch.Tensor:
    """Pixel mean of ``w(q) * |eps - eps_hat|^2`` with the norm taken over channels.

    ``eps`` is ``[B x] C x H x W`` and ``qmap`` is ``[B x] H x W``.
    """
    _same_shape(eps, eps_hat, "loss_quality")
    if eps.shape[:-3] + eps.shape[-2:] != qmap.shape:
        raise InvalidInputError(f"quality map {tuple(qmap.shape)} does not match noise {tuple(eps.shape)}")
    w = quality_weight(qmap.to(eps.dtype), config.q_min, config.q_max)
    return (w * ((eps - eps_hat) ** 2).sum(dim=-3)).mean()


class PerceptualExtractor:
    """Frozen, seeded three-level conv pyramid (16, 32, 64 channels; stride 2 between levels)."""

    CHANNELS = (16, 32, 64)

    def __init__(self, seed: int = 4321):
        g = torch.Generator().manual_seed(int(seed))
        self.weights = []
        c_in = 3
        for c in self.CHANNELS:
            w = torch.randn(c, c_in, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(9 * c_in)
            b = torch.randn(c, generator=g, dtype=torch.float64) * 0.1
            self.weights.append((w, b))
            c_in = c

    def __call__(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Features of a ``[B x] 3 x H x W`` image in [0, 1]."""
        x = image if image.ndim == 4 else image[None]
        feats = []
        for i, (w, b) in enumerate(self.weights):
            x = torch.tanh(F.conv2d(x, w.to(x.dtype), b.to(x.dtype), stride=1 if i == 0 else 2, padding=1))
            feats.append(x if image.ndim == 4 else x[0])
        return feats


_EXTRACTOR: PerceptualExtractor | None = None


def default_extractor() -> PerceptualExtractor:
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = PerceptualExtractor()
    return _EXTRACTOR


def perceptual_features(image: torch.Tensor, extractor: PerceptualExtractor | None = None) -> list[torch.Tensor]:
    return (extractor or default_extractor())(image)


def feature_distance(a: torch.Tensor, b: torch.Tensor, extractor: PerceptualExtractor | None = None) -> torch.Tensor:
    """Sum over levels of the mean absolute feature difference; batched inputs give one value per item."""
    ex = extractor or default_extractor()
    fa, fb = ex(a), ex(b)
    dims = tuple(range(1, fa[0].ndim)) if a.ndim == 4 else None
    total = 0
    for x, y in zip(fa, fb):
        d = (x - y).abs()
        total = total + (d.mean(dim=dims) if dims else d.mean())
    return total


def low_regions(partition: RegionPartition, config: LossConfig = LossConfig()):
    return [r for r in partition.regions if r.mean_quality < config.tau_p]


def loss_percep(
    x0: torch.Tensor,
    x_pred: torch.Tensor,
    partition: RegionPartition,
    config: LossConfig = LossConfig(),
    extractor: PerceptualExtractor | None = None,
) -> torch.Tensor:
    """Region-selective feature L1 for one ``3 x H x W`` image pair in [0, 1].

    Features are computed per crop, so pixels outside the low-quality
    regions never influence the value. Crops of equal size share a batch.
    """
    _same_shape(x0, x_pred, "loss_percep")
    groups: dict[tuple[int, int], list] = defaultdict(list)
    for r in low_regions(partition, config):
        groups[(r.height, r.width)].append(r.slices())
    total = x_pred.new_zeros(())
    for sls in groups.values():
        a = torch.stack([x0[:, ys, xs] for ys, xs in sls])
        b = torch.stack([x_pred[:, ys, xs] for ys, xs in sls])
        total = total + feature_distance(a, b, extractor).sum()
    return total


def loss_percep_batch(
    x0: torch.Tensor,
    x_pred: torch.Tensor,
    partitions: list[RegionPartition],
    config: LossConfig = LossConfig(),
    extractor: PerceptualExtractor | None = None,
) -> torch.Tensor:
    """Batch mean of :func:`loss_percep`, batching equal-size crops across images."""
    _same_shape(x0, x_pred, "loss_percep_batch")
    if len(partitions) != x0.shape[0]:
        raise InvalidInputError("one partition per batch item is required")
    groups: dict[tuple[int, int], list] = defaultdict(list)
    for i, p in enumerate(partitions):
        for r in low_regions(p, config):
            groups[(r.height, r.width)].append((i, *r.slices()))
    total = x_pred.new_zeros(())
    for items in groups.values():
        a = torch.stack([x0[i, :, ys, xs] for i, ys, xs in items])
        b = torch.stack([x_pred[i, :, ys, xs] for i, ys, xs in items])
        total = total + feature_distance(a, b, extractor).sum()
    return total / x0.shape[0]


def loss_total(noise, quality, perceptual, config: LossConfig = LossConfig()) -> LossBreakdown:
    parts = {"noise": noise, "quality": quality, "perceptual": perceptual}
    for name, v in parts.items():
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise TrainingError(f"loss term {name!r} is not finite")
    total = noise + config.lambda1 * quality + config.lambda2 * perceptual
    return LossBreakdown(noise, quality, perceptual, total)
