"""Adaptive quality prompting: prompt pools, the complexity map and selection.

Every region of a partitioned image receives a number of conditioning tokens
that grows linearly as its mean quality falls. The tokens are drawn from one
of two local sub-pools (routed by a quality threshold) by ranking candidate
keys against a fixed random feature of the region crop. The global prompt
sequence is shared by every pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import InvalidInputError
from .partition import Region, RegionPartition, region_pixel_index


@dataclass(frozen=True)
class ComplexityParams:
    c_min: int = 4
    c_max: int = 32
    q_min: float = 1.0
    q_max: float = 5.0

    def __post_init__(self):
        if not 1 <= self.c_min <= self.c_max:
            raise InvalidInputError(f"need 1 <= c_min <= c_max, got {self.c_min}, {self.c_max}")
        if not self.q_min < self.q_max:
            raise InvalidInputError("q_min must be below q_max")


@dataclass(frozen=True)
class PoolConfig:
    global_len: int = 8
    num_candidates: int = 32
    max_len: int = 32
    dim: int = 64
    init_std: float = 0.02

    def __post_init__(self):
        if self.global_len < 1 or self.dim < 1 or self.max_len < 1:
            raise InvalidInputError("pool sizes must be positive")
        if self.num_candidates < 2 or self.num_candidates % 2:
            raise InvalidInputError("num_candidates must be a positive even number (two equal sub-pools)")


def complexity(q: float, params: ComplexityParams = ComplexityParams()) -> int:
    """Token budget for a region of quality ``q``; out-of-range ``q`` is clipped."""
    q = min(max(float(q), params.q_min), params.q_max)
    frac = (q - params.q_min) / (params.q_max - params.q_min)
    c = params.c_min + (params.c_max - params.c_min) * (1.0 - frac)
    return int(math.floor(c + 0.5))


class PromptPool(nn.Module):
    """Learnable global prompts plus a local pool split into low/high halves.

    Candidate ``i`` of the low sub-pool is row ``i`` of the local tensors and
    candidate ``i`` of the high sub-pool is row ``P/2 + i``.
    """

    def __init__(self, config: PoolConfig = PoolConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(int(seed))
        c = config
        self.global_prompts = nn.Parameter(torch.randn(c.global_len, c.dim, generator=g) * c.init_std)
        self.local_keys = nn.Parameter(torch.randn(c.num_candidates, c.dim, generator=g) * c.init_std)
        self.local_tokens = nn.Parameter(
            torch.randn(c.num_candidates, c.max_len, c.dim, generator=g) * c.init_std
        )
        self.normalize_keys()

    @property
    def sub_pool_size(self) -> int:
        return self.config.num_candidates // 2

    def sub_pool_offset(self, name: str) -> int:
        if name == "low":
            return 0
        if name == "high":
            return self.sub_pool_size
        raise InvalidInputError(f"unknown sub-pool {name!r}")

    @torch.no_grad()
    def normalize_keys(self) -> None:
        self.local_keys.div_(self.local_keys.norm(dim=1, keepdim=True).clamp_min(1e-12))

    def keys(self, name: str) -> np.ndarray:
        off = self.sub_pool_offset(name)
        return self.local_keys.detach().double().numpy()[off : off + self.sub_pool_size]


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted resampling of an ``H x W x C`` raster (exact box averages)."""

    def weights(n_in: int, n_out: int) -> np.ndarray:
        edges = np.arange(n_out + 1) * (n_in / n_out)
        lo, hi = edges[:-1, None], edges[1:, None]
        px = np.arange(n_in)[None, :]
        overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0, None)
        return overlap / overlap.sum(axis=1, keepdims=True)

    img = np.asarray(img, dtype=np.float64)
    wy, wx = weights(img.shape[0], out_h), weights(img.shape[1], out_w)
    return np.einsum("ih,hwc,jw->ijc", wy, img, wx)


class RegionFeatureExtractor:
    """Fixed random two-layer conv projection of a region crop to a unit vector."""

    RESIZE = 16

    def __init__(self, dim: int = 64, hidden: int = 32, seed: int = 1234):
        g = torch.Generator().manual_seed(int(seed))
        self.w1 = torch.randn(hidden, 3, 3, 3, generator=g, dtype=torch.float64) * math.sqrt(2.0 / 27)
        self.b1 = torch.randn(hidden, generator=g, dtype=torch.float64) * 0.1
        self.w2 = torch.randn(dim, hidden, 3, 3, generator=g, dtype=torch.float64) * math.sqrt(2.0 / (9 * hidden))
        self.b2 = torch.randn(dim, generator=g, dtype=torch.float64) * 0.1
        self.dim = dim

    def from_resized(self, small: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(small.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            h = torch.relu(torch.nn.functional.conv2d(x, self.w1, self.b1, padding=1))
            h = torch.nn.functional.conv2d(h, self.w2, self.b2, padding=1)
        f = h.mean(dim=(0, 2, 3)).numpy()
        return f / max(np.linalg.norm(f), 1e-12)

    def __call__(self, crop: np.ndarray) -> np.ndarray:
        crop = np.asarray(crop, dtype=np.float64)
        if crop.ndim != 3 or crop.shape[0] == 0 or crop.shape[1] == 0:
            raise InvalidInputError(f"crop must be a non-empty HxWx3 raster, got {crop.shape}")
        return self.from_resized(area_resize(crop, self.RESIZE, self.RESIZE))


def region_feature(crop: np.ndarray, extractor: RegionFeatureExtractor | None = None) -> np.ndarray:
    return (extractor or _default_extractor())(crop)


_EXTRACTOR: RegionFeatureExtractor | None = None


def _default_extractor() -> RegionFeatureExtractor:
    global _EXTRACTOR
    if _EXTRACTOR is None:
        _EXTRACTOR = RegionFeatureExtractor()
    return _EXTRACTOR


@dataclass
class RegionSelection:
    region_id: int
    mean_quality: float
    complexity: int
    source_pool: str
    candidate_ids: list[int]
    token_refs: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "region_id": self.region_id,
            "q_r": self.mean_quality,
            "C_p": self.complexity,
            "source_pool": self.source_pool,
            "candidate_ids": list(self.candidate_ids),
        }


def rank_candidates(keys: np.ndarray, feature: np.ndarray) -> np.ndarray:
    """Indices sorted by descending similarity, ties by ascending index."""
    sim = np.asarray(keys, dtype=np.float64) @ np.asarray(feature, dtype=np.float64)
    return np.lexsort((np.arange(len(sim)), -sim))


def select_region_prompts(
    region: Region,
    feature: np.ndarray,
    pool: PromptPool,
    params: ComplexityParams = ComplexityParams(),
    tau: float = 3.0,
    fixed_complexity: int | None = None,
) -> RegionSelection:
    """Route a region to a sub-pool and pick its top candidates.

    Each selected candidate contributes its first token. When the budget
    exceeds the sub-pool size, selection wraps around the ranked candidates
    and takes their next token.
    """
    name = "high" if region.mean_quality > tau else "low"
    c_p = complexity(region.mean_quality, params) if fixed_complexity is None else int(fixed_complexity)
    order = rank_candidates(pool.keys(name), feature)
    n = len(order)
    if c_p > n * pool.config.max_len:
        raise InvalidInputError(f"budget {c_p} exceeds the {n * pool.config.max_len} tokens in a sub-pool")
    refs = [(int(order[k % n]), k // n) for k in range(c_p)]
    return RegionSelection(
        region_id=region.region_id,
        mean_quality=region.mean_quality,
        complexity=c_p,
        source_pool=name,
        candidate_ids=[int(i) for i in order[: min(c_p, n)]],
        token_refs=refs,
    )


def selection_tokens(selection: RegionSelection, pool: PromptPool) -> torch.Tensor:
    """Differentiable ``complexity x D`` token matrix for one selection."""
    off = pool.sub_pool_offset(selection.source_pool)
    cand = torch.tensor([off + c for c, _ in selection.token_refs], dtype=torch.long)
    tok = torch.tensor([t for _, t in selection.token_refs], dtype=torch.long)
    return pool.local_tokens[cand, tok]


@dataclass
class Conditioning:
    """Token sequence plus the data needed to build pixel-to-token masks.

    ``token_region[n]`` is -1 for global tokens and the owning region id
    otherwise; a pixel may attend to token ``n`` when that entry is -1 or
    equals the pixel's region id.
    """

    tokens: torch.Tensor
    token_region: np.ndarray
    pixel_region: np.ndarray

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.shape[0])

    def mask(self) -> np.ndarray:
        pr = self.pixel_region.reshape(-1, 1)
        tr = self.token_region.reshape(1, -1)
        return (tr == -1) | (tr == pr)


def assemble_conditioning(
    partition: RegionPartition, selections: list[RegionSelection], pool: PromptPool
) -> Conditioning:
    if [s.region_id for s in selections] != [r.region_id for r in partition.regions]:
        raise InvalidInputError("need exactly one selection per region, in region order")
    parts = [pool.global_prompts]
    owners = [np.full(pool.config.global_len, -1, dtype=np.int32)]
    for s in selections:
        parts.append(selection_tokens(s, pool))
        owners.append(np.full(s.complexity, s.region_id, dtype=np.int32))
    return Conditioning(
        tokens=torch.cat(parts, dim=0),
        token_region=np.concatenate(owners),
        pixel_region=region_pixel_index(partition),
    )


@dataclass
class BatchConditioning:
    """Padded batch of conditionings; padded tokens carry owner -2 and are never attended."""

    tokens: torch.Tensor  # B x N x D
    token_region: torch.Tensor  # B x N, int64
    pixel_region: torch.Tensor  # B x H x W, int64

    @classmethod
    def collate(cls, items: list[Conditioning]) -> "BatchConditioning":
        n = max(c.num_tokens for c in items)
        d = items[0].tokens.shape[1]
        toks, owners = [], []
        for c in items:
            pad = n - c.num_tokens
            toks.append(torch.cat([c.tokens, c.tokens.new_zeros(pad, d)]) if pad else c.tokens)
            owners.append(np.concatenate([c.token_region, np.full(pad, -2, dtype=np.int32)]))
        return cls(
            tokens=torch.stack(toks),
            token_region=torch.from_numpy(np.stack(owners).astype(np.int64)),
            pixel_region=torch.from_numpy(np.stack([c.pixel_region for c in items]).astype(np.int64)),
        )

    def mask(self, stride: int = 1) -> torch.Tensor:
        """B x (h*w) x N permission mask at a down-sampled stride."""
        pr = self.pixel_region[:, ::stride, ::stride].flatten(1)
        tr = self.token_region
        return (tr[:, None, :] == -1) | (tr[:, None, :] == pr[:, :, None])


@dataclass
class RegionPlan:
    """Pool-independent part of prompt selection for one image."""

    partition: RegionPartition
    features: list[np.ndarray]


def plan_regions(image: np.ndarray, partition: RegionPartition, extractor: RegionFeatureExtractor | None = None) -> RegionPlan:
    ex = extractor or _default_extractor()
    feats = [ex(np.asarray(image)[r.slices()]) for r in partition.regions]
    return RegionPlan(partition, feats)


def select_all(
    plan: RegionPlan,
    pool: PromptPool,
    params: ComplexityParams = ComplexityParams(),
    tau: float = 3.0,
    fixed_complexity: int | None = None,
) -> list[RegionSelection]:
    return [
        select_region_prompts(r, f, pool, params, tau, fixed_complexity)
        for r, f in zip(plan.partition.regions, plan.features)
    ]


def debug_dump(selections: list[RegionSelection]) -> list[dict]:
    return [s.to_json() for s in selections]
