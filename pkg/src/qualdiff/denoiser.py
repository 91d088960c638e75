"""A small conditional U-net standing in for a full restoration backbone.

Input is ``concat(x_t, y)``; each encoder stage is a gated conv block, a
timestep bias and a masked cross-attention onto the prompt tokens. Setting
``head_attention`` adds one more attention layer right before the 1x1
output head; with no stage attention this is a single-attention model in
which a pixel's output depends only on its own region's tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import DiffusionSchedule
from .errors import InvalidInputError
from .prompts import BatchConditioning


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 32
    token_dim: int = 64
    attn_stages: tuple[int, ...] = (0, 1, 2)
    head_attention: bool = True
    attn_dim: int = 32
    # "v": the head predicts sqrt(ab) eps - sqrt(1 - ab) x0, converted to eps.
    # "eps": the head output is the noise prediction itself.
    prediction: str = "v"
    seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.attn_dim < 1 or self.token_dim < 1:
            raise InvalidInputError("denoiser widths must be positive (width >= 4)")
        if any(s not in (0, 1, 2) for s in self.attn_stages):
            raise InvalidInputError(f"attn_stages must be drawn from 0, 1, 2: {self.attn_stages}")
        if self.prediction not in ("v", "eps"):
            raise InvalidInputError(f"prediction must be 'v' or 'eps', got {self.prediction!r}")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([ang.sin(), ang.cos()], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class GatedBlock(nn.Module):
    """Norm, pointwise expand, depthwise conv, gate; then a gated pointwise FFN."""

    def __init__(self, c: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, c)
        self.expand = nn.Conv2d(c, 2 * c, 1)
        self.dw = nn.Conv2d(2 * c, 2 * c, 3, padding=1, groups=2 * c)
        self.proj = nn.Conv2d(c, c, 1)
        self.norm2 = nn.GroupNorm(1, c)
        self.ffn_in = nn.Conv2d(c, 2 * c, 1)
        self.ffn_out = nn.Conv2d(c, c, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, b = self.dw(self.expand(self.norm1(x))).chunk(2, dim=1)
        x = x + self.proj(a * b)
        a, b = self.ffn_in(self.norm2(x)).chunk(2, dim=1)
        return x + self.ffn_out(a * b)


class MaskedCrossAttention(nn.Module):
    def __init__(self, c: int, token_dim: int, attn_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, c)
        self.q = nn.Conv2d(c, attn_dim, 1, bias=False)
        self.k = nn.Linear(token_dim, attn_dim, bias=False)
        self.v = nn.Linear(token_dim, attn_dim, bias=False)
        self.out = nn.Conv2d(attn_dim, c, 1)
        self.scale = attn_dim**-0.5

    def forward(self, x: torch.Tensor, tokens: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        q = self.q(self.norm(x)).flatten(2).transpose(1, 2)  # B x hw x d
        k, v = self.k(tokens), self.v(tokens)  # B x N x d
        logits = torch.bmm(q, k.transpose(1, 2)) * self.scale
        logits = logits.masked_fill(~mask, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        o = torch.bmm(attn, v).transpose(1, 2).reshape(b, -1, h, w)
        return x + self.out(o)


class ReferenceDenoiser(nn.Module):
    """``forward(x_t, t, y, cond) -> eps_hat`` on ``B x 3 x H x W`` tensors (H, W divisible by 4)."""

    def __init__(self, config: DenoiserConfig, schedule: DiffusionSchedule):
        super().__init__()
        self.config = config
        self.schedule = schedule
        self.register_buffer("alpha_bars", torch.tensor(schedule.alpha_bars), persistent=False)
        # Seed a private RNG stream so construction does not disturb global state.
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            c = config.width
            chans = (c, 2 * c, 4 * c)
            self.chans = chans
            self.time_mlp = nn.Sequential(nn.Linear(c, 4 * c), nn.SiLU(), nn.Linear(4 * c, 4 * c))
            self.inp = nn.Conv2d(6, c, 3, padding=1)
            self.enc = nn.ModuleList(GatedBlock(ch) for ch in chans)
            self.time_proj = nn.ModuleList(nn.Linear(4 * c, ch) for ch in chans)
            self.attn = nn.ModuleDict(
                {str(s): MaskedCrossAttention(chans[s], config.token_dim, config.attn_dim) for s in config.attn_stages}
            )
            self.down = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 2, stride=2) for i in range(2))
            self.up = nn.ModuleList(
                nn.Sequential(nn.Conv2d(chans[i + 1], chans[i] * 4, 1, bias=False), nn.PixelShuffle(2)) for i in range(2)
            )
            self.dec = nn.ModuleList(GatedBlock(chans[i]) for i in range(2))
            self.head_attn = (
                MaskedCrossAttention(c, config.token_dim, config.attn_dim) if config.head_attention else None
            )
            self.head = nn.Conv2d(c, 3, 1)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor, cond: BatchConditioning) -> torch.Tensor:
        if x_t.shape != y.shape or x_t.ndim != 4 or x_t.shape[1] != 3:
            raise InvalidInputError(f"x_t {tuple(x_t.shape)} and y {tuple(y.shape)} must both be B x 3 x H x W")
        if x_t.shape[2] % 4 or x_t.shape[3] % 4:
            raise InvalidInputError("spatial size must be divisible by 4")
        dtype = x_t.dtype
        temb = self.time_mlp(timestep_embedding(t, self.config.width).to(dtype))
        tokens = cond.tokens.to(dtype)

        h = self.inp(torch.cat([x_t, y], dim=1))
        skips = []
        for s in range(3):
            h = self.enc[s](h) + self.time_proj[s](temb)[:, :, None, None]
            if str(s) in self.attn:
                h = self.attn[str(s)](h, tokens, cond.mask(2**s))
            if s < 2:
                skips.append(h)
                h = self.down[s](h)
        for s in (1, 0):
            h = self.dec[s](self.up[s](h) + skips[s])
        if self.head_attn is not None:
            h = self.head_attn(h, tokens, cond.mask(1))
        out = self.head(h)
        if self.config.prediction == "eps":
            return out
        ab = self.alpha_bars.to(dtype)[t].view(-1, 1, 1, 1)
        return ab.sqrt() * out + (1 - ab).sqrt() * x_t


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
