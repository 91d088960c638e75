"""Noise schedule, closed-form forward process and the few-step DDIM sampler.

Timesteps are indexed 1..T; index 0 is the clean image (alpha_bar = 1).
All image math runs in the normalized [-1, 1] range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch

from .errors import InvalidInputError, TrainingError

X0_CLIP = 1.5


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: tuple[int, ...] | None = None


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    betas: np.ndarray  # length T + 1, betas[0] = 0
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sample_steps: tuple[int, ...]

    def sqrt_ab(self, t: int) -> float:
        return math.sqrt(self.alpha_bars[t])

    def sqrt_1mab(self, t: int) -> float:
        return math.sqrt(1.0 - self.alpha_bars[t])

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        if not (0 if allow_zero else 1) <= t <= self.T:
            raise InvalidInputError(f"timestep {t} outside [{0 if allow_zero else 1}, {self.T}]")
        return t


def make_schedule(
    T: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sample_steps: tuple[int, ...] | None = None,
) -> DiffusionSchedule:
    """Linear beta schedule. The default sampler plan is ``(T, T // 2)``."""
    if T < 2:
        raise InvalidInputError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidInputError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    steps = tuple(int(s) for s in (sample_steps or (T, T // 2)))
    if not steps or any(not 1 <= s <= T for s in steps) or any(a <= b for a, b in zip(steps, steps[1:])):
        raise InvalidInputError(f"sample_steps must be strictly decreasing within [1, T], got {steps}")
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return DiffusionSchedule(T, betas, alphas, alpha_bars, steps)


def schedule_from_config(cfg: ScheduleConfig) -> DiffusionSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.sample_steps)


def forward_diffuse(x0, t: int, eps, schedule: DiffusionSchedule):
    """Closed-form ``q(x_t | x_0)`` draw for a given noise realization."""
    t = schedule.check_t(t, allow_zero=True)
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise InvalidInputError(f"x0 {np.shape(x0)} and eps {np.shape(eps)} differ in shape")
    return schedule.sqrt_ab(t) * x0 + schedule.sqrt_1mab(t) * eps


def forward_step(x_prev, t: int, eps, schedule: DiffusionSchedule):
    """One Markov step ``q(x_t | x_{t-1})``."""
    t = schedule.check_t(t)
    return math.sqrt(schedule.alphas[t]) * x_prev + math.sqrt(schedule.betas[t]) * eps


def forward_diffuse_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Per-item timesteps for a ``B x C x H x W`` batch."""
    ab = torch.tensor(schedule.alpha_bars, dtype=x0.dtype)[t].view(-1, 1, 1, 1)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_x0(x_t, t: int, eps_hat, schedule: DiffusionSchedule):
    x0 = (x_t - schedule.sqrt_1mab(t) * eps_hat) / schedule.sqrt_ab(t)
    return x0.clip(-X0_CLIP, X0_CLIP)


def reverse_step(x_t, t_from: int, t_to: int, eps_hat, schedule: DiffusionSchedule, eta: float = 0.0, noise=None):
    """DDIM update from ``t_from`` to ``t_to`` (``eta = 0`` is deterministic)."""
    t_from = schedule.check_t(t_from)
    t_to = schedule.check_t(t_to, allow_zero=True)
    if not t_from > t_to:
        raise InvalidInputError(f"reverse step needs t_from > t_to, got {t_from} -> {t_to}")
    x0 = predict_x0(x_t, t_from, eps_hat, schedule)
    ab_from, ab_to = schedule.alpha_bars[t_from], schedule.alpha_bars[t_to]
    sigma = eta * math.sqrt((1 - ab_to) / (1 - ab_from) * (1 - ab_from / ab_to)) if eta else 0.0
    out = math.sqrt(ab_to) * x0 + math.sqrt(max(1 - ab_to - sigma**2, 0.0)) * eps_hat
    if sigma:
        if noise is None:
            raise InvalidInputError("eta > 0 needs a noise sample")
        out = out + sigma * noise
    return out


def to_model_range(img: torch.Tensor) -> torch.Tensor:
    return img * 2.0 - 1.0


def from_model_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


class CallCounter:
    """Wraps a denoiser and counts forward invocations."""

    def __init__(self, model: Callable[..., torch.Tensor]):
        self.model = model
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.model(*args, **kwargs)


def initial_noise(shape: tuple[int, ...], seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)


@torch.no_grad()
def sample(
    y: torch.Tensor,
    model: Callable[..., torch.Tensor],
    conditioning: Any,
    schedule: DiffusionSchedule,
    seed: int = 0,
) -> torch.Tensor:
    """Restore a ``B x 3 x H x W`` batch of degraded images in [0, 1].

    ``model(x_t, t, y, conditioning)`` receives normalized tensors and a
    per-item timestep tensor and must return the predicted noise.
    """
    if y.ndim != 4 or y.shape[1] != 3:
        raise InvalidInputError(f"y must be B x 3 x H x W, got {tuple(y.shape)}")
    y_n = to_model_range(y)
    x = initial_noise(tuple(y.shape), seed, y.dtype)
    steps = list(schedule.sample_steps) + [0]
    for t_from, t_to in zip(steps, steps[1:]):
        t = torch.full((y.shape[0],), t_from, dtype=torch.long)
        eps_hat = model(x, t, y_n, conditioning)
        if not torch.all(torch.isfinite(eps_hat)):
            raise TrainingError(f"denoiser returned non-finite values at step t={t_from}")
        x = reverse_step(x, t_from, t_to, eps_hat, schedule)
    return from_model_range(x)
