"""Training loop, checkpoints and the inference path.

Randomness is counter-based: the batch order for epoch ``e`` and the
timesteps/noise for step ``k`` are drawn from generators seeded by
``(seed, e)`` and ``(seed, k)``. Resuming therefore needs only the step
counter, and a resumed run replays the uninterrupted one exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import degrade
from .diffusion import (
    ScheduleConfig,
    forward_diffuse_batch,
    sample,
    schedule_from_config,
    to_model_range,
    X0_CLIP,
)
from .denoiser import DenoiserConfig, ReferenceDenoiser
from .errors import FormatError, InvalidInputError, TrainingError
from .losses import LossConfig, loss_noise, loss_percep_batch, loss_quality, loss_total, LossBreakdown
from .partition import PartitionParams, RegionPartition, adaptive_region_partition
from .prompts import (
    BatchConditioning,
    ComplexityParams,
    PoolConfig,
    PromptPool,
    RegionFeatureExtractor,
    RegionPlan,
    assemble_conditioning,
    plan_regions,
    select_all,
)
from .qualmap import NoReferenceScorer, QualityCache, QualityMap, score_batch


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "data/train"
    image_size: int = 64
    batch_size: int = 4
    steps: int = 2000
    lr: float = 2e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    tau: float = 3.0
    fixed_complexity: int | None = None
    seed: int = 0
    checkpoint_interval: int = 500
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    complexity: ComplexityParams = field(default_factory=ComplexityParams)
    partition: PartitionParams = field(default_factory=PartitionParams)
    loss: LossConfig = field(default_factory=LossConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        for name in ("image_size", "batch_size", "steps", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if not self.lr > 0:
            raise InvalidInputError("lr must be positive")
        if not self.complexity.q_min < self.tau < self.complexity.q_max:
            raise InvalidInputError(f"tau must lie strictly inside ({self.complexity.q_min}, {self.complexity.q_max})")
        if self.pool.max_len < self.complexity.c_max:
            raise InvalidInputError("pool.max_len must be >= complexity.c_max")
        if self.denoiser.token_dim != self.pool.dim:
            raise InvalidInputError("denoiser.token_dim must equal pool.dim")
        if self.image_size % 4:
            raise InvalidInputError("image_size must be divisible by 4")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return _build(cls, doc)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, doc: Any):
    if not isinstance(doc, dict):
        raise InvalidInputError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise InvalidInputError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else known[name].default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise InvalidInputError(str(e)) from e


def _step_generator(seed: int, *counter: int) -> torch.Generator:
    s = np.random.SeedSequence([int(seed), *map(int, counter)]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & ((1 << 63) - 1))


class ImageSet:
    """Tensors and ids for a list of samples; ``clean`` may be absent at inference time."""

    def __init__(self, ids: list[str], degraded: list[np.ndarray], clean: list[np.ndarray] | None = None):
        self.ids = list(ids)
        self.degraded_np = [np.asarray(d, dtype=np.float64) for d in degraded]
        self.degraded = torch.stack([torch.from_numpy(d.transpose(2, 0, 1).copy()).float() for d in self.degraded_np])
        self.clean_np = [np.asarray(c, dtype=np.float64) for c in clean] if clean is not None else None
        self.clean = (
            torch.stack([torch.from_numpy(c.transpose(2, 0, 1).copy()).float() for c in self.clean_np])
            if clean is not None
            else None
        )

    @classmethod
    def from_samples(cls, samples: list[degrade.DegradedSample]) -> "ImageSet":
        return cls([s.sample_id for s in samples], [s.degraded for s in samples], [s.clean for s in samples])

    def __len__(self) -> int:
        return len(self.ids)


class Conditioner:
    """Quality scoring (cached), partitioning and region features for each image key."""

    def __init__(self, config: TrainConfig, cache: QualityCache | None = None, scorer=None):
        self.config = config
        self.cache = cache or QualityCache()
        self.scorer = scorer or NoReferenceScorer()
        self.extractor = RegionFeatureExtractor(dim=config.pool.dim)
        self.plans: dict[str, RegionPlan] = {}

    def quality_maps(self, keys: list[str], images: list[np.ndarray]) -> list[QualityMap]:
        return score_batch(self.cache, list(zip(keys, images)), self.scorer)

    def plan(self, key: str, image: np.ndarray, qmap: QualityMap) -> RegionPlan:
        p = self.plans.get(key)
        if p is None:
            part = adaptive_region_partition(qmap, self.config.partition)
            p = self.plans[key] = plan_regions(image, part, self.extractor)
        return p

    def prepare(self, keys: list[str], images: list[np.ndarray]) -> tuple[list[QualityMap], list[RegionPlan]]:
        qmaps = self.quality_maps(keys, images)
        return qmaps, [self.plan(k, im, q) for k, im, q in zip(keys, images, qmaps)]

    def conditioning(self, plans: list[RegionPlan], pool: PromptPool, tau: float | None = None,
                     fixed_complexity: int | None | str = "config"):
        cfg = self.config
        tau = cfg.tau if tau is None else tau
        fixed = cfg.fixed_complexity if fixed_complexity == "config" else fixed_complexity
        selections = [select_all(p, pool, cfg.complexity, tau, fixed) for p in plans]
        conds = [assemble_conditioning(p.partition, s, pool) for p, s in zip(plans, selections)]
        return BatchConditioning.collate(conds), selections


@dataclass
class TrainState:
    config: TrainConfig
    model: ReferenceDenoiser
    pool: PromptPool
    optimizer: torch.optim.Optimizer
    step: int = 0

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.model.parameters()) + list(self.pool.parameters())


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(list(params), lr=config.lr, betas=tuple(config.adam_betas))


def init_state(config: TrainConfig) -> TrainState:
    schedule = schedule_from_config(config.schedule)
    model = ReferenceDenoiser(config.denoiser, schedule)
    pool = PromptPool(config.pool, seed=config.seed)
    opt = make_optimizer(list(model.parameters()) + list(pool.parameters()), config)
    return TrainState(config, model, pool, opt)


class Trainer:
    def __init__(self, config: TrainConfig, data: ImageSet, state: TrainState | None = None,
                 conditioner: Conditioner | None = None):
        if data.clean is None:
            raise InvalidInputError("training data needs clean targets")
        if len(data) < 1:
            raise InvalidInputError("empty training set")
        self.config = config
        self.data = data
        self.state = state or init_state(config)
        self.conditioner = conditioner or Conditioner(config)
        self.schedule = self.state.model.schedule

    def batch_indices(self, step: int) -> list[int]:
        """Items for 0-based ``step``: consecutive slices of per-epoch permutations."""
        n, b = len(self.data), self.config.batch_size
        out = []
        for pos in range(step * b, step * b + b):
            epoch, k = divmod(pos, n)
            perm = torch.randperm(n, generator=_step_generator(self.config.seed, 1, epoch))
            out.append(int(perm[k]))
        return out

    def train_step(self, indices: list[int] | None = None) -> LossBreakdown:
        st, cfg = self.state, self.config
        idx = self.batch_indices(st.step) if indices is None else list(indices)
        keys = [self.data.ids[i] for i in idx]
        qmaps, plans = self.conditioner.prepare(keys, [self.data.degraded_np[i] for i in idx])
        cond, _ = self.conditioner.conditioning(plans, st.pool)

        y = self.data.degraded[idx]
        x0 = to_model_range(self.data.clean[idx])
        g = _step_generator(cfg.seed, 2, st.step)
        t = torch.randint(1, self.schedule.T + 1, (len(idx),), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        x_t = forward_diffuse_batch(x0, t, eps, self.schedule)

        st.model.train()
        eps_hat = st.model(x_t, t, to_model_range(y), cond)
        ab = torch.tensor(self.schedule.alpha_bars, dtype=x_t.dtype)[t].view(-1, 1, 1, 1)
        x0_hat = ((x_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()).clamp(-X0_CLIP, X0_CLIP)
        x_pred = (x0_hat + 1) * 0.5

        q = torch.from_numpy(np.stack([m.values for m in qmaps]))
        parts = [p.partition for p in plans]
        try:
            losses = loss_total(
                loss_noise(eps, eps_hat),
                loss_quality(eps, eps_hat, q, cfg.loss),
                loss_percep_batch(self.data.clean[idx], x_pred, parts, cfg.loss),
                cfg.loss,
            )
        except TrainingError as e:
            raise TrainingError(f"step {st.step + 1}: {e} (samples {keys}, t={t.tolist()})") from e

        st.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(st.parameters(), cfg.grad_clip)
        st.optimizer.step()
        st.pool.normalize_keys()
        st.step += 1
        return LossBreakdown(*(v.detach() for v in (losses.noise, losses.quality, losses.perceptual, losses.total)))

    def run(self, steps: int | None = None, log_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None, progress=None) -> list[dict[str, float]]:
        steps = self.config.steps if steps is None else steps
        rows = []
        writer = fh = None
        if log_path is not None:
            log_path = Path(log_path)
            new = not log_path.exists() or self.state.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", "noise", "quality", "perceptual", "total"])
        try:
            target = self.state.step + steps
            while self.state.step < target:
                lb = self.train_step()
                row = {"step": self.state.step, **lb.as_floats()}
                rows.append(row)
                if writer:
                    writer.writerow([row["step"]] + [repr(row[k]) for k in ("noise", "quality", "perceptual", "total")])
                if checkpoint_dir is not None and self.state.step % self.config.checkpoint_interval == 0:
                    save_checkpoint(self.state, Path(checkpoint_dir) / f"step{self.state.step:06d}.aqck")
                if progress:
                    progress(row)
        finally:
            if fh:
                fh.close()
        return rows


# --- checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"AQCK"
CKPT_VERSION = 1
_KIND_F32, _KIND_JSON = 0, 1


def _state_blobs(state: TrainState) -> list[tuple[str, int, Any]]:
    blobs: list[tuple[str, int, Any]] = []
    meta = {
        "step": state.step,
        "config": state.config.to_dict(),
        "rng": {"kind": "counter", "seed": state.config.seed, "step": state.step},
    }
    blobs.append(("meta", _KIND_JSON, meta))
    for name, p in state.model.named_parameters():
        blobs.append((f"model/{name}", _KIND_F32, p.detach()))
    for name, p in state.pool.named_parameters():
        blobs.append((f"pool/{name}", _KIND_F32, p.detach()))
    for i, p in enumerate(state.parameters()):
        s = state.optimizer.state.get(p)
        if not s:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            blobs.append((f"optim/{i}/{key}", _KIND_F32, torch.as_tensor(s[key], dtype=torch.float32)))
    return blobs


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Versioned header, then length-prefixed named blobs (little-endian float32 arrays or JSON)."""
    out = bytearray()
    blobs = _state_blobs(state)
    out += struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blobs))
    for name, kind, value in blobs:
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb + struct.pack("<B", kind)
        if kind == _KIND_JSON:
            payload = json.dumps(value, sort_keys=True).encode()
            out += struct.pack("<I", 0)
        else:
            arr = value.cpu().numpy().astype("<f4")
            payload = arr.tobytes()
            out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack("<Q", len(payload)) + payload
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str, field_name: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("unexpected end of file", offset=self.pos, field=field_name)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int, field_name: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"blob needs {n} bytes, {len(self.data) - self.pos} left", offset=self.pos, field=field_name)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b


def read_checkpoint_blobs(path: str | Path) -> dict[str, Any]:
    r = _Reader(Path(path).read_bytes())
    magic, version, count = r.take("<4sII", "header")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0, field="magic")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {CKPT_VERSION})",
                          offset=4, field="version")
    blobs: dict[str, Any] = {}
    for _ in range(count):
        (nlen,) = r.take("<I", "blob name length")
        name = r.raw(nlen, "blob name").decode("utf-8", errors="replace")
        (kind,) = r.take("<B", f"{name}: kind")
        (ndim,) = r.take("<I", f"{name}: ndim")
        shape = r.take(f"<{ndim}I", f"{name}: shape") if ndim else ()
        (nbytes,) = r.take("<Q", f"{name}: length")
        payload = r.raw(nbytes, name)
        if kind == _KIND_JSON:
            try:
                blobs[name] = json.loads(payload)
            except ValueError as e:
                raise FormatError(f"invalid JSON: {e}", offset=r.pos - nbytes, field=name) from e
        elif kind == _KIND_F32:
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"length {nbytes} does not match shape {shape}", offset=r.pos - nbytes, field=name)
            blobs[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        else:
            raise FormatError(f"unknown blob kind {kind}", offset=r.pos, field=name)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last blob", offset=r.pos, field="footer")
    if "meta" not in blobs:
        raise FormatError("missing metadata blob", offset=r.pos, field="meta")
    return blobs


def load_checkpoint(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a training state; ``config`` overrides the stored snapshot (shapes must agree)."""
    blobs = read_checkpoint_blobs(path)
    meta = blobs["meta"]
    cfg = config or TrainConfig.from_dict(meta["config"])
    state = init_state(cfg)
    state.step = int(meta["step"])
    with torch.no_grad():
        for prefix, module in (("model", state.model), ("pool", state.pool)):
            for name, p in module.named_parameters():
                key = f"{prefix}/{name}"
                if key not in blobs:
                    raise FormatError("parameter missing from checkpoint", field=key)
                arr = blobs[key]
                if tuple(arr.shape) != tuple(p.shape):
                    raise FormatError(f"shape {arr.shape} != expected {tuple(p.shape)}", field=key)
                p.copy_(torch.from_numpy(arr))
    for i, p in enumerate(state.parameters()):
        if f"optim/{i}/step" not in blobs:
            continue
        state.optimizer.state[p] = {
            "step": torch.tensor(float(blobs[f"optim/{i}/step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(blobs[f"optim/{i}/exp_avg"]),
            "exp_avg_sq": torch.from_numpy(blobs[f"optim/{i}/exp_avg_sq"]),
        }
    return state


# --- inference -------------------------------------------------------------

@dataclass
class RestoreReport:
    image_key: str
    mean_q: float
    min_q: float
    max_q: float
    region_count: int
    prompt_budget: int
    denoiser_calls: int
    wall_time_s: float

    def to_json(self) -> dict:
        return asdict(self)


def restore(
    images: ImageSet,
    state: TrainState,
    seed: int = 0,
    conditioner: Conditioner | None = None,
    tau: float | None = None,
    fixed_complexity: int | None | str = "config",
) -> tuple[torch.Tensor, list[RestoreReport]]:
    """Score, partition, select prompts and run the few-step sampler, one image at a time."""
    cond_maker = conditioner or Conditioner(state.config)
    state.model.eval()
    outs, reports = [], []
    for i, key in enumerate(images.ids):
        t0 = time.perf_counter()
        (qmap,), (plan,) = cond_maker.prepare([key], [images.degraded_np[i]])
        cond, (sel,) = cond_maker.conditioning([plan], state.pool, tau, fixed_complexity)
        calls = 0

        def counted(*a):
            nonlocal calls
            calls += 1
            return state.model(*a)

        img_seed = int(np.random.SeedSequence([int(seed), 3, i]).generate_state(1)[0])
        out = sample(images.degraded[i : i + 1], counted, cond, state.model.schedule, img_seed)
        outs.append(out[0])
        v = qmap.values
        reports.append(
            RestoreReport(
                image_key=key,
                mean_q=qmap.mean(),
                min_q=float(v.min()),
                max_q=float(v.max()),
                region_count=len(plan.partition),
                prompt_budget=sum(s.complexity for s in sel),
                denoiser_calls=calls,
                wall_time_s=time.perf_counter() - t0,
            )
        )
    return torch.stack(outs), reports


def tensor_to_image(x: torch.Tensor) -> np.ndarray:
    return x.detach().double().numpy().transpose(1, 2, 0)
