"""Evaluation reports, ablation drivers and the inspection dump."""

from __future__ import annotations

import csv
import json
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import degrade
from .colormap import apply_colormap
from .errors import InvalidInputError
from .metrics import psnr, ssim
from .prompts import PromptPool
from .qualmap import FullReferenceScorer, NoReferenceScorer, score_batch, score_no_reference, write_quality_map
from .trainer import (
    Conditioner,
    ImageSet,
    TrainConfig,
    TrainState,
    Trainer,
    init_state,
    restore,
    save_checkpoint,
    tensor_to_image,
)


@dataclass
class EvalRow:
    sample_id: str
    psnr_db: float
    ssim: float
    psnr_input_db: float
    ssim_input: float
    mean_q_before: float
    mean_q_after: float
    region_count: int
    prompt_budget: int


NUMERIC = [f.name for f in fields(EvalRow) if f.name != "sample_id"]


def aggregate(rows: list[EvalRow]) -> dict[str, dict[str, float]]:
    """Per-field mean and population std; identical infinite PSNRs have zero spread."""
    out = {}
    for name in NUMERIC:
        v = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        if np.all(v == v[0]):
            std = 0.0
        elif not np.all(np.isfinite(v)):
            std = math.inf
        else:
            std = float(v.std())
        out[name] = {"mean": float(v.mean()), "std": std}
    return out


def _encode(value):
    """Infinite floats are written as the string "inf" so reports stay strict JSON."""
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_encode(v) for v in value]
    return value


def _decode(value):
    if value in ("inf", "-inf"):
        return float(value)
    if isinstance(value, dict):
        return {k: _decode(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate(self.rows)

    def to_json(self) -> dict:
        return _encode({"rows": [asdict(r) for r in self.rows], "aggregate": self.aggregate, "config": self.config})

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        """Load a report, refusing it if the stored aggregates disagree with its rows."""
        rows = [EvalRow(**{k: (v if k == "sample_id" else _decode(v)) for k, v in r.items()}) for r in doc["rows"]]
        report = cls(rows, _decode(doc["aggregate"]), doc.get("config", {}))
        fresh = aggregate(rows)
        for name, stats in fresh.items():
            for k, v in stats.items():
                if not math.isclose(v, report.aggregate[name][k], rel_tol=1e-12, abs_tol=1e-12):
                    raise InvalidInputError(f"aggregate {name}.{k} does not match its rows")
        return report

    def save(self, out_dir: str | Path, stem: str = "eval") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=2, allow_nan=False) + "\n")
        write_rows_csv(out_dir / f"{stem}.csv", [asdict(r) for r in self.rows])


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def make_scorer(mode: str, images: ImageSet):
    """``no-reference`` scores degraded inputs; ``full-reference`` compares them to the clean targets."""
    if mode == "no-reference":
        return NoReferenceScorer(), list(images.degraded_np)
    if mode == "full-reference":
        if images.clean is None:
            raise InvalidInputError("full-reference scoring needs clean images")
        return FullReferenceScorer(), list(zip(images.degraded_np, images.clean_np))
    raise InvalidInputError(f"unknown scorer mode {mode!r}")


class _ScoredConditioner(Conditioner):
    """Conditioner whose scorer inputs differ from the images used for features."""

    def __init__(self, config: TrainConfig, mode: str, images: ImageSet):
        scorer, inputs = make_scorer(mode, images)
        super().__init__(config, scorer=scorer)
        self._inputs = dict(zip(images.ids, inputs))

    def quality_maps(self, keys, images):
        return score_batch(self.cache, [(k, self._inputs[k]) for k in keys], self.scorer)


def evaluate(
    state: TrainState,
    images: ImageSet,
    seed: int = 0,
    scorer_mode: str = "no-reference",
    tau: float | None = None,
    fixed_complexity: int | None | str = "config",
):
    """Restore ``images`` and score them against their clean targets."""
    if images.clean is None:
        raise InvalidInputError("evaluation needs clean targets")
    cond = _ScoredConditioner(state.config, scorer_mode, images)
    restored, reports = restore(images, state, seed, cond, tau, fixed_complexity)
    rows = []
    for i, rep in enumerate(reports):
        clean = images.clean_np[i]
        out = tensor_to_image(restored[i])
        rows.append(
            EvalRow(
                sample_id=images.ids[i],
                psnr_db=psnr(out, clean),
                ssim=ssim(out, clean),
                psnr_input_db=psnr(images.degraded_np[i], clean),
                ssim_input=ssim(images.degraded_np[i], clean),
                mean_q_before=rep.mean_q,
                mean_q_after=score_no_reference(out).mean(),
                region_count=rep.region_count,
                prompt_budget=rep.prompt_budget,
            )
        )
    report = EvalReport(rows, config={**state.config.to_dict(), "eval_seed": seed, "scorer": scorer_mode})
    return report, restored, reports


def _train(config: TrainConfig, train: ImageSet | None, steps: int) -> TrainState:
    state = init_state(config)
    if steps > 0:
        if train is None:
            raise InvalidInputError("training steps requested without training data")
        Trainer(config, train, state).run(steps)
    return state


def parse_mode(mode: str) -> int | None:
    if mode == "adaptive":
        return None
    if mode.startswith("fixed-"):
        try:
            return int(mode[len("fixed-"):])
        except ValueError:
            pass
    raise InvalidInputError(f"prompting mode must be 'adaptive' or 'fixed-<C>', got {mode!r}")


def ablate_prompting(
    config: TrainConfig,
    train: ImageSet | None,
    test: ImageSet,
    modes: list[str] | None = None,
    steps: int = 0,
    seed: int = 0,
    scorer_mode: str = "no-reference",
) -> list[dict]:
    """Fixed-length versus adaptive prompting, each variant trained identically for ``steps`` steps.

    ``budget_per_region`` is the mean number of tokens a region receives,
    which for a fixed mode is exactly its C.
    """
    c = config.complexity
    modes = modes or [f"fixed-{c.c_min}", "fixed-10", f"fixed-{c.c_max}", "adaptive"]
    rows = []
    for mode in modes:
        fixed = parse_mode(mode)
        cfg = config.replace(fixed_complexity=fixed)
        state = _train(cfg, train, steps)
        report, _, _ = evaluate(state, test, seed, scorer_mode)
        regions = sum(r.region_count for r in report.rows)
        tokens = sum(r.prompt_budget for r in report.rows)
        rows.append(
            {
                "mode": mode,
                "psnr_db": report.aggregate["psnr_db"]["mean"],
                "ssim": report.aggregate["ssim"]["mean"],
                "budget_per_region": tokens / regions,
                "budget_per_image": tokens / len(report.rows),
            }
        )
    return rows


def ablate_threshold(
    config: TrainConfig,
    train: ImageSet | None,
    test: ImageSet,
    taus: list[float],
    steps: int = 0,
    seed: int = 0,
    scorer_mode: str = "no-reference",
) -> list[dict]:
    """One row per threshold; the threshold may only change sub-pool routing."""
    rows, histograms = [], []
    for tau in taus:
        cfg = config.replace(tau=float(tau)) if config.complexity.q_min < tau < config.complexity.q_max else config
        state = _train(cfg, train, steps)
        report, _, _ = evaluate(state, test, seed, scorer_mode, tau=float(tau))
        cond = _ScoredConditioner(cfg, scorer_mode, test)
        _, plans = cond.prepare(test.ids, test.degraded_np)
        _, sels = cond.conditioning(plans, state.pool, tau=float(tau))
        flat = [s for per_image in sels for s in per_image]
        hist = Counter(s.complexity for s in flat)
        histograms.append(hist)
        rows.append(
            {
                "tau": float(tau),
                "psnr_db": report.aggregate["psnr_db"]["mean"],
                "ssim": report.aggregate["ssim"]["mean"],
                "regions_high": sum(s.source_pool == "high" for s in flat),
                "regions_low": sum(s.source_pool == "low" for s in flat),
                "complexity_histogram": json.dumps(dict(sorted(hist.items()))),
            }
        )
    if any(h != histograms[0] for h in histograms):
        raise RuntimeError("complexity histogram changed with the threshold")
    return rows


LOSS_VARIANTS = {
    "noise": (0.0, 0.0),
    "noise+quality": (None, 0.0),
    "noise+percep": (0.0, None),
    "full": (None, None),
}


def ablate_loss(
    config: TrainConfig,
    train: ImageSet,
    test: ImageSet,
    variants: list[str] | None = None,
    steps: int = 0,
    seed: int = 0,
) -> list[dict]:
    """Switch loss terms off by zeroing their weights; everything else is held fixed."""
    rows = []
    for name in variants or list(LOSS_VARIANTS):
        if name not in LOSS_VARIANTS:
            raise InvalidInputError(f"unknown loss variant {name!r}")
        l1, l2 = LOSS_VARIANTS[name]
        loss = replace(
            config.loss,
            lambda1=config.loss.lambda1 if l1 is None else l1,
            lambda2=config.loss.lambda2 if l2 is None else l2,
        )
        state = _train(config.replace(loss=loss), train, steps)
        report, _, _ = evaluate(state, test, seed)
        rows.append(
            {
                "variant": name,
                "lambda1": loss.lambda1,
                "lambda2": loss.lambda2,
                "psnr_db": report.aggregate["psnr_db"]["mean"],
                "ssim": report.aggregate["ssim"]["mean"],
            }
        )
    return rows


def inspect(
    image: np.ndarray,
    out_dir: str | Path,
    config: TrainConfig = TrainConfig(),
    pool: PromptPool | None = None,
    image_key: str = "image",
) -> dict[str, Path]:
    """Write the quality map, its heatmap, the partition and the per-region prompt allocation."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    qmap = score_no_reference(image, image_key)
    pool = pool or PromptPool(config.pool, seed=config.seed)
    cond = Conditioner(config)
    plan = cond.plan(image_key, np.asarray(image, dtype=np.float64), qmap)
    _, (sels,) = cond.conditioning([plan], pool)
    paths = {
        "quality_map": out_dir / "quality.aqmp",
        "heatmap": out_dir / "quality_heatmap.png",
        "partition": out_dir / "partition.json",
        "regions": out_dir / "regions.json",
    }
    write_quality_map(paths["quality_map"], qmap)
    Image.fromarray(apply_colormap(qmap.values)).save(paths["heatmap"], format="PNG", optimize=False)
    plan.partition.save(paths["partition"])
    paths["regions"].write_text(json.dumps([s.to_json() for s in sels], indent=2) + "\n")
    return paths


# --- pinned end-to-end toy run ----------------------------------------------


@dataclass(frozen=True)
class ToyRun:
    """Seeds and sizes of the reference toy experiment."""

    train_count: int = 256
    test_count: int = 32
    size: int = 64
    train_data_seed: int = 1
    test_data_seed: int = 2
    train_seed: int = 0
    eval_seed: int = 0
    steps: int = 2000
    lr: float = 1e-3

    def config(self, dataset: str | Path = "data/train") -> TrainConfig:
        return TrainConfig(dataset=str(dataset), image_size=self.size, steps=self.steps, lr=self.lr, seed=self.train_seed)


def run_toy(workdir: str | Path, toy: ToyRun = ToyRun(), progress=None) -> dict:
    """Generate the toy data, train, and evaluate on the held-out split.

    Writes the datasets, training log, final checkpoint and evaluation
    report under ``workdir`` and returns the headline numbers.
    """
    work = Path(workdir)
    degrade.make_dataset(work / "train", toy.train_count, toy.size, toy.train_data_seed)
    degrade.make_dataset(work / "test", toy.test_count, toy.size, toy.test_data_seed)
    train = ImageSet.from_samples(degrade.load_dataset(work / "train"))
    test = ImageSet.from_samples(degrade.load_dataset(work / "test"))
    cfg = toy.config(work / "train")
    trainer = Trainer(cfg, train)
    t0 = time.perf_counter()
    trainer.run(cfg.steps, work / "train_log.csv", progress=progress)
    train_s = time.perf_counter() - t0
    save_checkpoint(trainer.state, work / "final.aqck")
    report, _, reports = evaluate(trainer.state, test, toy.eval_seed)
    report.save(work, "eval")
    agg = report.aggregate
    return {
        "psnr_restored_db": agg["psnr_db"]["mean"],
        "psnr_degraded_db": agg["psnr_input_db"]["mean"],
        "gain_db": agg["psnr_db"]["mean"] - agg["psnr_input_db"]["mean"],
        "ssim_restored": agg["ssim"]["mean"],
        "ssim_degraded": agg["ssim_input"]["mean"],
        "denoiser_calls": [r.denoiser_calls for r in reports],
        "train_seconds": train_s,
    }
