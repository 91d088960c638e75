"""Command-line entry point.

Exit codes: 0 on success, 2 for invalid input or config, 3 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import degrade
from .errors import FormatError, InvalidInputError
from .experiments import (
    ablate_loss,
    ablate_prompting,
    ablate_threshold,
    evaluate,
    inspect,
    write_rows_csv,
)
from .trainer import ImageSet, TrainConfig, Trainer, load_checkpoint, restore, save_checkpoint, tensor_to_image

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(steps=args.steps)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_images(path: str, need_clean: bool = False) -> ImageSet:
    """A dataset directory, a directory of PNGs, or a single PNG."""
    p = Path(path)
    if not p.exists():
        raise InvalidInputError(f"{path} does not exist")
    if p.is_dir() and ((p / "manifest.json").exists() or any((d / "spec.json").exists() for d in p.iterdir())):
        return ImageSet.from_samples(degrade.load_dataset(p))
    if need_clean:
        raise InvalidInputError(f"{path} is not a generated dataset with clean targets")
    files = sorted(p.glob("*.png")) if p.is_dir() else [p]
    if not files:
        raise InvalidInputError(f"no PNG images found in {path}")
    imgs = []
    for f in files:
        with Image.open(f) as im:
            imgs.append(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    return ImageSet([f.stem for f in files], imgs)


def _save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path, format="PNG", optimize=False)


def _write_table(out: Path, stem: str, rows: list[dict]) -> None:
    write_rows_csv(out / f"{stem}.csv", rows)
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def cmd_gen_data(args) -> None:
    mix = json.loads(args.mix) if args.mix else None
    ids = degrade.make_dataset(args.out, args.count, args.size, args.seed or 0, mix)
    print(f"wrote {len(ids)} samples to {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    if args.data:
        cfg = cfg.replace(dataset=args.data)
    out = _out(args)
    data = ImageSet.from_samples(degrade.load_dataset(cfg.dataset))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    trainer = Trainer(cfg, data)
    if args.resume:
        trainer.state = load_checkpoint(args.resume, cfg)
    every = max(1, cfg.steps // 20)

    def progress(row):
        if row["step"] % every == 0:
            print(f"step {row['step']}: total={row['total']:.5f}", flush=True)

    trainer.run(cfg.steps - trainer.state.step, out / "train_log.csv", out / "checkpoints", progress)
    save_checkpoint(trainer.state, out / "final.aqck")
    print(f"checkpoint: {out / 'final.aqck'}")


def cmd_restore(args) -> None:
    out = _out(args)
    state = load_checkpoint(args.checkpoint)
    images = _load_images(args.input)
    restored, reports = restore(images, state, seed=args.seed or 0)
    for key, img in zip(images.ids, restored):
        _save_png(out / f"{key}_restored.png", tensor_to_image(img))
    # wall time varies run to run, so it goes to stdout and the file stays reproducible
    rows = [{k: v for k, v in r.to_json().items() if k != "wall_time_s"} for r in reports]
    (out / "report.json").write_text(json.dumps(rows, indent=2) + "\n")
    wall = sum(r.wall_time_s for r in reports)
    print(f"restored {len(reports)} images into {out} ({wall:.2f} s)")


def cmd_eval(args) -> None:
    out = _out(args)
    state = load_checkpoint(args.checkpoint)
    images = _load_images(args.data, need_clean=True)
    report, _, _ = evaluate(state, images, seed=args.seed or 0, scorer_mode=args.scorer)
    report.save(out)
    a = report.aggregate
    print(f"psnr {a['psnr_db']['mean']:.3f} dB (input {a['psnr_input_db']['mean']:.3f} dB), "
          f"ssim {a['ssim']['mean']:.4f} (input {a['ssim_input']['mean']:.4f})")


def cmd_inspect(args) -> None:
    cfg = _config(args)
    pool = None
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        cfg, pool = state.config, state.pool
    images = _load_images(args.image)
    paths = inspect(images.degraded_np[0], _out(args), cfg, pool, images.ids[0])
    for name, p in paths.items():
        print(f"{name}: {p}")


def _ablation_inputs(args):
    cfg = _config(args)
    if args.data:
        cfg = cfg.replace(dataset=args.data)
    train = ImageSet.from_samples(degrade.load_dataset(cfg.dataset)) if args.steps_per_variant > 0 else None
    test = _load_images(args.test, need_clean=True)
    return cfg, train, test


def cmd_ablate_prompting(args) -> None:
    cfg, train, test = _ablation_inputs(args)
    modes = args.modes.split(",") if args.modes else None
    rows = ablate_prompting(cfg, train, test, modes, args.steps_per_variant, args.seed or 0, args.scorer)
    _write_table(_out(args), "ablate_prompting", rows)


def cmd_ablate_threshold(args) -> None:
    cfg, train, test = _ablation_inputs(args)
    try:
        taus = [float(x) for x in args.taus.split(",")]
    except ValueError as e:
        raise InvalidInputError(f"--taus must be a comma-separated list of numbers: {e}") from e
    rows = ablate_threshold(cfg, train, test, taus, args.steps_per_variant, args.seed or 0, args.scorer)
    _write_table(_out(args), "ablate_threshold", rows)


def cmd_ablate_loss(args) -> None:
    cfg, train, test = _ablation_inputs(args)
    variants = args.variants.split(",") if args.variants else None
    rows = ablate_loss(cfg, train, test, variants, args.steps_per_variant, args.seed or 0)
    _write_table(_out(args), "ablate_loss", rows)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qualdiff", description="Quality-guided diffusion restoration at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON training config")
        sp.add_argument("--seed", type=int, help="seed (u64)")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic paired dataset"))
    g.add_argument("--count", type=int, default=256)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--mix", help='JSON category weights, e.g. {"haze": 1, "low_rain": 2}')
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train a denoiser and prompt pool"))
    t.add_argument("--data", help="dataset directory (overrides config)")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = common(sub.add_parser("restore", help="restore images with a checkpoint"))
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="PNG file, PNG directory or dataset directory")
    r.set_defaults(func=cmd_restore)

    e = common(sub.add_parser("eval", help="PSNR/SSIM report on a dataset"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--scorer", choices=["no-reference", "full-reference"], default="no-reference")
    e.set_defaults(func=cmd_eval)

    i = common(sub.add_parser("inspect", help="dump quality map, heatmap, partition and prompt allocation"))
    i.add_argument("--image", required=True)
    i.add_argument("--checkpoint")
    i.set_defaults(func=cmd_inspect)

    for name, func in (
        ("ablate-prompting", cmd_ablate_prompting),
        ("ablate-threshold", cmd_ablate_threshold),
        ("ablate-loss", cmd_ablate_loss),
    ):
        a = common(sub.add_parser(name))
        a.add_argument("--data", help="training dataset (overrides config)")
        a.add_argument("--test", required=True, help="evaluation dataset")
        a.add_argument("--steps-per-variant", type=int, default=0, help="training steps for each variant")
        if name != "ablate-loss":
            a.add_argument("--scorer", choices=["no-reference", "full-reference"], default="no-reference")
        a.set_defaults(func=func)
    sub.choices["ablate-prompting"].add_argument("--modes", help="e.g. fixed-4,fixed-10,adaptive")
    sub.choices["ablate-threshold"].add_argument("--taus", default="2.0,2.5,3.0,3.5,4.0")
    sub.choices["ablate-loss"].add_argument("--variants", help="subset of noise,noise+quality,noise+percep,full")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(args)
    except (InvalidInputError, FormatError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every other failure maps to the runtime exit code
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
