"""Run the three ablations on the pinned toy data.

Each variant is trained from scratch for --steps steps with identical seeds,
then evaluated on the held-out split. Tables are written as CSV and JSON.

    python scripts/ablations.py --out runs/ablations --steps 500
"""

import argparse
import json
import sys
from pathlib import Path

from qualdiff import degrade
from qualdiff.experiments import ToyRun, ablate_loss, ablate_prompting, ablate_threshold, write_rows_csv
from qualdiff.trainer import ImageSet


def load(root: Path, count: int, seed: int, size: int) -> ImageSet:
    if not (root / "manifest.json").exists():
        degrade.make_dataset(root, count, size, seed)
    return ImageSet.from_samples(degrade.load_dataset(root))


def dump(out: Path, stem: str, rows: list[dict]) -> None:
    write_rows_csv(out / f"{stem}.csv", rows)
    (out / f"{stem}.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(f"\n{stem}")
    for r in rows:
        print("  " + "  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--steps", type=int, default=500, help="training steps per variant")
    ap.add_argument("--which", default="prompting,threshold,loss")
    ap.add_argument("--scorer", choices=["no-reference", "full-reference"], default="no-reference")
    args = ap.parse_args()

    toy = ToyRun()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = load(out / "data" / "train", toy.train_count, toy.train_data_seed, toy.size)
    test = load(out / "data" / "test", toy.test_count, toy.test_data_seed, toy.size)
    cfg = toy.config(out / "data" / "train")
    c = cfg.complexity
    which = set(args.which.split(","))

    if "prompting" in which:
        modes = [f"fixed-{c.c_min}", "fixed-10", f"fixed-{c.c_max}", "adaptive"]
        dump(out, "ablate_prompting", ablate_prompting(cfg, train, test, modes, args.steps, toy.eval_seed, args.scorer))
    if "threshold" in which:
        taus = [2.0, 2.5, 3.0, 3.5, 4.0]
        dump(out, "ablate_threshold", ablate_threshold(cfg, train, test, taus, args.steps, toy.eval_seed, args.scorer))
    if "loss" in which:
        dump(out, "ablate_loss", ablate_loss(cfg, train, test, None, args.steps, toy.eval_seed))
    return 0


if __name__ == "__main__":
    sys.exit(main())
