"""Reference toy experiment: generate data, train for 2000 steps, evaluate the held-out split.

    python scripts/toy_run.py --out runs/toy
"""

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from qualdiff.experiments import ToyRun, run_toy


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--steps", type=int, help="override the pinned 2000 steps")
    args = ap.parse_args()

    toy = ToyRun() if args.steps is None else replace(ToyRun(), steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if row["step"] % 100 == 0:
            print(f"step {row['step']:5d}  total {row['total']:.5f}", flush=True)

    res = run_toy(out, toy, progress)
    summary = {"toy": asdict(toy), **res, "denoiser_calls": sorted(set(res["denoiser_calls"]))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"held-out PSNR {res['psnr_restored_db']:.3f} dB (degraded {res['psnr_degraded_db']:.3f} dB), "
          f"gain {res['gain_db']:+.3f} dB; SSIM {res['ssim_restored']:.4f} (degraded {res['ssim_degraded']:.4f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
