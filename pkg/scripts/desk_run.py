#!/usr/bin/env python3
"""Simulate the standard scene, train over several seeds and compare with the baselines.

    python scripts/desk_run.py --out runs/desk --seeds 0 1 2
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def hsfuse(*argv) -> dict:
    done = subprocess.run([sys.executable, "-m", "hsfuse.cli", *map(str, argv)],
                          check=True, capture_output=True, text=True)
    return json.loads(done.stdout)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--config", type=Path, default=DESK)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    data = args.out / "data"
    hsfuse("simulate", "--config", args.config, "--out", data)
    rows = {"bicubic": hsfuse("baseline", "--config", args.config, "--data", data,
                              "--out", args.out / "bicubic", "--method", "bicubic"),
            "cnmf": hsfuse("baseline", "--config", args.config, "--data", data,
                           "--out", args.out / "cnmf")}
    runs = []
    for seed in args.seeds:
        # --seed only changes the network; the scene comes from the simulate step
        runs.append(hsfuse("train", "--config", args.config, "--data", data, "--seed", seed,
                           "--out", args.out / f"seed{seed}"))
        print(f"seed {seed}: psnr {runs[-1]['psnr']:.2f} sam {runs[-1]['sam']:.3f}", file=sys.stderr)
    rows["network (median)"] = {k: float(np.median([r[k] for r in runs]))
                                for k in ("psnr", "sam", "ergas", "ssim", "uiqi")}
    print(f"{'method':<18}{'psnr':>8}{'sam':>8}{'ergas':>8}{'ssim':>8}{'uiqi':>8}")
    for name, r in rows.items():
        print(f"{name:<18}{r['psnr']:8.2f}{r['sam']:8.3f}{r['ergas']:8.3f}{r['ssim']:8.4f}{r['uiqi']:8.4f}")


if __name__ == "__main__":
    main()
