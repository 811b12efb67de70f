#!/usr/bin/env python3
"""Module ablation on the standard scene: five network arms plus known-operator CNMF.

Thin wrapper over ``hsfuse simulate`` and ``hsfuse ablate``; prints the
per-arm medians over the configured seeds.
"""

import argparse
import csv
import subprocess
import sys
from pathlib import Path

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=DESK)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args()

    cli = [sys.executable, "-m", "hsfuse.cli"]
    data = args.out / "data"
    subprocess.run([*cli, "simulate", "--config", str(args.config), "--out", str(data)],
                   check=True, stdout=subprocess.DEVNULL)
    subprocess.run([*cli, "ablate", "--config", str(args.config), "--data", str(data),
                    "--out", str(args.out)], check=True, stdout=subprocess.DEVNULL)
    with open(args.out / "ablation.csv") as fh:
        for row in csv.DictReader(fh):
            print(f"{row['method']:<10} clamp={row['clamp']} ssc={row['ssc']} ca={row['ca']}  "
                  f"psnr {float(row['psnr']):6.2f}  sam {float(row['sam']):6.3f}")


if __name__ == "__main__":
    main()
