#!/usr/bin/env python3
"""Measurement-attack ablation: physics-trained model vs lam_phys = 0.

Trains two models with identical schedules and seeds, differing only in
the physics-loss weight, then evaluates both on clean and attacked inputs
(case study E). The attack perturbs up to 6% of the measurement channels
with Gaussian noise plus a constant bias; labels are never touched.
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def cli(*argv) -> None:
    cmd = [sys.executable, "-m", "gridvolt", *map(str, argv)]
    print("+", " ".join(cmd[2:]))
    subprocess.run(cmd, check=True)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/attack")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--horizon-minutes", type=int, default=2880)
    ap.add_argument("--penetration", type=float, default=0.06)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data" / "base.npz"
    cli("generate", "--seed", args.seed, "--size", "tiny", "--feeders", 3,
        "--der", 20, "--horizon-minutes", args.horizon_minutes,
        "--out", data)

    work.mkdir(parents=True, exist_ok=True)
    base_cfg = {"steps_per_epoch": 40, "max_warmup_epochs": 6,
                "ramp_epochs": 5, "levels": [80, 50, 20, 5]}
    for tag, lam in (("physics", 0.1), ("nophysics", 0.0)):
        cfg = work / f"cfg_{tag}.json"
        cfg.write_text(json.dumps({**base_cfg, "lam_max": lam}, indent=2))
        cli("train", "--data", data, "--config", cfg, "--seed", 0,
            "--out", work / "model" / f"{tag}.npz")

    cli("evaluate", "--study", "E",
        "--checkpoint", work / "model" / "physics.npz",
        "--ablation-checkpoint", work / "model" / "nophysics.npz",
        "--data", data, "--levels", "20,50", "--seeds", 5,
        "--attack-penetration", args.penetration,
        "--out-dir", work / "studies" / "E")
    print(f"\ndone; report under {work / 'studies' / 'E'}")


if __name__ == "__main__":
    main()
