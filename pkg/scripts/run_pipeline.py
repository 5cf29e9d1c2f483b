#!/usr/bin/env python3
"""End-to-end demo: generate, train, fine-tune, evaluate.

Runs the whole pipeline through the command-line interface at a reduced
budget (a few minutes on a laptop). Pass --full for the complete protocol
used by the case studies: 2000-snapshot datasets, the full 17-level
curriculum, and 10 mask seeds per observability level.

Outputs land under --workdir (default ./runs/demo), one subdirectory per
stage, each with its own manifest.json recording seeds and output hashes.
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
    ap.add_argument("--workdir", default="runs/demo")
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--full", action="store_true",
                    help="full-budget protocol instead of the quick demo")
    args = ap.parse_args()

    work = Path(args.workdir)
    horizon = 30000 if args.full else 2880
    levels = "1,5,10,20,50,80" if args.full else "5,20"
    seeds = 10 if args.full else 3

    base = work / "data" / "base.npz"
    closed = work / "data" / "base_closed.npz"
    target = work / "data" / "target.npz"
    cli("generate", "--seed", args.seed, "--size", "tiny", "--feeders", 3,
        "--der", 20, "--horizon-minutes", horizon, "--out", base)
    cli("generate", "--seed", args.seed, "--size", "tiny", "--feeders", 3,
        "--der", 20, "--horizon-minutes", horizon, "--close-ties",
        "--out", closed)
    cli("generate", "--seed", args.seed + 66, "--size", "tiny", "--feeders",
        3, "--der", 20, "--horizon-minutes", horizon, "--out", target)

    cfg = work / "train_config.json"
    cfg.parent.mkdir(parents=True, exist_ok=True)
    if not args.full:
        cfg.write_text(json.dumps({
            "steps_per_epoch": 40, "max_warmup_epochs": 6, "ramp_epochs": 5,
            "levels": [80, 50, 20, 5], "finetune_epochs": 6,
        }, indent=2))
    else:
        cfg.write_text("{}\n")

    ckpt = work / "model" / "pretrained.npz"
    cli("train", "--data", base, "--config", cfg, "--seed", 0,
        "--out", ckpt)

    tuned = work / "model" / "finetuned.npz"
    cli("finetune", "--checkpoint", ckpt, "--data", target, "--config", cfg,
        "--seed", 1, "--out", tuned)

    common = ("--levels", levels, "--seeds", seeds)
    cli("evaluate", "--study", "A", "--checkpoint", ckpt, "--data", base,
        *common, "--out-dir", work / "studies" / "A")
    cli("evaluate", "--study", "C", "--checkpoint", ckpt, "--data", base,
        "--data-closed", closed, *common, "--out-dir", work / "studies" / "C")
    cli("evaluate", "--study", "D", "--checkpoint", ckpt,
        "--finetuned-checkpoint", tuned, "--data", target, *common,
        "--out-dir", work / "studies" / "D")

    print(f"\ndone; reports under {work / 'studies'}")


if __name__ == "__main__":
    main()
