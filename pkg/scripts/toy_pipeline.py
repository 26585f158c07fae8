"""Train the toy FLT model, sweep inference loop counts, and plot the run.

    python3 scripts/toy_pipeline.py [--config configs/toy_flt.yaml] [--steps N]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from looplab.cli import main as cli
from looplab.config import ExperimentConfig


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy_flt.yaml")
    ap.add_argument("--steps", type=int, help="override the Chinchilla step count (smoke runs)")
    args = ap.parse_args()
    out = Path(ExperimentConfig.load(args.config).out_dir)
    train_args = ["-v", "train", "--config", args.config, "--out", str(out)]
    if args.steps:
        train_args += ["--steps", str(args.steps)]
    code = cli(train_args)
    if code:
        return code
    code = cli(["eval", "--config", args.config, "--checkpoint", str(out / "checkpoint.npz")])
    if code:
        return code
    return cli(["plot", str(out / "metrics.jsonl"), "--out", str(out / "plots")])


if __name__ == "__main__":
    sys.exit(main())
