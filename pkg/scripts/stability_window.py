"""500-step LT vs FLT residual-norm comparison at K=12, with plots.

    python3 scripts/stability_window.py [--steps 500] [--out runs/stability]
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from looplab.cli import main as cli

CONFIGS = ["configs/diag_lt_k12.yaml", "configs/diag_flt_k12.yaml"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--out", default="runs/stability")
    args = ap.parse_args()
    argv = ["-v", "diagnose", "--steps", str(args.steps), "--out", args.out]
    for c in CONFIGS:
        argv += ["--config", c]
    code = cli(argv)
    out = Path(args.out)
    summary = json.loads((out / "summary.json").read_text())
    lt, flt = (max(summary[Path(c).stem]["max_resnorm"]) for c in CONFIGS)
    print(f"max resnorm LT {lt:.1f}  FLT {flt:.1f}  ratio {lt / flt:.2f}")
    logs = [str(out / Path(c).stem / "metrics.jsonl") for c in CONFIGS]
    cli(["plot", *logs, "--out", str(out / "plots")])
    return code


if __name__ == "__main__":
    sys.exit(main())
