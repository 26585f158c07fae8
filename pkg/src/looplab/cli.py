"""Command line: ``looplab {train,eval,diagnose,plot}``.

Exit status: 0 ok, 1 training diverged, 2 config error, 3 I/O error,
4 contract error (e.g. checkpoint/config mismatch).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backbone import ConfigError
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .data import load_corpus
from .diagnostics import DIVERGED, MetricsSink, read_metrics
from .evaluation import EvalTask, LoopedLM, budget_eval
from .train import train

EXIT_DIVERGED, EXIT_CONFIG, EXIT_IO, EXIT_CONTRACT = 1, 2, 3, 4


class ContractError(RuntimeError):
    pass


def _load_config(path, seed=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    if seed is not None:
        cfg.optim.seed = seed
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    if args.steps:
        cfg.optim.total_steps = args.steps
    res = train(cfg, out_dir=args.out)
    print(f"status={res.status} steps={len(res.records)} final_loss={res.final_loss:.6f} "
          f"val_bpb={res.val_bpb} metrics={res.metrics_path}")
    return EXIT_DIVERGED if res.status == DIVERGED else 0


def _parse_klist(text: str | None, default):
    if not text:
        return list(default)
    return [int(k) for k in text.split(",") if k.strip()]


def cmd_eval(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    bb, weights, _, meta = load_checkpoint(ckpt)
    if bb != cfg.backbone():
        raise ContractError(f"checkpoint model {bb} does not match config model {cfg.backbone()}")
    k_list = _parse_klist(args.k_list, cfg.eval.k_list)
    model = LoopedLM(weights, bb)
    _, val = load_corpus(cfg.data.corpus, cfg.data.split, cfg.optim.seed, bb.seq_len)
    windows = val.windows(cfg.eval.max_windows)
    tasks = [EvalTask.load(p) for p in cfg.eval.tasks]
    curves = budget_eval(model, windows, tasks, k_list, cfg.loop.variant, cfg.eval.max_items)
    print(f"{'K':>4} {'metric':>8} {'value':>14}")
    for k_idx, k in enumerate(sorted(set(k_list))):
        for name, curve in curves.items():
            print(f"{k:>4} {name:>8} {curve.points[k_idx][1]:>14.6f}")
    log_path = Path(args.out) if args.out else Path(cfg.out_dir) / "metrics.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    sink = MetricsSink.open(log_path, "a")
    try:
        for name, curve in curves.items():
            sink.write_raw({"kind": "budget", "metric": name, "checkpoint": str(ckpt),
                            "step": meta.get("step"), "points": curve.points})
    finally:
        sink.close()
    return 0


def cmd_diagnose(args) -> int:
    out = Path(args.out or "runs/diagnose")
    summary = {}
    worst = 0
    for path in args.config:
        cfg = _load_config(path, args.seed)
        name = Path(path).stem
        res = train(cfg, out_dir=out / name, max_steps=args.steps, save=False, final_eval=False)
        res_max = np.max([r.resnorm for r in res.records], axis=0).tolist() if res.records else []
        summary[name] = {
            "variant": cfg.loop.variant,
            "k": cfg.loop.k_train,
            "steps": len(res.records),
            "status": res.status,
            "max_resnorm": res_max,
            "final_resnorm": res.records[-1].resnorm if res.records else [],
            "final_loss": res.final_loss,
            "metrics": str(res.metrics_path),
        }
        if res.status == DIVERGED:
            worst = EXIT_DIVERGED
        print(f"{name}: {res.status} loss={res.final_loss:.4f} max_resnorm[K]={res_max[-1] if res_max else None}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return worst


def cmd_plot(args) -> int:
    from .plotting import plot_runs

    runs = {}
    for p in args.logs:
        recs = read_metrics(p)
        if not recs:
            raise ValueError(f"{p}: no training records")
        runs[Path(p).parent.name or Path(p).stem] = recs
    for path in plot_runs(runs, args.out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="looplab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="loop-budget evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--k-list")
    p.add_argument("--out", help="metrics log to append budget curves to")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="short diagnostic runs with a comparison summary")
    p.add_argument("--config", required=True, action="append")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("plot", help="render SVG charts from metrics logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error[config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        kind = "io" if isinstance(e, OSError) else "input"
        print(f"error[{kind}]: {e}", file=sys.stderr)
        return EXIT_IO
    except ContractError as e:
        print(f"error[contract]: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
