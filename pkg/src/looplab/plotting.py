"""SVG line charts of metrics logs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .diagnostics import MetricsRecord


def ema(values: Sequence[float], factor: float = 0.9) -> list[float]:
    """s_0 = x_0, s_i = factor * s_{i-1} + (1 - factor) * x_i."""
    out: list[float] = []
    for v in values:
        out.append(v if not out else factor * out[-1] + (1 - factor) * v)
    return out


def plot_runs(runs: dict[str, list[MetricsRecord]], out_dir, smoothing: float = 0.9) -> list[Path]:
    """Write loss.svg, resnorm.svg and gradnorm.svg comparing ``runs``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, recs in runs.items():
        ax.plot([r.step for r in recs], ema([r.train_loss for r in recs], smoothing), label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(f"train loss (EMA {smoothing})")
    ax.legend()
    written.append(_save(fig, out_dir / "loss.svg"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, recs in runs.items():
        res = np.array([r.resnorm for r in recs])
        ax.plot([r.step for r in recs], res[:, -1], label=f"{name} (loop {res.shape[1]})")
        if res.shape[1] > 1:
            ax.plot([r.step for r in recs], res[:, 0], linestyle="--", label=f"{name} (loop 1)")
    ax.set_xlabel("step")
    ax.set_ylabel("residual-state norm")
    ax.legend()
    written.append(_save(fig, out_dir / "resnorm.svg"))

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, recs in runs.items():
        for block in recs[0].block_grad_norms:
            ax.plot([r.step for r in recs], [r.block_grad_norms[block] for r in recs], label=f"{name} {block}")
    ax.set_xlabel("step")
    ax.set_ylabel("gradient L2 norm (pre-clip)")
    ax.set_yscale("log")
    ax.legend(fontsize=6)
    written.append(_save(fig, out_dir / "gradnorm.svg"))
    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path
