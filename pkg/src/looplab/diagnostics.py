"""Training-dynamics instrumentation: residual norms, block grad norms, collapse."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Sequence

import numpy as np

from .backbone import ModelWeights
from .tensor import Tensor

HEALTHY, PLATEAU, OSCILLATING, DIVERGED = "healthy", "plateau", "oscillating", "diverged"


def residual_norm(trace: Sequence, t: int) -> float:
    """Mean over batch and positions of ||h_L^(t)||_2 (t is 1-based)."""
    if not 1 <= t <= len(trace):
        raise IndexError(f"loop index {t} outside 1..{len(trace)}")
    h = trace[t - 1]
    h = h.data if isinstance(h, Tensor) else np.asarray(h)
    return float(np.mean(np.linalg.norm(h.astype(np.float64), axis=-1)))


def residual_norms(trace: Sequence) -> list[float]:
    return [residual_norm(trace, t) for t in range(1, len(trace) + 1)]


def default_blocks(n_layer: int) -> list[str]:
    last = n_layer - 1
    return ["layers.0.ffn", f"layers.{last}.ffn", f"layers.{last}.attn", "lm_head"]


def block_parameters(weights: ModelWeights, block: str) -> dict:
    named = weights.named_parameters()
    found = {k: p for k, p in named.items() if k == block or k.startswith(block + ".")}
    if not found:
        raise KeyError(f"unknown block {block!r}")
    return found


def block_grad_norm(weights: ModelWeights, block: str) -> float:
    """(sum of squared gradient entries over the block's parameters) ** 0.5."""
    sq = 0.0
    for p in block_parameters(weights, block).values():
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(sq)


@dataclass(frozen=True)
class CollapseCriteria:
    window: int = 200
    eps_loss: float = 0.01
    sigma_max: float = 0.5
    loss_max: float | None = None  # None -> 2x initial loss
    floor_frac: float = 0.8  # plateau only counts above floor_frac * initial loss

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("collapse window must be >= 2")
        if self.eps_loss <= 0 or self.sigma_max <= 0 or (self.loss_max is not None and self.loss_max <= 0):
            raise ValueError("collapse thresholds must be positive")


def detect_collapse(
    history: Sequence[float], criteria: CollapseCriteria = CollapseCriteria(), init_loss: float | None = None
) -> str:
    """Classify a loss history; first match wins: diverged > oscillating > plateau.

    Fluctuation is measured as the std of the last window around its
    least-squares line, so a steady decline is not mistaken for noise.
    Improvement is mean(first half) - mean(second half) of the window.
    ``init_loss`` defaults to the first recorded loss.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        return HEALTHY
    if not np.all(np.isfinite(h)):
        return DIVERGED
    init = h[0] if init_loss is None else float(init_loss)
    ceiling = criteria.loss_max if criteria.loss_max is not None else 2.0 * init
    if np.any(h > ceiling):
        return DIVERGED
    W = criteria.window
    if h.size < W:
        return HEALTHY
    win = h[-W:]
    x = np.arange(W, dtype=np.float64)
    slope, icept = np.polyfit(x, win, 1)
    if np.std(win - (slope * x + icept)) > criteria.sigma_max:
        return OSCILLATING
    half = W // 2
    improvement = win[:half].mean() - win[half:].mean()
    if improvement < criteria.eps_loss and win.mean() > criteria.floor_frac * init:
        return PLATEAU
    return HEALTHY


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    lr_factor: float
    pre_clip_grad_norm: float
    resnorm: list[float]
    block_grad_norms: dict[str, float]
    tokens_seen: int
    val_bpb: float | None = None
    kind: str = "train"

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips exactly
        return json.dumps(asdict(self), allow_nan=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


@dataclass
class MetricsSink:
    """Append-only JSONL writer that enforces strictly increasing steps."""

    stream: IO[str]
    last_step: int | None = None
    closed: bool = field(default=False, init=False)

    @classmethod
    def open(cls, path, mode: str = "a") -> "MetricsSink":
        return cls(open(path, mode, encoding="utf-8"))

    def emit(self, record: MetricsRecord) -> None:
        emit_metrics(record, self)

    def write_raw(self, obj: dict) -> None:
        self.stream.write(json.dumps(obj) + "\n")
        self.stream.flush()

    def close(self) -> None:
        if not self.closed:
            self.stream.close()
            self.closed = True


def emit_metrics(record: MetricsRecord, sink: MetricsSink) -> None:
    if sink.last_step is not None and record.step <= sink.last_step:
        raise ValueError(f"metrics step {record.step} not after {sink.last_step}")
    sink.stream.write(record.to_json() + "\n")
    sink.stream.flush()
    sink.last_step = record.step


def read_metrics(path) -> list[MetricsRecord]:
    """Parse the training records of a metrics log; other kinds are skipped."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj.get("kind", "train") != "train":
                    continue
                out.append(MetricsRecord(**obj))
            except (json.JSONDecodeError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: unparseable metrics line ({e})") from None
    return out
