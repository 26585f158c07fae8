"""Training loop: accumulation, pre-clip diagnostics, clipping, dual optimizer."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import count_params, init_weights
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .data import load_corpus
from .diagnostics import (
    DIVERGED,
    MetricsRecord,
    MetricsSink,
    block_grad_norm,
    default_blocks,
    detect_collapse,
    residual_norms,
)
from .evaluation import LoopedLM, lm_eval
from .loops import LoopVariant, last_step_loss, loop_forward
from .optim import Optimizer, TrainingFault, clip_global_norm, token_budget, trapezoid_lr

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: LoopedLM
    records: list[MetricsRecord]
    status: str
    total_steps: int
    micro_steps: int
    metrics_path: Path
    checkpoint_path: Path | None
    val_bpb: float | None
    events: list[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1].train_loss if self.records else math.nan


def plan_steps(cfg: ExperimentConfig) -> tuple[int, int]:
    bb = cfg.backbone()
    _, excl, _ = count_params(bb)
    steps, micro = token_budget(excl, cfg.optim.batch_tokens, cfg.optim.device_batch, bb.seq_len)
    if cfg.optim.total_steps:
        steps = cfg.optim.total_steps
    return steps, micro


def train(
    cfg: ExperimentConfig,
    *,
    out_dir=None,
    max_steps: int | None = None,
    save: bool = True,
    final_eval: bool = True,
    record_events: bool = False,
) -> TrainResult:
    """Run one training job and write ``metrics.jsonl`` (+ checkpoints) to ``out_dir``.

    ``max_steps`` stops early without changing the LR schedule, which is what
    a diagnostic window wants.
    """
    cfg.validate()
    bb = cfg.backbone()
    variant = LoopVariant.parse(cfg.loop.variant)
    K = cfg.loop.k_train
    seed = cfg.optim.seed
    dtype = np.dtype(cfg.optim.dtype)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    weights = init_weights(bb, seed, dtype)
    train_stream, val_stream = load_corpus(cfg.data.corpus, cfg.data.split, seed, bb.seq_len)
    total_steps, micro = plan_steps(cfg)
    run_steps = total_steps if max_steps is None else min(max_steps, total_steps)
    opt = Optimizer(weights, bb.d_model)
    params = weights.parameters()
    blocks = cfg.diagnostics.blocks or default_blocks(bb.n_layer)
    model = LoopedLM(weights, bb)
    every_ckpt = cfg.optim.checkpoint_every or max(1, total_steps // 4)
    val_windows = val_stream.windows(cfg.eval.max_windows) if len(val_stream) > bb.seq_len else None

    metrics_path = out / "metrics.jsonl"
    sink = MetricsSink.open(metrics_path, "w")
    events: list[str] = []
    records: list[MetricsRecord] = []
    status = "healthy"
    ckpt_path = None
    tokens_per_step = micro * cfg.optim.device_batch * bb.seq_len
    val_bpb = None
    t0 = time.time()
    try:
        for step in range(run_steps):
            weights.zero_grad()
            loss_sum = 0.0
            res = np.zeros(K)
            for _ in range(micro):
                batch = train_stream.sample(cfg.optim.device_batch)
                logits, trace = loop_forward(weights, bb, batch[:, :-1], K, variant)
                loss = last_step_loss(logits, None, batch[:, 1:])
                (loss * (1.0 / micro)).backward()
                loss_sum += loss.item()
                res += residual_norms(trace)
            train_loss = loss_sum / micro
            gnorms = {b: block_grad_norm(weights, b) for b in blocks}
            if record_events:
                events.append("block_grad_norms")
            try:
                pre_clip = clip_global_norm(params, 1.0)
            except TrainingFault:
                status = DIVERGED
                rec = MetricsRecord(step, train_loss, math.nan, math.nan, list(res / micro), gnorms,
                                    (step + 1) * tokens_per_step)
                sink.emit(rec)
                records.append(rec)
                log.error("non-finite gradients at step %d", step)
                break
            if record_events:
                events.append("clip")
            lr_factor = trapezoid_lr(step, total_steps)
            opt.step(lr_factor)
            last = step == run_steps - 1
            rec_val = None
            if val_windows is not None and len(val_windows) and (
                (last and final_eval) or (cfg.eval.every and (step + 1) % cfg.eval.every == 0)
            ):
                rec_val = lm_eval(model, val_windows, K, variant)["bpb"]
                val_bpb = rec_val
            rec = MetricsRecord(step, train_loss, lr_factor, pre_clip, list(res / micro), gnorms,
                                (step + 1) * tokens_per_step, rec_val)
            sink.emit(rec)
            records.append(rec)
            if not math.isfinite(train_loss):
                status = DIVERGED
                break
            if save and ((step + 1) % every_ckpt == 0 or last):
                ckpt_path = out / ("checkpoint.npz" if last else f"checkpoint_step{step + 1}.npz")
                save_checkpoint(ckpt_path, bb, weights, opt.state_arrays(),
                                {"step": step + 1, "k_train": K, "variant": variant.value, "val_bpb": rec_val})
            if step % 50 == 0 or last:
                log.info("step %d/%d loss %.4f resnorm[-1] %.3f (%.1fs)", step, run_steps, train_loss,
                         rec.resnorm[-1], time.time() - t0)
    finally:
        sink.close()
    if status != DIVERGED:
        status = detect_collapse([r.train_loss for r in records], cfg.criteria())
    return TrainResult(model, records, status, total_steps, micro, metrics_path, ckpt_path, val_bpb, events)
