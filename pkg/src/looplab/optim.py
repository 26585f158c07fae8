"""Muon for block matrices, AdamW for embedding/head, schedule and clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import ModelWeights

NS_COEFFS = (3.4445, -4.7750, 2.0315)
NS_EPS = 1e-7


class TrainingFault(FloatingPointError):
    """Non-finite gradients; surfaced to diagnostics as a divergence."""


def newton_schulz5(G: np.ndarray, steps: int = 5, coeffs=NS_COEFFS, eps: float = NS_EPS) -> np.ndarray:
    """Approximate the orthogonal polar factor of G with a quintic iteration.

    X0 = G / (||G||_F + eps);  X <- aX + b(XX^T)X + c(XX^T)^2 X.
    Wide orientation is used internally so that XX^T is the smaller Gram.
    """
    G = np.asarray(G)
    if G.ndim != 2:
        raise ValueError(f"newton_schulz5 expects a matrix, got shape {G.shape}")
    a, b, c = coeffs
    tall = G.shape[0] > G.shape[1]
    X = G.T if tall else G
    X = X / (np.linalg.norm(X) + eps)
    for _ in range(steps):
        A = X @ X.T
        X = a * X + (b * A + c * (A @ A)) @ X
    return X.T if tall else X


def muon_momentum(step: int, start: float = 0.85, end: float = 0.95, warmup: int = 300) -> float:
    frac = min(max(step, 0) / warmup, 1.0)
    return (1 - frac) * start + frac * end


@dataclass
class Muon:
    """SGD momentum whose update direction is orthogonalised by Newton-Schulz."""

    lr: float = 0.02
    momentum_start: float = 0.85
    momentum_end: float = 0.95
    warmup_steps: int = 300
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def momentum(self, step: int) -> float:
        return muon_momentum(step, self.momentum_start, self.momentum_end, self.warmup_steps)

    def step(self, params: dict, step: int, lr_factor: float) -> None:
        mu = self.momentum(step)
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape or p.ndim != 2:
                raise ValueError(f"Muon parameter {name}: grad {g.shape} vs param {p.shape}")
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(p.data)
            buf = mu * buf + g
            self.buffers[name] = buf
            p.data -= (self.lr * lr_factor * newton_schulz5(buf)).astype(p.dtype)


def adam_dim_scale(d_model: int) -> float:
    return math.sqrt(768.0 / d_model)


@dataclass
class AdamW:
    """Bias-corrected Adam with zero weight decay and per-parameter base LRs."""

    lrs: dict[str, float]
    betas: tuple[float, float] = (0.8, 0.95)
    eps: float = 1e-10
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict, lr_factor: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            lr = self.lrs[name] * lr_factor
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def trapezoid_lr(step: int, total_steps: int, flat_frac: float = 0.8) -> float:
    """1 for the first 80% of steps, then linear to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 1.0
    knee = flat_frac * total_steps
    if step <= knee:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - knee))


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(sq)


def clip_global_norm(params, max_norm: float = 1.0) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Raises TrainingFault on non-finite gradients.
    """
    params = list(params)
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise TrainingFault("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def token_budget(
    params_excl_embedding: int,
    batch_tokens: int,
    device_batch: int,
    seq_len: int,
    n_workers: int = 1,
    tokens_per_param: int = 20,
) -> tuple[int, int]:
    """(total optimizer steps, micro-steps per step) for a 20-tokens/param run."""
    if min(params_excl_embedding, batch_tokens, device_batch, seq_len, n_workers) <= 0:
        raise ValueError("token_budget inputs must be positive")
    total_tokens = tokens_per_param * params_excl_embedding
    steps = -(-total_tokens // batch_tokens)
    micro = -(-batch_tokens // (device_batch * seq_len * n_workers))
    return steps, micro


def split_parameters(weights: ModelWeights) -> tuple[dict, dict]:
    """Partition parameters: 2-D block linears -> Muon, wte/lm_head -> AdamW."""
    muon, adam = {}, {}
    for name, p in weights.named_parameters().items():
        if name in ("wte", "lm_head"):
            adam[name] = p
        elif p.ndim == 2:
            muon[name] = p
        else:
            raise ValueError(f"parameter {name} has no optimizer route")
    return muon, adam


class Optimizer:
    """Both optimizers behind one shared schedule factor."""

    def __init__(self, weights: ModelWeights, d_model: int, lr_embed: float = 0.2, lr_head: float = 0.004, muon_lr: float = 0.02):
        self.muon_params, self.adam_params = split_parameters(weights)
        scale = adam_dim_scale(d_model)
        self.muon = Muon(lr=muon_lr)
        self.adam = AdamW(lrs={"wte": lr_embed * scale, "lm_head": lr_head * scale})
        self.step_count = 0

    def step(self, lr_factor: float) -> None:
        self.muon.step(self.muon_params, self.step_count, lr_factor)
        self.adam.step(self.adam_params, lr_factor)
        self.step_count += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray(self.step_count, dtype="<i8"), "adam_t": np.asarray(self.adam.t, dtype="<i8")}
        for k, a in self.muon.buffers.items():
            out[f"muon.{k}"] = a
        for k, a in self.adam.m.items():
            out[f"adam_m.{k}"] = a
        for k, a in self.adam.v.items():
            out[f"adam_v.{k}"] = a
        return out

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrs["step"])
        self.adam.t = int(arrs["adam_t"])
        for key, a in arrs.items():
            kind, _, name = key.partition(".")
            if kind == "muon":
                self.muon.buffers[name] = a
            elif kind == "adam_m":
                self.adam.m[name] = a
            elif kind == "adam_v":
                self.adam.v[name] = a
