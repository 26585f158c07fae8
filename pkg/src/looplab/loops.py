"""Looped execution of the shared stack and KV-cached greedy decoding.

Variants
--------
LT       output of loop t-1 is the stack input of loop t.
LT_I     LT, plus the input embedding x added to the stack input for t >= 2.
LT_AI    LT, but layer 1 of every loop t >= 2 runs attention injection
         (query from h_L^(t-1), keys/values from x).
FLT      every layer of every loop t >= 2 runs attention injection; layer 1
         reads keys/values from x, deeper layers from their own z.
FLT_RES  every layer l of loop t >= 2 takes h_{l-1}^(t) + h_L^(t-1) as input.

For the two fully looped variants each loop restarts its residual stream
from x, so h_L^(t-1) reaches the stack only through the per-layer fusion.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .backbone import (
    BackboneConfig,
    KVCache,
    ModelWeights,
    attention,
    block_forward,
    layer_window,
    lm_logits,
    positional_mask,
)
from .tensor import Tensor


class LoopVariant(str, enum.Enum):
    LT = "LT"
    LT_I = "LT_I"
    LT_AI = "LT_AI"
    FLT = "FLT"
    FLT_RES = "FLT_RES"

    @classmethod
    def parse(cls, value) -> "LoopVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown loop variant {value!r}; expected one of {[v.value for v in cls]}") from None


class LoopStateError(RuntimeError):
    pass


@dataclass
class LoopState:
    """Recurrent carry of one forward pass."""

    h_prev: Tensor | None = None
    loop_index: int = 0
    kv_cache: dict[tuple[int, int], KVCache] | None = None
    trace: list[Tensor] = field(default_factory=list)


def attention_injection(
    h_prev: Tensor | None,
    z_src: Tensor,
    lw,
    config: BackboneConfig,
    mask: np.ndarray,
    *,
    positions=None,
    cache: KVCache | None = None,
    capture: list | None = None,
) -> Tensor:
    """Cross-attention reusing the layer's own projections.

    Q = W_Q h_prev, K = W_K z_src, V = W_V z_src. No new parameters.
    """
    if h_prev is None:
        raise LoopStateError("attention injection needs the previous loop's output")
    return attention(h_prev, z_src, lw, config, mask, positions=positions, cache=cache, capture=capture)


def _uses_injection(variant: LoopVariant, t: int, layer: int) -> bool:
    if t < 2:
        return False
    if variant is LoopVariant.FLT:
        return True
    return variant is LoopVariant.LT_AI and layer == 0


def _run_loops(
    weights: ModelWeights,
    config: BackboneConfig,
    tokens: np.ndarray,
    K: int,
    variant: LoopVariant,
    positions: np.ndarray,
    state: LoopState,
    capture: list | None,
) -> Tensor:
    x = tc.embedding(weights.wte, tokens)
    Tq = tokens.shape[1]
    past = int(positions[0])
    k_pos = np.arange(past + Tq)
    masks = [positional_mask(positions, k_pos, layer_window(l, config)) for l in range(config.n_layer)]
    h_prev = None
    for t in range(1, K + 1):
        if t == 1 or variant in (LoopVariant.FLT, LoopVariant.FLT_RES):
            h = x
        elif variant is LoopVariant.LT_I:
            h = h_prev + x
        else:
            h = h_prev
        for l, lw in enumerate(weights.layers):
            cache = state.kv_cache[(t, l)] if state.kv_cache is not None else None
            if t >= 2 and variant is LoopVariant.FLT_RES:
                h = h + h_prev
            attn_fn = None
            if _uses_injection(variant, t, l):
                def attn_fn(z, _lw=lw, _l=l, _cache=cache, _hp=h_prev):
                    src = x if _l == 0 else z
                    return attention_injection(
                        _hp, src, _lw, config, masks[_l], positions=positions, cache=_cache, capture=capture
                    )
            h, _, _ = block_forward(h, lw, config, masks[l], attn_fn=attn_fn, positions=positions, cache=cache)
        state.trace.append(h)
        state.loop_index = t
        state.h_prev = h_prev = h
    return h_prev


def _check(config: BackboneConfig, tokens, K) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (B, T), got shape {tokens.shape}")
    if not isinstance(K, (int, np.integer)) or K < 1:
        raise ValueError(f"loop count K must be a positive integer, got {K!r}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise IndexError("token id outside the vocabulary")
    return tokens


def loop_forward(
    weights: ModelWeights,
    config: BackboneConfig,
    tokens,
    K: int,
    variant,
    *,
    capture: list | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Run K loops of the shared stack; return (final-loop logits, trace).

    ``trace[t-1]`` is h_L^(t). ``capture``, when a list, collects the
    pre-projection head outputs of every attention-injection call.
    """
    variant = LoopVariant.parse(variant)
    tokens = _check(config, tokens, K)
    state = LoopState()
    h = _run_loops(weights, config, tokens, K, variant, np.arange(tokens.shape[1]), state, capture)
    return lm_logits(h, weights, config), state.trace


def last_step_loss(logits: Tensor, tokens, targets=None, ignore_index: int = -1) -> Tensor:
    """Next-token cross-entropy on the final loop's logits only.

    With ``targets=None`` the targets are ``tokens`` shifted left by one and
    the last position is dropped; otherwise ``targets`` aligns with logits.
    """
    B, T, V = logits.shape
    if targets is None:
        if T < 2:
            raise ValueError("need at least 2 positions for a shifted next-token loss")
        tokens = np.asarray(tokens, dtype=np.int64)
        logits = logits[:, :-1, :]
        targets = tokens[:, 1:]
        T = T - 1
    loss, _ = tc.cross_entropy_rowwise(logits.reshape(B * T, V), np.asarray(targets).reshape(-1), ignore_index)
    return loss


def new_decode_state(config: BackboneConfig, K: int) -> LoopState:
    latent = config.attn_type == "mla"
    caches = {(t, l): KVCache(latent=latent) for t in range(1, K + 1) for l in range(config.n_layer)}
    return LoopState(kv_cache=caches)


def decode_step(weights, config, state: LoopState, new_tokens, K, variant) -> Tensor:
    """Feed ``new_tokens`` (B, n) through all loops using and extending the caches."""
    variant = LoopVariant.parse(variant)
    new_tokens = _check(config, new_tokens, K)
    if state.kv_cache is None or len(state.kv_cache) != K * config.n_layer:
        raise LoopStateError("KV cache layout does not match (K, n_layer)")
    past = len(state.kv_cache[(1, 0)])
    if any(len(c) != past for c in state.kv_cache.values()):
        raise LoopStateError("KV caches out of sync")
    positions = np.arange(past, past + new_tokens.shape[1])
    state.trace = []
    with tc.no_grad():
        h = _run_loops(weights, config, new_tokens, K, variant, positions, state, None)
        return lm_logits(h, weights, config)


def incremental_decode(weights, config, prompt, K, variant, n_new: int) -> list[int]:
    """Greedy continuation of a single prompt using per-(loop, layer) KV caches."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must be nonempty")
    if n_new <= 0:
        return []
    state = new_decode_state(config, K)
    logits = decode_step(weights, config, state, np.asarray([prompt]), K, variant)
    out = []
    for i in range(n_new):
        nxt = int(np.argmax(logits.data[0, -1]))
        out.append(nxt)
        if i + 1 < n_new:
            logits = decode_step(weights, config, state, np.asarray([[nxt]]), K, variant)
    return out


def greedy_decode_recompute(weights, config, prompt, K, variant, n_new: int) -> list[int]:
    """Reference decoder: full forward over the whole sequence at each step."""
    seq = list(prompt)
    out = []
    with tc.no_grad():
        for _ in range(n_new):
            logits, _ = loop_forward(weights, config, np.asarray([seq]), K, variant)
            nxt = int(np.argmax(logits.data[0, -1]))
            out.append(nxt)
            seq.append(nxt)
    return out
