"""Shared Transformer block stack: dimensions, init, attention variants, FFN, head.

Everything here is a pure function of (weights, config, inputs). The loop
engine decides which hidden states feed which call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterator

import numpy as np

from . import tensor as tc
from .tensor import Tensor


class ConfigError(ValueError):
    pass


def _pad_vocab(n: int, multiple: int = 64) -> int:
    return ((n + multiple - 1) // multiple) * multiple


@dataclass(frozen=True)
class BackboneConfig:
    depth: int
    d_model: int
    n_head: int
    n_kv_head: int
    head_dim: int
    n_layer: int
    vocab_size_raw: int
    vocab_size: int
    seq_len: int = 1024
    rope_base: float = 10000.0
    attn_type: str = "full"
    mla_rank: int = 128
    window_pattern: str = "L"
    softcap: float = 15.0
    ffn_expansion: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.n_head * self.head_dim != self.d_model:
            raise ConfigError(f"n_head*head_dim={self.n_head * self.head_dim} != d_model={self.d_model}")
        if self.n_kv_head < 1 or self.n_head % self.n_kv_head:
            raise ConfigError(f"n_kv_head={self.n_kv_head} must divide n_head={self.n_head}")
        if self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}")
        if self.vocab_size % 64 or self.vocab_size < self.vocab_size_raw:
            raise ConfigError("vocab_size must be a multiple of 64 and >= vocab_size_raw")
        if self.attn_type not in ("full", "mla"):
            raise ConfigError(f"attn_type must be 'full' or 'mla', got {self.attn_type!r}")
        if not self.window_pattern or set(self.window_pattern) - {"L", "S"}:
            raise ConfigError(f"window_pattern must be a nonempty string over {{L,S}}, got {self.window_pattern!r}")
        if self.seq_len < 1 or self.mla_rank < 1:
            raise ConfigError("seq_len and mla_rank must be positive")

    @property
    def kv_dim(self) -> int:
        return self.n_kv_head * self.head_dim

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def derive_dims(
    depth: int,
    vocab_size_raw: int,
    *,
    seq_len: int = 1024,
    n_kv_head: int | None = None,
    attn_type: str = "full",
    mla_rank: int = 128,
    window_pattern: str = "L",
    d_model: int | None = None,
    rope_base: float = 10000.0,
) -> BackboneConfig:
    """Build a config from ``depth``: d = 64*depth, H = ceil(d/128), L = depth.

    ``d_model`` overrides the width for small test models; the head count is
    still ceil(d/128).
    """
    if depth < 1:
        raise ConfigError("depth must be >= 1")
    d = 64 * depth if d_model is None else int(d_model)
    n_head = math.ceil(d / 128)
    if d % n_head:
        raise ConfigError(f"d_model={d} not divisible by {n_head} heads")
    return BackboneConfig(
        depth=depth,
        d_model=d,
        n_head=n_head,
        n_kv_head=n_head if n_kv_head is None else int(n_kv_head),
        head_dim=d // n_head,
        n_layer=depth,
        vocab_size_raw=vocab_size_raw,
        vocab_size=_pad_vocab(vocab_size_raw),
        seq_len=seq_len,
        rope_base=rope_base,
        attn_type=attn_type,
        mla_rank=mla_rank,
        window_pattern=window_pattern,
    )


# ---- weights ----------------------------------------------------------------

@dataclass
class LayerWeights:
    w_q: Tensor
    w_o: Tensor
    fc: Tensor
    proj: Tensor
    w_k: Tensor | None = None
    w_v: Tensor | None = None
    w_down: Tensor | None = None
    w_k_up: Tensor | None = None
    w_v_up: Tensor | None = None

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("w_q", "w_k", "w_v", "w_down", "w_k_up", "w_v_up", "w_o"):
            t = getattr(self, name)
            if t is not None:
                yield f"attn.{name}", t
        yield "ffn.fc", self.fc
        yield "ffn.proj", self.proj


@dataclass
class ModelWeights:
    wte: Tensor
    lm_head: Tensor
    layers: list[LayerWeights] = field(default_factory=list)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"wte": self.wte}
        for i, lw in enumerate(self.layers):
            for name, t in lw.named():
                out[f"layers.{i}.{name}"] = t
        out["lm_head"] = self.lm_head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_elements(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    @property
    def dtype(self):
        return self.wte.dtype

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], n_layer: int) -> "ModelWeights":
        def P(a):
            return Tensor(np.array(a), requires_grad=True)

        layers = []
        for i in range(n_layer):
            pre = f"layers.{i}."
            kw = {}
            for key, arr in named.items():
                if key.startswith(pre):
                    kw[key[len(pre):].split(".", 1)[1]] = P(arr)
            layers.append(LayerWeights(**kw))
        return cls(wte=P(named["wte"]), lm_head=P(named["lm_head"]), layers=layers)


def init_weights(config: BackboneConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Initialise per the backbone recipe.

    wte ~ N(0, 1), lm_head ~ N(0, 0.001^2), input projections ~ U(-s, s) with
    s = sqrt(3 / fan_in), output projections W_O and FFN proj exactly zero.
    """
    rng = np.random.default_rng(seed)
    d, V = config.d_model, config.vocab_size
    s = math.sqrt(3.0 / d)

    def uni(shape, bound=s):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    wte = Tensor(rng.normal(0.0, 1.0, size=(V, d)).astype(dtype), requires_grad=True)
    lm_head = Tensor(rng.normal(0.0, 0.001, size=(d, V)).astype(dtype), requires_grad=True)
    layers = []
    hidden = config.ffn_expansion * d
    for _ in range(config.n_layer):
        w_q = uni((d, config.n_head * config.head_dim))
        if config.attn_type == "mla":
            R = config.mla_rank
            kv = dict(
                w_down=uni((d, R)),
                w_k_up=uni((R, config.kv_dim), math.sqrt(3.0 / R)),
                w_v_up=uni((R, config.kv_dim), math.sqrt(3.0 / R)),
            )
        else:
            kv = dict(w_k=uni((d, config.kv_dim)), w_v=uni((d, config.kv_dim)))
        layers.append(LayerWeights(w_q=w_q, w_o=zeros((d, d)), fc=uni((d, hidden)), proj=zeros((hidden, d)), **kv))
    return ModelWeights(wte=wte, lm_head=lm_head, layers=layers)


def count_params(config: BackboneConfig) -> tuple[int, int, int]:
    """Closed-form (total, excluding token embedding, per block) counts."""
    d, V = config.d_model, config.vocab_size
    kv = config.kv_dim
    ffn = 2 * config.ffn_expansion * d * d
    if config.attn_type == "mla":
        R = config.mla_rank
        attn = d * d + d * R + 2 * R * kv + d * d
    else:
        # (2 + 2r) d^2 with r = H_kv / H_q; integer form avoids fractional r
        attn = 2 * d * d + 2 * d * kv
    per_block = attn + ffn
    total = 2 * V * d + config.n_layer * per_block
    return total, total - V * d, per_block


# ---- masks ------------------------------------------------------------------

def layer_window(layer_index: int, config: BackboneConfig) -> int | None:
    """Sliding-window width for this layer, or None for full causal context."""
    if layer_index == config.n_layer - 1:
        return None
    ch = config.window_pattern[layer_index % len(config.window_pattern)]
    return config.seq_len // 4 if ch == "S" else None


def positional_mask(q_pos: np.ndarray, k_pos: np.ndarray, window: int | None) -> np.ndarray:
    q = np.asarray(q_pos)[:, None]
    k = np.asarray(k_pos)[None, :]
    m = k <= q
    if window is not None:
        m &= (q - k) < window
    return m


def build_mask(T: int, layer_index: int, config: BackboneConfig) -> np.ndarray:
    """Boolean (T, T) mask, True where query i may attend key j.

    The window width comes from ``config.seq_len`` so that a shorter prefix
    sees exactly the mask rows of the full sequence.
    """
    pos = np.arange(T)
    return positional_mask(pos, pos, layer_window(layer_index, config))


# ---- rotary embedding / qk-norm --------------------------------------------

def rope_tables(positions: np.ndarray, head_dim: int, base: float = 10000.0, dtype=np.float64):
    if head_dim % 2:
        raise ConfigError(f"RoPE needs an even head_dim, got {head_dim}")
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate x[..., T, d_h] by position-dependent angles; position 0 is identity."""
    cos, sin = rope_tables(positions, x.shape[-1], base, x.dtype)
    return tc.rope(x, cos, sin)


def qk_norm(q: Tensor, k: Tensor) -> tuple[Tensor, Tensor]:
    return tc.rms_normalize(q), tc.rms_normalize(k)


# ---- attention ----------------------------------------------------------------

def _split_heads(x: Tensor, n: int, d_h: int) -> Tensor:
    B, T, _ = x.shape
    return x.reshape(B, T, n, d_h).transpose(0, 2, 1, 3)


class KVCache:
    """Per-(loop, layer) store of post-RoPE/QK-norm keys and values.

    For MLA layers the compressed latent is stored instead and expanded on
    read, which is where the cache saving comes from.
    """

    def __init__(self, latent: bool = False):
        self.latent = latent
        self._k: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self._c: list[np.ndarray] = []

    def __len__(self) -> int:
        src = self._c if self.latent else self._k
        return sum(a.shape[-2] for a in src)

    def append_kv(self, k: np.ndarray, v: np.ndarray) -> None:
        self._k.append(k)
        self._v.append(v)

    def append_latent(self, c: np.ndarray) -> None:
        self._c.append(c)

    def keys_values(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate(self._k, axis=-2), np.concatenate(self._v, axis=-2)

    def latents(self) -> np.ndarray:
        return np.concatenate(self._c, axis=-2)

    def num_elements(self) -> int:
        if self.latent:
            return sum(a.size for a in self._c)
        return sum(a.size for a in self._k) + sum(a.size for a in self._v)


def project_queries(q_src: Tensor, lw: LayerWeights, config: BackboneConfig, positions) -> Tensor:
    q = _split_heads(q_src @ lw.w_q, config.n_head, config.head_dim)
    return tc.rms_normalize(rope_apply(q, positions, config.rope_base))


def _expand_latent(c: Tensor, lw: LayerWeights, config: BackboneConfig, positions):
    k = _split_heads(c @ lw.w_k_up, config.n_kv_head, config.head_dim)
    v = _split_heads(c @ lw.w_v_up, config.n_kv_head, config.head_dim)
    return tc.rms_normalize(rope_apply(k, positions, config.rope_base)), v


def project_keys_values(kv_src: Tensor, lw: LayerWeights, config: BackboneConfig, positions):
    """Keys (RoPE + QK-norm applied) and values, shaped (B, H_kv, T, d_h)."""
    if config.attn_type == "mla":
        return _expand_latent(tc.rms_normalize(kv_src @ lw.w_down), lw, config, positions)
    k = _split_heads(kv_src @ lw.w_k, config.n_kv_head, config.head_dim)
    v = _split_heads(kv_src @ lw.w_v, config.n_kv_head, config.head_dim)
    return tc.rms_normalize(rope_apply(k, positions, config.rope_base)), v


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, config: BackboneConfig) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v with KV heads broadcast over query groups.

    q: (B, H_q, Tq, d_h); k, v: (B, H_kv, Tk, d_h) -> (B, H_q, Tq, d_h).
    """
    B, Hq, Tq, dh = q.shape
    Hkv, Tk = k.shape[1], k.shape[2]
    g = Hq // Hkv
    qg = q.reshape(B, Hkv, g, Tq, dh)
    kt = k.reshape(B, Hkv, 1, Tk, dh).transpose(0, 1, 2, 4, 3)
    scores = tc.mul(qg @ kt, 1.0 / math.sqrt(dh))
    p = tc.softmax_rows(scores, mask)
    out = p @ v.reshape(B, Hkv, 1, Tk, dh)
    return out.reshape(B, Hq, Tq, dh)


def attention(
    q_src: Tensor,
    kv_src: Tensor,
    lw: LayerWeights,
    config: BackboneConfig,
    mask: np.ndarray,
    *,
    positions=None,
    cache: KVCache | None = None,
    capture: list | None = None,
) -> Tensor:
    """Attention with queries from ``q_src`` and keys/values from ``kv_src``.

    ``positions`` are the absolute positions of the rows of both sources. With
    a ``cache`` the new keys/values are appended first and the query attends
    over everything cached; ``mask`` must then be (Tq, len(cache)).
    """
    B, Tq, _ = q_src.shape
    if kv_src.shape[:2] != (B, Tq):
        raise ValueError(f"q_src {q_src.shape} and kv_src {kv_src.shape} must share the token grid")
    if positions is None:
        positions = np.arange(Tq)
    q = project_queries(q_src, lw, config, positions)
    if cache is None:
        k, v = project_keys_values(kv_src, lw, config, positions)
    elif cache.latent:
        cache.append_latent(tc.rms_normalize(kv_src @ lw.w_down).data)
        c = cache.latents()
        k, v = _expand_latent(Tensor(c), lw, config, np.arange(c.shape[1]))
    else:
        k, v = project_keys_values(kv_src, lw, config, positions)
        cache.append_kv(k.data, v.data)
        kd, vd = cache.keys_values()
        k, v = Tensor(kd), Tensor(vd)
    if mask.shape != (Tq, k.shape[2]):
        raise ValueError(f"mask {mask.shape} does not match ({Tq}, {k.shape[2]})")
    heads = attend(q, k, v, mask, config)
    if capture is not None:
        capture.append({"heads": heads.data, "values": v.data, "mask": mask, "group": config.n_head // config.n_kv_head})
    merged = heads.transpose(0, 2, 1, 3).reshape(B, Tq, config.d_model)
    return merged @ lw.w_o


def ffn(x: Tensor, lw: LayerWeights) -> Tensor:
    return tc.relu_squared(x @ lw.fc) @ lw.proj


def block_forward(
    h_in: Tensor,
    lw: LayerWeights,
    config: BackboneConfig,
    mask: np.ndarray,
    *,
    attn_fn: Callable[[Tensor], Tensor] | None = None,
    positions=None,
    cache: KVCache | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Pre-norm residual block returning (h_out, z, a).

    ``attn_fn`` replaces the self-attention call; it receives z, the
    normalised block input.
    """
    z = tc.rms_normalize(h_in)
    if attn_fn is None:
        a = attention(z, z, lw, config, mask, positions=positions, cache=cache)
    else:
        a = attn_fn(z)
    h_mid = h_in + a
    h_out = h_mid + ffn(tc.rms_normalize(h_mid), lw)
    return h_out, z, a


def lm_logits(h_final: Tensor, weights: ModelWeights, config: BackboneConfig) -> Tensor:
    """Soft-capped logits: cap * tanh((norm(h) @ lm_head) / cap)."""
    return tc.softcap(tc.rms_normalize(h_final) @ weights.lm_head, config.softcap)
