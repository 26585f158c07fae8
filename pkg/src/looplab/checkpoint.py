"""Checkpoint container (numpy .npz, little-endian arrays).

Keys
----
format_version   int64 scalar, currently 1
config_json      uint8 bytes of the BackboneConfig as JSON
meta_json        uint8 bytes of free-form run metadata as JSON
param/<name>     parameter arrays, names as in ModelWeights.named_parameters()
                 e.g. ``wte``, ``lm_head``, ``layers.0.attn.w_q``, ``layers.1.ffn.proj``
optim/<key>      optimizer state: ``step``, ``adam_t``, ``muon.<param>``,
                 ``adam_m.<param>``, ``adam_v.<param>``
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, ModelWeights

FORMAT_VERSION = 1


def _le(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def _text(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, config: BackboneConfig, weights: ModelWeights, optim_state: dict | None = None, meta: dict | None = None) -> None:
    arrays = {
        "format_version": np.asarray(FORMAT_VERSION, dtype="<i8"),
        "config_json": _text(config.to_dict()),
        "meta_json": _text(meta or {}),
    }
    for name, p in weights.named_parameters().items():
        arrays[f"param/{name}"] = _le(p.data)
    for key, a in (optim_state or {}).items():
        arrays[f"optim/{key}"] = _le(a)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[BackboneConfig, ModelWeights, dict, dict]:
    """Return (config, weights, optimizer arrays, meta)."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
        config = BackboneConfig.from_dict(json.loads(z["config_json"].tobytes()))
        meta = json.loads(z["meta_json"].tobytes())
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        optim = {k[len("optim/"):]: z[k] for k in z.files if k.startswith("optim/")}
    weights = ModelWeights.from_named(params, config.n_layer)
    return config, weights, optim, meta
