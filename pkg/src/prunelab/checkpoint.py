"""Versioned binary checkpoint container.

Layout: magic, format version, a canonical JSON meta blob (config echo, step,
optimizer scalars, importance settings, RNG state, tensor name order), then
length-prefixed little-endian float64 tensor records, then a SHA-256 of all
preceding bytes.  Serialization is canonical, so save -> load -> save is
byte-identical, and any truncation or bit flip fails the checksum before a
partial state can leak out.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import LayerWeights, ModelConfig, ModelWeights
from .optim import AdamConfig, AdamState
from .prune import FFN_MATRICES, CombineSpec, ImportanceState, WidthMasks

MAGIC = b"PLCKPT01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    step: int
    config_text: str
    weights: ModelWeights
    opt: AdamState
    importance: ImportanceState
    masks: WidthMasks
    rng_state: dict
    extra: dict

    @property
    def model_config(self) -> ModelConfig:
        return self.weights.config


def _tensor_map(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, arr in ckpt.weights.named_tensors():
        out[f"weights.{name}"] = arr
    for name in ckpt.opt.m:
        out[f"opt.m.{name}"] = ckpt.opt.m[name]
        out[f"opt.v.{name}"] = ckpt.opt.v[name]
    for li, per in enumerate(ckpt.importance.scores):
        for mat in FFN_MATRICES:
            out[f"imp.{li}.{mat}"] = per[mat]
    for li, mask in enumerate(ckpt.masks.masks):
        out[f"mask.{li}"] = mask
        out[f"committed.{li}"] = ckpt.masks.committed[li].astype(np.float64)
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write: temp file, fsync, rename."""
    path = Path(path)
    tensors = _tensor_map(ckpt)
    names = sorted(tensors)
    cfg = ckpt.opt.config
    mc = ckpt.model_config
    meta = {
        "format_version": FORMAT_VERSION,
        "step": ckpt.step,
        "config_text": ckpt.config_text,
        "model_config": {
            "d_model": mc.d_model, "n_heads": mc.n_heads, "n_layers": mc.n_layers,
            "ffn_hidden": mc.ffn_hidden, "vocab_size": mc.vocab_size,
            "seq_len": mc.seq_len, "norm_eps": mc.norm_eps,
        },
        "optimizer": {
            "beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps,
            "weight_decay": cfg.weight_decay, "grad_clip": cfg.grad_clip,
            "step": ckpt.opt.step,
        },
        "importance": {
            "ema": ckpt.importance.ema,
            "f1": ckpt.importance.combine.f1,
            "f2": ckpt.importance.combine.f2,
        },
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensor_names": names,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    digest = hashlib.sha256()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        def emit(b: bytes) -> None:
            digest.update(b)
            f.write(b)

        emit(MAGIC)
        emit(struct.pack("<I", FORMAT_VERSION))
        emit(struct.pack("<Q", len(blob)))
        emit(blob)
        emit(struct.pack("<Q", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            emit(struct.pack("<I", len(nb)))
            emit(nb)
            emit(struct.pack("<B", arr.ndim))
            emit(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            emit(arr.tobytes())
        f.write(digest.digest())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, stored = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != stored:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (meta_len,) = struct.unpack_from("<Q", body, off)
    off += 8
    meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_tensors,) = struct.unpack_from("<Q", body, off)
    off += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        off += count * 8
        tensors[name] = arr.astype(np.float64)  # writable copy
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor records")
    if set(tensors) != set(meta["tensor_names"]):
        raise CheckpointError(f"{path}: tensor names disagree with meta")

    mc = ModelConfig(**meta["model_config"])
    layers = []
    for li in range(mc.n_layers):
        layers.append(LayerWeights(**{
            attr: tensors[f"weights.layers.{li}.{attr}"]
            for attr in ("wq", "wk", "wv", "wo", "attn_norm_gain",
                         "w_up", "w_gate", "w_down", "ffn_norm_gain")}))
    weights = ModelWeights(
        config=mc,
        token_embedding=tensors["weights.token_embedding"],
        position_embedding=tensors["weights.position_embedding"],
        layers=layers,
        final_norm_gain=tensors["weights.final_norm_gain"],
    )

    opt_meta = meta["optimizer"]
    opt = AdamState(
        config=AdamConfig(
            beta1=opt_meta["beta1"], beta2=opt_meta["beta2"], eps=opt_meta["eps"],
            weight_decay=opt_meta["weight_decay"], grad_clip=opt_meta["grad_clip"]),
        step=opt_meta["step"],
    )
    for name, _ in weights.named_tensors():
        opt.m[name] = tensors[f"opt.m.{name}"]
        opt.v[name] = tensors[f"opt.v.{name}"]

    imp_meta = meta["importance"]
    importance = ImportanceState(
        weights.hidden_sizes(), mc.d_model, ema=imp_meta["ema"],
        combine=CombineSpec(imp_meta["f1"], imp_meta["f2"]))
    for li in range(mc.n_layers):
        for mat in FFN_MATRICES:
            importance.scores[li][mat] = tensors[f"imp.{li}.{mat}"]

    masks = WidthMasks(weights.hidden_sizes())
    for li in range(mc.n_layers):
        masks.masks[li] = tensors[f"mask.{li}"]
        masks.committed[li] = tensors[f"committed.{li}"] != 0.0

    return Checkpoint(
        step=meta["step"],
        config_text=meta["config_text"],
        weights=weights,
        opt=opt,
        importance=importance,
        masks=masks,
        rng_state=meta["rng_state"],
        extra=meta["extra"],
    )
