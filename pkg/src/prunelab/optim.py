"""Adam with bias correction, plus mask-aware moment maintenance.

Update rule per tensor:
    M <- b1*M + (1-b1)*G
    V <- b2*V + (1-b2)*G*G
    W <- W - lr * (M / (1 - b1^t)) / (sqrt(V / (1 - b2^t)) + eps)

Weight decay defaults to 0 and is applied decoupled when set.  A single
global-norm gradient clip is the only clipping option.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # 0 disables


@dataclass
class AdamState:
    config: AdamConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], config: AdamConfig | None = None) -> "AdamState":
        config = config or AdamConfig()
        state = cls(config=config)
        for name, arr in params.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One in-place Adam update over every tensor in ``params``.

    Raises ``NonFiniteError`` before touching any state if a gradient is
    non-finite, so the caller can abort the step cleanly.
    """
    if lr < 0.0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if set(params) != set(state.m):
        raise ShapeError("optimizer state does not cover the given parameters")
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"{name}: weight {params[name].shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")

    cfg = state.config
    if cfg.grad_clip > 0.0:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > cfg.grad_clip:
            scale = cfg.grad_clip / total
            grads = {name: g * scale for name, g in grads.items()}

    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        w = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay > 0.0:
            w *= 1.0 - lr * cfg.weight_decay
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


FFN_TENSORS = ("w_up", "w_gate", "w_down")


def ffn_tensor_name(layer: int, which: str) -> str:
    """Naming convention shared with the model's ``named_tensors``."""
    return f"layers.{layer}.{which}"


def mask_optimizer_state(state: AdamState, layer: int, mask: np.ndarray) -> None:
    """Zero first/second moments of pruned neurons in one layer's FFN triplet.

    Keeps a pruned row's update at exactly zero on subsequent steps instead of
    letting stale momentum drag a zeroed weight away from zero.
    """
    mask = np.asarray(mask, dtype=np.float64)
    for which in FFN_TENSORS:
        name = ffn_tensor_name(layer, which)
        if name not in state.m:
            raise ShapeError(f"unknown optimizer tensor {name}")
        if state.m[name].shape[0] != mask.shape[0]:
            raise ShapeError(
                f"{name}: mask length {mask.shape[0]} vs hidden {state.m[name].shape[0]}"
            )
        state.m[name] *= mask[:, None]
        state.v[name] *= mask[:, None]
