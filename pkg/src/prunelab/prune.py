"""Sensitivity scores, mask selection, mask application, and compaction.

Per-element sensitivity is |grad * weight|, smoothed across steps by an
exponential moving average.  Neuron scores combine the three FFN matrices'
row statistics (f1 reduces a row to a scalar, f2 reduces the three scalars);
"mean-max" is the default.  Masks are monotone: once a neuron is pruned it
stays pruned, which makes the single physical compaction at the end of the
pruning phase exact.

One-shot baselines live here too: random masks at target sparsity and
activation-norm (calibration-based) importance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .optim import AdamState, ffn_tensor_name, mask_optimizer_state
from .schedule import SparsitySpec, retained_count
from .tensor import ShapeError

FFN_MATRICES = ("w_up", "w_gate", "w_down")
_REDUCERS = {"mean": np.mean, "max": np.max}


class CompactionError(RuntimeError):
    """Physical compaction requested before the sparsity schedule completed."""


@dataclass(frozen=True)
class CombineSpec:
    f1: str = "mean"  # row (d,) -> scalar
    f2: str = "max"   # three scalars -> scalar

    def __post_init__(self) -> None:
        for f in (self.f1, self.f2):
            if f not in _REDUCERS:
                raise ValueError(f"combine function must be one of {sorted(_REDUCERS)}, got {f!r}")


class ImportanceState:
    """EMA-smoothed |grad * weight| for every FFN matrix of every layer."""

    def __init__(self, hidden_sizes: list[int], d_model: int,
                 ema: float = 0.4, combine: CombineSpec | None = None):
        if not 0.0 <= ema <= 1.0:
            raise ValueError(f"EMA coefficient must be in [0, 1], got {ema}")
        self.ema = ema
        self.combine = combine or CombineSpec()
        self.scores: list[dict[str, np.ndarray]] = [
            {name: np.zeros((h, d_model)) for name in FFN_MATRICES}
            for h in hidden_sizes
        ]

    def batch_scores(self, weights: "model_mod.ModelWeights",
                     grads: dict[str, np.ndarray]) -> list[dict[str, np.ndarray]]:
        """Per-step sensitivity |mean-batch-grad * weight| for each FFN matrix."""
        out = []
        for li, layer in enumerate(weights.layers):
            per = {}
            for name in FFN_MATRICES:
                w = getattr(layer, name)
                g = grads[ffn_tensor_name(li, name)]
                if w.shape != g.shape or w.shape != self.scores[li][name].shape:
                    raise ShapeError(
                        f"layer {li} {name}: weight {w.shape}, grad {g.shape}, "
                        f"scores {self.scores[li][name].shape}"
                    )
                per[name] = np.abs(g * w)
            out.append(per)
        return out

    def apply(self, batch_scores: list[dict[str, np.ndarray]]) -> None:
        """EMA update: S <- (1 - ema) * T + ema * S."""
        for li, per in enumerate(batch_scores):
            for name, t_scores in per.items():
                s = self.scores[li][name]
                s *= self.ema
                s += (1.0 - self.ema) * t_scores

    def update_sensitivity(self, weights, grads) -> None:
        self.apply(self.batch_scores(weights, grads))

    def combine_neuron_scores(self, layer: int) -> np.ndarray:
        """Per-neuron score c_k = f2(f1(S_up[k]), f1(S_gate[k]), f1(S_down[k]))."""
        per = self.scores[layer]
        hs = {m.shape[0] for m in per.values()}
        if len(hs) != 1:
            raise ShapeError(f"layer {layer} FFN triplet disagrees on hidden size: {hs}")
        f1 = _REDUCERS[self.combine.f1]
        f2 = _REDUCERS[self.combine.f2]
        stacked = np.stack([f1(per[name], axis=1) for name in FFN_MATRICES])
        return f2(stacked, axis=0)


class WidthMasks:
    """Per-layer binary neuron masks with a monotone committed-pruned set."""

    def __init__(self, hidden_sizes: list[int]):
        self.masks = [np.ones(h) for h in hidden_sizes]
        self.committed = [np.zeros(h, dtype=bool) for h in hidden_sizes]

    def retained(self, layer: int) -> int:
        return int(self.masks[layer].sum())

    def all_ones(self) -> bool:
        return all(int(c.sum()) == 0 for c in self.committed)


def select_mask(
    scores: np.ndarray,
    t: int,
    spec: SparsitySpec,
    masks: WidthMasks,
    layer: int,
) -> np.ndarray:
    """Keep the top ``retained_count(t)`` non-committed neurons by score.

    Ties break toward the lower index.  Newly dropped indices join the
    committed set and can never return.  Returns the layer's updated mask.
    """
    h = masks.masks[layer].shape[0]
    if scores.shape != (h,):
        raise ShapeError(f"scores shape {scores.shape} vs hidden {h}")
    target = retained_count(t, h, spec)
    alive = np.flatnonzero(~masks.committed[layer])
    if target > alive.size:
        raise RuntimeError(
            f"schedule wants {target} neurons but only {alive.size} remain un-committed"
        )
    # Sort alive indices by (-score, index); stable top-k with low-index ties.
    order = alive[np.lexsort((alive, -scores[alive]))]
    keep = order[:target]
    mask = np.zeros(h)
    mask[keep] = 1.0
    dropped = order[target:]
    masks.committed[layer][dropped] = True
    masks.masks[layer] = mask
    return mask


def apply_mask(layer_weights: "model_mod.LayerWeights", mask: np.ndarray) -> None:
    """Zero pruned neurons' rows in W_up, W_gate and W_down, in place."""
    if mask.shape[0] != layer_weights.hidden:
        raise ShapeError(f"mask length {mask.shape[0]} vs hidden {layer_weights.hidden}")
    col = mask[:, None]
    layer_weights.w_up *= col
    layer_weights.w_gate *= col
    layer_weights.w_down *= col


def random_oneshot_mask(h: int, target_sparsity: float, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random mask retaining ceil((1 - R) * h) neurons."""
    if not 0.0 <= target_sparsity < 1.0:
        raise ValueError(f"target sparsity must be in [0, 1), got {target_sparsity}")
    keep = retained_count(1, h, SparsitySpec(target_sparsity, 0, 1))
    mask = np.zeros(h)
    mask[rng.permutation(h)[:keep]] = 1.0
    return mask


def activation_importance(
    weights: "model_mod.ModelWeights",
    calibration_batches: list[np.ndarray],
    masks: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Per-neuron mean L2 norm of FFN activation columns over calibration data.

    For each sample (sequence) the activation matrix is
    Z = silu(X W_up^T) * (X W_gate^T); neuron i scores the mean over samples
    of ||Z[:, i]||_2.
    """
    if not calibration_batches:
        raise ValueError("calibration set is empty")
    n_layers = weights.config.n_layers
    sums = [np.zeros(layer.hidden) for layer in weights.layers]
    n_samples = 0
    for batch in calibration_batches:
        _, cache = model_mod.forward(weights, batch, masks, want_cache=True)
        b, t = cache.batch, cache.seq
        n_samples += b
        for li in range(n_layers):
            z = cache.layers[li].ffn.z
            # column L2 norm per sample: (b, t, h) -> (b, h)
            norms = np.sqrt(np.sum(z.reshape(b, t, -1) ** 2, axis=1))
            sums[li] += norms.sum(axis=0)
    return [s / n_samples for s in sums]


def compact(
    weights: "model_mod.ModelWeights",
    opt_state: AdamState | None,
    importance: ImportanceState | None,
    masks: WidthMasks,
    prune_clock: int,
    spec: SparsitySpec,
) -> None:
    """Physically drop pruned rows from weights, moments and scores, in place.

    Only legal once the sparsity schedule has finished (``prune_clock`` at or
    past warmup + pruning steps); survivor order is preserved and the masks
    reset to all-ones at the new width.
    """
    if prune_clock < spec.warmup_steps + spec.pruning_steps:
        raise CompactionError(
            f"sparsity schedule incomplete at step {prune_clock} "
            f"(needs {spec.warmup_steps + spec.pruning_steps})"
        )
    for li, layer in enumerate(weights.layers):
        keep = np.flatnonzero(masks.masks[li] > 0.0)
        for name in FFN_MATRICES:
            full = ffn_tensor_name(li, name)
            setattr(layer, name, np.ascontiguousarray(getattr(layer, name)[keep]))
            if opt_state is not None:
                opt_state.m[full] = np.ascontiguousarray(opt_state.m[full][keep])
                opt_state.v[full] = np.ascontiguousarray(opt_state.v[full][keep])
            if importance is not None:
                importance.scores[li][name] = np.ascontiguousarray(
                    importance.scores[li][name][keep])
        masks.masks[li] = np.ones(keep.size)
        masks.committed[li] = np.zeros(keep.size, dtype=bool)
