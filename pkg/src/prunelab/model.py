"""Decoder-only transformer with a gated-SiLU FFN and explicit backprop.

Architecture: learned absolute position embeddings, pre-norm residual blocks
with RMS normalization, causal multi-head attention, and per-layer FFN

    y = W_down^T ( silu(W_up x) * (W_gate x) )

with W_up, W_gate, W_down all (h, d).  The output head is tied to the token
embedding.  Only FFN width is ever masked or pruned; attention, embeddings
and norm gains are untouched.

All compute is fp64 through :mod:`prunelab.tensor`, and the backward pass is
written out by hand so the gradient path has no hidden dependencies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, matmul, sigmoid, silu_grad, softmax_rows


class TokenRangeError(ValueError):
    """A token id falls outside [0, vocab_size)."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    ffn_hidden: int
    vocab_size: int
    seq_len: int
    norm_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if min(self.d_model, self.n_heads, self.n_layers, self.ffn_hidden,
               self.vocab_size, self.seq_len) < 1:
            raise ValueError("all model dimensions must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    wq: np.ndarray  # (d, d), applied as x @ wq
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    attn_norm_gain: np.ndarray  # (d,)
    w_up: np.ndarray  # (h, d)
    w_gate: np.ndarray  # (h, d)
    w_down: np.ndarray  # (h, d), applied as z @ w_down
    ffn_norm_gain: np.ndarray  # (d,)

    @property
    def hidden(self) -> int:
        return self.w_up.shape[0]


@dataclass
class ModelWeights:
    config: ModelConfig
    token_embedding: np.ndarray  # (vocab, d); also the output head (tied)
    position_embedding: np.ndarray  # (seq_len, d)
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray  # (d,)

    def named_tensors(self):
        """Stable (name, array) iteration used by the optimizer and checkpoints."""
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, layer in enumerate(self.layers):
            for attr in ("wq", "wk", "wv", "wo", "attn_norm_gain",
                         "w_up", "w_gate", "w_down", "ffn_norm_gain"):
                yield f"layers.{i}.{attr}", getattr(layer, attr)
        yield "final_norm_gain", self.final_norm_gain

    def params(self) -> dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def set_tensor(self, name: str, arr: np.ndarray) -> None:
        if name in ("token_embedding", "position_embedding", "final_norm_gain"):
            setattr(self, name, arr)
            return
        _, idx, attr = name.split(".")
        setattr(self.layers[int(idx)], attr, arr)

    def hidden_sizes(self) -> list[int]:
        return [layer.hidden for layer in self.layers]

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            config=self.config,
            token_embedding=self.token_embedding.copy(),
            position_embedding=self.position_embedding.copy(),
            layers=[LayerWeights(**{k: getattr(l, k).copy() for k in (
                "wq", "wk", "wv", "wo", "attn_norm_gain",
                "w_up", "w_gate", "w_down", "ffn_norm_gain")}) for l in self.layers],
            final_norm_gain=self.final_norm_gain.copy(),
        )


def init_weights(config: ModelConfig, rng: np.random.Generator) -> ModelWeights:
    d, h = config.d_model, config.ffn_hidden
    res_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            wq=rng.normal(0.0, d**-0.5, (d, d)),
            wk=rng.normal(0.0, d**-0.5, (d, d)),
            wv=rng.normal(0.0, d**-0.5, (d, d)),
            wo=rng.normal(0.0, d**-0.5 * res_scale, (d, d)),
            attn_norm_gain=np.ones(d),
            w_up=rng.normal(0.0, d**-0.5, (h, d)),
            w_gate=rng.normal(0.0, d**-0.5, (h, d)),
            w_down=rng.normal(0.0, h**-0.5 * res_scale, (h, d)),
            ffn_norm_gain=np.ones(d),
        ))
    return ModelWeights(
        config=config,
        token_embedding=rng.normal(0.0, d**-0.5, (config.vocab_size, d)),
        position_embedding=rng.normal(0.0, d**-0.5, (config.seq_len, d)),
        layers=layers,
        final_norm_gain=np.ones(d),
    )


# ---------------------------------------------------------------------------
# RMS norm

def _rmsnorm_forward(x: np.ndarray, gain: np.ndarray, eps: float):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xn = x / r
    return xn * gain, xn, r


def _rmsnorm_backward(dy: np.ndarray, xn: np.ndarray, r: np.ndarray, gain: np.ndarray):
    dgain = np.sum(dy * xn, axis=0)
    dyg = dy * gain
    inner = np.mean(dyg * xn, axis=-1, keepdims=True)
    dx = (dyg - xn * inner) / r
    return dx, dgain


# ---------------------------------------------------------------------------
# FFN

@dataclass
class FFNCache:
    x: np.ndarray        # layer input, (n, d)
    up_pre: np.ndarray   # W_up x, (n, h)
    up_sig: np.ndarray   # sigmoid(up_pre)
    silu_val: np.ndarray  # silu(up_pre)
    gate_pre: np.ndarray  # W_gate x, (n, h)
    z: np.ndarray        # silu(up) * gate, mask applied, (n, h)
    mask: np.ndarray | None
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray


def ffn_forward(x, w_up, w_gate, w_down, mask=None):
    """Gated-SiLU FFN: y = (silu(x W_up^T) * (x W_gate^T)) W_down.

    ``x`` may be a single vector (d,) or a row-stacked matrix (n, d).  The
    optional ``mask`` (h,) zeroes pruned neurons' activations so they
    contribute exactly nothing.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if not (w_up.shape == w_gate.shape == w_down.shape):
        raise ShapeError(
            f"FFN triplet shapes differ: {w_up.shape}, {w_gate.shape}, {w_down.shape}"
        )
    if x.shape[1] != w_up.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} vs weight width {w_up.shape[1]}")
    if mask is not None and mask.shape[0] != w_up.shape[0]:
        raise ShapeError(f"mask length {mask.shape[0]} vs hidden {w_up.shape[0]}")
    up_pre = matmul(x, w_up.T)
    gate_pre = matmul(x, w_gate.T)
    up_sig = sigmoid(up_pre)
    silu_val = up_pre * up_sig
    z = silu_val * gate_pre
    if mask is not None:
        z *= mask
    y = matmul(z, w_down)
    cache = FFNCache(x, up_pre, up_sig, silu_val, gate_pre, z, mask,
                     w_up, w_gate, w_down)
    return (y[0] if squeeze else y), cache


def ffn_backward(dy, cache: FFNCache):
    """Gradients of ffn_forward for all three matrices and the input."""
    dy = np.asarray(dy, dtype=np.float64)
    squeeze = dy.ndim == 1
    if squeeze:
        dy = dy[None, :]
    if dy.shape != (cache.x.shape[0], cache.w_down.shape[1]):
        raise ShapeError(f"upstream grad shape {dy.shape} does not match cache")
    dz = matmul(dy, cache.w_down.T)
    dw_down = matmul(cache.z.T, dy)
    if cache.mask is not None:
        dz *= cache.mask
    dgate = dz * cache.silu_val
    # dup = dz * gate * silu'(up_pre), with silu'(a) = s*(1 + a*(1-s)),
    # built in place to keep the elementwise pass count down
    dup = 1.0 - cache.up_sig
    dup *= cache.up_pre
    dup += 1.0
    dup *= cache.up_sig
    dup *= cache.gate_pre
    dup *= dz
    dx = matmul(dup, cache.w_up) + matmul(dgate, cache.w_gate)
    dw_up = matmul(dup.T, cache.x)
    dw_gate = matmul(dgate.T, cache.x)
    return dw_up, dw_gate, dw_down, (dx[0] if squeeze else dx)


# ---------------------------------------------------------------------------
# Full model

@dataclass
class LayerCache:
    attn_in_n: np.ndarray   # normed attention input, (n, d)
    attn_r: np.ndarray
    q: np.ndarray           # (b, heads, t, hd)
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray       # (b, heads, t, t)
    ctx: np.ndarray         # (n, d)
    ffn_in_n: np.ndarray    # normed FFN input, (n, d)
    ffn_r: np.ndarray
    ffn: FFNCache


@dataclass
class ForwardCache:
    batch: int
    seq: int
    tokens: np.ndarray
    layers: list[LayerCache] = field(default_factory=list)
    final_n: np.ndarray | None = None
    final_r: np.ndarray | None = None


def _split_heads(x2: np.ndarray, b: int, t: int, heads: int, hd: int) -> np.ndarray:
    return x2.reshape(b, t, heads, hd).transpose(0, 2, 1, 3)


def _merge_heads(x4: np.ndarray, b: int, t: int, d: int) -> np.ndarray:
    return x4.transpose(0, 2, 1, 3).reshape(b * t, d)


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be (batch, seq), got {tokens.shape}")
    if tokens.shape[1] > config.seq_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds {config.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise TokenRangeError(f"token ids must be in [0, {config.vocab_size})")
    return tokens.astype(np.int64, copy=False)


def forward(
    weights: ModelWeights,
    tokens: np.ndarray,
    masks: list[np.ndarray] | None = None,
    want_cache: bool = True,
):
    """Causal forward pass.  Returns (logits (b, t, vocab), cache or None)."""
    cfg = weights.config
    tokens = _check_tokens(tokens, cfg)
    b, t = tokens.shape
    d, heads, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    causal = np.triu(np.full((t, t), -np.inf), k=1)

    x = (weights.token_embedding[tokens.ravel()]
         + np.tile(weights.position_embedding[:t], (b, 1)))
    cache = ForwardCache(batch=b, seq=t, tokens=tokens) if want_cache else None

    for li, layer in enumerate(weights.layers):
        xn, xn_raw, r = _rmsnorm_forward(x, layer.attn_norm_gain, cfg.norm_eps)
        q = _split_heads(matmul(xn, layer.wq), b, t, heads, hd)
        k = _split_heads(matmul(xn, layer.wk), b, t, heads, hd)
        v = _split_heads(matmul(xn, layer.wv), b, t, heads, hd)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * scale + causal
        probs = softmax_rows(scores)
        ctx = _merge_heads(matmul(probs, v), b, t, d)
        x = x + matmul(ctx, layer.wo)

        fn, fn_raw, fr = _rmsnorm_forward(x, layer.ffn_norm_gain, cfg.norm_eps)
        mask = None if masks is None else masks[li]
        y, fcache = ffn_forward(fn, layer.w_up, layer.w_gate, layer.w_down, mask)
        x = x + y
        if cache is not None:
            cache.layers.append(LayerCache(
                attn_in_n=xn_raw, attn_r=r, q=q, k=k, v=v, probs=probs, ctx=ctx,
                ffn_in_n=fn_raw, ffn_r=fr, ffn=fcache))

    fin, fin_raw, fr = _rmsnorm_forward(x, weights.final_norm_gain, cfg.norm_eps)
    logits = matmul(fin, weights.token_embedding.T)
    if cache is not None:
        cache.final_n = fin_raw
        cache.final_r = fr
    return logits.reshape(b, t, cfg.vocab_size), cache


def model_forward(weights, tokens, masks=None):
    """Forward pass without retaining intermediates (evaluation path)."""
    logits, _ = forward(weights, tokens, masks, want_cache=False)
    return logits


def backward(
    weights: ModelWeights,
    cache: ForwardCache,
    dlogits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Backprop from d(loss)/d(logits); returns grads keyed like named_tensors.

    Consumes the cache layer by layer to keep peak memory flat.
    """
    cfg = weights.config
    b, t = cache.batch, cache.seq
    n, d, heads, hd = b * t, cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    dlogits2 = np.asarray(dlogits, dtype=np.float64).reshape(n, cfg.vocab_size)

    grads: dict[str, np.ndarray] = {}
    grads["token_embedding"] = matmul(dlogits2.T, cache.final_n * weights.final_norm_gain)
    dfin = matmul(dlogits2, weights.token_embedding)
    dx, grads["final_norm_gain"] = _rmsnorm_backward(
        dfin, cache.final_n, cache.final_r, weights.final_norm_gain)

    for li in range(cfg.n_layers - 1, -1, -1):
        layer = weights.layers[li]
        lc = cache.layers[li]

        dw_up, dw_gate, dw_down, dfn = ffn_backward(dx, lc.ffn)
        grads[f"layers.{li}.w_up"] = dw_up
        grads[f"layers.{li}.w_gate"] = dw_gate
        grads[f"layers.{li}.w_down"] = dw_down
        dmid, dg = _rmsnorm_backward(dfn, lc.ffn_in_n, lc.ffn_r, layer.ffn_norm_gain)
        grads[f"layers.{li}.ffn_norm_gain"] = dg
        dx = dx + dmid

        dctx = matmul(dx, layer.wo.T)
        grads[f"layers.{li}.wo"] = matmul(lc.ctx.T, dx)
        dctx4 = _split_heads(dctx, b, t, heads, hd)
        dprobs = matmul(dctx4, lc.v.transpose(0, 1, 3, 2))
        dv = matmul(lc.probs.transpose(0, 1, 3, 2), dctx4)
        dscores = lc.probs * (dprobs - np.sum(dprobs * lc.probs, axis=-1, keepdims=True))
        dscores *= scale
        dq = matmul(dscores, lc.k)
        dk = matmul(dscores.transpose(0, 1, 3, 2), lc.q)
        dq2 = _merge_heads(dq, b, t, d)
        dk2 = _merge_heads(dk, b, t, d)
        dv2 = _merge_heads(dv, b, t, d)
        xn_t = lc.attn_in_n.T * layer.attn_norm_gain[:, None]  # (x_normed * gain)^T
        grads[f"layers.{li}.wq"] = matmul(xn_t, dq2)
        grads[f"layers.{li}.wk"] = matmul(xn_t, dk2)
        grads[f"layers.{li}.wv"] = matmul(xn_t, dv2)
        dxn = matmul(dq2, layer.wq.T) + matmul(dk2, layer.wk.T) + matmul(dv2, layer.wv.T)
        dattn_in, dg = _rmsnorm_backward(dxn, lc.attn_in_n, lc.attn_r, layer.attn_norm_gain)
        grads[f"layers.{li}.attn_norm_gain"] = dg
        dx = dx + dattn_in
        cache.layers[li] = None  # free as we go

    grads["position_embedding"] = np.zeros_like(weights.position_embedding)
    grads["position_embedding"][:t] = dx.reshape(b, t, d).sum(axis=0)
    demb = grads["token_embedding"]
    np.add.at(demb, cache.tokens.ravel(), dx)
    return grads


# ---------------------------------------------------------------------------
# Losses

def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy and d(loss)/d(logits).

    ``logits``: (b, t, vocab); ``targets``: (b, t) ids.  The mean runs over
    every position, so duplicating a batch leaves the loss unchanged.
    """
    b, t, v = logits.shape
    flat = logits.reshape(b * t, v)
    tgt = np.asarray(targets).reshape(b * t)
    m = np.max(flat, axis=1, keepdims=True)
    ex = np.exp(flat - m)
    sumex = np.sum(ex, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sumex[:, 0])
    nll = lse - flat[np.arange(b * t), tgt]
    loss = float(np.mean(nll))
    dflat = ex / sumex
    dflat[np.arange(b * t), tgt] -= 1.0
    dflat /= b * t
    return loss, dflat.reshape(b, t, v)


def loss_and_grads(
    weights: ModelWeights,
    inputs: np.ndarray,
    targets: np.ndarray,
    masks: list[np.ndarray] | None = None,
):
    """Forward + mean cross-entropy + full backward in one call."""
    logits, cache = forward(weights, inputs, masks, want_cache=True)
    loss, dlogits = cross_entropy(logits, targets)
    grads = backward(weights, cache, dlogits)
    return loss, grads


def mean_nll(weights: ModelWeights, inputs, targets, masks=None) -> float:
    """Mean next-token negative log-likelihood without gradients."""
    logits = model_forward(weights, inputs, masks)
    b, t, v = logits.shape
    flat = logits.reshape(b * t, v)
    tgt = np.asarray(targets).reshape(b * t)
    m = np.max(flat, axis=1)
    lse = m + np.log(np.sum(np.exp(flat - m[:, None]), axis=1))
    return float(np.mean(lse - flat[np.arange(b * t), tgt]))
