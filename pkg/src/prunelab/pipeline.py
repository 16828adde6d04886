"""Run orchestration: training loops, pruning pipelines, KD, eval, metrics.

Every pipeline shares one inner loop whose per-step order is fixed:
gradients -> learning rate -> weight update -> importance update -> neuron
score combination -> mask update -> mask application (weights and optimizer
moments).  The pipelines differ only in the learning-rate function and the
pruning plan; physical compaction happens once, when the sparsity schedule
completes.

Importance statistics pair each gradient with the weights it was computed
against (the pre-update values); the smoothed scores are committed to state
right after the weight update, keeping the loop-order contract observable.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, canonical_config_text, config_hash, \
    portable_config_text
from .corpus import (
    BatchStream,
    TokenizedCorpus,
    batches,
    load_corpus,
    split_corpus,
    synthesize_corpus,
)
from .model import (
    ModelWeights,
    backward,
    cross_entropy,
    forward,
    init_weights,
    mean_nll,
    model_forward,
)
from .optim import AdamConfig, AdamState, adam_step, mask_optimizer_state
from .prune import (
    CombineSpec,
    ImportanceState,
    WidthMasks,
    activation_importance,
    apply_mask,
    compact,
    random_oneshot_mask,
    select_mask,
)
from .schedule import CosineSpec, NaiveScheduleSpec, SparsitySpec, cosine_lr, \
    naive_pipeline_lr, sparsity_at
from .tensor import NonFiniteError

METRICS_HEADER = "step,phase,lr,sparsity,retained,train_loss,heldout_ppl,wall_ms"
PRUNE_TRACE_HEADER = "step,layer,retained,score_min,score_max"


class RunAbort(RuntimeError):
    """Training aborted (non-finite loss/gradients); last-good state saved."""


# ---------------------------------------------------------------------------
# Knowledge distillation

def kd_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    targets: np.ndarray,
    alpha: float,
    tau: float,
):
    """(1-a)*CE(student, targets) + a*tau^2*KL(teacher_t || student_t).

    Both softmaxes use temperature ``tau``; the mean runs over all positions.
    Returns the scalar loss and its gradient w.r.t. the student logits.
    """
    if student_logits.shape != teacher_logits.shape:
        raise tensor.ShapeError(
            f"student {student_logits.shape} vs teacher {teacher_logits.shape}")
    ce, dce = cross_entropy(student_logits, targets)
    b, t, v = student_logits.shape
    n = b * t
    s = student_logits.reshape(n, v) / tau
    tt = teacher_logits.reshape(n, v) / tau
    log_ps = s - _logsumexp_rows(s)[:, None]
    log_pt = tt - _logsumexp_rows(tt)[:, None]
    pt = np.exp(log_pt)
    kl = float(np.sum(pt * (log_pt - log_ps)) / n)
    loss = (1.0 - alpha) * ce + alpha * tau * tau * kl
    dlogits = (1.0 - alpha) * dce + (
        alpha * tau * (np.exp(log_ps) - pt) / n).reshape(b, t, v)
    return loss, dlogits


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1)
    return m + np.log(np.sum(np.exp(x - m[:, None]), axis=1))


# ---------------------------------------------------------------------------
# Evaluation

def evaluate_perplexity(
    weights: ModelWeights,
    masks: list[np.ndarray] | None,
    heldout: TokenizedCorpus,
    seq_len: int,
    batch_size: int = 16,
    max_tokens: int = 0,
) -> float:
    """exp(mean next-token NLL) over non-overlapping held-out windows."""
    chunk = seq_len + 1
    n_chunks = len(heldout) // chunk
    if max_tokens > 0:
        n_chunks = min(n_chunks, max(1, max_tokens // seq_len))
    if n_chunks < 1:
        raise ValueError("held-out corpus too small to evaluate")
    total_nll = 0.0
    total_pos = 0
    for start in range(0, n_chunks, batch_size):
        rows = [heldout.tokens[c * chunk:(c + 1) * chunk]
                for c in range(start, min(start + batch_size, n_chunks))]
        block = np.stack(rows).astype(np.int64)
        nll = mean_nll(weights, block[:, :-1], block[:, 1:], masks)
        positions = block.shape[0] * seq_len
        total_nll += nll * positions
        total_pos += positions
    return float(np.exp(total_nll / total_pos))


def evaluate_checkpoint_perplexity(ckpt: Checkpoint, heldout: TokenizedCorpus,
                                   batch_size: int = 16, max_tokens: int = 0) -> float:
    masks = None if ckpt.masks.all_ones() else ckpt.masks.masks
    return evaluate_perplexity(ckpt.weights, masks, heldout,
                               ckpt.model_config.seq_len, batch_size, max_tokens)


# ---------------------------------------------------------------------------
# Pruning plans

@dataclass
class PrunePlan:
    method: str                      # iterative_sensitivity | osrp | minitron | none
    window_start: int                # first global step with pruning active (exclusive base)
    window_end: int                  # last global step of the pruning stage
    spec: SparsitySpec | None        # iterative ramp (pruning-clock based)

    def active(self) -> bool:
        return self.method != "none"

    def planned_sparsity(self, t: int, target: float) -> float:
        """Sparsity the run is committed to at global step t (metrics column)."""
        if not self.active() or t <= self.window_start:
            return 0.0
        if self.method in ("osrp", "minitron"):
            return target
        clock = min(t, self.window_end) - self.window_start
        return sparsity_at(clock, self.spec)


def _build_prune_plan(cfg: RunConfig) -> PrunePlan:
    st = cfg.stages
    if cfg.run.mode == "from_scratch" or cfg.prune.method == "none":
        return PrunePlan("none", 0, 0, None)
    window_start, window_end = st.pretrain_steps, st.pretrain_steps + st.prune_steps
    if cfg.prune.method in ("osrp", "minitron"):
        return PrunePlan(cfg.prune.method, window_start, window_end,
                         SparsitySpec(cfg.target_sparsity, 0, 1))
    # iterative sensitivity: warmup inside the pruning stage depends on pipeline
    if cfg.run.mode == "naive":
        warmup = cfg.naive_stage_params()[1][2]
    elif cfg.run.mode == "resume_ablation" and cfg.resume.lr_mode == "restarted":
        warmup = cfg.schedule.warmup_steps
    else:  # integrated / resumed: no mid-run warmup, pruning starts immediately
        warmup = 0
    ramp = st.prune_steps - warmup
    if ramp < 1:
        raise ConfigError(
            f"pruning stage ({st.prune_steps}) too short for its warmup ({warmup})")
    return PrunePlan("iterative_sensitivity", window_start, window_end,
                     SparsitySpec(cfg.target_sparsity, warmup, ramp))


def _build_lr_fn(cfg: RunConfig) -> Callable[[int], float]:
    st, sc = cfg.stages, cfg.schedule
    total = st.total_steps
    if cfg.run.mode == "naive":
        params = cfg.naive_stage_params()
        spec = NaiveScheduleSpec(
            pretrain=CosineSpec(st.pretrain_steps, params[0][2], params[0][0],
                                params[0][1], sc.legacy_denominator),
            prune=CosineSpec(st.prune_steps, params[1][2], params[1][0],
                             params[1][1], sc.legacy_denominator),
            recover=CosineSpec(st.recover_steps, params[2][2], params[2][0],
                               params[2][1], sc.legacy_denominator),
        )
        return lambda t: naive_pipeline_lr(t, spec)
    if cfg.run.mode == "resume_ablation" and cfg.resume.lr_mode == "restarted":
        tail = CosineSpec(total - st.pretrain_steps, sc.warmup_steps,
                          sc.peak_lr, sc.end_lr, sc.legacy_denominator)
        return lambda t: cosine_lr(t - st.pretrain_steps, tail)
    # from_scratch, integrated, resumed: one cosine over the whole budget
    spec = CosineSpec(total, sc.warmup_steps, sc.peak_lr, sc.end_lr,
                      sc.legacy_denominator)
    return lambda t: cosine_lr(t, spec)


def _phase(cfg: RunConfig, t: int) -> str:
    if cfg.run.mode == "from_scratch":
        return "train"
    st = cfg.stages
    if t <= st.pretrain_steps:
        return "pretrain"
    if t <= st.pretrain_steps + st.prune_steps:
        return "prune"
    return "recover"


# ---------------------------------------------------------------------------
# Corpus plumbing

def prepare_corpus(cfg: RunConfig) -> tuple[TokenizedCorpus, TokenizedCorpus]:
    """(train split, held-out split) per the data section."""
    data = cfg.data
    if data.corpus_cache:
        corpus = load_corpus(data.corpus_cache)
    elif data.synthetic_docs > 0:
        corpus = synthesize_corpus(data.synthetic_docs, data.synthetic_words_per_doc,
                                   data.synthetic_seed)
    else:
        raise ConfigError("data section names neither corpus_cache nor synthetic_docs")
    return split_corpus(corpus, data.holdout_fraction, data.split_seed)


# ---------------------------------------------------------------------------
# Metrics

class _MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(METRICS_HEADER + "\n")

    def row(self, step, phase, lr, sparsity, retained, train_loss, heldout_ppl, wall_ms):
        ppl = "" if heldout_ppl is None else repr(float(heldout_ppl))
        self._fh.write(
            f"{step},{phase},{lr!r},{sparsity!r},{retained},{train_loss!r},{ppl},{wall_ms}\n")
        if step % 50 == 0:
            self._fh.flush()

    def close(self):
        if self._fh.closed:
            return
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._fh.close()


# ---------------------------------------------------------------------------
# Run state

@dataclass
class TrainState:
    step: int
    weights: ModelWeights
    opt: AdamState
    importance: ImportanceState
    masks: WidthMasks
    run_rng: np.random.Generator

    def params(self) -> dict[str, np.ndarray]:
        return self.weights.params()


def _fresh_state(cfg: RunConfig) -> TrainState:
    mc = cfg.model.to_model_config()
    weights = init_weights(mc, np.random.default_rng((cfg.run.seed, 0)))
    opt = AdamState.for_params(weights.params(), AdamConfig(
        beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps,
        weight_decay=cfg.optim.weight_decay, grad_clip=cfg.optim.grad_clip))
    importance = ImportanceState(
        weights.hidden_sizes(), mc.d_model, ema=cfg.prune.ema,
        combine=CombineSpec(cfg.prune.combine_f1, cfg.prune.combine_f2))
    return TrainState(
        step=0, weights=weights, opt=opt, importance=importance,
        masks=WidthMasks(weights.hidden_sizes()),
        run_rng=np.random.default_rng((cfg.run.seed, 1)))


def _state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ckpt.rng_state
    return TrainState(step=ckpt.step, weights=ckpt.weights, opt=ckpt.opt,
                      importance=ckpt.importance, masks=ckpt.masks, run_rng=rng)


def _to_checkpoint(state: TrainState, cfg_text: str, extra: dict) -> Checkpoint:
    return Checkpoint(
        step=state.step, config_text=cfg_text, weights=state.weights,
        opt=state.opt, importance=state.importance, masks=state.masks,
        rng_state=state.run_rng.bit_generator.state, extra=extra)


# ---------------------------------------------------------------------------
# The training loop

@dataclass
class RunResult:
    output_dir: Path
    final_checkpoint: Path
    summary: dict


def execute_run(cfg: RunConfig, resume_from: str | Path | None = None) -> RunResult:
    cfg.validate()
    if not cfg.run.output_dir:
        raise ConfigError("run.output_dir must be set")
    tensor.set_deterministic(
        cfg.run.deterministic
        and os.environ.get(tensor.DETERMINISTIC_ENV, "1") != "0")

    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = portable_config_text(cfg)  # checkpoint/trajectory identity
    cfg_hash = config_hash(cfg)
    (out / "config_echo.cfg").write_text(canonical_config_text(cfg), encoding="utf-8")

    train_split, heldout = prepare_corpus(cfg)
    mc = cfg.model.to_model_config()
    stream = batches(train_split, cfg.data.batch_size, mc.seq_len, cfg.run.seed)

    total = cfg.stages.total_steps
    lr_fn = _build_lr_fn(cfg)
    plan = _build_prune_plan(cfg)
    eval_every = cfg.run.eval_every or max(1, round(0.02 * total))

    # --- state ------------------------------------------------------------
    teacher_weights = None
    calibration_used = 0
    if cfg.run.mode == "resume_ablation":
        ckpt = load_checkpoint(cfg.resume.checkpoint)
        if ckpt.step != cfg.stages.pretrain_steps:
            raise ConfigError(
                f"resume checkpoint is at step {ckpt.step}, but stages.pretrain_steps "
                f"= {cfg.stages.pretrain_steps}")
        if ckpt.model_config.ffn_hidden != mc.ffn_hidden or \
                ckpt.model_config.d_model != mc.d_model:
            raise ConfigError("resume checkpoint model shape disagrees with config")
        state = _state_from_checkpoint(ckpt)
    elif resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.config_text != cfg_text:
            raise ConfigError("checkpoint config does not match; refusing to continue")
        state = _state_from_checkpoint(ckpt)
    else:
        state = _fresh_state(cfg)

    if cfg.kd.enabled:
        tck = load_checkpoint(cfg.kd.teacher_checkpoint)
        if tck.model_config.vocab_size != mc.vocab_size:
            raise ConfigError("teacher vocabulary differs from student")
        if tck.model_config.seq_len < mc.seq_len:
            raise ConfigError("teacher sequence length shorter than student")
        teacher_weights = tck.weights

    params = state.params()
    compacted = state.weights.hidden_sizes() != [mc.ffn_hidden] * mc.n_layers
    masks_arg = None if (state.masks.all_ones() or compacted) else state.masks.masks

    metrics = _MetricsWriter(out / "metrics.csv")
    trace_fh = None
    if plan.active():
        trace_fh = open(out / "prune_trace.csv", "w", encoding="utf-8", newline="\n")
        trace_fh.write(PRUNE_TRACE_HEADER + "\n")

    extra = {"mode": cfg.run.mode, "lr_mode": cfg.resume.lr_mode
             if cfg.run.mode == "resume_ablation" else ""}
    run_t0 = time.perf_counter()
    deterministic = tensor.deterministic_enabled()
    last_loss = math.nan
    last_ppl = None

    def save(tag_step: int | None = None) -> Path:
        name = "final.ckpt" if tag_step is None else f"step{tag_step:06d}.ckpt"
        path = out / name
        save_checkpoint(_to_checkpoint(state, cfg_text, extra), path)
        return path

    try:
        while state.step < total:
            t = state.step + 1
            step_t0 = time.perf_counter()
            inputs, targets = stream.batch(t)

            # 1. gradients on the mini batch
            try:
                if teacher_weights is not None:
                    logits, fwd_cache = forward(state.weights, inputs, masks_arg)
                    t_logits = model_forward(teacher_weights, inputs, None)
                    loss, dlogits = kd_loss(logits, t_logits, targets,
                                            cfg.kd.alpha, cfg.kd.tau)
                    if not math.isfinite(loss):
                        raise NonFiniteError(f"non-finite loss at step {t}")
                    grads = backward(state.weights, fwd_cache, dlogits)
                else:
                    logits, fwd_cache = forward(state.weights, inputs, masks_arg)
                    loss, dlogits = cross_entropy(logits, targets)
                    if not math.isfinite(loss):
                        raise NonFiniteError(f"non-finite loss at step {t}")
                    grads = backward(state.weights, fwd_cache, dlogits)

                # 2. learning rate, 3. weight update (importance pairs the
                # gradient with its pre-update weights, committed after).
                lr = lr_fn(t)
                pending_scores = state.importance.batch_scores(state.weights, grads)
                adam_step(params, grads, state.opt, lr)
                # 4. importance EMA update
                state.importance.apply(pending_scores)
            except NonFiniteError as exc:
                last_good = out / "last_good.ckpt"
                save_checkpoint(_to_checkpoint(state, cfg_text, extra), last_good)
                (out / "error.json").write_text(json.dumps(
                    {"error": {"type": type(exc).__name__, "message": str(exc),
                               "step": t, "last_good": str(last_good)}}),
                    encoding="utf-8")
                raise RunAbort(f"step {t}: {exc}") from exc

            state.step = t
            del grads, fwd_cache, dlogits, logits

            # 5./6./7. score combination, mask update, mask application
            if plan.active() and plan.window_start < t <= plan.window_end and not compacted:
                if plan.method == "iterative_sensitivity":
                    clock = t - plan.window_start
                    for li in range(mc.n_layers):
                        scores = state.importance.combine_neuron_scores(li)
                        mask = select_mask(scores, clock, plan.spec, state.masks, li)
                        apply_mask(state.weights.layers[li], mask)
                        mask_optimizer_state(state.opt, li, mask)
                        if trace_fh:
                            trace_fh.write(
                                f"{t},{li},{int(mask.sum())},"
                                f"{float(scores.min())!r},{float(scores.max())!r}\n")
                    masks_arg = state.masks.masks
                    if clock >= plan.spec.warmup_steps + plan.spec.pruning_steps:
                        compact(state.weights, state.opt, state.importance,
                                state.masks, clock, plan.spec)
                        compacted = True
                        masks_arg = None
                        params = state.params()
                else:  # one-shot methods at the first step of the pruning stage
                    if t == plan.window_start + 1:
                        if plan.method == "osrp":
                            layer_scores = None
                        else:  # minitron: activation norms over calibration batches
                            calib = []
                            n_batches = max(1, math.ceil(
                                cfg.prune.calibration_samples / cfg.prune.calibration_batch))
                            cal_stream = batches(train_split, cfg.prune.calibration_batch,
                                                 mc.seq_len, cfg.run.seed)
                            for j in range(n_batches):
                                cal_in, _ = cal_stream.batch(10**6 + j)
                                calib.append(cal_in)
                            calibration_used = sum(c.shape[0] for c in calib)
                            layer_scores = activation_importance(
                                state.weights, calib, masks_arg)
                        for li in range(mc.n_layers):
                            if layer_scores is None:
                                mask = random_oneshot_mask(
                                    mc.ffn_hidden, cfg.target_sparsity, state.run_rng)
                                state.masks.masks[li] = mask
                                state.masks.committed[li] = mask == 0.0
                                scores_repr = mask  # no scores for random masks
                            else:
                                mask = select_mask(layer_scores[li], 1, plan.spec,
                                                   state.masks, li)
                                scores_repr = layer_scores[li]
                            apply_mask(state.weights.layers[li], mask)
                            mask_optimizer_state(state.opt, li, mask)
                            if trace_fh:
                                trace_fh.write(
                                    f"{t},{li},{int(mask.sum())},"
                                    f"{float(scores_repr.min())!r},{float(scores_repr.max())!r}\n")
                        compact(state.weights, state.opt, state.importance,
                                state.masks, 1, plan.spec)
                        compacted = True
                        masks_arg = None
                        params = state.params()

            # metrics, eval, checkpoints
            last_loss = loss
            do_eval = (t % eval_every == 0) or t == total
            if do_eval:
                last_ppl = evaluate_perplexity(
                    state.weights, masks_arg, heldout, mc.seq_len,
                    batch_size=min(16, cfg.data.batch_size),
                    max_tokens=cfg.run.eval_tokens)
            wall_ms = 0 if deterministic else int(
                (time.perf_counter() - step_t0) * 1000)
            metrics.row(t, _phase(cfg, t), lr,
                        plan.planned_sparsity(t, cfg.target_sparsity),
                        state.masks.retained(0), loss,
                        last_ppl if do_eval else None, wall_ms)

            boundary = (cfg.run.keep_stage_checkpoints
                        and t == cfg.stages.pretrain_steps and t < total)
            if boundary or t in cfg.run.checkpoint_at:
                save(t)
    finally:
        metrics.close()
        if trace_fh:
            trace_fh.close()

    final_path = save(None)
    ffn_params = sum(3 * layer.hidden * mc.d_model for layer in state.weights.layers)
    all_params = sum(arr.size for arr in state.weights.params().values())
    summary = {
        "config_hash": cfg_hash,
        "seed": cfg.run.seed,
        "mode": cfg.run.mode,
        "ffn_param_fraction": round(ffn_params / all_params, 4),
        "lr_mode": cfg.resume.lr_mode if cfg.run.mode == "resume_ablation" else "",
        "prune_method": plan.method,
        "steps": state.step,
        "tokens_trained": (state.step - (cfg.stages.pretrain_steps
                           if cfg.run.mode == "resume_ablation" else 0))
                          * cfg.data.batch_size * mc.seq_len,
        "budget_steps": total,
        "final_train_loss": last_loss,
        "final_heldout_ppl": last_ppl,
        "final_hidden_sizes": state.weights.hidden_sizes(),
        "calibration_samples": calibration_used,
        "kd": cfg.kd.enabled,
        "wall_s": round(time.perf_counter() - run_t0, 3),
    }
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunResult(out, final_path, summary)


# ---------------------------------------------------------------------------
# Mode wrappers

def _expect_mode(cfg: RunConfig, *modes: str) -> None:
    if cfg.run.mode not in modes:
        raise ConfigError(f"expected mode in {modes}, got {cfg.run.mode!r}")


def run_from_scratch(cfg: RunConfig) -> RunResult:
    _expect_mode(cfg, "from_scratch")
    return execute_run(cfg)


def run_integrated(cfg: RunConfig) -> RunResult:
    _expect_mode(cfg, "integrated")
    return execute_run(cfg)


def run_naive(cfg: RunConfig) -> RunResult:
    _expect_mode(cfg, "naive")
    return execute_run(cfg)


def run_resume_ablation(cfg: RunConfig) -> RunResult:
    _expect_mode(cfg, "resume_ablation")
    return execute_run(cfg)


def continue_run(cfg: RunConfig, checkpoint_path: str | Path) -> RunResult:
    """Continue an interrupted run; reproduces the uninterrupted trajectory."""
    return execute_run(cfg, resume_from=checkpoint_path)
