"""Acceptance suite.

Part A (criteria 1-7) is the exact/oracle suite: self-contained, fast, and
run at the default deterministic settings unless a criterion needs the
relaxed matmul for finite-difference sweeps.

Part B (criteria 8-12) is the directional desk-scale suite on the tiny-model
protocol (4 layers, d=128, enlarged h=1024 -> target 384, ~4.9M training
tokens, 3 seeds, medians).  It consumes the cached run matrix built by
``tests/acceptance_matrix.py``; on a cold cache the first call trains
everything, which takes hours of CPU, so pre-warm with

    python tests/acceptance_matrix.py

Each criterion prints one PASS/FAIL line (visible under ``pytest -s``).
"""

import json
import math
import subprocess
import sys
from contextlib import contextmanager
from pathlib import Path
from statistics import median

import numpy as np
import pytest

import acceptance_matrix as am
from prunelab import tensor
from prunelab.config import RunConfig, canonical_config_text
from prunelab.corpus import save_corpus, synthesize_corpus
from prunelab.model import (
    ModelConfig,
    init_weights,
    loss_and_grads,
    mean_nll,
    model_forward,
)
from prunelab.optim import AdamState, adam_step
from prunelab.prune import WidthMasks, apply_mask, compact, select_mask
from prunelab.schedule import (
    CosineSpec,
    SparsitySpec,
    cosine_lr,
    integrated_lr,
    restarted_lr,
    resumed_lr,
    retained_count,
    sparsity_at,
)


@contextmanager
def criterion(number: int, name: str):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE CRITERION {number:2d} [{name}]: FAIL")
        raise
    print(f"\nACCEPTANCE CRITERION {number:2d} [{name}]: PASS")


TINY = ModelConfig(d_model=16, n_heads=4, n_layers=2, ffn_hidden=32,
                   vocab_size=64, seq_len=8)


def tiny_batch(seed=7, rows=4):
    rng = np.random.default_rng(seed)
    return (rng.integers(0, TINY.vocab_size, size=(rows, TINY.seq_len)),
            rng.integers(0, TINY.vocab_size, size=(rows, TINY.seq_len)))


# ===========================================================================
# Part A: exact and oracle suite


class TestExactSuite:
    def test_criterion_1_gradient_check(self):
        """Analytic grads vs central differences, max rel error < 1e-4."""
        with criterion(1, "gradient check"):
            tensor.set_deterministic(False)  # fd sweep; both sides share the mode
            weights = init_weights(TINY, np.random.default_rng(42))
            inputs, targets = tiny_batch()
            _, grads = loss_and_grads(weights, inputs, targets)
            worst = 0.0
            for name, arr in weights.named_tensors():
                def loss_fn(theta, arr=arr):
                    saved = arr.copy()
                    np.copyto(arr, theta)
                    try:
                        return mean_nll(weights, inputs, targets)
                    finally:
                        np.copyto(arr, saved)
                fd = tensor.finite_difference_grad(loss_fn, arr, h=1e-5)
                diff = np.abs(grads[name] - fd)
                denom = np.maximum(np.abs(grads[name]), np.abs(fd))
                live = denom > 0
                if np.any(live):
                    worst = max(worst, float((diff[live] / denom[live]).max()))
            assert worst < 1e-4, f"max relative gradient error {worst:.3e}"

    def test_criterion_2_sensitivity_first_order(self):
        """|L(th) - L(th_-k)| vs |grad*th|: error shrinks ~4x per halving.

        20 parameters are drawn at random from the FFN matrices among
        high-sensitivity entries (the first-order property presumes a
        non-degenerate first-order term); the shrink ratio is taken as the
        median over the sample for each halving, since individual parameters
        carry third-order Taylor terms of either sign.
        """
        with criterion(2, "sensitivity first-order oracle"):
            tensor.set_deterministic(False)
            weights = init_weights(TINY, np.random.default_rng(42))
            inputs, targets = tiny_batch()
            _, g0 = loss_and_grads(weights, inputs, targets)
            rng = np.random.default_rng(2024)
            matrices = [(li, nm) for li in range(TINY.n_layers)
                        for nm in ("w_up", "w_gate", "w_down")]
            picks = []
            for _ in range(20):
                li, nm = matrices[rng.integers(len(matrices))]
                arr = getattr(weights.layers[li], nm)
                sens = np.abs(g0[f"layers.{li}.{nm}"] * arr)
                cand = np.argwhere(sens >= np.quantile(sens, 0.90))
                i, j = cand[rng.integers(len(cand))]
                picks.append((li, nm, int(i), int(j)))
            ratios_1, ratios_2 = [], []
            for li, nm, i, j in picks:
                arr = getattr(weights.layers[li], nm)
                orig = arr[i, j]
                errs = []
                for scale in (1.0, 0.5, 0.25):
                    arr[i, j] = orig * scale
                    loss_s, g_s = loss_and_grads(weights, inputs, targets)
                    omega = abs(g_s[f"layers.{li}.{nm}"][i, j] * arr[i, j])
                    arr[i, j] = 0.0
                    loss_zero = mean_nll(weights, inputs, targets)
                    errs.append(abs(abs(loss_s - loss_zero) - omega))
                    arr[i, j] = orig
                if min(errs) > 1e-15:  # below this the error is fp noise
                    ratios_1.append(errs[0] / errs[1])
                    ratios_2.append(errs[1] / errs[2])
            assert len(ratios_1) >= 15
            m1, m2 = median(ratios_1), median(ratios_2)
            assert 3.5 <= m1 <= 4.5, f"first-halving median ratio {m1:.2f}"
            assert 3.5 <= m2 <= 4.5, f"second-halving median ratio {m2:.2f}"

    def test_criterion_3_mask_selection_oracle(self):
        """select_mask equals brute-force sort on 1000 vectors, ties included."""
        with criterion(3, "mask selection oracle"):
            rng = np.random.default_rng(99)
            for trial in range(1000):
                h = int(rng.integers(2, 513))
                scores = rng.standard_normal(h)
                if trial % 3 == 0:
                    scores = np.round(scores, 1)  # force plenty of ties
                r = float(rng.uniform(0.05, 0.95))
                spec = SparsitySpec(r, 0, 1)
                masks = WidthMasks([h])
                mask = select_mask(scores, 1, spec, masks, 0)
                k = retained_count(1, h, spec)
                want = sorted(sorted(range(h), key=lambda i: (-scores[i], i))[:k])
                assert np.array_equal(np.flatnonzero(mask), want), \
                    f"trial {trial}: h={h} r={r}"

    def test_criterion_4_masked_equals_compacted(self):
        """Masked and compacted models agree within 1e-10 on 100 batches."""
        with criterion(4, "masked/compacted equivalence"):
            cfg = ModelConfig(d_model=32, n_heads=4, n_layers=2, ffn_hidden=64,
                              vocab_size=64, seq_len=16)
            weights = init_weights(cfg, np.random.default_rng(0))
            rng = np.random.default_rng(1)
            spec = SparsitySpec(0.625, 0, 10)
            masks = WidthMasks(weights.hidden_sizes())
            for t in range(1, 11):
                for li in range(cfg.n_layers):
                    mask = select_mask(np.abs(rng.standard_normal(64)), t, spec,
                                       masks, li)
                    apply_mask(weights.layers[li], mask)
            masked = weights.copy()
            masked_masks = [m.copy() for m in masks.masks]
            compact(weights, None, None, masks, prune_clock=10, spec=spec)
            assert weights.hidden_sizes() == [24, 24]
            for _ in range(100):
                batch = rng.integers(0, 64, size=(2, 16))
                a = model_forward(masked, batch, masked_masks)
                b = model_forward(weights, batch, None)
                np.testing.assert_allclose(a, b, atol=1e-10)

    def test_criterion_5_adam_oracle(self):
        """100-step scalar trajectory vs independent recurrence; exact step 1."""
        with criterion(5, "adam recurrence oracle"):
            rng = np.random.default_rng(0)
            g_seq = rng.standard_normal(100)
            params = {"w": np.array([0.3])}
            state = AdamState.for_params(params)
            for g in g_seq:
                adam_step(params, {"w": np.array([g])}, state, lr=2e-3)
            w, m, v = 0.3, 0.0, 0.0
            for t, g in enumerate(g_seq, start=1):
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                w -= 2e-3 * (m / (1 - 0.9**t)) / ((v / (1 - 0.999**t)) ** 0.5 + 1e-8)
            assert params["w"][0] == pytest.approx(w, abs=1e-12)
            for g in (5.0, -5.0, 2.0, 0.5, -0.25, 1024.0):
                params = {"w": np.array([1.0])}
                state = AdamState.for_params(params)
                adam_step(params, {"w": np.array([g])}, state, lr=0.1)
                assert params["w"][0] == 1.0 - 0.1 * g / (abs(g) + 1e-8)

    def test_criterion_6_schedule_endpoints(self):
        """Exact schedule endpoints, tail identity, post-warmup monotonicity."""
        with criterion(6, "schedule endpoints"):
            spec = CosineSpec(total_steps=1200, warmup_steps=60,
                              peak_lr=0.01, end_lr=5e-5)
            assert cosine_lr(60, spec) == 0.01
            assert cosine_lr(1200, spec) == 5e-5
            sp = SparsitySpec(0.625, 25, 300)
            assert sparsity_at(25, sp) == 0.0
            assert sparsity_at(325, sp) == 0.625
            for t in range(1, 601):
                assert resumed_lr(t, 600, 1200, 0.01, 5e-5, warmup_steps=60) == \
                    integrated_lr(t + 600, 600, 300, 300, 0.01, 5e-5, warmup_steps=60)
            lrs = [integrated_lr(t, 600, 300, 300, 0.01, 5e-5, warmup_steps=60)
                   for t in range(60, 1201)]
            assert all(b <= a for a, b in zip(lrs, lrs[1:]))
            assert restarted_lr(1, 600, 0.01, 5e-5, warmup_steps=60) < \
                resumed_lr(1, 600, 1200, 0.01, 5e-5, warmup_steps=60)

    def test_criterion_7_determinism(self, tmp_path):
        """Byte-identical reruns and bit-exact mid-run resume, through the CLI."""
        with criterion(7, "determinism and resume"):
            corpus = tmp_path / "corpus.bin"
            save_corpus(synthesize_corpus(12, 600, seed=5, n_words=300,
                                          n_successors=16), corpus)
            cfg = RunConfig()
            cfg.run.mode = "integrated"
            cfg.run.seed = 3
            cfg.run.eval_every = 10
            cfg.run.eval_tokens = 2048
            cfg.run.checkpoint_at = [15]
            cfg.model.d_model = 32
            cfg.model.n_heads = 2
            cfg.model.n_layers = 2
            cfg.model.ffn_hidden = 32
            cfg.model.seq_len = 32
            cfg.data.corpus_cache = str(corpus)
            cfg.data.batch_size = 8
            cfg.data.holdout_fraction = 0.2
            cfg.stages.pretrain_steps = 12
            cfg.stages.prune_steps = 10
            cfg.stages.recover_steps = 8
            cfg.schedule.peak_lr = 1e-3
            cfg.schedule.end_lr = 1e-5
            cfg.schedule.warmup_steps = 4
            cfg.prune.target_hidden = 16
            cfg_file = tmp_path / "run.cfg"
            cfg_file.write_text(canonical_config_text(cfg), encoding="utf-8")

            def cli(*argv):
                proc = subprocess.run(
                    [sys.executable, "-m", "prunelab", *map(str, argv)],
                    capture_output=True, text=True)
                assert proc.returncode == 0, proc.stderr
                return proc

            cli("prune-run", "--config", cfg_file, "--output", tmp_path / "a")
            cli("prune-run", "--config", cfg_file, "--output", tmp_path / "b")
            assert (tmp_path / "a" / "metrics.csv").read_bytes() == \
                (tmp_path / "b" / "metrics.csv").read_bytes()
            assert (tmp_path / "a" / "final.ckpt").read_bytes() == \
                (tmp_path / "b" / "final.ckpt").read_bytes()
            cli("prune-run", "--config", cfg_file, "--output", tmp_path / "c",
                "--resume", tmp_path / "a" / "step000015.ckpt")
            assert (tmp_path / "c" / "final.ckpt").read_bytes() == \
                (tmp_path / "a" / "final.ckpt").read_bytes()


# ===========================================================================
# Part B: directional desk-scale suite (3 seeds, medians)


@pytest.fixture(scope="session")
def matrix():
    am.ensure_all()
    return {tag: am.summary(tag) for tag in am.job_tags()}


def med_ppl(matrix, kind):
    return median(matrix[f"{kind}_s{s}"]["final_heldout_ppl"] for s in am.SEEDS)


def integrated_loss_trace(seed):
    """Training-loss trace of the integrated pipeline for one seed.

    The integrated run is the teacher's first 600 steps (shared pretraining
    prefix; bit-equal by the determinism contract) plus the resumed tail.
    """
    teacher = am.metrics(f"teacher_s{seed}")
    tail = am.metrics(f"resumed_s{seed}")
    rows = [r for r in teacher if int(r["step"]) <= am.T_L] + tail
    trace = {int(r["step"]): float(r["train_loss"]) for r in rows}
    assert sorted(trace) == list(range(1, am.T_L + am.T_P + am.T_R + 1))
    return trace


def naive_loss_trace(seed):
    trace = {int(r["step"]): float(r["train_loss"])
             for r in am.metrics(f"naive_s{seed}")}
    assert sorted(trace) == list(range(1, am.T_L + am.T_P + am.T_R + 1))
    return trace


class TestDirectionalSuite:
    def test_criterion_8_resumed_vs_restarted(self, matrix):
        with criterion(8, "resumed <= restarted"):
            resumed = med_ppl(matrix, "resumed")
            restarted = med_ppl(matrix, "restarted")
            print(f"\n  resumed median ppl {resumed:.4f}, restarted {restarted:.4f}")
            assert resumed <= restarted, f"{resumed:.4f} vs {restarted:.4f}"

    def test_criterion_9_iterative_vs_oneshot(self, matrix):
        with criterion(9, "iterative <= one-shot random"):
            iterative = med_ppl(matrix, "resumed")
            osrp = med_ppl(matrix, "naive")
            print(f"\n  iterative median ppl {iterative:.4f}, one-shot random {osrp:.4f}")
            assert iterative <= osrp, f"{iterative:.4f} vs {osrp:.4f}"

    def test_criterion_10_loss_spike_asymmetry(self, matrix):
        with criterion(10, "loss-spike asymmetry"):
            naive_spikes, integ_spikes = [], []
            for s in am.SEEDS:
                naive_spikes.append(_max_rise(naive_loss_trace(s)))
                integ_spikes.append(_max_rise(integrated_loss_trace(s)))
            naive_med = median(naive_spikes)
            integ_med = median(integ_spikes)
            print(f"\n  max window-rise: naive {naive_med:.4f}, "
                  f"integrated {integ_med:.4f}")
            assert naive_med > integ_med, \
                f"naive spike {naive_med:.4f} vs integrated {integ_med:.4f}"

    def test_criterion_11_enlarged_size_sweep(self, matrix):
        with criterion(11, "enlarge-and-prune beats from scratch"):
            baseline = med_ppl(matrix, "sweepbase")
            print(f"\n  from-scratch baseline median ppl {baseline:.4f}")
            for h in am.SWEEP_HIDDEN:
                pruned = med_ppl(matrix, f"sweep{h}")
                print(f"  enlarged {h} -> 384 median ppl {pruned:.4f}")
                assert pruned <= baseline, \
                    f"enlarged {h}: {pruned:.4f} vs baseline {baseline:.4f}"

    def test_criterion_12_kd_compatibility(self, matrix):
        with criterion(12, "knowledge distillation helps"):
            with_kd = med_ppl(matrix, "kd")
            without = med_ppl(matrix, "resumed")
            print(f"\n  with KD median ppl {with_kd:.4f}, without {without:.4f}")
            assert with_kd <= without, f"{with_kd:.4f} vs {without:.4f}"


def _max_rise(trace, window=60):
    """Largest window-mean train-loss rise from the pruning stage onward."""
    total = max(trace)
    means = []
    for t0 in range(0, total, window):
        vals = [trace[t] for t in range(t0 + 1, t0 + window + 1) if t in trace]
        means.append(sum(vals) / len(vals))
    first_prune_window = am.T_L // window  # index of window (T_L, T_L+60]
    rises = [means[i] - means[i - 1]
             for i in range(first_prune_window, len(means))]
    return max(rises)
