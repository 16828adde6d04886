import numpy as np
import pytest

from prunelab.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from prunelab.model import ModelConfig, init_weights
from prunelab.optim import AdamConfig, AdamState, adam_step
from prunelab.prune import CombineSpec, ImportanceState, WidthMasks

CFG = ModelConfig(d_model=8, n_heads=2, n_layers=2, ffn_hidden=6, vocab_size=12, seq_len=5)


def make_checkpoint(step=7) -> Checkpoint:
    rng = np.random.default_rng(step)
    weights = init_weights(CFG, rng)
    params = weights.params()
    opt = AdamState.for_params(params, AdamConfig(beta1=0.85))
    grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    adam_step(params, grads, opt, lr=1e-3)
    imp = ImportanceState(weights.hidden_sizes(), CFG.d_model, ema=0.3,
                          combine=CombineSpec("max", "mean"))
    imp.update_sensitivity(weights, grads)
    masks = WidthMasks(weights.hidden_sizes())
    masks.masks[1][4] = 0.0
    masks.committed[1][4] = True
    gen = np.random.default_rng(99)
    gen.standard_normal(17)  # advance so the state is nontrivial
    return Checkpoint(step=step, config_text="[run]\nseed = 1\n", weights=weights,
                      opt=opt, importance=imp, masks=masks,
                      rng_state=gen.bit_generator.state,
                      extra={"mode": "integrated", "lr_mode": ""})


class TestRoundTrip:
    def test_all_state_restored(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.step == ckpt.step
        assert loaded.config_text == ckpt.config_text
        assert loaded.extra == ckpt.extra
        for (n1, a1), (n2, a2) in zip(ckpt.weights.named_tensors(),
                                      loaded.weights.named_tensors()):
            assert n1 == n2
            assert np.array_equal(a1, a2)
        for name in ckpt.opt.m:
            assert np.array_equal(ckpt.opt.m[name], loaded.opt.m[name])
            assert np.array_equal(ckpt.opt.v[name], loaded.opt.v[name])
        assert loaded.opt.step == ckpt.opt.step
        assert loaded.opt.config == ckpt.opt.config
        assert loaded.importance.ema == 0.3
        assert loaded.importance.combine == CombineSpec("max", "mean")
        for li in range(CFG.n_layers):
            for mat in ("w_up", "w_gate", "w_down"):
                assert np.array_equal(ckpt.importance.scores[li][mat],
                                      loaded.importance.scores[li][mat])
            assert np.array_equal(ckpt.masks.masks[li], loaded.masks.masks[li])
            assert np.array_equal(ckpt.masks.committed[li], loaded.masks.committed[li])
        assert loaded.rng_state == ckpt.rng_state

    def test_rng_stream_continues_identically(self, tmp_path):
        ckpt = make_checkpoint()
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        g1 = np.random.default_rng(0)
        g1.bit_generator.state = ckpt.rng_state
        g2 = np.random.default_rng(0)
        g2.bit_generator.state = loaded.rng_state
        assert np.array_equal(g1.standard_normal(8), g2.standard_normal(8))

    def test_save_load_save_byte_identical(self, tmp_path):
        ckpt = make_checkpoint()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_compacted_shapes_survive(self, tmp_path):
        from prunelab.prune import compact
        from prunelab.schedule import SparsitySpec
        ckpt = make_checkpoint()
        ckpt.masks.masks[0][[1, 3]] = 0.0
        ckpt.masks.committed[0][[1, 3]] = True
        compact(ckpt.weights, ckpt.opt, ckpt.importance, ckpt.masks,
                prune_clock=5, spec=SparsitySpec(0.3, 0, 5))
        path = tmp_path / "c.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.weights.hidden_sizes() == ckpt.weights.hidden_sizes()


class TestCorruption:
    def test_truncated_file_fails_checksum(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_checkpoint(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="checksum|not a checkpoint"):
            load_checkpoint(path)

    def test_flipped_bit_fails_checksum(self, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_checkpoint(), path)
        raw = bytearray(path.read_bytes())
        raw[200] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_version_mismatch_refused(self, tmp_path):
        import hashlib
        import struct
        path = tmp_path / "a.ckpt"
        save_checkpoint(make_checkpoint(), path)
        raw = bytearray(path.read_bytes())
        body = raw[:-32]
        struct.pack_into("<I", body, 8, FORMAT_VERSION + 1)
        path.write_bytes(bytes(body) + hashlib.sha256(bytes(body)).digest())
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world, definitely not a checkpoint")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(path)
