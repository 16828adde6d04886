import os

import pytest

from prunelab import tensor
from prunelab.config import RunConfig
from prunelab.corpus import save_corpus, synthesize_corpus


@pytest.fixture(autouse=True)
def _reset_deterministic_mode():
    yield
    tensor.set_deterministic(os.environ.get(tensor.DETERMINISTIC_ENV, "1") != "0")


@pytest.fixture(scope="session")
def corpus_cache(tmp_path_factory):
    """Small shared synthetic corpus cache for pipeline/CLI tests."""
    path = tmp_path_factory.mktemp("corpus") / "tiny.bin"
    corpus = synthesize_corpus(10, 500, seed=1234, n_words=400, n_successors=16)
    save_corpus(corpus, path)
    return path


def tiny_run_config(corpus_cache, output_dir, mode="integrated", seed=0) -> RunConfig:
    """16+8+8-step configuration small enough for strict-mode unit tests."""
    cfg = RunConfig()
    cfg.run.mode = mode
    cfg.run.seed = seed
    cfg.run.output_dir = str(output_dir)
    cfg.run.eval_every = 8
    cfg.run.eval_tokens = 1024
    cfg.model.d_model = 16
    cfg.model.n_heads = 2
    cfg.model.n_layers = 2
    cfg.model.ffn_hidden = 16
    cfg.model.seq_len = 16
    cfg.data.corpus_cache = str(corpus_cache)
    cfg.data.batch_size = 4
    cfg.data.holdout_fraction = 0.2
    cfg.stages.pretrain_steps = 16
    cfg.stages.prune_steps = 8
    cfg.stages.recover_steps = 8
    cfg.schedule.peak_lr = 3e-3
    cfg.schedule.end_lr = 1e-4
    cfg.schedule.warmup_steps = 4
    cfg.prune.target_hidden = 8
    if mode == "from_scratch":
        cfg.prune.method = "none"
    return cfg
