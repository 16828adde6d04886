from collections import Counter

import numpy as np
import pytest

from prunelab.corpus import (
    BOS,
    EOS,
    VOCAB_SIZE,
    CorpusError,
    batches,
    ingest,
    ingest_texts,
    load_corpus,
    save_corpus,
    split_corpus,
    synthesize_corpus,
    synthesize_documents,
)


class TestIngest:
    def test_two_byte_document(self):
        corpus = ingest_texts([("doc", b"ab")])
        assert corpus.tokens.tolist() == [BOS, 97, 98, EOS]

    def test_token_count_is_bytes_plus_two_per_doc(self):
        docs = [("a", b"hello"), ("b", b"world!"), ("c", b"x" * 100)]
        corpus = ingest_texts(docs)
        assert len(corpus) == sum(len(d) for _, d in docs) + 2 * len(docs)

    def test_deterministic_streams_and_hashes(self, tmp_path):
        for name, text in [("one.txt", "alpha beta"), ("two.txt", "gamma")]:
            (tmp_path / name).write_text(text)
        paths = sorted(tmp_path.iterdir())
        c1, c2 = ingest(paths), ingest(paths)
        assert np.array_equal(c1.tokens, c2.tokens)
        assert c1.manifest == c2.manifest

    def test_all_ids_below_vocab(self):
        corpus = ingest_texts([("d", bytes(range(256)))])
        assert corpus.tokens.max() < VOCAB_SIZE

    def test_empty_corpus_rejected(self):
        with pytest.raises(CorpusError):
            ingest_texts([])

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(CorpusError):
            ingest([tmp_path / "missing.txt"])

    def test_cache_round_trip(self, tmp_path):
        corpus = ingest_texts([("a", b"some text"), ("b", b"more text")])
        path = tmp_path / "corpus.bin"
        save_corpus(corpus, path)
        loaded = load_corpus(path)
        assert np.array_equal(loaded.tokens, corpus.tokens)
        assert np.array_equal(loaded.doc_offsets, corpus.doc_offsets)
        assert loaded.manifest == corpus.manifest


class TestSplit:
    def _corpus(self):
        docs = [(f"doc{i}", bytes([65 + i]) * (10 + i)) for i in range(20)]
        return ingest_texts(docs)

    def test_document_disjointness(self):
        train, hold = split_corpus(self._corpus(), 0.2, seed=0)
        train_names = {m[0] for m in train.manifest}
        hold_names = {m[0] for m in hold.manifest}
        assert not (train_names & hold_names)
        assert len(train_names) + len(hold_names) == 20

    def test_split_deterministic_under_seed(self):
        t1, h1 = split_corpus(self._corpus(), 0.2, seed=7)
        t2, h2 = split_corpus(self._corpus(), 0.2, seed=7)
        assert np.array_equal(t1.tokens, t2.tokens)
        assert [m[0] for m in h1.manifest] == [m[0] for m in h2.manifest]

    def test_different_seed_different_split(self):
        _, h1 = split_corpus(self._corpus(), 0.2, seed=1)
        _, h2 = split_corpus(self._corpus(), 0.2, seed=2)
        assert {m[0] for m in h1.manifest} != {m[0] for m in h2.manifest}

    def test_single_document_rejected(self):
        with pytest.raises(CorpusError):
            split_corpus(ingest_texts([("only", b"text")]), 0.5, seed=0)


class TestBatches:
    def _corpus(self, n_tokens_hint=600, seq_len=9):
        # sized to an exact multiple of the chunk length for coverage checks
        chunk = seq_len + 1
        n_bytes = (n_tokens_hint // chunk) * chunk - 2
        rng = np.random.default_rng(0)
        return ingest_texts([("d", bytes(rng.integers(32, 127, n_bytes).tolist()))])

    def test_first_batch_reproducible(self):
        corpus = self._corpus()
        s1 = batches(corpus, 4, 9, seed=5)
        s2 = batches(corpus, 4, 9, seed=5)
        a_in, a_tg = s1.batch(1)
        b_in, b_tg = s2.batch(1)
        assert np.array_equal(a_in, b_in)
        assert np.array_equal(a_tg, b_tg)

    def test_inputs_and_targets_shifted(self):
        corpus = self._corpus()
        inputs, targets = batches(corpus, 4, 9, seed=5).batch(3)
        assert inputs.shape == (4, 9)
        assert targets.shape == (4, 9)
        assert np.array_equal(inputs[:, 1:], targets[:, :-1])

    def test_batch_tokens_subset_of_training_split(self):
        docs = [(f"d{i}", bytes([48 + i]) * 40) for i in range(10)]
        train, hold = split_corpus(ingest_texts(docs), 0.3, seed=1)
        hold_bytes = {m[0] for m in hold.manifest}
        stream = batches(train, 2, 7, seed=0)
        seen = set()
        for step in range(1, 8):
            inputs, _ = stream.batch(step)
            seen.update(np.unique(inputs).tolist())
        train_vocab = set(np.unique(train.tokens).tolist())
        assert seen <= train_vocab
        # byte values unique to held-out docs never appear
        hold_only = set(np.unique(hold.tokens).tolist()) - train_vocab
        assert not (seen & hold_only)

    def test_epoch_covers_every_token_exactly_once(self):
        seq_len = 9
        corpus = self._corpus(600, seq_len)
        assert len(corpus) % (seq_len + 1) == 0
        stream = batches(corpus, 4, seq_len, seed=3)
        steps_per_epoch = stream.n_chunks // 4
        seen: Counter = Counter()
        for step in range(1, steps_per_epoch + 1):
            inputs, targets = stream.batch(step)
            for row_in, row_tg in zip(inputs, targets):
                seen.update(row_in.tolist())
                seen.update([row_tg[-1]])  # chunk = inputs + final target token
        want = Counter(corpus.tokens.tolist())
        assert seen == want

    def test_epochs_reshuffle(self):
        corpus = self._corpus()
        stream = batches(corpus, 4, 9, seed=3)
        steps_per_epoch = stream.n_chunks // 4
        first_epoch, _ = stream.batch(1)
        second_epoch, _ = stream.batch(steps_per_epoch + 1)
        assert not np.array_equal(first_epoch, second_epoch)

    def test_too_small_corpus(self):
        corpus = ingest_texts([("d", b"tiny")])
        with pytest.raises(CorpusError):
            batches(corpus, 4, 9, seed=0)


class TestSynthetic:
    def test_deterministic(self):
        a = synthesize_documents(3, 200, seed=11, n_words=300, n_successors=16)
        b = synthesize_documents(3, 200, seed=11, n_words=300, n_successors=16)
        assert a == b

    def test_different_seeds_differ(self):
        a = synthesize_documents(2, 100, seed=1, n_words=200, n_successors=8)
        b = synthesize_documents(2, 100, seed=2, n_words=200, n_successors=8)
        assert a != b

    def test_corpus_is_usable(self):
        corpus = synthesize_corpus(4, 300, seed=0, n_words=250, n_successors=8)
        assert corpus.n_docs == 4
        assert len(corpus) > 4 * 300 * 3  # words are several bytes each
        train, hold = split_corpus(corpus, 0.25, seed=0)
        stream = batches(train, 2, 16, seed=0)
        inputs, targets = stream.batch(1)
        assert inputs.max() < VOCAB_SIZE
