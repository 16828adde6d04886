"""Byte-level corpus handling: ingestion, splits, deterministic batching.

Tokens are raw bytes (0-255) plus BOS/EOS specials wrapped around each
document, so the vocabulary is fixed at 258 and no tokenizer training is
involved.  Splits are by document, never by token.  Batch order is a pure
function of (corpus, seed, step), which is what makes checkpoint resume
restart mid-stream exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS = 256
EOS = 257
VOCAB_SIZE = 258

_CACHE_MAGIC = b"PLCORP01"
_CACHE_VERSION = 1


class CorpusError(ValueError):
    pass


@dataclass
class TokenizedCorpus:
    tokens: np.ndarray  # uint16 stream
    doc_offsets: np.ndarray  # int64 start index of each document
    manifest: list[tuple[str, int, str]]  # (source, byte count, sha256)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_docs(self) -> int:
        return int(self.doc_offsets.shape[0])

    def doc_bounds(self, i: int) -> tuple[int, int]:
        start = int(self.doc_offsets[i])
        end = int(self.doc_offsets[i + 1]) if i + 1 < self.n_docs else len(self)
        return start, end


def _tokenize_document(data: bytes) -> np.ndarray:
    toks = np.empty(len(data) + 2, dtype=np.uint16)
    toks[0] = BOS
    toks[1:-1] = np.frombuffer(data, dtype=np.uint8)
    toks[-1] = EOS
    return toks


def ingest_texts(named_texts: list[tuple[str, bytes]]) -> TokenizedCorpus:
    """Tokenize in-memory documents; one (name, bytes) pair per document."""
    if not named_texts:
        raise CorpusError("empty corpus: no documents")
    parts, offsets, manifest = [], [], []
    pos = 0
    for name, data in named_texts:
        toks = _tokenize_document(data)
        offsets.append(pos)
        pos += toks.shape[0]
        parts.append(toks)
        manifest.append((name, len(data), hashlib.sha256(data).hexdigest()))
    return TokenizedCorpus(
        tokens=np.concatenate(parts),
        doc_offsets=np.array(offsets, dtype=np.int64),
        manifest=manifest,
    )


def ingest(paths: list[str | Path]) -> TokenizedCorpus:
    """Tokenize files (one document each) into a byte-level id stream."""
    named = []
    for p in paths:
        p = Path(p)
        try:
            data = p.read_bytes()
        except OSError as exc:
            raise CorpusError(f"unreadable file {p}: {exc}") from exc
        named.append((str(p), data))
    return ingest_texts(named)


def split_corpus(corpus: TokenizedCorpus, holdout_fraction: float, seed: int):
    """Document-level train/held-out split; returns (train, heldout)."""
    if not 0.0 < holdout_fraction < 1.0:
        raise CorpusError(f"holdout fraction must be in (0, 1), got {holdout_fraction}")
    if corpus.n_docs < 2:
        raise CorpusError("need at least 2 documents to split by document")
    rng = np.random.default_rng(seed)
    order = rng.permutation(corpus.n_docs)
    n_hold = max(1, int(round(holdout_fraction * corpus.n_docs)))
    n_hold = min(n_hold, corpus.n_docs - 1)
    hold_ids = set(order[:n_hold].tolist())

    def gather(ids):
        parts, offsets, manifest = [], [], []
        pos = 0
        for i in sorted(ids):
            s, e = corpus.doc_bounds(i)
            offsets.append(pos)
            pos += e - s
            parts.append(corpus.tokens[s:e])
            manifest.append(corpus.manifest[i])
        return TokenizedCorpus(np.concatenate(parts), np.array(offsets, dtype=np.int64), manifest)

    train_ids = [i for i in range(corpus.n_docs) if i not in hold_ids]
    return gather(train_ids), gather(sorted(hold_ids))


class BatchStream:
    """Deterministic shuffled chunking of a token stream.

    The stream is cut into non-overlapping chunks of ``seq_len + 1`` tokens
    (inputs and shifted targets share a chunk).  Each epoch visits every full
    chunk exactly once in an order drawn from (seed, epoch); any tail shorter
    than one chunk is skipped.  ``batch(step)`` is pure in ``step``.
    """

    def __init__(self, corpus: TokenizedCorpus, batch_size: int, seq_len: int, seed: int):
        self.chunk_len = seq_len + 1
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.tokens = corpus.tokens
        self.n_chunks = len(corpus) // self.chunk_len
        if self.n_chunks < batch_size:
            raise CorpusError(
                f"corpus too small: {len(corpus)} tokens yields {self.n_chunks} "
                f"chunks < batch size {batch_size}"
            )
        self._perm_epoch = -1
        self._perm: np.ndarray | None = None

    def _epoch_perm(self, epoch: int) -> np.ndarray:
        if epoch != self._perm_epoch:
            rng = np.random.default_rng((self.seed, epoch))
            self._perm = rng.permutation(self.n_chunks)
            self._perm_epoch = epoch
        return self._perm

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """(inputs, targets) for 1-based training step ``step``."""
        if step < 1:
            raise ValueError(f"step must be >= 1, got {step}")
        first = (step - 1) * self.batch_size
        rows = np.empty((self.batch_size, self.chunk_len), dtype=np.int64)
        for j in range(self.batch_size):
            gidx = first + j
            epoch, pos = divmod(gidx, self.n_chunks)
            c = int(self._epoch_perm(epoch)[pos])
            rows[j] = self.tokens[c * self.chunk_len:(c + 1) * self.chunk_len]
        return rows[:, :-1], rows[:, 1:]


def batches(corpus: TokenizedCorpus, batch_size: int, seq_len: int, seed: int) -> BatchStream:
    return BatchStream(corpus, batch_size, seq_len, seed)


# ---------------------------------------------------------------------------
# Cache files

def save_corpus(corpus: TokenizedCorpus, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CACHE_MAGIC)
        f.write(struct.pack("<IQQQ", _CACHE_VERSION, VOCAB_SIZE, len(corpus), corpus.n_docs))
        f.write(corpus.doc_offsets.astype("<i8").tobytes())
        f.write(corpus.tokens.astype("<u2").tobytes())
    man = Path(str(path) + ".manifest")
    lines = [f"{name}\t{nbytes}\t{digest}" for name, nbytes, digest in corpus.manifest]
    man.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> TokenizedCorpus:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _CACHE_MAGIC:
        raise CorpusError(f"{path} is not a corpus cache")
    version, vocab, n_tokens, n_docs = struct.unpack_from("<IQQQ", raw, 8)
    if version != _CACHE_VERSION:
        raise CorpusError(f"corpus cache version {version} unsupported")
    off = 8 + struct.calcsize("<IQQQ")
    doc_offsets = np.frombuffer(raw, dtype="<i8", count=n_docs, offset=off).astype(np.int64)
    off += n_docs * 8
    tokens = np.frombuffer(raw, dtype="<u2", count=n_tokens, offset=off).astype(np.uint16)
    manifest = []
    man = Path(str(path) + ".manifest")
    if man.exists():
        for line in man.read_text(encoding="utf-8").splitlines():
            if line:
                name, nbytes, digest = line.split("\t")
                manifest.append((name, int(nbytes), digest))
    return TokenizedCorpus(tokens=tokens, doc_offsets=doc_offsets, manifest=manifest)


# ---------------------------------------------------------------------------
# Synthetic desk corpus

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _make_wordforms(rng: np.random.Generator, n_words: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        n_syll = int(rng.integers(1, 5))
        parts = []
        for _ in range(n_syll):
            parts.append(_CONSONANTS[int(rng.integers(len(_CONSONANTS)))])
            parts.append(_VOWELS[int(rng.integers(len(_VOWELS)))])
            if rng.random() < 0.3:
                parts.append(_CONSONANTS[int(rng.integers(len(_CONSONANTS)))])
        w = "".join(parts)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def synthesize_documents(
    n_docs: int,
    words_per_doc: int,
    seed: int,
    n_words: int = 6000,
    n_successors: int = 64,
    fact_rate: float = 0.15,
) -> list[str]:
    """Deterministic pseudo-text with Zipfian words, Markov transitions, and
    a corpus-wide table of consistent "fact" statements.

    The Markov prose gives models byte -> word composition and transition
    structure to learn; the facts (subject relation object sentences whose
    object is fixed per subject-relation pair, recurring across documents)
    give them knowledge worth memorizing, so capacity and forgetting both
    show up in held-out perplexity.  Fully reproducible from the seed.
    """
    rng = np.random.default_rng(seed)
    words = _make_wordforms(rng, n_words)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    unigram = 1.0 / (ranks + 2.7) ** 1.05
    unigram /= unigram.sum()
    uni_cdf = np.cumsum(unigram)

    succ_idx = np.empty((n_words, n_successors), dtype=np.int32)
    succ_cdf = np.empty((n_words, n_successors), dtype=np.float64)
    for i in range(n_words):
        succ_idx[i] = rng.choice(n_words, size=n_successors, replace=False, p=unigram)
        w = rng.random(n_successors) ** 2 + 1e-3
        succ_cdf[i] = np.cumsum(w / w.sum())

    # fact table: each (subject, relation) pair resolves to one fixed object
    n_entities = max(20, n_words // 5)
    n_relations = 20
    n_facts = max(50, n_words // 6)
    entity_pool = _make_wordforms(rng, n_entities + n_relations)
    entities = [w.capitalize() for w in entity_pool[:n_entities]]
    relations = entity_pool[n_entities:]
    fact_subj = rng.integers(0, n_entities, n_facts)
    fact_rel = rng.integers(0, n_relations, n_facts)
    fact_obj = rng.integers(0, n_entities, n_facts)
    fact_w = 1.0 / np.arange(2, n_facts + 2, dtype=np.float64)
    fact_cdf = np.cumsum(fact_w / fact_w.sum())

    docs = []
    state = int(rng.integers(n_words))
    for _ in range(n_docs):
        out: list[str] = []
        produced = 0
        while produced < words_per_doc:
            if rng.random() < fact_rate:
                k = int(np.searchsorted(fact_cdf, rng.random()))
                out.append(f"{entities[fact_subj[k]]} {relations[fact_rel[k]]} "
                           f"{entities[fact_obj[k]]}.")
                produced += 3
            else:
                sent_len = int(rng.integers(6, 15))
                sent = []
                for _ in range(sent_len):
                    if rng.random() < 0.85:
                        state = int(succ_idx[state][
                            np.searchsorted(succ_cdf[state], rng.random())])
                    else:
                        state = int(np.searchsorted(uni_cdf, rng.random()))
                    sent.append(words[state])
                sent[0] = sent[0].capitalize()
                out.append(" ".join(sent) + (".", ".", ".", "?")[int(rng.integers(4))])
                produced += sent_len
            if rng.random() < 0.2:
                out.append("\n\n")
            else:
                out.append(" ")
        docs.append("".join(out).rstrip() + "\n")
    return docs


def synthesize_corpus(n_docs: int, words_per_doc: int, seed: int, **kwargs) -> TokenizedCorpus:
    docs = synthesize_documents(n_docs, words_per_doc, seed, **kwargs)
    return ingest_texts([(f"synthetic-{seed}-{i:04d}", d.encode("utf-8")) for i, d in enumerate(docs)])
