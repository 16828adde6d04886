#!/usr/bin/env python3
"""Build the deterministic synthetic corpus as individual text files.

Writing files (rather than ingesting directly) keeps the normal
ingest-with-manifest path in the loop:

    python scripts/make_synthetic_corpus.py --out corpus_txt --docs 250
    prunelab ingest --output corpus.bin corpus_txt/*.txt
"""

import argparse
from pathlib import Path

from prunelab.corpus import synthesize_documents


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="directory for the text files")
    ap.add_argument("--docs", type=int, default=250)
    ap.add_argument("--words-per-doc", type=int, default=7000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    docs = synthesize_documents(args.docs, args.words_per_doc, args.seed)
    for i, doc in enumerate(docs):
        (out / f"doc{i:04d}.txt").write_text(doc, encoding="utf-8")
    total = sum(len(d.encode()) for d in docs)
    print(f"wrote {len(docs)} documents, {total / 1e6:.1f} MB, to {out}")


if __name__ == "__main__":
    main()
