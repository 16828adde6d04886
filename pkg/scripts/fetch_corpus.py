#!/usr/bin/env python3
"""Stub for fetching a real public-domain text bundle as the training corpus.

The engine only needs plain text files (one document each); any ~50-200 MB
public-domain bundle works.  This stub documents the expected flow and
verifies content hashes against a manifest, but ships no URLs: pick your own
mirror, fill in MANIFEST, and run

    python scripts/fetch_corpus.py --dest corpus_txt
    prunelab ingest --output corpus.bin corpus_txt/*.txt

Each MANIFEST entry is (filename, sha256).  Files already present and
matching their hash are kept; anything else is an error so a corrupted or
swapped corpus can't silently change your runs.
"""

import argparse
import hashlib
import sys
from pathlib import Path

# Fill in: (filename, sha256 of the file's bytes)
MANIFEST: list[tuple[str, str]] = []


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dest", required=True, help="directory holding the text files")
    args = ap.parse_args()
    dest = Path(args.dest)

    if not MANIFEST:
        print("MANIFEST is empty: add (filename, sha256) entries for your "
              "corpus bundle, place the files in --dest, and re-run.",
              file=sys.stderr)
        return 2

    ok = True
    for name, want in MANIFEST:
        path = dest / name
        if not path.exists():
            print(f"missing: {path}", file=sys.stderr)
            ok = False
            continue
        got = hashlib.sha256(path.read_bytes()).hexdigest()
        if got != want:
            print(f"hash mismatch: {path}\n  expected {want}\n  got      {got}",
                  file=sys.stderr)
            ok = False
    if ok:
        print(f"verified {len(MANIFEST)} files in {dest}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
