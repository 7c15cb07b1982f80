#!/usr/bin/env python3
"""Write a synthetic patterned corpus, a train/heldout split, and the
matching synonym lexicon as plain files for the fewner CLI."""

from __future__ import annotations

import argparse
from pathlib import Path

from fewner.attack import serialize_lexicon
from fewner.corpus import serialize_corpus
from fewner.experiments import train_eval_split
from fewner.synth import make_patterned_corpus, make_synonym_lexicon


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True, help="directory for the generated files")
    parser.add_argument("--n-types", type=int, default=10)
    parser.add_argument("--sentences-per-type", type=int, default=30)
    parser.add_argument("--heldout-per-type", type=int, default=6)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--no-unseen", action="store_true",
                        help="lexicon with in-vocabulary synonyms only")
    args = parser.parse_args(argv)

    corpus = make_patterned_corpus(args.n_types, args.sentences_per_type, args.seed)
    train, heldout = train_eval_split(corpus, args.n_types, args.heldout_per_type)
    lexicon = make_synonym_lexicon(args.n_types, include_unseen=not args.no_unseen)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in (
        ("corpus.tsv", serialize_corpus(corpus)),
        ("train.tsv", serialize_corpus(train)),
        ("heldout.tsv", serialize_corpus(heldout)),
        ("lexicon.tsv", serialize_lexicon(lexicon)),
    ):
        path = out / name
        path.write_text(text, encoding="utf-8")
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
