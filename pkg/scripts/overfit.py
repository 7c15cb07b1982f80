#!/usr/bin/env python3
"""Overfit check: meta-train both stages on episodes from a synthetic
patterned corpus and score the same training episodes.  With the default
settings the run finishes in about half a minute on one CPU core and
reaches span F1 and gold-span typing accuracy above 0.95."""

from __future__ import annotations

import argparse
import time

import torch

from fewner.corpus import sample_episode
from fewner.meta import TrainConfig, evaluate, train_span_stage, train_typing_stage
from fewner.rng import derive_seed
from fewner.synth import make_patterned_corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-types", type=int, default=10)
    parser.add_argument("--sentences-per-type", type=int, default=24)
    parser.add_argument("--corpus-seed", type=int, default=0)
    parser.add_argument("--episodes", type=int, default=200)
    parser.add_argument("--n-way", type=int, default=5)
    parser.add_argument("--k-shot", type=int, default=1)
    parser.add_argument("--k-query", type=int, default=4)
    parser.add_argument("--width", type=int, default=32)
    parser.add_argument("--blocks", type=int, default=2)
    parser.add_argument("--lr-span", type=float, default=5e-3)
    parser.add_argument("--lr-type", type=float, default=3e-3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)

    cfg = TrainConfig(
        width=args.width, blocks=args.blocks, heads=2, n_components=15, bottleneck=8,
        batch_size=16, dropout=0.0, inner_steps=2, inner_lr=0.05,
        lr_span=args.lr_span, lr_type=args.lr_type, max_len=32, seed=args.seed,
    )
    corpus = make_patterned_corpus(args.n_types, args.sentences_per_type, args.corpus_seed)
    episodes = [
        sample_episode(corpus, args.n_way, args.k_shot, args.k_query,
                       derive_seed(cfg.seed, "episode", i))
        for i in range(args.episodes)
    ]

    start = time.time()
    span_model, span_history = train_span_stage(episodes, cfg)
    typing_model, typing_history = train_typing_stage(episodes, cfg, span_model=span_model)
    metrics = evaluate(episodes, span_model, typing_model, cfg).scenarios["clean"]
    elapsed = time.time() - start

    print(f"span stage:   {len(span_history)} outer steps, final loss {span_history[-1]['total']:.4f}")
    print(f"typing stage: {len(typing_history)} outer steps, final loss {typing_history[-1]['total']:.4f}")
    print(f"span F1 {metrics.span_f1:.4f}  typed F1 {metrics.f1:.4f}  "
          f"gold-span typing accuracy {metrics.typing_accuracy_gold:.4f}")
    print(f"elapsed {elapsed:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
