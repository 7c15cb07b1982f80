#!/usr/bin/env python3
"""Bank-diversity probe: trains the span stage with the diversity weight
on versus off across several seeds and reports how many components each
boundary class spreads its assignments over (at the 5% usage floor)."""

from __future__ import annotations

import argparse
import time

import torch

from fewner.experiments import run_diversity, train_eval_split
from fewner.meta import TrainConfig
from fewner.synth import make_patterned_corpus


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-types", type=int, default=10)
    parser.add_argument("--sentences-per-type", type=int, default=30)
    parser.add_argument("--heldout-per-type", type=int, default=6)
    parser.add_argument("--corpus-seed", type=int, default=7)
    parser.add_argument("--train-episodes", type=int, default=300)
    parser.add_argument("--seeds", type=int, default=10, help="number of seeds (0..n-1)")
    parser.add_argument("--tau", type=float, default=0.175)
    parser.add_argument("--gamma-assign", type=float, default=0.1)
    parser.add_argument("--gamma-diverse", type=float, default=0.1)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)
    torch.set_num_threads(args.threads)

    corpus = make_patterned_corpus(args.n_types, args.sentences_per_type, args.corpus_seed)
    train, _ = train_eval_split(corpus, args.n_types, args.heldout_per_type)
    cfg = TrainConfig(
        width=16, blocks=1, heads=2, n_components=15, bottleneck=8,
        batch_size=16, dropout=0.0, inner_steps=2, inner_lr=0.05,
        lr_span=5e-3, lr_type=3e-3, max_len=32, tau=args.tau,
        gamma_assign=args.gamma_assign, gamma_diverse=args.gamma_diverse,
    )

    start = time.time()
    entries = run_diversity(train, cfg, seeds=range(args.seeds),
                            n_train_episodes=args.train_episodes)
    hits = 0
    for seed, entry in enumerate(entries):
        on, off = entry["on"], entry["off"]
        on_ok = all(v >= 2 for v in on.values())
        off_collapsed = sum(1 for v in off.values() if v == 1)
        ok = on_ok and 2 * off_collapsed >= len(off)
        hits += ok
        print(f"seed {seed}: on={on} off={off} "
              f"on_all>=2:{on_ok} off_single:{off_collapsed}/{len(off)} {'OK' if ok else '--'}")
    print(f"{hits}/{len(entries)} seeds show the direction ({time.time() - start:.0f}s)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
