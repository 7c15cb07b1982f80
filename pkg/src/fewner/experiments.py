"""Desk-scale experiment drivers shared by the scripts and the test suite.

Two reusable studies over the synthetic patterned corpora:

* a regularizer ablation that trains one model per named weight subset
  and scores each on synonym-attacked held-out queries, and
* a bank-diversity probe that counts how many components each boundary
  class actually spreads its assignments over.

Both are deterministic given their seed lists.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

from .attack import CandidateSource, attack_corpus
from .corpus import Episode, Sentence, sample_episode
from .encoder import Vocabulary
from .meta import (
    ModelVictim,
    TrainConfig,
    component_usage,
    evaluate,
    train_span_stage,
    train_typing_stage,
)
from .rng import derive_seed
from .span_detect import SpanModel

# named subsets of (assign, diverse, facilitate, filter) weights; a False
# entry zeroes that weight while True keeps the configured value
ABLATIONS: dict[str, tuple[bool, bool, bool, bool]] = {
    "base": (False, False, False, False),
    "+assignment": (True, False, False, False),
    "+components": (True, True, False, False),
    "+facilitating": (False, False, True, False),
    "+filter": (False, False, False, True),
    "+purify": (False, False, True, True),
    "full": (True, True, True, True),
}


def ablation_config(cfg: TrainConfig, name: str) -> TrainConfig:
    """``cfg`` with only the named subset of regularizer weights kept."""
    keep_assign, keep_diverse, keep_facilitate, keep_filter = ABLATIONS[name]
    return replace(
        cfg,
        gamma_assign=cfg.gamma_assign if keep_assign else 0.0,
        gamma_diverse=cfg.gamma_diverse if keep_diverse else 0.0,
        gamma_facilitate=cfg.gamma_facilitate if keep_facilitate else 0.0,
        gamma_filter=cfg.gamma_filter if keep_filter else 0.0,
    )


def train_eval_split(
    corpus: Sequence[Sentence], n_types: int, eval_per_type: int
) -> tuple[list[Sentence], list[Sentence]]:
    """Split a type-major patterned corpus into disjoint train/eval parts,
    holding out the last ``eval_per_type`` sentences of every type block."""
    per_type, remainder = divmod(len(corpus), n_types)
    if remainder or not 0 < eval_per_type < per_type:
        raise ValueError(
            f"cannot hold out {eval_per_type} of {len(corpus)} sentences over {n_types} types"
        )
    train: list[Sentence] = []
    heldout: list[Sentence] = []
    for i in range(n_types):
        block = corpus[i * per_type : (i + 1) * per_type]
        train += block[: per_type - eval_per_type]
        heldout += block[per_type - eval_per_type :]
    return train, heldout


def attack_queries(
    span_model, typing_model, episodes: Sequence[Episode],
    lexicon: CandidateSource, cfg: TrainConfig, seed: int,
) -> list[Episode]:
    """Episodes with every query sentence attacked against the
    pre-finetuning victim; support sets are left clean."""
    attacked = []
    for e_i, episode in enumerate(episodes):
        victim = ModelVictim(span_model, typing_model, episode.support, cfg)
        records = attack_corpus(
            victim, episode.query, lexicon, cfg.rho, derive_seed(seed, "query", e_i)
        )
        attacked.append(
            Episode(
                support=episode.support,
                query=tuple(r.perturbed for r in records),
                types=episode.types,
                seed=episode.seed,
            )
        )
    return attacked


def attacked_query_f1(
    span_model, typing_model, episodes: Sequence[Episode],
    lexicon: CandidateSource, cfg: TrainConfig, seed: int,
) -> float:
    """Mean per-episode F1 on query sets attacked at ``cfg.rho``."""
    attacked = attack_queries(span_model, typing_model, episodes, lexicon, cfg, seed)
    report = evaluate(attacked, span_model, typing_model, cfg, scenario="attacked")
    per_episode = report.scenarios["attacked"].per_episode
    return sum(e["f1"] for e in per_episode) / len(per_episode)


def run_ablation(
    train: Sequence[Sentence],
    heldout: Sequence[Sentence],
    lexicon: CandidateSource,
    cfg: TrainConfig,
    seeds: Sequence[int],
    n_train_episodes: int = 150,
    n_eval_episodes: int = 20,
    n_way: int = 5,
    k_shot: int = 1,
    k_query: int = 2,
    names: Sequence[str] = tuple(ABLATIONS),
) -> dict[str, list[float]]:
    """Attacked held-out F1 per ablation per seed.

    Within a seed every ablation trains on the same episode draw and is
    scored on the same held-out episodes, so the comparisons are paired;
    the attacks themselves are re-run per ablation because each model is
    its own victim.
    """
    vocab = Vocabulary.from_sentences(train)
    results: dict[str, list[float]] = {name: [] for name in names}
    for seed in seeds:
        train_eps = [
            sample_episode(train, n_way, k_shot, k_query, derive_seed(seed, "ablation-train", i))
            for i in range(n_train_episodes)
        ]
        eval_eps = [
            sample_episode(heldout, n_way, k_shot, k_query, derive_seed(seed, "ablation-eval", j))
            for j in range(n_eval_episodes)
        ]
        for name in names:
            variant = replace(ablation_config(cfg, name), seed=seed)
            span_model, _ = train_span_stage(train_eps, variant, vocab=vocab)
            typing_model, _ = train_typing_stage(train_eps, variant, span_model=span_model)
            results[name].append(
                attacked_query_f1(
                    span_model, typing_model, eval_eps, lexicon, variant,
                    derive_seed(seed, "ablation-attack", name),
                )
            )
    return results


def mean_scores(results: dict[str, list[float]]) -> dict[str, float]:
    return {name: sum(scores) / len(scores) for name, scores in results.items()}


def ablation_comparisons(means: dict[str, float]) -> list[tuple[str, bool]]:
    """The six directional claims checked on seed-averaged scores."""
    return [
        ("full >= base", means["full"] >= means["base"]),
        ("+assignment >= base", means["+assignment"] >= means["base"]),
        ("+facilitating >= base", means["+facilitating"] >= means["base"]),
        ("+filter >= base", means["+filter"] >= means["base"]),
        ("+components > +assignment", means["+components"] > means["+assignment"]),
        (
            "+purify > both halves",
            means["+purify"] > means["+facilitating"] and means["+purify"] > means["+filter"],
        ),
    ]


def bank_spread(
    span_model: SpanModel, sentences: Sequence[Sentence], threshold: float = 0.05
) -> dict[str, int]:
    """Components per populated boundary class holding at least
    ``threshold`` of that class's nearest-component assignments."""
    spread: dict[str, int] = {}
    for boundary, histogram in component_usage(span_model, sentences).items():
        total = sum(histogram.values())
        if total:
            spread[boundary.name] = sum(1 for n in histogram.values() if n / total >= threshold)
    return spread


def run_diversity(
    train: Sequence[Sentence],
    cfg: TrainConfig,
    seeds: Sequence[int],
    n_train_episodes: int = 80,
    n_way: int = 5,
    k_shot: int = 1,
    k_query: int = 2,
) -> list[dict[str, dict[str, int]]]:
    """Per-seed bank spread of a diversity-on versus diversity-off run.

    Each entry maps ``"on"``/``"off"`` to the per-class spread counts of
    the span stage trained with the configured ``gamma_diverse`` versus
    zero, measured on the training sentences.
    """
    vocab = Vocabulary.from_sentences(train)
    out = []
    for seed in seeds:
        episodes = [
            sample_episode(train, n_way, k_shot, k_query, derive_seed(seed, "diversity", i))
            for i in range(n_train_episodes)
        ]
        entry = {}
        for tag, gamma in (("on", cfg.gamma_diverse), ("off", 0.0)):
            variant = replace(cfg, gamma_diverse=gamma, seed=seed)
            model, _ = train_span_stage(episodes, variant, vocab=vocab)
            entry[tag] = bank_spread(model, train)
        out.append(entry)
    return out
