"""Synthetic patterned corpora and synonym lexicons for desk-scale runs.

Sentences follow "<filler>* <trigger> <entity-word>+ <filler>*": the
trigger word correlates with the entity type (context signal), the
entity words are type-specific (surface signal), and entity lengths
cycle 1..3 so every BIOES class occurs.  The companion lexicon maps
words to same-type alternatives (seen in training) and spelling
variants (out of vocabulary), both of which preserve gold labels.
"""

from __future__ import annotations

import random

from .attack import SynonymLexicon
from .corpus import EntitySpan, Sentence

_PADS = tuple(f"pad{j}" for j in range(8))
_ENTITY_LETTERS = "abcdef"


def type_name(i: int) -> str:
    return f"type-{i:02d}"


def triggers_for(i: int) -> tuple[str, str]:
    return (f"cue{i}a", f"cue{i}b")


def entity_words_for(i: int) -> tuple[str, ...]:
    return tuple(f"ent{i}{c}" for c in _ENTITY_LETTERS)


def make_patterned_corpus(
    n_types: int = 10, sentences_per_type: int = 24, seed: int = 0
) -> list[Sentence]:
    """Duplicate-free corpus with one typed span per sentence."""
    rng = random.Random(seed)
    sentences: list[Sentence] = []
    seen: set[tuple[str, ...]] = set()
    for i in range(n_types):
        produced = 0
        attempts = 0
        while produced < sentences_per_type:
            attempts += 1
            if attempts > 1000 * sentences_per_type:
                raise RuntimeError(f"could not generate enough distinct sentences for type {i}")
            n_lead = rng.randint(0, 2)
            n_trail = rng.randint(0, 2)
            entity_len = 1 + produced % 3
            entity = rng.sample(entity_words_for(i), entity_len)
            tokens = (
                [rng.choice(_PADS) for _ in range(n_lead)]
                + [rng.choice(triggers_for(i))]
                + entity
                + [rng.choice(_PADS) for _ in range(n_trail)]
            )
            key = tuple(tokens)
            if key in seen:
                continue
            seen.add(key)
            span = EntitySpan(n_lead + 1, n_lead + entity_len, type_name(i))
            sentences.append(Sentence(key, (span,)))
            produced += 1
    return sentences


def make_synonym_lexicon(
    n_types: int = 10, include_seen: bool = True, include_unseen: bool = True
) -> SynonymLexicon:
    """Label-preserving substitution candidates for the patterned corpus."""
    if not (include_seen or include_unseen):
        raise ValueError("lexicon needs at least one candidate family")
    mapping: dict[str, list[str]] = {}
    for i in range(n_types):
        words = entity_words_for(i)
        for w_i, word in enumerate(words):
            candidates = []
            if include_seen:
                candidates.append(words[(w_i + 1) % len(words)])
            if include_unseen:
                candidates.append(f"{word}x")
            mapping[word] = candidates
        a, b = triggers_for(i)
        mapping[a] = [b]
        mapping[b] = [a]
    for j, pad in enumerate(_PADS):
        candidates = []
        if include_seen:
            candidates.append(_PADS[(j + 1) % len(_PADS)])
        if include_unseen:
            candidates.append(f"{pad}x")
        mapping[pad] = candidates
    return SynonymLexicon(mapping)
