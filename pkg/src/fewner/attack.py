"""Label-preserving synonym-substitution attacks on a frozen victim.

Word importance comes from mask-and-measure loss deltas; substitution
is greedy over the importance order, keeping the candidate that most
increases the victim's loss and stopping as soon as the predicted
entity-type set departs from gold or the budget runs out.  One-for-one
whole-word swaps keep gold span indices valid by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .corpus import Sentence
from .encoder import MASK_TOKEN
from .errors import ParseError
from .rng import derive_seed


class Victim(Protocol):
    """What the attacker needs from a model."""

    def loss(self, sentence: Sentence) -> float: ...

    def predict(self, sentence: Sentence) -> set[tuple[int, int, str]]: ...


class CandidateSource(Protocol):
    """Pluggable substitution-candidate provider (e.g. a masked-LM adapter)."""

    def candidates(self, tokens: Sequence[str], position: int) -> list[str]: ...


def _restore_case(original: str, candidate: str) -> str:
    if original.isupper() and len(original) > 1:
        return candidate.upper()
    if original[:1].isupper():
        return candidate.capitalize()
    return candidate


class SynonymLexicon:
    """Case-insensitive word-to-synonyms map with case restoration."""

    def __init__(self, mapping: dict[str, Sequence[str]]):
        self._map: dict[str, tuple[str, ...]] = {}
        for word, synonyms in mapping.items():
            key = word.casefold()
            cleaned = []
            for syn in synonyms:
                if not syn or any(c in syn for c in "\t\n\r ,"):
                    raise ValueError(f"invalid synonym {syn!r} for {word!r}")
                if syn.casefold() == key:
                    raise ValueError(f"synonym of {word!r} equals its key")
                cleaned.append(syn)
            if key in self._map:
                raise ValueError(f"duplicate lexicon key {word!r}")
            self._map[key] = tuple(cleaned)

    def __len__(self) -> int:
        return len(self._map)

    def candidates(self, tokens: Sequence[str], position: int) -> list[str]:
        word = tokens[position]
        return [_restore_case(word, c) for c in self._map.get(word.casefold(), ())]


def parse_lexicon(text: str) -> SynonymLexicon:
    """Parse ``word<TAB>syn1,syn2,...`` lines."""
    mapping: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 'word<TAB>syn1,syn2,...', got {line!r}")
        word, synonyms = parts
        if word.casefold() in mapping:
            raise ParseError(f"line {lineno}: duplicate key {word!r}")
        try:
            SynonymLexicon({word: synonyms.split(",")})
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        mapping[word.casefold()] = synonyms.split(",")
    return SynonymLexicon(mapping)


def serialize_lexicon(lexicon: SynonymLexicon) -> str:
    return "".join(f"{w}\t{','.join(s)}\n" for w, s in sorted(lexicon._map.items()))


@dataclass(frozen=True)
class AdversarialSentence:
    """Outcome of attacking one sentence.

    ``substitutions`` holds (position, old word, new word) in acceptance
    order; ``error`` records a per-sentence failure when batch attacks
    carry on past it.
    """

    original: Sentence
    perturbed: Sentence
    substitutions: tuple[tuple[int, str, str], ...]
    success: bool
    seed: int
    error: str | None = None


def rank_importance(victim: Victim, sentence: Sentence) -> list[tuple[int, float]]:
    """Positions with mask-and-measure scores, most damaging first
    (ties by ascending position)."""
    base = victim.loss(sentence)
    scored = []
    for i in range(len(sentence.tokens)):
        tokens = list(sentence.tokens)
        tokens[i] = MASK_TOKEN
        scored.append((i, victim.loss(sentence.with_tokens(tokens)) - base))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored


def attack_sentence(
    victim: Victim,
    sentence: Sentence,
    lexicon: CandidateSource,
    rho: float,
    seed: int,
) -> AdversarialSentence:
    """Greedy synonym-substitution attack under a ceil(rho * n) budget.

    The search itself is deterministic; the seed is recorded for
    provenance and available to stochastic candidate sources.
    """
    if not 0 <= rho <= 1:
        raise ValueError(f"budget fraction must lie in [0, 1], got {rho}")
    gold = sentence.span_tuples()
    if victim.predict(sentence) != gold:
        return AdversarialSentence(sentence, sentence, (), True, seed)
    budget = math.ceil(rho * len(sentence.tokens))
    if budget == 0:
        return AdversarialSentence(sentence, sentence, (), False, seed)

    current = sentence
    current_loss = victim.loss(sentence)
    substitutions: list[tuple[int, str, str]] = []
    success = False
    for position, _ in rank_importance(victim, sentence):
        if len(substitutions) >= budget:
            break
        best_word = None
        best_loss = current_loss
        for candidate in lexicon.candidates(current.tokens, position):
            tokens = list(current.tokens)
            tokens[position] = candidate
            trial_loss = victim.loss(current.with_tokens(tokens))
            if trial_loss > best_loss:
                best_word, best_loss = candidate, trial_loss
        if best_word is None:
            continue
        old = current.tokens[position]
        tokens = list(current.tokens)
        tokens[position] = best_word
        current = current.with_tokens(tokens)
        current_loss = best_loss
        substitutions.append((position, old, best_word))
        if victim.predict(current) != gold:
            success = True
            break
    return AdversarialSentence(sentence, current, tuple(substitutions), success, seed)


def attack_corpus(
    victim: Victim,
    sentences: Sequence[Sentence],
    lexicon: CandidateSource,
    rho: float,
    seed: int,
) -> list[AdversarialSentence]:
    """Attack every sentence with per-sentence derived seeds; per-sentence
    failures are recorded on the result, never raised."""
    out = []
    for i, sentence in enumerate(sentences):
        child = derive_seed(seed, "sentence", i)
        try:
            out.append(attack_sentence(victim, sentence, lexicon, rho, child))
        except Exception as exc:  # record and continue, per the batch contract
            out.append(
                AdversarialSentence(
                    sentence, sentence, (), False, child, error=f"{type(exc).__name__}: {exc}"
                )
            )
    return out


def attack_to_dict(record: AdversarialSentence) -> dict:
    obj = {
        "original_tokens": list(record.original.tokens),
        "perturbed_tokens": list(record.perturbed.tokens),
        "substitutions": [[p, old, new] for p, old, new in record.substitutions],
        "success": record.success,
        "seed": record.seed,
    }
    if record.error is not None:
        obj["error"] = record.error
    return obj


def write_attacks(path, records: Iterable[AdversarialSentence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(attack_to_dict(record), sort_keys=True) + "\n")


def read_attacks(path) -> list[dict]:
    """Attack records as parsed JSON objects (the file format does not
    carry span annotations, so full AdversarialSentence values are not
    reconstructable)."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
