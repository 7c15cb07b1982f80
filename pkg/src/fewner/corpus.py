"""Corpus ingestion, the BIOES boundary codec, and episodic sampling.

Corpus files are UTF-8 text with one ``token<TAB>label`` pair per line,
LF endings, and a blank line after each sentence.  Labels are either
``O`` or an entity-type identifier; contiguous same-type runs form one
span (Few-NERD style, no B-/I- prefixes).  Span ends are inclusive.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

from .errors import ParseError, SamplingError

OUTSIDE_LABEL = "O"


class Boundary(IntEnum):
    """BIOES boundary classes; values index component-bank blocks."""

    B = 0
    I = 1
    O = 2
    E = 3
    S = 4


N_BOUNDARY = len(Boundary)


def _check_word(word: str, what: str) -> None:
    if not word or any(c in word for c in "\t\n\r"):
        raise ValueError(f"invalid {what}: {word!r}")


@dataclass(frozen=True, order=True)
class EntitySpan:
    """A typed entity span with inclusive token indices."""

    start: int
    end: int
    type: str

    def __post_init__(self) -> None:
        if not (0 <= self.start <= self.end):
            raise ValueError(f"bad span bounds ({self.start}, {self.end})")
        _check_word(self.type, "entity type")
        if self.type == OUTSIDE_LABEL:
            raise ValueError(f"entity type may not be {OUTSIDE_LABEL!r}")

    def positions(self) -> range:
        return range(self.start, self.end + 1)


@dataclass(frozen=True)
class Sentence:
    """Tokens plus non-overlapping typed spans; spans kept sorted."""

    tokens: tuple[str, ...]
    spans: tuple[EntitySpan, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "spans", tuple(sorted(self.spans)))
        if not self.tokens:
            raise ValueError("sentence must contain at least one token")
        for tok in self.tokens:
            _check_word(tok, "token")
        prev_end = -1
        for sp in self.spans:
            if sp.end >= len(self.tokens):
                raise ValueError(f"span {sp} exceeds sentence length {len(self.tokens)}")
            if sp.start <= prev_end:
                raise ValueError(f"span {sp} overlaps a preceding span")
            prev_end = sp.end

    @property
    def boundary_labels(self) -> tuple[Boundary, ...]:
        return tuple(spans_to_bioes(self.spans, len(self.tokens)))

    def with_tokens(self, tokens: Sequence[str]) -> "Sentence":
        """Same spans, new tokens; lengths must match (word substitution)."""
        if len(tokens) != len(self.tokens):
            raise ValueError("token substitution must preserve sentence length")
        return Sentence(tuple(tokens), self.spans)

    def span_tuples(self) -> set[tuple[int, int, str]]:
        return {(sp.start, sp.end, sp.type) for sp in self.spans}


def spans_to_bioes(spans: Iterable[EntitySpan | tuple[int, int]], n: int) -> list[Boundary]:
    """Encode non-overlapping spans over ``n`` tokens as BIOES labels."""
    labels = [Boundary.O] * n
    occupied = [False] * n
    for sp in spans:
        start, end = (sp.start, sp.end) if isinstance(sp, EntitySpan) else (sp[0], sp[1])
        if not (0 <= start <= end < n):
            raise ValueError(f"span ({start}, {end}) out of range for length {n}")
        if any(occupied[start : end + 1]):
            raise ValueError(f"span ({start}, {end}) overlaps another span")
        for i in range(start, end + 1):
            occupied[i] = True
        if start == end:
            labels[start] = Boundary.S
        else:
            labels[start] = Boundary.B
            labels[end] = Boundary.E
            for i in range(start + 1, end):
                labels[i] = Boundary.I
    return labels


def _decode_run(labels: Sequence[Boundary], start: int, stop: int) -> list[tuple[int, int]]:
    # Greedy parse of one maximal non-O run as a sequence of S / B I* E
    # units; if any part fails to parse, the whole run is one span.
    out: list[tuple[int, int]] = []
    i = start
    while i < stop:
        if labels[i] == Boundary.S:
            out.append((i, i))
            i += 1
        elif labels[i] == Boundary.B:
            j = i + 1
            while j < stop and labels[j] == Boundary.I:
                j += 1
            if j < stop and labels[j] == Boundary.E:
                out.append((i, j))
                i = j + 1
            else:
                return [(start, stop - 1)]
        else:
            return [(start, stop - 1)]
    return out


def bioes_to_spans(labels: Sequence[Boundary | int]) -> list[tuple[int, int]]:
    """Decode a BIOES sequence into (start, end) pairs, repairing invalid
    fragments.

    Total on arbitrary label sequences: any maximal run of non-O labels
    that cannot be fully decomposed into S / B I* E units becomes a
    single span covering the run.
    """
    labs = [Boundary(l) for l in labels]
    spans: list[tuple[int, int]] = []
    i = 0
    n = len(labs)
    while i < n:
        if labs[i] == Boundary.O:
            i += 1
            continue
        j = i
        while j < n and labs[j] != Boundary.O:
            j += 1
        spans.extend(_decode_run(labs, i, j))
        i = j
    return spans


def parse_corpus(text: str) -> list[Sentence]:
    """Parse ``token<TAB>label`` lines into sentences.

    Malformed lines raise ParseError with the 1-based line number; an
    empty document yields an empty corpus.
    """
    sentences: list[Sentence] = []
    tokens: list[str] = []
    labels: list[str] = []

    def flush(lineno: int) -> None:
        if not tokens:
            return
        try:
            sentences.append(Sentence(tuple(tokens), tuple(_runs_to_spans(labels))))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        tokens.clear()
        labels.clear()

    lineno = 0
    for lineno, line in enumerate(text.split("\n"), start=1):
        if line == "":
            flush(lineno)
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"line {lineno}: expected 'token<TAB>label', got {line!r}")
        token, label = parts
        if not token or not label:
            raise ParseError(f"line {lineno}: empty token or label")
        tokens.append(token)
        labels.append(label)
    flush(lineno + 1)
    return sentences


def _runs_to_spans(labels: Sequence[str]) -> list[EntitySpan]:
    spans: list[EntitySpan] = []
    i = 0
    n = len(labels)
    while i < n:
        if labels[i] == OUTSIDE_LABEL:
            i += 1
            continue
        j = i
        while j + 1 < n and labels[j + 1] == labels[i]:
            j += 1
        spans.append(EntitySpan(i, j, labels[i]))
        i = j + 1
    return spans


def serialize_corpus(sentences: Iterable[Sentence]) -> str:
    """Inverse of parse_corpus; canonical output round-trips byte-for-byte."""
    chunks: list[str] = []
    for sent in sentences:
        labels = [OUTSIDE_LABEL] * len(sent.tokens)
        for sp in sent.spans:
            for i in sp.positions():
                labels[i] = sp.type
        for tok, lab in zip(sent.tokens, labels):
            chunks.append(f"{tok}\t{lab}\n")
        chunks.append("\n")
    return "".join(chunks)


def truncate_sentence(sentence: Sentence, max_len: int) -> Sentence:
    """Clip to ``max_len`` tokens, dropping spans that cross the cut."""
    if len(sentence.tokens) <= max_len:
        return sentence
    spans = tuple(sp for sp in sentence.spans if sp.end < max_len)
    return Sentence(sentence.tokens[:max_len], spans)


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task: support/query sentences and the type set."""

    support: tuple[Sentence, ...]
    query: tuple[Sentence, ...]
    types: frozenset[str]
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        object.__setattr__(self, "types", frozenset(self.types))

    @property
    def sorted_types(self) -> tuple[str, ...]:
        return tuple(sorted(self.types))


def validate_episode(episode: Episode, n_way: int | None = None, k_shot: int | None = None) -> None:
    """Audit the Episode invariants; raises SamplingError on violation.

    The support/query disjointness check compares sentence values and is
    exact only for duplicate-free corpora (the samplers guarantee
    index-level disjointness regardless).
    """
    if n_way is not None and len(episode.types) != n_way:
        raise SamplingError(f"episode has {len(episode.types)} types, expected {n_way}")
    for where, sentences in (("support", episode.support), ("query", episode.query)):
        for sent in sentences:
            for sp in sent.spans:
                if sp.type not in episode.types:
                    raise SamplingError(f"{where} span type {sp.type!r} outside episode types")
    if k_shot is not None:
        counts = Counter(sp.type for s in episode.support for sp in s.spans)
        for t in episode.sorted_types:
            if counts[t] < k_shot:
                raise SamplingError(
                    f"entity type {t!r}: {counts[t]} support instances, need {k_shot}"
                )
    overlap = set(episode.support) & set(episode.query)
    if overlap:
        raise SamplingError(f"support and query share {len(overlap)} sentence(s)")


def _greedy_fill(
    corpus: Sequence[Sentence],
    order: Iterable[int],
    types: Sequence[str],
    k: int,
    where: str,
) -> list[int]:
    # Few-NERD-style greedy pass: accept a sentence when it still helps
    # some type below k and pushes no type past 2k.
    counts = {t: 0 for t in types}
    chosen: list[int] = []
    for idx in order:
        if all(c >= k for c in counts.values()):
            break
        inc = Counter(sp.type for sp in corpus[idx].spans)
        if not any(counts[t] < k for t in inc):
            continue
        if any(counts[t] + inc[t] > 2 * k for t in inc):
            continue
        chosen.append(idx)
        for t, c in inc.items():
            counts[t] += c
    for t in sorted(types):
        if counts[t] < k:
            raise SamplingError(
                f"entity type {t!r}: only {counts[t]} {where} instances reachable, need {k}"
            )
    return chosen


def sample_episode(
    corpus: Sequence[Sentence], n_way: int, k_shot: int, k_query: int, seed: int
) -> Episode:
    """Greedily sample one N-way K-shot episode; pure in (corpus, args, seed).

    Per-type support counts land in [k_shot, 2*k_shot]; sentences whose
    span types fall outside the sampled types are excluded, as are
    sentences without entities.
    """
    if n_way < 1 or k_shot < 1 or k_query < 1:
        raise SamplingError("n_way, k_shot, and k_query must be positive")
    rng = random.Random(seed)
    instance_counts = Counter(sp.type for s in corpus for sp in s.spans)
    eligible = sorted(t for t, c in instance_counts.items() if c >= k_shot + k_query)
    if len(eligible) < n_way:
        short = {
            t: c for t, c in sorted(instance_counts.items()) if c < k_shot + k_query
        }
        raise SamplingError(
            f"need {n_way} entity types with at least {k_shot + k_query} instances, "
            f"corpus has {len(eligible)}; insufficient: {short}"
        )
    types = sorted(rng.sample(eligible, n_way))
    chosen = set(types)
    pool = [
        i
        for i, s in enumerate(corpus)
        if s.spans and all(sp.type in chosen for sp in s.spans)
    ]
    rng.shuffle(pool)
    support_idx = _greedy_fill(corpus, pool, types, k_shot, "support")
    taken = set(support_idx)
    rest = [i for i in pool if i not in taken]
    query_idx = _greedy_fill(corpus, rest, types, k_query, "query")
    return Episode(
        support=tuple(corpus[i] for i in support_idx),
        query=tuple(corpus[i] for i in query_idx),
        types=frozenset(types),
        seed=seed,
    )


def sentence_to_dict(sentence: Sentence) -> dict:
    return {
        "tokens": list(sentence.tokens),
        "spans": [[sp.start, sp.end, sp.type] for sp in sentence.spans],
    }


def sentence_from_dict(obj: dict) -> Sentence:
    spans = tuple(EntitySpan(int(s), int(e), str(t)) for s, e, t in obj.get("spans", []))
    return Sentence(tuple(str(t) for t in obj["tokens"]), spans)


def episode_to_dict(episode: Episode) -> dict:
    return {
        "support": [sentence_to_dict(s) for s in episode.support],
        "query": [sentence_to_dict(s) for s in episode.query],
        "types": sorted(episode.types),
        "seed": episode.seed,
    }


def episode_from_dict(obj: dict) -> Episode:
    return Episode(
        support=tuple(sentence_from_dict(s) for s in obj["support"]),
        query=tuple(sentence_from_dict(s) for s in obj["query"]),
        types=frozenset(str(t) for t in obj["types"]),
        seed=int(obj.get("seed", 0)),
    )


def write_episodes(path, episodes: Iterable[Episode]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_to_dict(ep), sort_keys=True) + "\n")


def read_episodes(path) -> list[Episode]:
    episodes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                episodes.append(episode_from_dict(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return episodes
