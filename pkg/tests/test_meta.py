from __future__ import annotations

import copy
import json
import math
import random
from dataclasses import asdict

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fewner.corpus import Boundary, EntitySpan, Episode, Sentence, sample_episode
from fewner.encoder import TokenEncoder, Vocabulary
from fewner.errors import ConfigError, ParseError
from fewner.meta import (
    EvalReport,
    ModelVictim,
    ScenarioMetrics,
    TrainConfig,
    attack_episode,
    build_span_model,
    build_typing_model,
    component_usage,
    config_to_text,
    evaluate,
    finetune_on_support,
    kv_to_dataclass,
    load_stage1,
    load_stage2,
    micro_f1,
    parse_kv,
    save_stage1,
    save_stage2,
    span_episode_terms,
    train_span_stage,
    train_typing_stage,
    typing_episode_terms,
)
from fewner.span_detect import ComponentBank
from fewner.synth import make_patterned_corpus, make_synonym_lexicon


def tiny_cfg(**over) -> TrainConfig:
    base = dict(
        width=16, heads=2, blocks=1, n_components=3, bottleneck=4,
        batch_size=8, dropout=0.0, inner_steps=2, inner_lr=0.05,
        lr_span=5e-3, lr_type=5e-3, max_len=32, seed=0,
    )
    base.update(over)
    return TrainConfig(**base)


def small_corpus():
    return make_patterned_corpus(n_types=3, sentences_per_type=8, seed=0)


def small_episodes(n: int, cfg=None):
    corpus = small_corpus()
    return [sample_episode(corpus, n_way=3, k_shot=1, k_query=2, seed=s) for s in range(n)]


def params_of(model) -> list[torch.Tensor]:
    return [p.detach().clone() for p in model.parameters()]


def assert_params_equal(model, snapshot) -> None:
    current = list(model.parameters())
    assert len(current) == len(snapshot)
    for p, q in zip(current, snapshot):
        assert torch.equal(p, q)


def params_differ(model, snapshot) -> bool:
    return any(not torch.equal(p, q) for p, q in zip(model.parameters(), snapshot))


# ---------------------------------------------------------------- TrainConfig


def test_config_defaults_are_method_settings():
    cfg = TrainConfig()
    assert cfg.tau == 0.025
    assert cfg.margin == 0.01
    assert cfg.n_components == 15
    assert (cfg.gamma_assign, cfg.gamma_diverse) == (0.1, 0.1)
    assert (cfg.gamma_facilitate, cfg.gamma_filter) == (1e-3, 1e-5)
    assert cfg.batch_size == 64
    assert cfg.dropout == 0.2
    assert cfg.max_len == 128
    assert (cfg.lr_span, cfg.lr_type) == (3e-5, 1e-4)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"lr_span": -1.0},
        {"lr_type": -1e-9},
        {"inner_lr": -0.1},
        {"inner_steps": -1},
        {"batch_size": 0},
        {"rho": 1.5},
        {"rho": -0.1},
        {"tau": 0.0},
        {"alpha": -0.2},
        {"gamma_filter": -1e-5},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_config_text_round_trip():
    cfg = tiny_cfg(tau=0.5, distance="cosine")
    assert kv_to_dataclass(config_to_text(cfg), TrainConfig) == cfg


def test_parse_kv_strips_comments_and_blanks():
    text = "tau = 0.5  # temperature\n\n# a full-line comment\nwidth=24\n"
    assert parse_kv(text) == {"tau": "0.5", "width": "24"}


def test_parse_kv_duplicate_key():
    with pytest.raises(ParseError, match="duplicate"):
        parse_kv("tau = 0.5\ntau = 0.6\n")


def test_parse_kv_malformed_line():
    with pytest.raises(ParseError, match="line 2"):
        parse_kv("tau = 0.5\nnot a pair\n")


def test_kv_to_dataclass_unknown_key():
    with pytest.raises(ConfigError, match="unknown"):
        kv_to_dataclass("taw = 0.5\n", TrainConfig)


def test_kv_to_dataclass_bad_value():
    with pytest.raises(ConfigError, match="batch_size"):
        kv_to_dataclass("batch_size = many\n", TrainConfig)


def test_kv_to_dataclass_base_override():
    base = tiny_cfg(tau=0.5)
    out = kv_to_dataclass("tau = 0.9\n", TrainConfig, base=base)
    assert out.tau == 0.9
    assert out.width == base.width


# ------------------------------------------------------------------- micro_f1


def match_count_oracle(predicted, gold) -> int:
    """Greedy exact matching with removal; independent of Counter math."""
    pool = list(gold)
    matched = 0
    for item in predicted:
        if item in pool:
            pool.remove(item)
            matched += 1
    return matched


def test_micro_f1_perfect():
    items = [(0, 1, 2, "a"), (0, 3, 4, "b")]
    assert micro_f1(items, list(items)) == (1.0, 1.0, 1.0)


def test_micro_f1_empty_conventions():
    assert micro_f1([], [(0, 1, 2, "a")]) == (0.0, 0.0, 0.0)
    assert micro_f1([(0, 1, 2, "a")], []) == (0.0, 0.0, 0.0)
    assert micro_f1([], []) == (0.0, 0.0, 0.0)


def test_micro_f1_half_overlap():
    p, r, f1 = micro_f1([("x",), ("y",)], [("x",), ("z",)])
    assert (p, r, f1) == (0.5, 0.5, 0.5)


def test_micro_f1_duplicates_count_once_per_gold():
    p, r, f1 = micro_f1([("x",), ("x",)], [("x",)])
    assert p == 0.5 and r == 1.0
    assert f1 == pytest.approx(2 / 3)


def test_micro_f1_matches_counting_oracle():
    rng = random.Random(0)
    universe = [(s, e, t) for s in range(3) for e in range(3) for t in "ab"]
    for _ in range(60):
        pred = [rng.choice(universe) for _ in range(rng.randrange(6))]
        gold = [rng.choice(universe) for _ in range(rng.randrange(6))]
        tp = match_count_oracle(pred, gold)
        want_p = tp / len(pred) if pred else 0.0
        want_r = tp / len(gold) if gold else 0.0
        want_f = 2 * want_p * want_r / (want_p + want_r) if want_p + want_r else 0.0
        assert micro_f1(pred, gold) == (want_p, want_r, want_f)


@given(
    pred=st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=8),
    gold=st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), max_size=8),
    seed=st.integers(0, 100),
)
@settings(max_examples=60, deadline=None)
def test_micro_f1_permutation_invariant(pred, gold, seed):
    rng = random.Random(seed)
    p2, g2 = list(pred), list(gold)
    rng.shuffle(p2)
    rng.shuffle(g2)
    assert micro_f1(pred, gold) == micro_f1(p2, g2)


# -------------------------------------------------------------- episode terms


def test_span_episode_terms_single_chunk_is_direct_loss():
    cfg = tiny_cfg()
    sents = small_corpus()[:3]
    model = build_span_model(Vocabulary.from_sentences(sents), cfg)
    via_terms = span_episode_terms(model, sents, cfg)
    direct = model.loss_terms(sents)
    assert via_terms.keys() == direct.keys()
    for key in direct:
        assert torch.equal(via_terms[key], direct[key])


def test_span_episode_terms_token_weighted_chunks():
    cfg = tiny_cfg(batch_size=2)
    sents = small_corpus()[:3]
    model = build_span_model(Vocabulary.from_sentences(sents), cfg)
    out = span_episode_terms(model, sents, cfg)
    t1 = model.loss_terms(sents[:2])
    t2 = model.loss_terms(sents[2:])
    w1 = float(sum(min(len(s.tokens), cfg.max_len) for s in sents[:2]))
    w2 = float(sum(min(len(s.tokens), cfg.max_len) for s in sents[2:]))
    for key in out:
        want = (t1[key] * w1 + t2[key] * w2) / (w1 + w2)
        assert torch.allclose(out[key], want, rtol=0, atol=0)


def test_typing_episode_terms_all_spanless_is_zero():
    cfg = tiny_cfg()
    sents = [Sentence(("pad0", "pad1"), ()), Sentence(("pad2",), ())]
    model = build_typing_model(Vocabulary.from_sentences(sents), cfg)
    out = typing_episode_terms(model, sents, small_corpus()[:2], cfg)
    assert set(out) == {"proto", "facilitate", "filter", "total"}
    for value in out.values():
        assert float(value) == 0.0


def test_typing_episode_terms_skips_spanless_chunks():
    cfg = tiny_cfg(batch_size=1)
    spanful = small_corpus()[0]
    spanless = Sentence(("pad0", "pad1", "pad2"), ())
    support = small_corpus()[:3]
    vocab = Vocabulary.from_sentences([spanful, spanless, *support])
    model = build_typing_model(vocab, cfg)
    out = typing_episode_terms(model, [spanful, spanless], support, cfg)
    protos = model.prototypes_from(support)
    direct = model.loss_terms([spanful], protos)
    for key in direct:
        assert torch.equal(out[key], direct[key])


# -------------------------------------------------------- finetune_on_support


def test_finetune_zero_steps_is_identity():
    cfg = tiny_cfg(inner_steps=0)
    sents = small_corpus()[:4]
    model = build_span_model(Vocabulary.from_sentences(sents), cfg)
    snap = params_of(model)
    adapted = finetune_on_support(model, sents, cfg)
    assert_params_equal(adapted, snap)
    assert_params_equal(model, snap)


def test_finetune_zero_lr_is_identity():
    cfg = tiny_cfg(inner_steps=3, inner_lr=0.0)
    sents = small_corpus()[:4]
    for build in (build_span_model, build_typing_model):
        model = build(Vocabulary.from_sentences(sents), cfg)
        snap = params_of(model)
        adapted = finetune_on_support(model, sents, cfg)
        assert_params_equal(adapted, snap)


def test_finetune_never_mutates_original():
    cfg = tiny_cfg(inner_steps=3, inner_lr=0.05)
    sents = small_corpus()[:4]
    model = build_span_model(Vocabulary.from_sentences(sents), cfg)
    snap = params_of(model)
    adapted = finetune_on_support(model, sents, cfg)
    assert_params_equal(model, snap)
    assert params_differ(adapted, snap)


def test_finetune_five_steps_reduces_span_support_loss():
    cfg = tiny_cfg(inner_steps=5, inner_lr=0.05)
    support = small_corpus()[:6]
    model = build_span_model(Vocabulary.from_sentences(support), cfg)
    before = float(span_episode_terms(model, support, cfg)["total"])
    adapted = finetune_on_support(model, support, cfg)
    after = float(span_episode_terms(adapted, support, cfg)["total"])
    assert after < before


def test_finetune_five_steps_reduces_typing_support_loss():
    cfg = tiny_cfg(inner_steps=5, inner_lr=0.05)
    support = small_corpus()[:6]
    model = build_typing_model(Vocabulary.from_sentences(support), cfg)
    before = float(typing_episode_terms(model, support, support, cfg)["total"])
    adapted = finetune_on_support(model, support, cfg)
    after = float(typing_episode_terms(adapted, support, support, cfg)["total"])
    assert after < before


# ------------------------------------------------------------- meta-training


def test_train_span_stage_zero_episodes_leaves_parameters():
    cfg = tiny_cfg()
    vocab = Vocabulary.from_sentences(small_corpus())
    model, history = train_span_stage([], cfg, vocab=vocab)
    assert history == []
    assert_params_equal(model, params_of(build_span_model(vocab, cfg)))


def test_train_span_stage_zero_lr_leaves_parameters():
    cfg = tiny_cfg(lr_span=0.0)
    episodes = small_episodes(1)
    vocab = Vocabulary.from_sentences(small_corpus())
    model, history = train_span_stage(episodes, cfg, vocab=vocab)
    assert len(history) == 1
    assert_params_equal(model, params_of(build_span_model(vocab, cfg)))


def test_train_span_stage_updates_and_logs():
    cfg = tiny_cfg()
    episodes = small_episodes(2)
    vocab = Vocabulary.from_sentences(small_corpus())
    model, history = train_span_stage(episodes, cfg, vocab=vocab)
    assert [h["step"] for h in history] == [0, 1]
    assert set(history[0]) == {"step", "classify", "assign", "diverse", "total"}
    assert all(math.isfinite(h["total"]) for h in history)
    assert params_differ(model, params_of(build_span_model(vocab, cfg)))


def test_train_span_stage_deterministic():
    cfg = tiny_cfg()
    episodes = small_episodes(3)
    vocab = Vocabulary.from_sentences(small_corpus())
    m1, h1 = train_span_stage(episodes, cfg, vocab=vocab)
    m2, h2 = train_span_stage(episodes, cfg, vocab=vocab)
    assert h1 == h2
    assert_params_equal(m1, params_of(m2))


def test_train_typing_stage_zero_lr_leaves_parameters():
    cfg = tiny_cfg(lr_type=0.0)
    episodes = small_episodes(1)
    vocab = Vocabulary.from_sentences(small_corpus())
    model, history = train_typing_stage(episodes, cfg, vocab=vocab)
    assert len(history) == 1
    assert_params_equal(model, params_of(build_typing_model(vocab, cfg)))


def test_train_typing_stage_never_mutates_stage_one():
    cfg = tiny_cfg()
    episodes = small_episodes(2)
    vocab = Vocabulary.from_sentences(small_corpus())
    span_model = build_span_model(vocab, cfg)
    snap = params_of(span_model)
    typing_model, history = train_typing_stage(episodes, cfg, span_model=span_model)
    assert_params_equal(span_model, snap)
    assert set(history[0]) == {"step", "proto", "facilitate", "filter", "total"}
    # the typing encoder shares the span model's vocabulary
    probe = ["cue0a", "ent0a", "pad3"]
    assert torch.equal(
        typing_model.encoder.vocab.indices(probe), span_model.encoder.vocab.indices(probe)
    )


def test_train_typing_stage_deterministic():
    cfg = tiny_cfg()
    episodes = small_episodes(2)
    vocab = Vocabulary.from_sentences(small_corpus())
    m1, h1 = train_typing_stage(episodes, cfg, vocab=vocab)
    m2, h2 = train_typing_stage(episodes, cfg, vocab=vocab)
    assert h1 == h2
    assert_params_equal(m1, params_of(m2))


# ------------------------------------------------------------ component usage


def test_component_usage_matches_cosine_argmax():
    cfg = tiny_cfg()
    sents = small_corpus()[:5]
    model = build_span_model(Vocabulary.from_sentences(sents), cfg)
    usage = component_usage(model, sents)

    from collections import Counter

    want = {b: Counter() for b in Boundary}
    with torch.no_grad():
        bank = model.bank.components.numpy()
        for sent in sents:
            H = model.encoder(sent.tokens).numpy()
            for i, label in enumerate(sent.boundary_labels):
                h = H[i]
                block = bank[label]
                cosines = block @ h / (np.linalg.norm(block, axis=1) * np.linalg.norm(h))
                want[Boundary(label)][int(np.argmax(cosines))] += 1
    assert usage == want


# ------------------------------------------------------------------- evaluate


class _ScriptedSpans:
    """Duck-typed stage-1 stand-in: spans come from a lookup table."""

    def __init__(self, lookup, vocab, width=8):
        self.lookup = dict(lookup)
        self.encoder = TokenEncoder(vocab, width, 1, 2, 0.0, 64, seed=0)
        self.bank = ComponentBank(2, width, seed=0)

    def predict(self, tokens):
        return list(self.lookup[tuple(tokens)])


class _ScriptedTypes:
    """Duck-typed stage-2 stand-in: types come from a lookup table."""

    def __init__(self, lookup):
        self.lookup = dict(lookup)

    def prototypes_from(self, support, train=False, seed=None):
        return None

    def classify(self, tokens, spans, prototypes):
        return [self.lookup[(tuple(tokens), span)] for span in spans]


def scripted_models(episodes, span_edit=None, type_edit=None):
    """Stubs that reproduce gold exactly, with optional per-sentence edits."""
    span_lookup = {}
    type_lookup = {}
    sentences = [s for ep in episodes for s in (*ep.support, *ep.query)]
    for sent in sentences:
        key = tuple(sent.tokens)
        spans = [(sp.start, sp.end) for sp in sent.spans]
        span_lookup[key] = span_edit(spans) if span_edit else spans
        for sp in sent.spans:
            type_lookup[(key, (sp.start, sp.end))] = sp.type
        for span in span_lookup[key]:
            type_lookup.setdefault((key, span), sent.spans[0].type if sent.spans else "type-00")
    if type_edit:
        type_lookup = {k: type_edit(v) for k, v in type_lookup.items()}
    vocab = Vocabulary.from_sentences(sentences)
    return _ScriptedSpans(span_lookup, vocab), _ScriptedTypes(type_lookup)


def test_evaluate_perfect_predictions_score_one():
    cfg = tiny_cfg(inner_steps=0)
    episodes = small_episodes(2)
    span_stub, type_stub = scripted_models(episodes)
    report = evaluate(episodes, span_stub, type_stub, cfg)
    metrics = report.scenarios["clean"]
    assert (metrics.precision, metrics.recall, metrics.f1) == (1.0, 1.0, 1.0)
    assert metrics.span_f1 == 1.0
    assert metrics.typing_accuracy_gold == 1.0
    assert metrics.n_episodes == 2
    assert all(rec["f1"] == 1.0 for rec in metrics.per_episode)


def test_evaluate_no_predictions_zero_recall():
    cfg = tiny_cfg(inner_steps=0)
    episodes = small_episodes(1)
    span_stub, type_stub = scripted_models(episodes, span_edit=lambda spans: [])
    report = evaluate(episodes, span_stub, type_stub, cfg)
    metrics = report.scenarios["clean"]
    assert metrics.recall == 0.0 and metrics.f1 == 0.0
    assert metrics.span_recall == 0.0 and metrics.span_f1 == 0.0
    assert metrics.typing_accuracy_gold == 1.0  # gold spans still typed correctly


def test_evaluate_wrong_types_hit_spans_only():
    cfg = tiny_cfg(inner_steps=0)
    episodes = small_episodes(1)
    span_stub, type_stub = scripted_models(episodes, type_edit=lambda t: "type-99")
    report = evaluate(episodes, span_stub, type_stub, cfg)
    metrics = report.scenarios["clean"]
    assert metrics.f1 == 0.0
    assert metrics.span_f1 == 1.0
    assert metrics.typing_accuracy_gold == 0.0


def test_evaluate_pools_micro_not_macro():
    # one episode predicts everything, the other nothing: pooled recall is
    # the span-weighted fraction, not the mean of per-episode recalls
    cfg = tiny_cfg(inner_steps=0)
    episodes = small_episodes(2)
    hits = {tuple(s.tokens) for s in episodes[0].query}

    span_stub, type_stub = scripted_models(episodes)
    span_stub.lookup = {
        key: (spans if key in hits else []) for key, spans in span_stub.lookup.items()
    }
    report = evaluate(episodes, span_stub, type_stub, cfg)
    metrics = report.scenarios["clean"]
    # sampled episodes may share query sentences, so count what the stub kept
    total = sum(len(s.spans) for ep in episodes for s in ep.query)
    kept = sum(len(s.spans) for ep in episodes for s in ep.query if tuple(s.tokens) in hits)
    assert 0 < kept < total
    assert metrics.recall == pytest.approx(kept / total)
    assert metrics.precision == 1.0
    assert metrics.per_episode[0]["f1"] == 1.0


def test_evaluate_deterministic_and_json_round_trip():
    cfg = tiny_cfg(inner_steps=1)
    episodes = small_episodes(2)
    vocab = Vocabulary.from_sentences(small_corpus())
    span_model = build_span_model(vocab, cfg)
    typing_model = build_typing_model(vocab, cfg)
    r1 = evaluate(episodes, span_model, typing_model, cfg)
    r2 = evaluate(episodes, span_model, typing_model, cfg)
    assert r1.to_json() == r2.to_json()

    back = EvalReport.from_json(r1.to_json())
    assert back.to_json() == r1.to_json()
    assert back.victim == r1.victim
    assert back.scenarios["clean"].to_dict() == r1.scenarios["clean"].to_dict()
    assert back.config == asdict(cfg)


def test_evaluate_counts_component_usage():
    cfg = tiny_cfg(inner_steps=0)
    episodes = small_episodes(1)
    vocab = Vocabulary.from_sentences(small_corpus())
    span_model = build_span_model(vocab, cfg)
    typing_model = build_typing_model(vocab, cfg)
    report = evaluate(episodes, span_model, typing_model, cfg)
    usage = report.scenarios["clean"].counters["component_usage"]
    total = sum(v for hist in usage.values() for v in hist.values())
    assert total == sum(len(s.tokens) for s in episodes[0].query)
    assert "O" in usage


# ------------------------------------------------------------- attack episode


def test_model_victim_surface():
    cfg = tiny_cfg()
    episodes = small_episodes(1)
    vocab = Vocabulary.from_sentences(small_corpus())
    victim = ModelVictim(
        build_span_model(vocab, cfg), build_typing_model(vocab, cfg),
        episodes[0].support, cfg,
    )
    sent = episodes[0].query[0]
    assert math.isfinite(victim.loss(sent))
    for start, end, typ in victim.predict(sent):
        assert isinstance(start, int) and isinstance(end, int) and isinstance(typ, str)


def test_attack_episode_structure_and_budget():
    cfg = tiny_cfg(rho=0.4)
    episodes = small_episodes(1)
    vocab = Vocabulary.from_sentences(small_corpus())
    span_model = build_span_model(vocab, cfg)
    typing_model = build_typing_model(vocab, cfg)
    lexicon = make_synonym_lexicon(n_types=3)

    attacked, records = attack_episode(span_model, typing_model, episodes[0], lexicon, cfg, seed=5)
    assert attacked.types == episodes[0].types
    assert attacked.seed == episodes[0].seed
    assert set(records) == {"rho", "support", "query"}
    assert records["rho"] == cfg.rho
    for side in ("support", "query"):
        originals = getattr(episodes[0], side)
        perturbed = getattr(attacked, side)
        assert len(records[side]) == len(originals) == len(perturbed)
        for orig, pert, rec in zip(originals, perturbed, records[side]):
            assert rec["original_tokens"] == list(orig.tokens)
            assert rec["perturbed_tokens"] == list(pert.tokens)
            assert pert.spans == orig.spans
            assert len(rec["substitutions"]) <= math.ceil(cfg.rho * len(orig.tokens))


def test_attack_episode_deterministic():
    cfg = tiny_cfg(rho=0.4)
    episodes = small_episodes(1)
    vocab = Vocabulary.from_sentences(small_corpus())
    span_model = build_span_model(vocab, cfg)
    typing_model = build_typing_model(vocab, cfg)
    lexicon = make_synonym_lexicon(n_types=3)
    a1, r1 = attack_episode(span_model, typing_model, episodes[0], lexicon, cfg, seed=5)
    a2, r2 = attack_episode(span_model, typing_model, episodes[0], lexicon, cfg, seed=5)
    assert a1 == a2
    assert r1 == r2


# ---------------------------------------------------------------- checkpoints


def test_stage1_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    sents = small_corpus()[:6]
    vocab = Vocabulary.from_sentences(sents)
    model = build_span_model(vocab, cfg)
    history = [{"step": 0, "total": 1.25}]
    save_stage1(tmp_path, model, cfg, history)

    loaded = load_stage1(tmp_path)
    assert torch.equal(loaded.bank.components, model.bank.components)
    assert (loaded.head.margin, loaded.head.tau, loaded.head.alpha) == (
        model.head.margin, model.head.tau, model.head.alpha,
    )
    probe = sents[0]
    with torch.no_grad():
        assert torch.equal(loaded.encoder(probe.tokens), model.encoder(probe.tokens))
    assert loaded.predict(probe.tokens) == model.predict(probe.tokens)
    got = loaded.loss_terms(sents)
    want = model.loss_terms(sents)
    for key in want:
        assert torch.equal(got[key], want[key])

    assert kv_to_dataclass((tmp_path / "config.txt").read_text(), TrainConfig) == cfg
    lines = (tmp_path / "metrics-stage1.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == history


def test_stage2_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(distance="cosine")
    sents = small_corpus()[:6]
    vocab = Vocabulary.from_sentences(sents)
    model = build_typing_model(vocab, cfg)
    save_stage2(tmp_path, model, cfg, [{"step": 0, "total": 0.5}])

    loaded = load_stage2(tmp_path)
    assert loaded.head.distance == "cosine"
    assert loaded.head.bottleneck == cfg.bottleneck
    protos = model.prototypes_from(sents[:3])
    got = loaded.loss_terms(sents, protos)
    want = model.loss_terms(sents, protos)
    for key in want:
        assert torch.equal(got[key], want[key])
    probe = sents[0]
    gold_pairs = [(sp.start, sp.end) for sp in probe.spans]
    assert loaded.classify(probe.tokens, gold_pairs, protos) == model.classify(
        probe.tokens, gold_pairs, protos
    )
    lines = (tmp_path / "metrics-stage2.jsonl").read_text().splitlines()
    assert len(lines) == 1
