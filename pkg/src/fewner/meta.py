"""Serial two-stage episodic meta-training and clean-vs-attack evaluation.

Meta-learning is first-order: each episode adapts a parameter clone with
plain SGD on the support loss, then the query-loss gradient at the
adapted parameters updates the originals through AdamW.  Stage 2 trains
after (and never mutates) stage 1; typing batches teacher-force gold
spans, predicted spans appear only at evaluation.
"""

from __future__ import annotations

import copy
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import torch

from .attack import CandidateSource, attack_corpus, attack_to_dict
from .corpus import Boundary, Episode, Sentence
from .encoder import DTYPE, TokenEncoder, Vocabulary, load_encoder, save_encoder
from .entity_typing import TypingHead, TypingModel
from .errors import ConfigError, ParseError
from .rng import derive_seed
from .span_detect import ComponentBank, SpanHead, SpanModel, nearest_component

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; the defaults are the published method settings
    plus desk-scale choices for the toy encoder and meta loop."""

    lr_span: float = 3e-5
    lr_type: float = 1e-4
    inner_steps: int = 3
    inner_lr: float = 1e-2
    batch_size: int = 64
    alpha: float = 0.2
    gamma_assign: float = 0.1
    gamma_diverse: float = 0.1
    gamma_facilitate: float = 1e-3
    gamma_filter: float = 1e-5
    tau: float = 0.025
    margin: float = 0.01
    n_components: int = 15
    rho: float = 0.4
    dropout: float = 0.2
    max_len: int = 128
    width: int = 32
    blocks: int = 2
    heads: int = 2
    bottleneck: int = 8
    distance: str = "sqeuclidean"
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.lr_span, self.lr_type, self.inner_lr) < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.inner_steps < 0 or self.batch_size < 1:
            raise ConfigError("inner_steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.rho <= 1:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if min(self.alpha, self.gamma_assign, self.gamma_diverse, self.gamma_facilitate, self.gamma_filter) < 0:
            raise ConfigError("loss weights must be nonnegative")


def config_to_text(cfg) -> str:
    """Flat ``key = value`` serialization in field order."""
    return "".join(f"{f.name} = {getattr(cfg, f.name)!r}\n".replace("'", "") for f in fields(cfg))


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        if key in out:
            raise ParseError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def kv_to_dataclass(text: str, cls, base=None):
    """Parse flat key-value text into a dataclass; unknown keys rejected."""
    raw = parse_kv(text)
    types = {f.name: f.type for f in fields(cls)}
    values = asdict(base) if base is not None else {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        kind = types[key]
        try:
            if kind in ("int", int):
                values[key] = int(value)
            elif kind in ("float", float):
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc
    return cls(**values)


def build_span_model(vocab: Vocabulary, cfg: TrainConfig) -> SpanModel:
    encoder = TokenEncoder(
        vocab, cfg.width, cfg.blocks, cfg.heads, cfg.dropout, cfg.max_len,
        seed=derive_seed(cfg.seed, "init", "span-encoder"),
    )
    bank = ComponentBank(cfg.n_components, cfg.width, seed=derive_seed(cfg.seed, "init", "bank"))
    head = SpanHead(
        cfg.width, cfg.margin, cfg.tau, cfg.alpha, cfg.gamma_assign, cfg.gamma_diverse,
        seed=derive_seed(cfg.seed, "init", "span-head"),
    )
    return SpanModel(encoder, bank, head)


def build_typing_model(vocab: Vocabulary, cfg: TrainConfig) -> TypingModel:
    encoder = TokenEncoder(
        vocab, cfg.width, cfg.blocks, cfg.heads, cfg.dropout, cfg.max_len,
        seed=derive_seed(cfg.seed, "init", "typing-encoder"),
    )
    head = TypingHead(
        cfg.width, cfg.bottleneck, cfg.gamma_facilitate, cfg.gamma_filter, cfg.distance,
        seed=derive_seed(cfg.seed, "init", "typing-head"),
    )
    return TypingModel(encoder, head)


def _chunks(sentences: Sequence[Sentence], size: int):
    for i in range(0, len(sentences), size):
        yield i // size, sentences[i : i + size]


def _accumulate(terms_list: list[tuple[dict, float]]) -> dict[str, torch.Tensor]:
    total_weight = sum(w for _, w in terms_list)
    keys = terms_list[0][0].keys()
    return {
        k: sum(terms[k] * w for terms, w in terms_list) / total_weight for k in keys
    }


def span_episode_terms(
    model: SpanModel, sentences: Sequence[Sentence], cfg: TrainConfig,
    train: bool = False, seed: int | None = None,
) -> dict[str, torch.Tensor]:
    """Token-weighted stage-1 loss over batch_size chunks (the max term of
    the readout applies within each chunk)."""
    parts = []
    for ci, chunk in _chunks(sentences, cfg.batch_size):
        chunk_seed = derive_seed(seed, "chunk", ci) if seed is not None else None
        terms = model.loss_terms(chunk, train=train, seed=chunk_seed)
        weight = sum(min(len(s.tokens), cfg.max_len) for s in chunk)
        parts.append((terms, float(weight)))
    return _accumulate(parts)


def typing_episode_terms(
    model: TypingModel, sentences: Sequence[Sentence], proto_sentences: Sequence[Sentence],
    cfg: TrainConfig, train: bool = False, seed: int | None = None, counters: dict | None = None,
) -> dict[str, torch.Tensor]:
    """Span-weighted stage-2 loss; prototypes come from proto_sentences
    under the current parameters."""
    proto_seed = derive_seed(seed, "protos") if seed is not None else None
    protos = model.prototypes_from(proto_sentences, train=train, seed=proto_seed)
    parts = []
    for ci, chunk in _chunks(sentences, cfg.batch_size):
        chunk_seed = derive_seed(seed, "chunk", ci) if seed is not None else None
        terms = model.loss_terms(chunk, protos, train=train, seed=chunk_seed, counters=counters)
        weight = sum(len(s.spans) for s in chunk)
        parts.append((terms, float(weight)))
    if all(w == 0 for _, w in parts):
        zero = torch.zeros((), dtype=DTYPE)
        return {"proto": zero, "facilitate": zero, "filter": zero, "total": zero}
    return _accumulate([(t, w) for t, w in parts if w > 0])


def _support_closure(model, episode: Episode, cfg: TrainConfig, counters: dict | None = None):
    if isinstance(model, SpanModel):
        return lambda m, seed: span_episode_terms(m, episode.support, cfg, train=True, seed=seed)["total"]
    return lambda m, seed: typing_episode_terms(
        m, episode.support, episode.support, cfg, train=True, seed=seed, counters=counters
    )["total"]


def _inner_adapt(model, loss_fn: Callable, cfg: TrainConfig, seed_parts: tuple):
    adapted = copy.deepcopy(model)
    for step in range(cfg.inner_steps):
        loss = loss_fn(adapted, derive_seed(cfg.seed, *seed_parts, "inner", step))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite support loss at inner step {step}")
        if not loss.requires_grad:
            continue
        params = [p for p in adapted.parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p.add_(g, alpha=-cfg.inner_lr)
        if isinstance(adapted, SpanModel):
            adapted.renormalize()
    return adapted


def finetune_on_support(model, support: Sequence[Sentence], cfg: TrainConfig, counters: dict | None = None):
    """Clone the model and take inner_steps SGD steps on the support loss;
    the original is never touched."""
    episode = Episode(tuple(support), (), frozenset(sp.type for s in support for sp in s.spans))
    return _inner_adapt(model, _support_closure(model, episode, cfg, counters), cfg, ("finetune",))


def _meta_train(model, episodes: Sequence[Episode], cfg: TrainConfig, lr: float, tag: str,
                query_terms: Callable, counters: dict | None = None):
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    history = []
    for idx, episode in enumerate(episodes):
        try:
            adapted = _inner_adapt(
                model, _support_closure(model, episode, cfg, counters), cfg, (tag, idx)
            )
            terms = query_terms(adapted, episode, derive_seed(cfg.seed, tag, idx, "outer"))
            query_loss = terms["total"]
            if not torch.isfinite(query_loss):
                raise FloatingPointError("non-finite query loss")
        except FloatingPointError as exc:
            log.warning("%s training stopped at episode %d (%s); keeping last good parameters", tag, idx, exc)
            break
        record = {"step": idx, **{k: float(v.detach()) for k, v in terms.items()}}
        if query_loss.requires_grad:
            adapted_params = [p for p in adapted.parameters() if p.requires_grad]
            grads = torch.autograd.grad(query_loss, adapted_params, allow_unused=True)
            if any(g is not None and not torch.isfinite(g).all() for g in grads):
                log.warning("%s training stopped at episode %d (non-finite gradient)", tag, idx)
                break
            optimizer.zero_grad(set_to_none=True)
            base_params = [p for p in model.parameters() if p.requires_grad]
            for p, g in zip(base_params, grads):
                p.grad = None if g is None else g.detach().clone()
            optimizer.step()
            if isinstance(model, SpanModel):
                model.renormalize()
        history.append(record)
    return history


def train_span_stage(
    episodes: Sequence[Episode], cfg: TrainConfig, vocab: Vocabulary | None = None
) -> tuple[SpanModel, list[dict]]:
    """First-order meta-training of the span detector over the episodes."""
    if vocab is None:
        vocab = Vocabulary.from_sentences(s for ep in episodes for s in (*ep.support, *ep.query))
    model = build_span_model(vocab, cfg)
    history = _meta_train(
        model, episodes, cfg, cfg.lr_span, "span",
        lambda m, ep, seed: span_episode_terms(m, ep.query, cfg, train=True, seed=seed),
    )
    return model, history


def train_typing_stage(
    episodes: Sequence[Episode], cfg: TrainConfig,
    span_model: SpanModel | None = None, vocab: Vocabulary | None = None,
    counters: dict | None = None,
) -> tuple[TypingModel, list[dict]]:
    """Meta-training of the typing stage after stage 1.

    Training pools gold spans (teacher forcing), so the frozen span model
    is only consulted for its vocabulary; it is never mutated.
    """
    if vocab is None:
        if span_model is not None:
            vocab = span_model.encoder.vocab
        else:
            vocab = Vocabulary.from_sentences(s for ep in episodes for s in (*ep.support, *ep.query))
    model = build_typing_model(vocab, cfg)
    history = _meta_train(
        model, episodes, cfg, cfg.lr_type, "typing",
        lambda m, ep, seed: typing_episode_terms(
            m, ep.query, ep.support, cfg, train=True, seed=seed, counters=counters
        ),
        counters=counters,
    )
    return model, history


def micro_f1(predicted: Sequence[tuple], gold: Sequence[tuple]) -> tuple[float, float, float]:
    """Micro precision/recall/F1 by exact tuple matching."""
    tp = sum((Counter(predicted) & Counter(gold)).values())
    precision = tp / len(predicted) if predicted else 0.0
    recall = tp / len(gold) if gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def component_usage(model: SpanModel, sentences: Sequence[Sentence]) -> dict[Boundary, Counter]:
    """Histogram of nearest same-class components over gold-labeled tokens."""
    usage: dict[Boundary, Counter] = {b: Counter() for b in Boundary}
    with torch.no_grad():
        for sent in sentences:
            H = model.encoder(sent.tokens)
            for i, label in enumerate(sent.boundary_labels[: H.shape[0]]):
                idx, _ = nearest_component(H[i], model.bank, label)
                usage[Boundary(label)][idx] += 1
    return usage


@dataclass
class ScenarioMetrics:
    """Micro scores for one evaluation scenario."""

    precision: float
    recall: float
    f1: float
    span_precision: float
    span_recall: float
    span_f1: float
    typing_accuracy_gold: float
    n_episodes: int
    per_episode: list
    counters: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ScenarioMetrics":
        return cls(**{f.name: obj[f.name] for f in fields(cls)})


@dataclass
class EvalReport:
    """Per-scenario metrics plus the config echo for downstream tables."""

    scenarios: dict[str, ScenarioMetrics]
    config: dict
    victim: str = "pre-finetuning"

    def to_json(self) -> str:
        payload = {
            "scenarios": {k: m.to_dict() for k, m in sorted(self.scenarios.items())},
            "config": self.config,
            "victim": self.victim,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        scenarios = {k: ScenarioMetrics.from_dict(m) for k, m in payload["scenarios"].items()}
        return cls(scenarios, payload.get("config", {}), payload.get("victim", "pre-finetuning"))


def evaluate(
    episodes: Sequence[Episode],
    span_model: SpanModel,
    typing_model: TypingModel,
    cfg: TrainConfig,
    scenario: str = "clean",
) -> EvalReport:
    """Finetune on each support set, predict spans, type them, and pool
    exact (start, end, type) matches micro-averaged over all episodes."""
    pred_typed: list[tuple] = []
    gold_typed: list[tuple] = []
    pred_spans: list[tuple] = []
    gold_spans: list[tuple] = []
    per_episode = []
    counters: dict = {}
    usage_total: dict[Boundary, Counter] = {b: Counter() for b in Boundary}
    gold_hits = 0
    gold_total = 0

    for e_i, episode in enumerate(episodes):
        span_adapted = finetune_on_support(span_model, episode.support, cfg, counters)
        typing_adapted = finetune_on_support(typing_model, episode.support, cfg, counters)
        prototypes = typing_adapted.prototypes_from(episode.support)
        ep_pred_typed: list[tuple] = []
        ep_gold_typed: list[tuple] = []
        ep_pred_spans: list[tuple] = []
        ep_gold_spans: list[tuple] = []
        for q_i, query in enumerate(episode.query):
            sid = (e_i, q_i)
            spans = span_adapted.predict(query.tokens)
            types = typing_adapted.classify(query.tokens, spans, prototypes)
            ep_pred_typed += [(sid, s, e, t) for (s, e), t in zip(spans, types)]
            ep_pred_spans += [(sid, s, e) for s, e in spans]
            ep_gold_typed += [(sid, sp.start, sp.end, sp.type) for sp in query.spans]
            ep_gold_spans += [(sid, sp.start, sp.end) for sp in query.spans]
            if query.spans:
                gold_pairs = [(sp.start, sp.end) for sp in query.spans]
                for sp, predicted in zip(
                    query.spans, typing_adapted.classify(query.tokens, gold_pairs, prototypes)
                ):
                    gold_hits += int(predicted == sp.type)
                    gold_total += 1
        for boundary, histogram in component_usage(span_adapted, episode.query).items():
            usage_total[boundary].update(histogram)
        _, _, ep_f1 = micro_f1(ep_pred_typed, ep_gold_typed)
        _, _, ep_span_f1 = micro_f1(ep_pred_spans, ep_gold_spans)
        per_episode.append({"episode": e_i, "f1": ep_f1, "span_f1": ep_span_f1})
        pred_typed += ep_pred_typed
        gold_typed += ep_gold_typed
        pred_spans += ep_pred_spans
        gold_spans += ep_gold_spans

    precision, recall, f1 = micro_f1(pred_typed, gold_typed)
    span_p, span_r, span_f1 = micro_f1(pred_spans, gold_spans)
    counters["component_usage"] = {
        b.name: {str(k): v for k, v in sorted(histogram.items())}
        for b, histogram in usage_total.items()
        if histogram
    }
    metrics = ScenarioMetrics(
        precision=precision, recall=recall, f1=f1,
        span_precision=span_p, span_recall=span_r, span_f1=span_f1,
        typing_accuracy_gold=(gold_hits / gold_total if gold_total else 0.0),
        n_episodes=len(episodes), per_episode=per_episode, counters=counters,
    )
    return EvalReport({scenario: metrics}, config=asdict(cfg))


class ModelVictim:
    """Pre-finetuning victim for the attack harness: loss is the summed
    stage-1 + stage-2 training losses on gold annotations, prediction is
    the full two-stage decode against episode-support prototypes."""

    def __init__(self, span_model: SpanModel, typing_model: TypingModel,
                 support: Sequence[Sentence], cfg: TrainConfig):
        self.span_model = span_model
        self.typing_model = typing_model
        self.cfg = cfg
        self.prototypes = typing_model.prototypes_from(support)

    def loss(self, sentence: Sentence) -> float:
        with torch.no_grad():
            span_loss = self.span_model.loss([sentence])
            typing_loss = self.typing_model.loss_terms([sentence], self.prototypes)["total"]
        return float(span_loss + typing_loss)

    def predict(self, sentence: Sentence) -> set[tuple[int, int, str]]:
        spans = self.span_model.predict(sentence.tokens)
        types = self.typing_model.classify(sentence.tokens, spans, self.prototypes)
        return {(s, e, t) for (s, e), t in zip(spans, types)}


def attack_episode(
    span_model: SpanModel, typing_model: TypingModel, episode: Episode,
    lexicon: CandidateSource, cfg: TrainConfig, seed: int,
) -> tuple[Episode, dict]:
    """Attack both sets of one episode against the frozen pre-finetuning
    victim; returns the perturbed episode and the attack records."""
    victim = ModelVictim(span_model, typing_model, episode.support, cfg)
    support_records = attack_corpus(victim, episode.support, lexicon, cfg.rho, derive_seed(seed, "support"))
    query_records = attack_corpus(victim, episode.query, lexicon, cfg.rho, derive_seed(seed, "query"))
    attacked = Episode(
        support=tuple(r.perturbed for r in support_records),
        query=tuple(r.perturbed for r in query_records),
        types=episode.types,
        seed=episode.seed,
    )
    records = {
        "rho": cfg.rho,
        "support": [attack_to_dict(r) for r in support_records],
        "query": [attack_to_dict(r) for r in query_records],
    }
    return attacked, records


def _stage_dir(checkpoint_dir, stage: str) -> Path:
    d = Path(checkpoint_dir) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def save_stage1(checkpoint_dir, model: SpanModel, cfg: TrainConfig, history: list[dict]) -> None:
    stage = _stage_dir(checkpoint_dir, "stage1")
    save_encoder(model.encoder, stage / "encoder.pt")
    torch.save(
        {
            "version": 1,
            "n_classes": model.bank.n_classes,
            "n_components": model.bank.n_components,
            "width": model.bank.width,
            "bank": model.bank.components.detach().clone(),
            "classifier": model.head.classifier.state_dict(),
            "margin": model.head.margin,
            "tau": model.head.tau,
            "alpha": model.head.alpha,
            "gamma_assign": model.head.gamma_assign,
            "gamma_diverse": model.head.gamma_diverse,
        },
        stage / "head.pt",
    )
    with open(Path(checkpoint_dir) / "config.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config_to_text(cfg))
    _write_history(Path(checkpoint_dir) / "metrics-stage1.jsonl", history)


def load_stage1(checkpoint_dir) -> SpanModel:
    stage = Path(checkpoint_dir) / "stage1"
    encoder = load_encoder(stage / "encoder.pt")
    payload = torch.load(stage / "head.pt", weights_only=True)
    bank = ComponentBank(payload["n_components"], payload["width"], n_classes=payload["n_classes"])
    with torch.no_grad():
        bank.components.copy_(payload["bank"])
    head = SpanHead(
        payload["width"], payload["margin"], payload["tau"], payload["alpha"],
        payload["gamma_assign"], payload["gamma_diverse"],
    )
    head.classifier.load_state_dict(payload["classifier"])
    return SpanModel(encoder, bank, head)


def save_stage2(checkpoint_dir, model: TypingModel, cfg: TrainConfig, history: list[dict]) -> None:
    stage = _stage_dir(checkpoint_dir, "stage2")
    save_encoder(model.encoder, stage / "encoder.pt")
    torch.save(
        {
            "version": 1,
            "width": model.head.width,
            "bottleneck": model.head.bottleneck,
            "gamma_facilitate": model.head.gamma_facilitate,
            "gamma_filter": model.head.gamma_filter,
            "distance": model.head.distance,
            "state": model.head.state_dict(),
        },
        stage / "head.pt",
    )
    _write_history(Path(checkpoint_dir) / "metrics-stage2.jsonl", history)


def load_stage2(checkpoint_dir) -> TypingModel:
    stage = Path(checkpoint_dir) / "stage2"
    encoder = load_encoder(stage / "encoder.pt")
    payload = torch.load(stage / "head.pt", weights_only=True)
    head = TypingHead(
        payload["width"], payload["bottleneck"], payload["gamma_facilitate"],
        payload["gamma_filter"], payload["distance"],
    )
    head.load_state_dict(payload["state"])
    return TypingModel(encoder, head)
