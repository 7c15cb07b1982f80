"""Correlation-purified entity typing (stage 2).

Span and context vectors are mean-pooled from a second encoder; a
contrastive facilitation loss ties each span to its own sentence
context, a diagonal-Gaussian information bottleneck filters their
shared nuisance content through a closed-form KL penalty, and
classification is prototype-based over negated distances.

Named ``entity_typing`` rather than ``typing`` to stay clear of the
standard-library module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import DTYPE
from .errors import ConfigError
from .rng import derive_seed

_VARIANCE_FLOOR = 1e-4

DISTANCES = ("sqeuclidean", "cosine")


@dataclass(frozen=True)
class DiagonalGaussian:
    """Mean and per-dimension variance of a diagonal Gaussian."""

    mean: torch.Tensor
    variance: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if not bool(torch.isfinite(self.mean).all() and torch.isfinite(self.variance).all()):
            raise FloatingPointError("non-finite Gaussian parameters")
        if not bool((self.variance > 0).all()):
            raise ValueError("variance entries must be strictly positive")


class TypingHead(nn.Module):
    """Compatibility scorer, bottleneck networks, and stage-2 weights."""

    def __init__(
        self,
        width: int = 32,
        bottleneck: int = 8,
        gamma_facilitate: float = 1e-3,
        gamma_filter: float = 1e-5,
        distance: str = "sqeuclidean",
        seed: int = 0,
    ):
        super().__init__()
        if gamma_facilitate < 0 or gamma_filter < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 1 <= bottleneck <= width:
            raise ConfigError(f"bottleneck width must lie in [1, {width}], got {bottleneck}")
        if distance not in DISTANCES:
            raise ConfigError(f"distance must be one of {DISTANCES}, got {distance!r}")
        self.width = width
        self.bottleneck = bottleneck
        self.gamma_facilitate = gamma_facilitate
        self.gamma_filter = gamma_filter
        self.distance = distance
        self.score = nn.Linear(2 * width, 1, dtype=DTYPE)
        # two-layer perceptrons; tanh keeps finite-difference checks clean
        self.ib_mean = nn.Sequential(
            nn.Linear(width, width, dtype=DTYPE), nn.Tanh(), nn.Linear(width, bottleneck, dtype=DTYPE)
        )
        self.ib_spread = nn.Sequential(
            nn.Linear(width, width, dtype=DTYPE), nn.Tanh(), nn.Linear(width, bottleneck, dtype=DTYPE)
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=gen)
                else:
                    p.zero_()


def span_repr(H: torch.Tensor, span: tuple[int, int]) -> torch.Tensor:
    """Mean of rows start..end (inclusive)."""
    start, end = int(span[0]), int(span[1])
    if not 0 <= start <= end < H.shape[0]:
        raise ValueError(f"span ({start}, {end}) out of range for {H.shape[0]} rows")
    return H[start : end + 1].mean(dim=0)


def context_repr(H: torch.Tensor, spans: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Mean of rows outside every span; a fully covered sentence falls
    back to the mean of all rows."""
    keep = torch.ones(H.shape[0], dtype=torch.bool)
    for span in spans:
        start, end = int(span[0]), int(span[1])
        if not 0 <= start <= end < H.shape[0]:
            raise ValueError(f"span ({start}, {end}) out of range for {H.shape[0]} rows")
        keep[start : end + 1] = False
    if not bool(keep.any()):
        return H.mean(dim=0)
    return H[keep].mean(dim=0)


def pair_scores(head: TypingHead, spans: torch.Tensor, contexts: torch.Tensor) -> torch.Tensor:
    """B x B compatibility matrix: entry (i, j) scores span i with context j
    through the single linear map on their concatenation."""
    w_span = head.score.weight[:, : head.width]
    w_ctx = head.score.weight[:, head.width :]
    return spans @ w_span.T + (contexts @ w_ctx.T).T + head.score.bias


def infonce_loss(
    span_reps: torch.Tensor,
    context_reps: torch.Tensor,
    score: TypingHead | Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    positive_act: Callable[[torch.Tensor], torch.Tensor] = F.softplus,
    partition_act: Callable[[torch.Tensor], torch.Tensor] = F.relu,
    counters: dict | None = None,
) -> torch.Tensor:
    """Contrastive facilitation loss with in-batch negatives.

    L = -mean_i [ act1(score(s_i, c_i)) - act2(log sum_j exp score(s_i, c_j)) ].
    Batches smaller than 2 carry no contrast and contribute zero (counted).
    Pass identity activations to recover the standard InfoNCE bound form.
    """
    if span_reps.shape[0] != context_reps.shape[0]:
        raise ValueError("span and context batches must align")
    if span_reps.shape[0] < 2:
        if counters is not None:
            counters["facilitation_skipped"] = counters.get("facilitation_skipped", 0) + 1
        return torch.zeros((), dtype=DTYPE)
    matrix = pair_scores(score, span_reps, context_reps) if isinstance(score, TypingHead) else score(span_reps, context_reps)
    positives = matrix.diagonal()
    partition = torch.logsumexp(matrix, dim=1)
    return -(positive_act(positives) - partition_act(partition)).mean()


def ib_forward(
    h: torch.Tensor, head: TypingHead, train: bool = False, seed: int | None = None
) -> tuple[DiagonalGaussian, torch.Tensor]:
    """Bottleneck distribution for rows of ``h`` plus a reparameterized
    sample (training) or the mean (inference)."""
    mu = head.ib_mean(h)
    variance = F.softplus(head.ib_spread(h)) + _VARIANCE_FLOOR
    dist = DiagonalGaussian(mu, variance)
    if train:
        if seed is None:
            raise ValueError("training-mode bottleneck sampling requires a seed")
        gen = torch.Generator().manual_seed(seed)
        eps = torch.randn(mu.shape, generator=gen, dtype=DTYPE)
        t = mu + variance.sqrt() * eps
    else:
        t = mu
    return dist, t


def kl_loss(dist_s: DiagonalGaussian, dist_c: DiagonalGaussian) -> torch.Tensor:
    """Closed-form KL(dist_s || dist_c) between diagonal Gaussians,
    summed over the last dimension."""
    vs, vc = dist_s.variance, dist_c.variance
    delta = dist_s.mean - dist_c.mean
    per_dim = 0.5 * torch.log(vc / vs) + (vs + delta * delta) / (2.0 * vc) - 0.5
    return per_dim.sum(dim=-1)


def class_prototypes(
    support_span_reps: Sequence[tuple[torch.Tensor, str]],
    expected_types: Sequence[str] | None = None,
) -> dict[str, torch.Tensor]:
    """Per-type means of support span representations."""
    groups: dict[str, list[torch.Tensor]] = {}
    for rep, entity_type in support_span_reps:
        groups.setdefault(entity_type, []).append(rep)
    if expected_types is not None:
        for t in sorted(expected_types):
            if t not in groups:
                raise ValueError(f"entity type {t!r} has no support spans")
    return {t: torch.stack(reps).mean(dim=0) for t, reps in sorted(groups.items())}


def _distances(h: torch.Tensor, protos: torch.Tensor, distance: str) -> torch.Tensor:
    if distance == "sqeuclidean":
        diff = protos - h
        return (diff * diff).sum(dim=-1)
    if distance == "cosine":
        hn = h / torch.linalg.vector_norm(h).clamp_min(1e-12)
        pn = protos / torch.linalg.vector_norm(protos, dim=-1, keepdim=True).clamp_min(1e-12)
        return 1.0 - pn @ hn
    raise ConfigError(f"distance must be one of {DISTANCES}, got {distance!r}")


def proto_distribution(
    h: torch.Tensor, prototypes: Mapping[str, torch.Tensor], distance: str = "sqeuclidean"
) -> tuple[tuple[str, ...], torch.Tensor]:
    """Softmax over negated prototype distances; types in sorted order."""
    if not prototypes:
        raise ValueError("no prototypes given")
    types = tuple(sorted(prototypes))
    protos = torch.stack([prototypes[t] for t in types])
    probs = torch.softmax(-_distances(h, protos, distance), dim=0)
    return types, probs


def proto_loss(
    query_span_reps: Sequence[tuple[torch.Tensor, str]],
    prototypes: Mapping[str, torch.Tensor],
    distance: str = "sqeuclidean",
) -> torch.Tensor:
    """Sum over query spans of the negative log-probability of the gold type."""
    if not prototypes:
        raise ValueError("no prototypes given")
    types = tuple(sorted(prototypes))
    index = {t: i for i, t in enumerate(types)}
    protos = torch.stack([prototypes[t] for t in types])
    total = torch.zeros((), dtype=DTYPE)
    for rep, gold in query_span_reps:
        if gold not in index:
            raise ValueError(f"gold type {gold!r} has no prototype")
        logp = torch.log_softmax(-_distances(rep, protos, distance), dim=0)
        total = total - logp[index[gold]]
    return total


def classify_spans(
    span_reps: Sequence[torch.Tensor],
    prototypes: Mapping[str, torch.Tensor],
    distance: str = "sqeuclidean",
) -> list[str]:
    """Most probable type per span; ties break lexicographically."""
    out = []
    for rep in span_reps:
        types, probs = proto_distribution(rep, prototypes, distance)
        out.append(types[int(np.argmax(probs.detach().numpy()))])
    return out


def typing_stage_terms(
    span_reps: torch.Tensor,
    span_types: Sequence[str],
    context_reps: torch.Tensor,
    prototypes: Mapping[str, torch.Tensor],
    head: TypingHead,
    counters: dict | None = None,
) -> dict[str, torch.Tensor]:
    """Stage-2 loss terms; zero-weighted terms are skipped, not computed.

    ``context_reps`` row i is the pooled context of span i's own sentence;
    the facilitation negatives and the KL filtering pairs both follow that
    alignment.  The bottleneck's reparameterized sample is diagnostic only,
    so the KL term uses the distributions directly.
    """
    zero = torch.zeros((), dtype=DTYPE)
    if span_reps.shape[0] == 0:
        if counters is not None:
            counters["typing_empty_batches"] = counters.get("typing_empty_batches", 0) + 1
        return {"proto": zero, "facilitate": zero, "filter": zero, "total": zero}
    terms = {
        "proto": proto_loss(list(zip(span_reps, span_types)), prototypes, head.distance),
        "facilitate": zero,
        "filter": zero,
    }
    if head.gamma_facilitate != 0:
        terms["facilitate"] = infonce_loss(span_reps, context_reps, head, counters=counters)
    if head.gamma_filter != 0:
        dist_s, _ = ib_forward(span_reps, head)
        dist_c, _ = ib_forward(context_reps, head)
        terms["filter"] = kl_loss(dist_s, dist_c).mean()
    terms["total"] = (
        terms["proto"]
        + head.gamma_facilitate * terms["facilitate"]
        + head.gamma_filter * terms["filter"]
    )
    return terms


def typing_stage_loss(
    span_reps: torch.Tensor,
    span_types: Sequence[str],
    context_reps: torch.Tensor,
    prototypes: Mapping[str, torch.Tensor],
    head: TypingHead,
    counters: dict | None = None,
) -> torch.Tensor:
    return typing_stage_terms(span_reps, span_types, context_reps, prototypes, head, counters)["total"]


class TypingModel(nn.Module):
    """Typing encoder + head, pooling gold spans during training."""

    def __init__(self, encoder, head: TypingHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def batch_reps(
        self, sentences: Sequence, train: bool = False, seed: int | None = None
    ) -> tuple[torch.Tensor, list[str], torch.Tensor]:
        """Span reps, gold types, and per-span sentence-context reps."""
        span_rows: list[torch.Tensor] = []
        types: list[str] = []
        ctx_rows: list[torch.Tensor] = []
        for i, sent in enumerate(sentences):
            drop_seed = derive_seed(seed, "drop", i) if (train and seed is not None) else seed
            H = self.encoder(sent.tokens, train=train, seed=drop_seed)
            kept = [sp for sp in sent.spans if sp.end < H.shape[0]]
            if not kept:
                continue
            pairs = [(sp.start, sp.end) for sp in kept]
            ctx = context_repr(H, pairs)
            for pair, sp in zip(pairs, kept):
                span_rows.append(span_repr(H, pair))
                types.append(sp.type)
                ctx_rows.append(ctx)
        if not span_rows:
            empty = torch.zeros((0, self.head.width), dtype=DTYPE)
            return empty, [], empty.clone()
        return torch.stack(span_rows), types, torch.stack(ctx_rows)

    def prototypes_from(
        self,
        sentences: Sequence,
        train: bool = False,
        seed: int | None = None,
        expected_types: Sequence[str] | None = None,
    ) -> dict[str, torch.Tensor]:
        reps, types, _ = self.batch_reps(sentences, train=train, seed=seed)
        return class_prototypes(list(zip(reps, types)), expected_types=expected_types)

    def loss_terms(
        self,
        sentences: Sequence,
        prototypes: Mapping[str, torch.Tensor],
        train: bool = False,
        seed: int | None = None,
        counters: dict | None = None,
    ) -> dict[str, torch.Tensor]:
        reps, types, ctx = self.batch_reps(sentences, train=train, seed=seed)
        return typing_stage_terms(reps, types, ctx, prototypes, self.head, counters)

    def classify(
        self,
        tokens: Sequence[str],
        spans: Sequence[tuple[int, int]],
        prototypes: Mapping[str, torch.Tensor],
    ) -> list[str]:
        if not spans:
            return []
        with torch.no_grad():
            H = self.encoder(list(tokens))
            reps = [span_repr(H, sp) for sp in spans]
        return classify_spans(reps, prototypes, self.head.distance)
