"""Boundary-discriminative span detection (stage 1).

A bank of unit-norm boundary components (one block per BIOES class)
shapes the token space through an angular-margin softmax: the
assignment loss pulls each token toward its nearest same-class
component, the diversity loss pulls it toward the stop-gradient class
centroid, and a linear head carries the mean+max cross-entropy readout.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Boundary, N_BOUNDARY, bioes_to_spans
from .encoder import DTYPE, TokenEncoder
from .errors import ConfigError
from .rng import derive_seed

_NORM_FLOOR = 1e-12


def _check_margin_params(margin: float, tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if not 0 <= margin < math.pi / 2:
        raise ConfigError(f"margin must lie in [0, pi/2), got {margin}")


class ComponentBank(nn.Module):
    """n_classes x n_components x width learnable unit vectors."""

    def __init__(self, n_components: int = 15, width: int = 32, seed: int = 0, n_classes: int = N_BOUNDARY):
        super().__init__()
        if n_components < 1:
            raise ConfigError(f"need at least one component per class, got {n_components}")
        self.n_classes = n_classes
        self.n_components = n_components
        self.width = width
        self.components = nn.Parameter(torch.empty(n_classes, n_components, width, dtype=DTYPE))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.components.normal_(0.0, 1.0, generator=gen)
        self.renormalize()

    @torch.no_grad()
    def renormalize(self) -> None:
        """Project every component back to the unit sphere.

        Vectors already unit-norm to machine precision are left bitwise
        untouched so the projection has true fixed points (re-dividing by
        a norm within a few ulps of 1 would only inject rounding noise).
        """
        norms = torch.linalg.vector_norm(self.components, dim=-1, keepdim=True)
        eps = torch.finfo(self.components.dtype).eps
        norms = torch.where((norms - 1.0).abs() <= 16 * eps, torch.ones_like(norms), norms)
        self.components.div_(norms.clamp_min(_NORM_FLOOR))

    @property
    def flat(self) -> torch.Tensor:
        """All components as one (n_classes * n_components) x width view."""
        return self.components.reshape(-1, self.width)

    def flat_index(self, boundary: int, component: int) -> int:
        return int(boundary) * self.n_components + int(component)


def cosine_matrix(H: torch.Tensor, U: torch.Tensor) -> torch.Tensor:
    """Pairwise cosines between rows of H (L x C) and U (M x C)."""
    hn = torch.linalg.vector_norm(H, dim=-1, keepdim=True).clamp_min(_NORM_FLOOR)
    un = torch.linalg.vector_norm(U, dim=-1, keepdim=True).clamp_min(_NORM_FLOOR)
    return ((H / hn) @ (U / un).T).clamp(-1.0, 1.0)


def _margined_cosine(cos_t: torch.Tensor, margin: float) -> torch.Tensor:
    # cos(theta + m) = cos t * cos m - sin t * sin m on the clamped domain;
    # past theta + m = pi the angle clamps, so the logit pins at cos(pi).
    cos_m = math.cos(margin)
    sin_m = math.sin(margin)
    sin_t = torch.sqrt((1.0 - cos_t * cos_t).clamp_min(0.0))
    shifted = cos_t * cos_m - sin_t * sin_m
    return torch.where(cos_t < -cos_m, torch.full_like(shifted, -1.0), shifted)


def _margin_logits(
    H: torch.Tensor, targets: torch.Tensor, U: torch.Tensor, margin: float, tau: float
) -> torch.Tensor:
    """L x M logit matrix: cos/tau everywhere, margined at each row's target."""
    _check_margin_params(margin, tau)
    cos = cosine_matrix(H, U)
    tgt = targets.reshape(-1, 1)
    shifted = _margined_cosine(cos.gather(1, tgt), margin)
    return torch.scatter(cos, 1, tgt, shifted) / tau


def nearest_component(h: torch.Tensor, bank: ComponentBank, boundary: int) -> tuple[int, torch.Tensor]:
    """Index (within the class block) and vector of the most-cosine-similar
    component of class ``boundary``; ties break to the smallest index."""
    if not torch.isfinite(h).all():
        raise ValueError("token representation contains non-finite values")
    if float(torch.linalg.vector_norm(h)) == 0.0:
        raise ValueError("cosine similarity undefined for the zero vector")
    block = bank.components[int(boundary)]
    cos = cosine_matrix(h.reshape(1, -1), block)[0]
    idx = int(np.argmax(cos.detach().numpy()))
    return idx, block[idx]


def margin_prob(h: torch.Tensor, target: int, bank: ComponentBank, margin: float, tau: float) -> torch.Tensor:
    """Angular-margin softmax probability of flat component ``target``.

    The margin applies to the target angle only; the partition runs over
    every component in the bank.
    """
    logits = _margin_logits(
        h.reshape(1, -1), torch.tensor([target]), bank.flat, margin, tau
    )[0]
    weights = torch.exp(logits - logits.max())
    return weights[target] / weights.sum()


def _margin_log_prob(
    H: torch.Tensor, targets: torch.Tensor, U: torch.Tensor, margin: float, tau: float
) -> torch.Tensor:
    logits = _margin_logits(H, targets, U, margin, tau)
    picked = logits.gather(1, targets.reshape(-1, 1)).squeeze(1)
    return picked - torch.logsumexp(logits, dim=1)


def _as_label_tensor(labels: Sequence[Boundary | int]) -> torch.Tensor:
    return torch.tensor([int(l) for l in labels], dtype=torch.long)


def _check_batch(H: torch.Tensor, labels: Sequence) -> None:
    if H.dim() != 2 or H.shape[0] == 0:
        raise ValueError("expected a non-empty L x C batch of token representations")
    if len(labels) != H.shape[0]:
        raise ValueError(f"{len(labels)} labels for {H.shape[0]} tokens")


def assignment_loss(
    H: torch.Tensor, labels: Sequence[Boundary | int], bank: ComponentBank, margin: float, tau: float
) -> torch.Tensor:
    """Mean negative log margin-probability of each token's nearest
    gold-class component (selection detached, probability over the bank)."""
    _check_batch(H, labels)
    y = _as_label_tensor(labels)
    with torch.no_grad():
        block_cos = cosine_matrix(H, bank.flat).reshape(len(y), bank.n_classes, bank.n_components)
        block_cos = block_cos[torch.arange(len(y)), y]
        nearest = torch.from_numpy(np.argmax(block_cos.numpy(), axis=1))
    targets = y * bank.n_components + nearest
    return -_margin_log_prob(H, targets, bank.flat, margin, tau).mean()


def boundary_centroids(bank: ComponentBank) -> torch.Tensor:
    """Per-class component means, n_classes x width."""
    return bank.components.mean(dim=1)


def diversity_loss(
    H: torch.Tensor, labels: Sequence[Boundary | int], bank: ComponentBank, margin: float, tau: float
) -> torch.Tensor:
    """Margin softmax over the detached class centroids with the gold class
    as target; gradient reaches H but never the bank."""
    _check_batch(H, labels)
    centroids = boundary_centroids(bank).detach()
    y = _as_label_tensor(labels)
    return -_margin_log_prob(H, y, centroids, margin, tau).mean()


class SpanHead(nn.Module):
    """Linear boundary classifier plus the stage-1 loss hyperparameters."""

    def __init__(
        self,
        width: int = 32,
        margin: float = 0.01,
        tau: float = 0.025,
        alpha: float = 0.2,
        gamma_assign: float = 0.1,
        gamma_diverse: float = 0.1,
        seed: int = 0,
        n_classes: int = N_BOUNDARY,
    ):
        super().__init__()
        _check_margin_params(margin, tau)
        if alpha < 0 or gamma_assign < 0 or gamma_diverse < 0:
            raise ConfigError("loss weights must be nonnegative")
        self.margin = margin
        self.tau = tau
        self.alpha = alpha
        self.gamma_assign = gamma_assign
        self.gamma_diverse = gamma_diverse
        self.classifier = nn.Linear(width, n_classes, dtype=DTYPE)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.classifier.weight.normal_(0.0, 0.02, generator=gen)
            self.classifier.bias.zero_()


def ce_max_loss(H: torch.Tensor, labels: Sequence[Boundary | int], head: SpanHead) -> torch.Tensor:
    """Mean cross-entropy plus alpha times the worst token's cross-entropy."""
    _check_batch(H, labels)
    logp = torch.log_softmax(head.classifier(H), dim=1)
    ce = -logp[torch.arange(len(labels)), _as_label_tensor(labels)]
    return ce.mean() + head.alpha * ce.max()


def span_stage_terms(
    H: torch.Tensor, labels: Sequence[Boundary | int], bank: ComponentBank, head: SpanHead
) -> dict[str, torch.Tensor]:
    """Stage-1 loss terms; zero-weighted terms are skipped, not computed."""
    zero = torch.zeros((), dtype=DTYPE)
    terms = {
        "classify": ce_max_loss(H, labels, head),
        "assign": zero,
        "diverse": zero,
    }
    if head.gamma_assign != 0:
        terms["assign"] = assignment_loss(H, labels, bank, head.margin, head.tau)
    if head.gamma_diverse != 0:
        terms["diverse"] = diversity_loss(H, labels, bank, head.margin, head.tau)
    terms["total"] = (
        terms["classify"]
        + head.gamma_assign * terms["assign"]
        + head.gamma_diverse * terms["diverse"]
    )
    return terms


def span_stage_loss(
    H: torch.Tensor, labels: Sequence[Boundary | int], bank: ComponentBank, head: SpanHead
) -> torch.Tensor:
    return span_stage_terms(H, labels, bank, head)["total"]


def predict_spans(
    encoder: TokenEncoder,
    head: SpanHead,
    tokens: Sequence[str],
    bank: ComponentBank | None = None,
    mode: str = "head",
) -> list[tuple[int, int]]:
    """Per-token argmax labels decoded into spans with repair.

    mode="head" scores with the linear classifier; mode="centroid" is an
    experimental path scoring by cosine to the class centroids.
    """
    with torch.no_grad():
        H = encoder(list(tokens))
        if mode == "head":
            scores = head.classifier(H)
        elif mode == "centroid":
            if bank is None:
                raise ValueError("centroid decoding requires the component bank")
            scores = cosine_matrix(H, boundary_centroids(bank))
        else:
            raise ValueError(f"unknown decoding mode {mode!r}")
    labels = [Boundary(int(i)) for i in np.argmax(scores.numpy(), axis=1)]
    return bioes_to_spans(labels)


class SpanModel(nn.Module):
    """Encoder + component bank + head, batched over whole sentences."""

    def __init__(self, encoder: TokenEncoder, bank: ComponentBank, head: SpanHead):
        super().__init__()
        self.encoder = encoder
        self.bank = bank
        self.head = head

    def encode_batch(
        self, sentences: Sequence, train: bool = False, seed: int | None = None
    ) -> tuple[torch.Tensor, list[Boundary]]:
        rows, labels = [], []
        for i, sent in enumerate(sentences):
            drop_seed = derive_seed(seed, "drop", i) if (train and seed is not None) else seed
            h = self.encoder(sent.tokens, train=train, seed=drop_seed)
            rows.append(h)
            labels.extend(sent.boundary_labels[: h.shape[0]])
        return torch.cat(rows, dim=0), labels

    def loss_terms(
        self, sentences: Sequence, train: bool = False, seed: int | None = None
    ) -> dict[str, torch.Tensor]:
        H, labels = self.encode_batch(sentences, train=train, seed=seed)
        return span_stage_terms(H, labels, self.bank, self.head)

    def loss(self, sentences: Sequence, train: bool = False, seed: int | None = None) -> torch.Tensor:
        return self.loss_terms(sentences, train=train, seed=seed)["total"]

    def predict(self, tokens: Sequence[str], mode: str = "head") -> list[tuple[int, int]]:
        return predict_spans(self.encoder, self.head, tokens, bank=self.bank, mode=mode)

    def renormalize(self) -> None:
        self.bank.renormalize()
