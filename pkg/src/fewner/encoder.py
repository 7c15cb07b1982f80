"""Toy transformer token encoder used by both pipeline stages.

A hand-rolled post-LN transformer (learned word embeddings + sinusoidal
positions, scaled dot-product attention, GELU feed-forward) in float64,
small enough for finite-difference gradient checks.  Index 0 of the
embedding table is the reserved unknown row, shared with the attack
mask placeholder so masking a word is the same as making it OOV.
"""

from __future__ import annotations

import logging
import math
from typing import Iterable, Protocol, Sequence

import torch
from torch import nn

from .corpus import Sentence
from .errors import CapabilityError

DTYPE = torch.float64
UNK_INDEX = 0
MASK_TOKEN = "<mask>"

log = logging.getLogger(__name__)


class Vocabulary:
    """Sorted word-to-index map; index 0 is reserved for unknown words."""

    def __init__(self, words: Iterable[str]):
        uniq = sorted(set(words) - {MASK_TOKEN})
        self.words: tuple[str, ...] = tuple(uniq)
        self._index = {w: i + 1 for i, w in enumerate(uniq)}

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sentence]) -> "Vocabulary":
        return cls(tok for sent in sentences for tok in sent.tokens)

    def __len__(self) -> int:
        return len(self.words) + 1

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, UNK_INDEX)

    def indices(self, tokens: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.index(t) for t in tokens], dtype=torch.long)


def sinusoid_positions(max_len: int, width: int) -> torch.Tensor:
    pos = torch.arange(max_len, dtype=DTYPE)[:, None]
    idx = torch.arange(width, dtype=DTYPE)[None, :]
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=DTYPE), 2 * (idx // 2) / width)
    table = torch.where(idx % 2 == 0, torch.sin(angle), torch.cos(angle))
    return table


class _Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(width, width, dtype=DTYPE)
        self.k = nn.Linear(width, width, dtype=DTYPE)
        self.v = nn.Linear(width, width, dtype=DTYPE)
        self.out = nn.Linear(width, width, dtype=DTYPE)
        self.ff1 = nn.Linear(width, 4 * width, dtype=DTYPE)
        self.ff2 = nn.Linear(4 * width, width, dtype=DTYPE)
        self.norm1 = nn.LayerNorm(width, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(width, dtype=DTYPE)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        n, width = x.shape
        head_dim = width // self.heads

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.reshape(n, self.heads, head_dim).transpose(0, 1)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(1, 2) / math.sqrt(head_dim)
        mixed = torch.softmax(scores, dim=-1) @ v
        return self.out(mixed.transpose(0, 1).reshape(n, width))

    def forward(self, x: torch.Tensor, drop) -> torch.Tensor:
        x = self.norm1(x + drop(self.attention(x)))
        x = self.norm2(x + drop(self.ff2(torch.nn.functional.gelu(self.ff1(x)))))
        return x


class TokenEncoder(nn.Module):
    """Maps a token list to an n-by-width matrix of contextual rows."""

    def __init__(
        self,
        vocab: Vocabulary,
        width: int = 32,
        blocks: int = 2,
        heads: int = 2,
        dropout: float = 0.2,
        max_len: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        if not 0 <= dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        self.vocab = vocab
        self.width = width
        self.dropout = dropout
        self.max_len = max_len
        self.embedding = nn.Embedding(len(vocab), width, dtype=DTYPE)
        self.blocks = nn.ModuleList(_Block(width, heads) for _ in range(blocks))
        self.register_buffer("positions", sinusoid_positions(max_len, width))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "embedding.weight":
                    # unit scale: lexical identity must not be drowned out
                    # by the O(1) fixed sinusoids it is summed with
                    p.normal_(0.0, 1.0, generator=gen)
                elif p.dim() >= 2:
                    p.normal_(0.0, 0.02, generator=gen)
                elif name.endswith("weight"):
                    p.fill_(1.0)  # layer-norm gains
                else:
                    p.zero_()

    def config(self) -> dict:
        return {
            "width": self.width,
            "blocks": len(self.blocks),
            "heads": self.blocks[0].heads if len(self.blocks) else 0,
            "dropout": self.dropout,
            "max_len": self.max_len,
        }

    def forward(
        self,
        tokens: Sequence[str],
        train: bool = False,
        seed: int | None = None,
    ) -> torch.Tensor:
        if len(tokens) == 0:
            raise ValueError("cannot encode an empty token sequence")
        if len(tokens) > self.max_len:
            log.warning("truncating %d-token input to max length %d", len(tokens), self.max_len)
            tokens = tokens[: self.max_len]
        gen = None
        if train and self.dropout > 0:
            if seed is None:
                raise ValueError("training-mode encoding requires a dropout seed")
            gen = torch.Generator().manual_seed(seed)

        def drop(t: torch.Tensor) -> torch.Tensor:
            if gen is None:
                return t
            keep = (torch.rand(t.shape, generator=gen, dtype=DTYPE) >= self.dropout).to(DTYPE)
            return t * keep / (1.0 - self.dropout)

        x = self.embedding(self.vocab.indices(tokens)) + self.positions[: len(tokens)]
        x = drop(x)
        for block in self.blocks:
            x = block(x, drop)
        return x


def save_encoder(encoder: TokenEncoder, path) -> None:
    torch.save(
        {
            "version": 1,
            "words": list(encoder.vocab.words),
            "config": encoder.config(),
            "state": encoder.state_dict(),
        },
        path,
    )


def load_encoder(path) -> TokenEncoder:
    payload = torch.load(path, weights_only=True)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported encoder checkpoint version: {payload.get('version')}")
    encoder = TokenEncoder(Vocabulary(payload["words"]), **payload["config"])
    encoder.load_state_dict(payload["state"])
    return encoder


class PretrainedAdapter(Protocol):
    """Optional boundary for plugging in an external pretrained encoder."""

    def encode(self, tokens: Sequence[str]) -> torch.Tensor: ...


def adapter_encode(adapter: PretrainedAdapter | None, tokens: Sequence[str]) -> torch.Tensor:
    """Delegate encoding to an external adapter with the n-by-C contract."""
    if adapter is None:
        raise CapabilityError("no pretrained encoder adapter configured")
    out = adapter.encode(list(tokens))
    if out.dim() != 2 or out.shape[0] != len(tokens):
        raise ValueError(f"adapter returned shape {tuple(out.shape)} for {len(tokens)} tokens")
    return out
