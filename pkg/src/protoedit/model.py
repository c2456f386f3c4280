"""Encoder-decoder transformer with prototype-aware input and cross-attention.

Three additions on top of a plain pre-norm transformer:

* group embeddings: a learned vector added to every concept token and another
  to every prototype token of the encoder input;
* a scaling module after the encoder that multiplies each hidden channel by
  ``2 * sigmoid(.)`` and exposes the gates for an auxiliary token loss;
* a position indicator: each encoder position carries a distance to the
  nearest concept occurrence in the prototype, embedded in per-head key space
  and added to the cross-attention keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .text import matches_any

CONCEPT, PROTOTYPE = 0, 1

# weights drawn with the small "new module" std; everything else uses init_std
NEW_MODULE_WEIGHTS = (
    "group_concept",
    "group_prototype",
    "scaler.w1.weight",
    "scaler.w2.weight",
    "distance_emb.weight",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_scale: int = 32
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_len: int = 64
    max_distance: int = 16
    dropout: float = 0.1
    init_std: float = 0.02
    init_std_new: float = 5e-3
    group_embedding: bool = True
    scaling_module: bool = True
    position_indicator: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_scale", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the 4 reserved ids plus one token")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_distance < 2:
            raise ValueError("max_distance must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.init_std < 0 or self.init_std_new < 0:
            raise ValueError("init stds must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


TINY_CONFIG = dict(
    d_model=8, n_heads=2, d_scale=4, n_enc_layers=1, n_dec_layers=1, d_ff=16, max_len=24, max_distance=6
)


@dataclass
class EncodedInput:
    """Encoder input ``[concepts, prototype]`` with per-position annotations."""

    tokens: list[str]
    ids: list[int]
    groups: list[int]
    distances: list[int]
    n_concepts: int
    concepts: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (B, n, d), after the scaling module when enabled
    gates: torch.Tensor | None  # (B, n, d) in (0, 1)
    key_mask: torch.Tensor  # (B, n) bool, True = attendable
    distances: torch.Tensor  # (B, n) long


def distance_annotate(
    tokens: Sequence[str], n_concepts: int, concepts: Sequence[str], max_distance: int
) -> list[int]:
    """Concept positions get 0; prototype positions get 1 + distance to the nearest
    concept-matching prototype token, clamped to ``max_distance``.

    A prototype with no concept-matching token is all ``max_distance``.
    """
    if n_concepts < 1 or n_concepts > len(tokens):
        raise ValueError("n_concepts must be in [1, len(tokens)]")
    proto = tokens[n_concepts:]
    n = len(proto)
    hit = [matches_any(t, concepts) for t in proto]
    if not any(hit):
        return [0] * n_concepts + [max_distance] * n
    inf = n + 1
    dist = [inf] * n
    last = -inf
    for i in range(n):
        if hit[i]:
            last = i
        dist[i] = i - last
    last = 2 * n + 1
    for i in range(n - 1, -1, -1):
        if hit[i]:
            last = i
        dist[i] = min(dist[i], last - i)
    return [0] * n_concepts + [min(d + 1, max_distance) for d in dist]


def encode_input(
    concepts: Sequence[str], prototype: Sequence[str], vocab, config: ModelConfig
) -> EncodedInput:
    """Build the encoder input; the prototype is truncated to fit ``max_len``."""
    concepts = list(concepts)
    n_c = len(concepts)
    if n_c < 1:
        raise ValueError("concept set is empty")
    if n_c > config.max_len:
        raise ValueError(f"{n_c} concepts exceed max_len={config.max_len}")
    tokens = concepts + list(prototype)[: config.max_len - n_c]
    return EncodedInput(
        tokens=tokens,
        ids=vocab.encode(tokens),
        groups=[CONCEPT] * n_c + [PROTOTYPE] * (len(tokens) - n_c),
        distances=distance_annotate(tokens, n_c, concepts, config.max_distance),
        n_concepts=n_c,
        concepts=concepts,
    )


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model, bias=False)
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model, bias=False)
        self.o = nn.Linear(d_model, d_model, bias=False)
        self.dropout = nn.Dropout(dropout)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        memory: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        causal: bool = False,
        key_bias: torch.Tensor | None = None,
        return_weights: bool = False,
    ):
        """``key_bias`` (B, n, d_head) is added to the keys of every head."""
        q = self._heads(self.q(query))
        k = self._heads(self.k(memory))
        v = self._heads(self.v(memory))
        if key_bias is not None:
            k = k + key_bias.unsqueeze(1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            m, n = scores.shape[-2:]
            future = torch.ones(m, n, dtype=torch.bool, device=scores.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = self.dropout(weights) @ v
        B, _, m, _ = out.shape
        out = self.o(out.transpose(1, 2).reshape(B, m, -1))
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, c: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(c.d_model)
        self.attn = MultiHeadAttention(c.d_model, c.n_heads, c.dropout)
        self.norm2 = nn.LayerNorm(c.d_model)
        self.ffn = FeedForward(c.d_model, c.d_ff, c.dropout)
        self.dropout = nn.Dropout(c.dropout)

    def forward(self, x, key_mask):
        h = self.norm1(x)
        x = x + self.dropout(self.attn(h, h, key_mask=key_mask))
        return x + self.dropout(self.ffn(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, c: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(c.d_model)
        self.self_attn = MultiHeadAttention(c.d_model, c.n_heads, c.dropout)
        self.norm2 = nn.LayerNorm(c.d_model)
        self.cross_attn = MultiHeadAttention(c.d_model, c.n_heads, c.dropout)
        self.norm3 = nn.LayerNorm(c.d_model)
        self.ffn = FeedForward(c.d_model, c.d_ff, c.dropout)
        self.dropout = nn.Dropout(c.dropout)

    def forward(self, y, memory, memory_mask, key_bias=None):
        h = self.norm1(y)
        y = y + self.dropout(self.self_attn(h, h, causal=True))
        y = y + self.dropout(
            self.cross_attn(self.norm2(y), memory, key_mask=memory_mask, key_bias=key_bias)
        )
        return y + self.dropout(self.ffn(self.norm3(y)))


class ScalingModule(nn.Module):
    """Per-channel gate ``sigmoid(W2 relu(W1 h + b1) + b2)``; output is ``h * 2 * gate``."""

    def __init__(self, d_model: int, d_scale: int):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_scale)
        self.w2 = nn.Linear(d_scale, d_model)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gates = torch.sigmoid(self.w2(torch.relu(self.w1(h))))
        return h * (2.0 * gates), gates


class ProtoEditModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.tok_emb = nn.Embedding(c.vocab_size, c.d_model)
        self.enc_pos = nn.Embedding(c.max_len, c.d_model)
        self.dec_pos = nn.Embedding(c.max_len, c.d_model)
        self.group_concept = nn.Parameter(torch.zeros(c.d_model))
        self.group_prototype = nn.Parameter(torch.zeros(c.d_model))
        self.encoder_layers = nn.ModuleList(EncoderLayer(c) for _ in range(c.n_enc_layers))
        self.enc_norm = nn.LayerNorm(c.d_model)
        self.scaler = ScalingModule(c.d_model, c.d_scale)
        self.distance_emb = nn.Embedding(c.max_distance + 1, c.d_head)
        self.decoder_layers = nn.ModuleList(DecoderLayer(c) for _ in range(c.n_dec_layers))
        self.dec_norm = nn.LayerNorm(c.d_model)
        self.out_proj = nn.Linear(c.d_model, c.vocab_size)
        self.dropout = nn.Dropout(c.dropout)

    # -- encoder -------------------------------------------------------------

    def embed_input(self, ids: torch.Tensor, groups: torch.Tensor) -> torch.Tensor:
        c = self.config
        if ids.shape[-1] > c.max_len:
            raise ValueError(f"input length {ids.shape[-1]} exceeds max_len={c.max_len}")
        if ids.numel() and (int(ids.max()) >= c.vocab_size or int(ids.min()) < 0):
            raise ValueError("token id out of vocabulary range")
        pos = torch.arange(ids.shape[-1], device=ids.device)
        x = self.tok_emb(ids) + self.enc_pos(pos)
        if c.group_embedding:
            group_vecs = torch.stack([self.group_concept, self.group_prototype])
            x = x + group_vecs[groups]
        return x

    def encoder_forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Pre-norm encoder stack with final layer norm; no scaling module."""
        if not torch.isfinite(x).all():
            raise ValueError("non-finite values in encoder input")
        x = self.dropout(x)
        for layer in self.encoder_layers:
            x = layer(x, key_mask)
        return self.enc_norm(x)

    def scaling_forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not torch.isfinite(h).all():
            raise ValueError("non-finite values in scaling module input")
        return self.scaler(h)

    def encode(
        self,
        ids: torch.Tensor,
        groups: torch.Tensor,
        distances: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> EncoderOutput:
        if key_mask is None:
            key_mask = torch.ones_like(ids, dtype=torch.bool)
        h = self.encoder_forward(self.embed_input(ids, groups), key_mask)
        gates = None
        if self.config.scaling_module:
            h, gates = self.scaling_forward(h)
        return EncoderOutput(h, gates, key_mask, distances)

    # -- decoder -------------------------------------------------------------

    def decoder_forward(self, prefix: torch.Tensor, enc: EncoderOutput) -> torch.Tensor:
        """Logits (B, m, V) for every prefix position; prefixes must start with BOS."""
        c = self.config
        if prefix.shape[-1] > c.max_len:
            raise ValueError(f"prefix length {prefix.shape[-1]} exceeds max_len={c.max_len}")
        if prefix.shape[-1] == 0 or bool((prefix[:, 0] != 1).any()):
            raise ValueError("decoder prefix must start with BOS")
        pos = torch.arange(prefix.shape[-1], device=prefix.device)
        y = self.dropout(self.tok_emb(prefix) + self.dec_pos(pos))
        key_bias = self.distance_emb(enc.distances) if c.position_indicator else None
        for layer in self.decoder_layers:
            y = layer(y, enc.hidden, enc.key_mask, key_bias)
        return self.out_proj(self.dec_norm(y))

    def forward(self, ids, groups, distances, key_mask, prefix):
        enc = self.encode(ids, groups, distances, key_mask)
        return self.decoder_forward(prefix, enc), enc

    def cross_attention_score(
        self, h_dec: torch.Tensor, h_enc: torch.Tensor, dist: int, head: int, layer: int = 0
    ) -> torch.Tensor:
        """Unnormalised cross-attention score of one decoder/encoder state pair for one head."""
        attn = self.decoder_layers[layer].cross_attn
        table = self.distance_emb.weight if self.config.position_indicator else None
        return cross_attention_score(
            h_dec, h_enc, attn.q.weight, attn.k.weight, head, attn.d_head, table, dist
        )


def cross_attention_score(
    h_dec: torch.Tensor,
    h_enc: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    head: int,
    d_head: int,
    distance_table: torch.Tensor | None = None,
    dist: int = 0,
) -> torch.Tensor:
    rows = slice(head * d_head, (head + 1) * d_head)
    q = w_q[rows] @ h_dec
    k = w_k[rows] @ h_enc
    if distance_table is not None:
        if not 0 <= dist < distance_table.shape[0]:
            raise ValueError(f"distance {dist} outside [0, {distance_table.shape[0] - 1}]")
        k = k + distance_table[dist]
    return q @ k / math.sqrt(d_head)


def init_parameters(model: ProtoEditModel, seed: int) -> ProtoEditModel:
    """Deterministic in-place initialisation from ``seed``."""
    c = model.config
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".norm" in name or name.startswith(("enc_norm", "dec_norm")):
                p.fill_(1.0)
            else:
                std = c.init_std_new if name in NEW_MODULE_WEIGHTS else c.init_std
                sample = torch.randn(p.shape, generator=gen, dtype=torch.float64) * std
                p.copy_(sample)
    return model


def build_model(config: ModelConfig, seed: int = 0) -> ProtoEditModel:
    return init_parameters(ProtoEditModel(config), seed)
