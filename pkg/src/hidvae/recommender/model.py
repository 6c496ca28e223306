"""Encoder-decoder transformer over semantic-ID token streams."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .vocab import BOS, EOS, PAD, TokenVocab


@dataclass
class RecConfig:
    layers: int = 6
    heads: int = 8
    hidden: int = 512
    ff: int | None = None
    dropout: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch: int = 256
    warmup_steps: int = 1000
    epochs: int = 10
    max_history: int = 20
    beam: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.max_history < 1:
            raise ValueError("max_history must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RecConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown recommender config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RecConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class HierarchyAwareEmbedding(nn.Module):
    """``fusion([id_embed(tok); type_embed(level(tok)); tag_vec(tok)])``.

    ``tag_vec`` is a frozen buffer holding the semantic vector of the tag each
    code stands for.
    """

    def __init__(self, vocab: TokenVocab, tag_vectors: np.ndarray, hidden: int):
        super().__init__()
        self.vocab = vocab
        self.id_embed = nn.Embedding(vocab.n_tokens, hidden, padding_idx=PAD)
        self.type_embed = nn.Embedding(vocab.depth + 1, hidden)
        self.register_buffer("tag_vec", torch.as_tensor(tag_vectors, dtype=torch.float32))
        self.register_buffer("types", torch.as_tensor(vocab.level_types()))
        self.fusion = nn.Linear(2 * hidden + self.tag_vec.shape[1], hidden)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.vocab.n_tokens):
            raise ValueError("token index outside the vocabulary")
        parts = [self.id_embed(tokens), self.type_embed(self.types[tokens]), self.tag_vec[tokens]]
        return self.fusion(torch.cat(parts, dim=-1))


class SemanticIDRecommender(nn.Module):
    def __init__(self, config: RecConfig, vocab: TokenVocab, tag_vectors: np.ndarray):
        super().__init__()
        c = config
        self.config = c
        self.vocab = vocab
        self.embed = HierarchyAwareEmbedding(vocab, tag_vectors, c.hidden)
        self.max_enc_len = c.max_history * vocab.depth + 1
        self.enc_pos = nn.Embedding(self.max_enc_len, c.hidden)
        self.dec_pos = nn.Embedding(vocab.depth + 1, c.hidden)
        ff = c.ff or 4 * c.hidden
        enc_layer = nn.TransformerEncoderLayer(c.hidden, c.heads, ff, c.dropout, batch_first=True, norm_first=True)
        dec_layer = nn.TransformerDecoderLayer(c.hidden, c.heads, ff, c.dropout, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, c.layers, norm=nn.LayerNorm(c.hidden),
                                             enable_nested_tensor=False)
        self.decoder = nn.TransformerDecoder(dec_layer, c.layers, norm=nn.LayerNorm(c.hidden))
        self.head = nn.Linear(c.hidden, vocab.n_tokens)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def encode(self, enc_tokens: torch.Tensor):
        pad = enc_tokens == PAD
        pos = torch.arange(enc_tokens.shape[1], device=enc_tokens.device)
        h = self.embed(enc_tokens) + self.enc_pos(pos)
        return self.encoder(h, src_key_padding_mask=pad), pad

    def decode(self, dec_tokens: torch.Tensor, memory: torch.Tensor, memory_pad: torch.Tensor) -> torch.Tensor:
        """Logits over the flat vocabulary at every decoder position."""
        T = dec_tokens.shape[1]
        pos = torch.arange(T, device=dec_tokens.device)
        h = self.embed(dec_tokens) + self.dec_pos(pos)
        causal = torch.triu(torch.full((T, T), float("-inf"), device=h.device), diagonal=1)
        out = self.decoder(h, memory, tgt_mask=causal, memory_key_padding_mask=memory_pad)
        return self.head(out)

    def forward(self, enc_tokens, dec_tokens):
        memory, pad = self.encode(enc_tokens)
        return self.decode(dec_tokens, memory, pad)

    def level_logits(self, logits: torch.Tensor, level: int) -> torch.Tensor:
        off = self.vocab.offsets[level]
        return logits[..., off:off + self.vocab.sizes[level]]


def history_tokens(history_ids, vocab: TokenVocab, max_history: int) -> list[int]:
    """Flatten the most recent ``max_history`` IDs, coarse to fine, then EOS."""
    recent = list(history_ids)[-max_history:] if max_history else list(history_ids)
    toks: list[int] = []
    for sid in recent:
        toks.extend(vocab.encode_id(sid))
    toks.append(EOS)
    return toks


def pad_batch(seqs: list[list[int]], length: int | None = None) -> torch.Tensor:
    length = length or max(len(s) for s in seqs)
    out = torch.full((len(seqs), length), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def target_tokens(sid, vocab: TokenVocab) -> list[int]:
    return [BOS] + vocab.encode_id(sid)


def per_level_ce(model: SemanticIDRecommender, logits: torch.Tensor, targets: torch.Tensor) -> list[torch.Tensor]:
    """CE at each ID position, restricted to that position's code block.

    ``targets`` holds codes (not flat tokens), shape ``(B, depth)``.
    """
    return [F.cross_entropy(model.level_logits(logits[:, l], l), targets[:, l]) for l in range(model.vocab.depth)]
