"""Autoregressive transformer decoder with cross-attention over audio features,
and the caption negative log-likelihood loss.

Token embeddings are tied to the output projection. Inputs are batch-first
(B, L); the single-sequence form (L,) is accepted and squeezed back.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .vocab import PAD_ID


@dataclass
class DecoderConfig:
    vocab_size: int
    layers: int = 2
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 30

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must divide evenly into heads")


def _attention(q, k, v, mask=None):
    scores = (q @ k.transpose(-1, -2)) / q.shape[-1] ** 0.5
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.self_norm = nn.LayerNorm(dim)
        self.self_qkv = nn.Linear(dim, 3 * dim)
        self.self_out = nn.Linear(dim, dim)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_q = nn.Linear(dim, dim)
        self.cross_kv = nn.Linear(dim, 2 * dim)
        self.cross_out = nn.Linear(dim, dim)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ffn_dim)
        self.ff2 = nn.Linear(ffn_dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        b, _, t, _ = x.shape
        return x.transpose(1, 2).reshape(b, t, self.heads * self.head_dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        h = self.self_norm(x)
        q, k, v = self.self_qkv(h).chunk(3, dim=-1)
        attn = _attention(self._split(q), self._split(k), self._split(v), causal_mask)
        x = x + self.self_out(self._merge(attn))

        h = self.cross_norm(x)
        q = self._split(self.cross_q(h))
        k, v = self.cross_kv(memory).chunk(2, dim=-1)
        attn = _attention(q, self._split(k), self._split(v))
        x = x + self.cross_out(self._merge(attn))

        h = self.ff_norm(x)
        return x + self.ff2(torch.nn.functional.gelu(self.ff1(h)))


class CaptionDecoder(nn.Module):
    """Causally masked self-attention over caption tokens, cross-attention over
    the encoder's contextual audio frames. Position n's logits depend only on
    tokens 1..n and the audio."""

    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.model_dim)
        self.pos_embed = nn.Embedding(config.max_len, config.model_dim)
        self.layers = nn.ModuleList(
            DecoderLayer(config.model_dim, config.heads, config.ffn_dim)
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.model_dim)
        self.to(torch.float64)

    def forward(self, memory: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """memory: (S, D) or (B, S, D) audio frames; tokens: (L,) or (B, L) ids.
        Returns next-token logits of shape (..., L, vocab_size)."""
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        b, length = tokens.shape
        if length > self.config.max_len:
            raise ValueError(f"prefix length {length} exceeds max_len {self.config.max_len}")
        if memory.ndim == 2:
            memory = memory.unsqueeze(0).expand(b, -1, -1)

        x = self.embed(tokens) + self.pos_embed.weight[:length]
        causal = torch.triu(
            torch.ones(length, length, dtype=torch.bool, device=tokens.device), diagonal=1
        )
        for layer in self.layers:
            x = layer(x, memory, causal)
        h = self.final_norm(x)
        logits = h @ self.embed.weight.T
        return logits.squeeze(0) if squeeze else logits


def nll_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID) -> torch.Tensor:
    """Mean over the batch of the per-sequence sum of -log p(target token).

    PAD target positions are masked out of the sum. ``logits`` rows must align
    with ``targets`` (BOS-shifted inputs; targets end with EOS).
    """
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
        targets = targets.unsqueeze(0)
    vocab_size = logits.shape[-1]
    if int(targets.max()) >= vocab_size or int(targets.min()) < 0:
        raise ValueError(f"target id out of range for vocab size {vocab_size}")
    mask = targets != pad_id
    if not bool(mask.any()):
        raise ValueError("all target positions are PAD; empty target")
    log_probs = torch.log_softmax(logits, dim=-1)
    token_nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    per_sequence = (token_nll * mask).sum(dim=-1)
    return per_sequence.mean()


def next_token_accuracy(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD_ID) -> float:
    """Teacher-forced arg-max accuracy over non-PAD target positions."""
    if logits.ndim == 2:
        logits = logits.unsqueeze(0)
        targets = targets.unsqueeze(0)
    mask = targets != pad_id
    if not bool(mask.any()):
        raise ValueError("all target positions are PAD")
    predictions = logits.argmax(dim=-1)
    correct = ((predictions == targets) & mask).sum()
    return float(correct) / float(mask.sum())
