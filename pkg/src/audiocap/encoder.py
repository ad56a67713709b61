"""Audio encoder stack: strided conv downsampling, Conformer contextualization,
and mean-pooled audio embeddings.

Sequences are processed unbatched as (T, D) matrices; the attention is
unmasked and position-aware via a learned relative-position bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import Waveform
from .features import FeatureSequence, FrozenConvExtractor, read_feature_file


@dataclass
class EncoderConfig:
    extractor_kind: str = "toy_logmel_conv"  # or "external_precomputed"
    n_mels: int = 40
    extractor_dim: int = 64
    downsample_rate: int = 3
    conformer_layers: int = 2
    model_dim: int = 128
    conv_kernel: int = 7
    attention_heads: int = 4
    ffn_mult: int = 4
    max_rel_dist: int = 64
    embed_dim: int = 64

    def __post_init__(self):
        if self.extractor_kind not in ("toy_logmel_conv", "external_precomputed"):
            raise ValueError(f"unknown extractor_kind {self.extractor_kind!r}")
        if self.downsample_rate < 1:
            raise ValueError("downsample_rate must be >= 1")
        if self.conformer_layers < 1:
            raise ValueError("conformer_layers must be >= 1")
        if self.model_dim % self.attention_heads != 0:
            raise ValueError("model_dim must divide evenly into attention heads")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd for same-length output")


class Downsampler(nn.Module):
    """Strided 1-D conv along time; output length is ceil(T / rate)."""

    def __init__(self, dim: int, rate: int):
        super().__init__()
        if rate < 1:
            raise ValueError(f"rate must be >= 1, got {rate}")
        self.rate = rate
        self.conv = nn.Conv1d(dim, dim, kernel_size=2 * rate + 1, stride=rate, padding=rate)
        self.to(torch.float64)

    def forward(self, features: FeatureSequence) -> FeatureSequence:
        x = features.frames.T.unsqueeze(0)
        y = self.conv(x).squeeze(0).T
        return FeatureSequence(frames=y, frame_rate=features.frame_rate / self.rate)


def downsample(features: FeatureSequence, downsampler: Downsampler) -> FeatureSequence:
    return downsampler(features)


class RelPosSelfAttention(nn.Module):
    """Multi-head self-attention with a learned, distance-clipped relative bias."""

    def __init__(self, dim: int, heads: int, max_rel_dist: int = 64):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.max_rel_dist = max_rel_dist
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, 2 * max_rel_dist + 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t, dim = x.shape
        h, dh = self.heads, self.head_dim
        q, k, v = self.qkv(self.norm(x)).reshape(t, 3, h, dh).permute(1, 2, 0, 3)
        scores = (q @ k.transpose(-1, -2)) / dh**0.5
        pos = torch.arange(t, device=x.device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_rel_dist, self.max_rel_dist)
        scores = scores + self.rel_bias[:, rel + self.max_rel_dist]
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).permute(1, 0, 2).reshape(t, dim)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.w1 = nn.Linear(dim, mult * dim)
        self.w2 = nn.Linear(mult * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w2(torch.nn.functional.silu(self.w1(self.norm(x))))


class ConvModule(nn.Module):
    """Pointwise-GLU, depthwise conv, norm, swish, pointwise."""

    def __init__(self, dim: int, kernel: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, kernel_size=1)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size=kernel, padding=kernel // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(x).T.unsqueeze(0)
        y = torch.nn.functional.glu(self.pointwise_in(y), dim=1)
        y = self.depthwise(y)
        y = self.mid_norm(y.squeeze(0).T).T.unsqueeze(0)
        y = torch.nn.functional.silu(y)
        y = self.pointwise_out(y)
        return y.squeeze(0).T


class ConformerBlock(nn.Module):
    """Half-step FFN, self-attention, conv module, half-step FFN, final norm,
    each wrapped in a residual connection."""

    def __init__(self, dim: int, heads: int, conv_kernel: int, ffn_mult: int = 4, max_rel_dist: int = 64):
        super().__init__()
        self.ff1 = FeedForward(dim, ffn_mult)
        self.attn = RelPosSelfAttention(dim, heads, max_rel_dist)
        self.conv = ConvModule(dim, conv_kernel)
        self.ff2 = FeedForward(dim, ffn_mult)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


def conformer_forward(features: FeatureSequence, blocks: nn.ModuleList | nn.Module) -> FeatureSequence:
    """Run Conformer block(s) over a contextual feature sequence; shape-preserving."""
    x = features.frames
    modules = blocks if isinstance(blocks, (nn.ModuleList, list)) else [blocks]
    for block in modules:
        x = block(x)
    return FeatureSequence(frames=x, frame_rate=features.frame_rate)


def pool_audio_embedding(contextual: FeatureSequence, projection: nn.Linear) -> torch.Tensor:
    """Arithmetic mean over time, then a learned projection to the text-embedding dim."""
    return projection(contextual.frames.mean(dim=0))


class AudioEncoder(nn.Module):
    """Downsampler + input projection + Conformer stack + pooled embedding head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.downsampler = Downsampler(config.extractor_dim, config.downsample_rate)
        self.input_proj = nn.Linear(config.extractor_dim, config.model_dim)
        self.blocks = nn.ModuleList(
            ConformerBlock(
                config.model_dim,
                config.attention_heads,
                config.conv_kernel,
                config.ffn_mult,
                config.max_rel_dist,
            )
            for _ in range(config.conformer_layers)
        )
        self.embed_proj = nn.Linear(config.model_dim, config.embed_dim)
        self.to(torch.float64)

    def forward(self, features: FeatureSequence) -> FeatureSequence:
        down = self.downsampler(features)
        x = self.input_proj(down.frames)
        contextual = conformer_forward(
            FeatureSequence(frames=x, frame_rate=down.frame_rate), self.blocks
        )
        return contextual

    def embed(self, contextual: FeatureSequence) -> torch.Tensor:
        return pool_audio_embedding(contextual, self.embed_proj)


def build_extractor(config: EncoderConfig, seed: int = 0) -> FrozenConvExtractor:
    return FrozenConvExtractor(n_mels=config.n_mels, out_dim=config.extractor_dim, seed=seed)


def extract_features(
    waveform: Waveform | None,
    config: EncoderConfig,
    extractor: FrozenConvExtractor | None = None,
    feature_path=None,
) -> FeatureSequence:
    """Produce extractor features for one clip.

    ``toy_logmel_conv`` runs the frozen log-mel + conv stack on the waveform;
    ``external_precomputed`` reads them from ``feature_path``.
    """
    if config.extractor_kind == "external_precomputed":
        if feature_path is None:
            raise ValueError("external_precomputed mode requires feature_path")
        return read_feature_file(feature_path)
    if waveform is None:
        raise ValueError("toy_logmel_conv mode requires a waveform")
    if extractor is None:
        raise ValueError("toy_logmel_conv mode requires the frozen extractor instance")
    return extractor.extract(waveform)
