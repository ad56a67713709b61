"""Caption text-embedding providers.

Training supervises the audio embedding against a *frozen* text embedding, so
two providers are offered: a file of precomputed vectors dumped by an external
embedding model, and a self-contained bag-of-words table that is frozen after
random initialization to imitate such a provider.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Protocol

import torch
from torch import nn

from .data import CaptionText, normalize_caption
from .vocab import BOS_ID, EOS_ID, PAD_ID, Tokenizer

EMBED_FILE_MAGIC = b"ACEMBD01"
DEFAULT_INSTRUCTION = "Represent the audio caption:"


class TextEmbedder(Protocol):
    name: str
    dim: int

    def embed(self, text: str | CaptionText) -> torch.Tensor: ...


def caption_key(text: str | CaptionText) -> str:
    """Stable lookup key for a caption: digest of its normalized text."""
    normalized = text.text if isinstance(text, CaptionText) else normalize_caption(text)
    return hashlib.sha256(normalized.encode("utf-8")).hexdigest()


class BagOfWordsEmbedder(nn.Module):
    """Mean of per-word vectors from a randomly initialized table.

    Frozen by default so the text side behaves like an external provider; pass
    ``trainable=True`` only for experiments that deliberately train both sides.
    """

    name = "bag-of-words"

    def __init__(self, tokenizer: Tokenizer, dim: int = 64, seed: int = 0, trainable: bool = False):
        super().__init__()
        self.tokenizer = tokenizer
        self.dim = dim
        self.table = nn.Parameter(torch.empty(tokenizer.vocab_size, dim, dtype=torch.float64))
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.table.normal_(0.0, 1.0, generator=generator)
        self.table.requires_grad_(trainable)
        self._cache: dict[str, torch.Tensor] = {} if not trainable else None

    def embed(self, text: str | CaptionText) -> torch.Tensor:
        raw = text.text if isinstance(text, CaptionText) else text
        if self._cache is not None and raw in self._cache:
            return self._cache[raw]
        ids = [i for i in self.tokenizer.encode(raw) if i not in (BOS_ID, EOS_ID, PAD_ID)]
        if not ids:
            raise ValueError(f"cannot embed empty caption {raw!r}")
        vec = self.table[torch.tensor(ids, dtype=torch.long)].mean(dim=0)
        if self._cache is not None:
            vec = vec.detach()
            self._cache[raw] = vec
        return vec


class PrecomputedEmbedder:
    """File-backed caption embeddings keyed by normalized-text digest."""

    def __init__(self, vectors: dict[str, torch.Tensor], dim: int, name: str, instruction: str):
        self.vectors = vectors
        self.dim = dim
        self.name = name
        self.instruction = instruction

    def embed(self, text: str | CaptionText) -> torch.Tensor:
        key = caption_key(text)
        if key not in self.vectors:
            raw = text.text if isinstance(text, CaptionText) else text
            raise KeyError(f"no precomputed embedding for caption {raw!r}")
        return self.vectors[key]

    @classmethod
    def load(cls, path: str | Path) -> "PrecomputedEmbedder":
        with open(path, "rb") as f:
            magic = f.read(len(EMBED_FILE_MAGIC))
            if magic != EMBED_FILE_MAGIC:
                raise ValueError(f"{path}: not an embedding file (bad magic {magic!r})")
            name = _read_str(f)
            instruction = _read_str(f)
            (dim,), (count,) = struct.unpack("<Q", f.read(8)), struct.unpack("<Q", f.read(8))
            vectors = {}
            for _ in range(count):
                key = _read_str(f)
                data = torch.frombuffer(bytearray(f.read(dim * 8)), dtype=torch.float64)
                vectors[key] = data.clone()
        return cls(vectors=vectors, dim=dim, name=name, instruction=instruction)


def write_embedding_file(
    path: str | Path,
    embeddings: dict[str, torch.Tensor],
    provider_name: str,
    instruction: str = DEFAULT_INSTRUCTION,
) -> None:
    """Persist caption embeddings: header (provider, instruction, dim) + entries."""
    if not embeddings:
        raise ValueError("refusing to write an empty embedding file")
    dims = {int(v.numel()) for v in embeddings.values()}
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
    (dim,) = dims
    with open(path, "wb") as f:
        f.write(EMBED_FILE_MAGIC)
        _write_str(f, provider_name)
        _write_str(f, instruction)
        f.write(struct.pack("<Q", dim))
        f.write(struct.pack("<Q", len(embeddings)))
        for key in sorted(embeddings):
            _write_str(f, key)
            f.write(embeddings[key].detach().to(torch.float64).numpy().tobytes())


def _write_str(f, s: str) -> None:
    data = s.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_str(f) -> str:
    (length,) = struct.unpack("<I", f.read(4))
    return f.read(length).decode("utf-8")
