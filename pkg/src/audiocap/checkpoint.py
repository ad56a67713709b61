"""Versioned binary checkpoints: all parameters (including the frozen
extractor and its fingerprint), configs, tokenizer, optimizer moments, and the
validation accuracy used for selection.

The format is deterministic (sorted header, sorted tensor order, raw float64
payloads) so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .decoder import CaptionDecoder, DecoderConfig
from .encoder import AudioEncoder, EncoderConfig
from .features import FrozenConvExtractor
from .model import Captioner
from .text_embed import BagOfWordsEmbedder
from .vocab import SPECIAL_TOKENS, Tokenizer

CHECKPOINT_MAGIC = b"ACCKPT01"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    decoder_config: DecoderConfig
    tokenizer_tokens: list[str]
    extractor_seed: int
    embed_seed: int
    extractor_fingerprint: str
    tensors: dict[str, torch.Tensor]
    optimizer_state: dict | None = None
    val_accuracy: float | None = None
    train_config: dict | None = None

    def restore_captioner(self) -> Captioner:
        tokenizer = Tokenizer(words=self.tokenizer_tokens[len(SPECIAL_TOKENS) :])
        extractor = FrozenConvExtractor(
            n_mels=self.encoder_config.n_mels,
            out_dim=self.encoder_config.extractor_dim,
            seed=self.extractor_seed,
        )
        encoder = AudioEncoder(self.encoder_config)
        decoder = CaptionDecoder(self.decoder_config)
        embedder = BagOfWordsEmbedder(
            tokenizer, dim=self.encoder_config.embed_dim, seed=self.embed_seed
        )
        captioner = Captioner(extractor, encoder, decoder, embedder, tokenizer)
        captioner.load_state_dict({k: v for k, v in self.tensors.items()})
        if captioner.extractor.fingerprint() != self.extractor_fingerprint:
            raise CheckpointError("restored extractor fingerprint mismatch")
        return captioner


def optimizer_state_dict(optimizer: torch.optim.Optimizer, named_params: dict[str, torch.nn.Parameter]) -> dict:
    """Canonical, name-keyed AdamW state for serialization."""
    by_param = {id(p): name for name, p in named_params.items()}
    state: dict[str, dict] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            slot = optimizer.state.get(p)
            if not slot:
                continue
            name = by_param[id(p)]
            state[name] = {
                "step": int(slot["step"]),
                "exp_avg": slot["exp_avg"],
                "exp_avg_sq": slot["exp_avg_sq"],
            }
    hyper = {
        k: optimizer.param_groups[0][k] for k in ("lr", "betas", "eps", "weight_decay")
    }
    hyper["betas"] = list(hyper["betas"])
    return {"type": "adamw", "hyper": hyper, "state": state}


def load_optimizer_state(
    optimizer: torch.optim.Optimizer,
    saved: dict,
    named_params: dict[str, torch.nn.Parameter],
) -> None:
    for name, slot in saved["state"].items():
        param = named_params[name]
        optimizer.state[param] = {
            "step": torch.tensor(float(slot["step"])),
            "exp_avg": slot["exp_avg"].clone(),
            "exp_avg_sq": slot["exp_avg_sq"].clone(),
        }


def save_checkpoint(
    path: str | Path,
    captioner: Captioner,
    extractor_seed: int,
    embed_seed: int,
    optimizer_state: dict | None = None,
    val_accuracy: float | None = None,
    train_config: dict | None = None,
) -> None:
    tensors: dict[str, torch.Tensor] = dict(captioner.state_dict())
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"type": optimizer_state["type"], "hyper": optimizer_state["hyper"], "steps": {}}
        for name, slot in optimizer_state["state"].items():
            opt_meta["steps"][name] = int(slot["step"])
            tensors[f"optim/{name}/exp_avg"] = slot["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = slot["exp_avg_sq"]

    names = sorted(tensors)
    index = [[name, str(tensors[name].dtype), list(tensors[name].shape)] for name in names]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_config": asdict(captioner.encoder_config),
        "decoder_config": asdict(captioner.decoder_config),
        "tokenizer_tokens": captioner.tokenizer.tokens,
        "extractor_seed": extractor_seed,
        "embed_seed": embed_seed,
        "extractor_fingerprint": captioner.extractor.fingerprint(),
        "val_accuracy": val_accuracy,
        "train_config": train_config,
        "optimizer": opt_meta,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name in names:
            f.write(tensors[name].detach().cpu().numpy().tobytes(order="C"))


_DTYPES = {"torch.float64": np.float64, "torch.float32": np.float32, "torch.int64": np.int64}


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format version {header.get('format_version')} "
                f"!= supported {CHECKPOINT_VERSION}"
            )
        tensors: dict[str, torch.Tensor] = {}
        for name, dtype_str, shape in header["tensors"]:
            np_dtype = _DTYPES[dtype_str]
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * np_dtype().itemsize), dtype=np_dtype)
            tensors[name] = torch.from_numpy(data.copy().reshape(shape))

    optimizer_state = None
    if header["optimizer"] is not None:
        state = {}
        for name, step in header["optimizer"]["steps"].items():
            state[name] = {
                "step": step,
                "exp_avg": tensors.pop(f"optim/{name}/exp_avg"),
                "exp_avg_sq": tensors.pop(f"optim/{name}/exp_avg_sq"),
            }
        optimizer_state = {
            "type": header["optimizer"]["type"],
            "hyper": header["optimizer"]["hyper"],
            "state": state,
        }

    return Checkpoint(
        encoder_config=EncoderConfig(**header["encoder_config"]),
        decoder_config=DecoderConfig(**header["decoder_config"]),
        tokenizer_tokens=header["tokenizer_tokens"],
        extractor_seed=header["extractor_seed"],
        embed_seed=header["embed_seed"],
        extractor_fingerprint=header["extractor_fingerprint"],
        tensors=tensors,
        optimizer_state=optimizer_state,
        val_accuracy=header["val_accuracy"],
        train_config=header["train_config"],
    )
