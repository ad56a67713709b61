"""Bidirectional InfoNCE between pooled audio embeddings and caption text
embeddings, plus the multitask combination with the caption NLL.

Similarities are exponentiated temperature-scaled cosines; the loss uses
in-batch negatives in both directions and averages the two, aggregated as a
mean over the batch so the NLL/InfoNCE balance is batch-size independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5
    alpha: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def scaled_similarity(a: torch.Tensor, c: torch.Tensor, temperature: float) -> torch.Tensor:
    """exp(cos(a, c) / temperature). Errors on zero-norm inputs."""
    a = torch.as_tensor(a, dtype=torch.float64)
    c = torch.as_tensor(c, dtype=torch.float64)
    norm_a, norm_c = torch.linalg.norm(a), torch.linalg.norm(c)
    if float(norm_a) == 0.0 or float(norm_c) == 0.0:
        raise ValueError("zero-norm embedding in similarity")
    return torch.exp((a @ c) / (norm_a * norm_c) / temperature)


def infonce_loss(audio: torch.Tensor, text: torch.Tensor, temperature: float) -> torch.Tensor:
    """Bidirectional in-batch InfoNCE; row i of each batch is the positive pair.

    The audio-side direction normalizes each positive over all audio rows, the
    text-side direction over all text rows; the result is their average, taken
    as the mean over the batch.
    """
    audio = torch.as_tensor(audio, dtype=torch.float64)
    text = torch.as_tensor(text, dtype=torch.float64)
    if audio.ndim != 2 or text.ndim != 2:
        raise ValueError("expected (B, D) embedding batches")
    if audio.shape[0] != text.shape[0]:
        raise ValueError(f"batch size mismatch: {audio.shape[0]} audio vs {text.shape[0]} text")
    norms_a = torch.linalg.norm(audio, dim=1)
    norms_c = torch.linalg.norm(text, dim=1)
    if bool((norms_a == 0).any()) or bool((norms_c == 0).any()):
        raise ValueError("zero-norm embedding in batch")
    cosine = (audio / norms_a[:, None]) @ (text / norms_c[:, None]).T
    logits = cosine / temperature  # logits[i, j] = cos(a_i, c_j) / tau
    diag = torch.arange(audio.shape[0], device=audio.device)
    # audio-side: denominator over audio rows j of sim(a_j, c_i) -> columns
    loss_a = -torch.log_softmax(logits, dim=0)[diag, diag].mean()
    # text-side: denominator over text rows j of sim(a_i, c_j) -> rows
    loss_c = -torch.log_softmax(logits, dim=1)[diag, diag].mean()
    return 0.5 * (loss_a + loss_c)


def multitask_loss(nll: torch.Tensor, infonce: torch.Tensor, alpha: float) -> torch.Tensor:
    """Total training loss: NLL plus alpha-weighted InfoNCE."""
    if not (torch.isfinite(torch.as_tensor(nll)) and torch.isfinite(torch.as_tensor(infonce))):
        raise ValueError("non-finite loss component")
    return nll + alpha * infonce
