"""Caption generation: nucleus sampling, beam search, candidate scoring, and
hybrid (decoder-likelihood + encoder-similarity) reranking.

The token-level engines are generic over a ``step_fn`` mapping a batch of
prefixes to next-token logits, so they can be driven by the trained model or
by small handcrafted models in tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import log_softmax, softmax

from .data import CaptionText, TokenSequence
from .fluency import FluencyDetector
from .text_embed import TextEmbedder
from .vocab import BOS_ID, EOS_ID, PAD_ID

StepFn = Callable[[np.ndarray], np.ndarray]  # (B, L) int64 prefixes -> (B, V) logits


@dataclass
class SamplingConfig:
    temperature: float = 0.5
    top_p: float = 0.95
    num_candidates: int = 50
    max_len: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")


@dataclass
class RerankWeights:
    w_dec: float = 0.3
    w_enc: float = 0.7

    def __post_init__(self):
        if self.w_dec < 0 or self.w_enc < 0:
            raise ValueError("rerank weights must be nonnegative")
        if self.w_dec + self.w_enc == 0:
            raise ValueError("at least one rerank weight must be positive")


@dataclass
class DecodeConfig:
    mode: str = "sample"  # sample | beam | greedy
    sampling: SamplingConfig = None
    beam_size: int = 4
    weights: RerankWeights = None

    def __post_init__(self):
        if self.mode not in ("sample", "beam", "greedy"):
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.sampling is None:
            self.sampling = SamplingConfig()
        if self.weights is None:
            self.weights = RerankWeights()
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "temperature": self.sampling.temperature,
            "top_p": self.sampling.top_p,
            "num_candidates": self.sampling.num_candidates,
            "max_len": self.sampling.max_len,
            "seed": self.sampling.seed,
            "beam_size": self.beam_size,
            "w_dec": self.weights.w_dec,
            "w_enc": self.weights.w_enc,
        }


@dataclass
class Candidate:
    caption: CaptionText
    tokens: TokenSequence
    decoder_loglik: float  # per-token log-likelihood under the model
    encoder_sim: float | None = None
    fluent: bool | None = None
    hybrid_score: float | None = None

    def to_json(self) -> dict:
        return {
            "caption": self.caption.text,
            "tokens": list(self.tokens.ids),
            "decoder_loglik": self.decoder_loglik,
            "encoder_sim": self.encoder_sim,
            "fluent": self.fluent,
            "hybrid_score": self.hybrid_score,
        }


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Zero out everything beyond the smallest top-probability prefix whose
    cumulative mass reaches ``top_p``; renormalize the survivors.

    Ties on probability are broken by ascending token id.
    """
    if not 0 < top_p <= 1:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ValueError("expected a 1-D probability vector")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("input is not a probability distribution")
    order = np.lexsort((np.arange(probs.size), -probs))
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, top_p - 1e-12, side="left"))
    kept = order[: min(cut + 1, probs.size)]
    out = np.zeros_like(probs)
    out[kept] = probs[kept]
    return out / out.sum()


def _sample_distribution(
    logits: np.ndarray, temperature: float, top_p: float, banned: Sequence[int]
) -> np.ndarray:
    scores = np.asarray(logits, dtype=np.float64).copy()
    for tok in banned:
        scores[tok] = -np.inf
    return nucleus_filter(softmax(scores / temperature), top_p)


def sample_token_sequences(
    step_fn: StepFn,
    num: int,
    max_tokens: int,
    rng: np.random.Generator,
    temperature: float,
    top_p: float,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    pad_id: int = PAD_ID,
    banned_ids: Sequence[int] = (BOS_ID, PAD_ID),
) -> list[tuple[list[int], float]]:
    """Draw ``num`` sequences in parallel; each stops at EOS or is EOS-forced
    at the length cap.

    The returned log-likelihood is accumulated from the model's untruncated,
    temperature-free distribution so it matches a rescoring pass exactly. EOS
    is banned on the first step so captions are never empty.
    """
    prefixes = np.full((num, 1), bos_id, dtype=np.int64)
    loglik = np.zeros(num)
    done = np.zeros(num, dtype=bool)
    for step in range(max_tokens):
        logits = np.asarray(step_fn(prefixes), dtype=np.float64)
        raw_logp = log_softmax(logits, axis=-1)
        chosen = np.full(num, pad_id, dtype=np.int64)
        for row in range(num):
            if done[row]:
                continue
            if step == max_tokens - 1:
                tok = eos_id
            else:
                banned = tuple(banned_ids) + ((eos_id,) if step == 0 else ())
                dist = _sample_distribution(logits[row], temperature, top_p, banned)
                tok = int(rng.choice(dist.size, p=dist))
            chosen[row] = tok
            loglik[row] += raw_logp[row, tok]
            if tok == eos_id:
                done[row] = True
        prefixes = np.concatenate([prefixes, chosen[:, None]], axis=1)
        if done.all():
            break
    results = []
    for row in range(num):
        ids = prefixes[row].tolist()
        end = ids.index(eos_id, 1)
        results.append((ids[: end + 1], float(loglik[row])))
    return results


def beam_search_tokens(
    step_fn: StepFn,
    beam_size: int,
    max_tokens: int,
    bos_id: int = BOS_ID,
    eos_id: int = EOS_ID,
    banned_ids: Sequence[int] = (BOS_ID, PAD_ID),
    length_normalize: bool = True,
) -> tuple[list[int], float]:
    """Length-normalized beam search; beam size 1 reduces to greedy decoding."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live: list[tuple[list[int], float]] = [([bos_id], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for step in range(max_tokens):
        if not live:
            break
        batch = np.asarray([ids for ids, _ in live], dtype=np.int64)
        logp = log_softmax(np.asarray(step_fn(batch), dtype=np.float64), axis=-1)
        expansions: list[tuple[list[int], float]] = []
        for (ids, total), row in zip(live, logp):
            if step == max_tokens - 1:
                allowed = [eos_id]
            else:
                blocked = set(banned_ids) | ({eos_id} if step == 0 else set())
                allowed = [t for t in range(row.size) if t not in blocked]
            for tok in allowed:
                expansions.append((ids + [tok], total + float(row[tok])))
        live = []
        for ids, total in sorted(expansions, key=lambda c: (-c[1], c[0]))[:beam_size]:
            if ids[-1] == eos_id:
                finished.append((ids, total))
            else:
                live.append((ids, total))
    if not finished:
        raise RuntimeError("beam search produced no finished hypothesis")

    def rank(candidate: tuple[list[int], float]):
        ids, total = candidate
        norm = total / (len(ids) - 1) if length_normalize else total
        return (-norm, -total, ids)

    ids, total = min(finished, key=rank)
    score = total / (len(ids) - 1) if length_normalize else total
    return ids, float(score)


def score_tokens_with_step_fn(step_fn: StepFn, ids: Sequence[int]) -> float:
    """Sum of log p(token | prefix) over everything after BOS, via the same
    log-softmax path the samplers use."""
    ids = list(ids)
    if len(ids) < 2:
        raise ValueError("need at least BOS plus one token to score")
    total = 0.0
    for n in range(1, len(ids)):
        prefix = np.asarray([ids[:n]], dtype=np.int64)
        logp = log_softmax(np.asarray(step_fn(prefix), dtype=np.float64), axis=-1)
        total += float(logp[0, ids[n]])
    return total


def encoder_score(
    audio_embedding: torch.Tensor, caption: CaptionText | str, embedder: TextEmbedder
) -> float:
    """Cosine similarity between the pooled audio embedding and the caption's
    text embedding, in [-1, 1]."""
    text_vec = embedder.embed(caption).detach()
    audio_vec = torch.as_tensor(audio_embedding, dtype=torch.float64).detach()
    norm_a, norm_c = torch.linalg.norm(audio_vec), torch.linalg.norm(text_vec)
    if float(norm_a) == 0.0 or float(norm_c) == 0.0:
        raise ValueError("zero-norm embedding in encoder score")
    return float((audio_vec @ text_vec) / (norm_a * norm_c))


def rerank(
    candidates: list[Candidate],
    weights: RerankWeights,
    fluency_detector: FluencyDetector | None = None,
) -> Candidate:
    """Filter disfluent candidates (kept only if all are flagged), collapse
    exact duplicates, score ``w_dec * loglik + w_enc * sim``, return the best.

    Ties break on higher decoder log-likelihood, then lexicographic caption.
    """
    if not candidates:
        raise ValueError("cannot rerank an empty candidate set")
    for cand in candidates:
        if cand.fluent is None:
            cand.fluent = fluency_detector.is_fluent(cand.caption) if fluency_detector else True
    pool = [c for c in candidates if c.fluent]
    if not pool:
        pool = list(candidates)
    seen: set[str] = set()
    unique = []
    for cand in pool:
        if cand.caption.text not in seen:
            seen.add(cand.caption.text)
            unique.append(cand)
    for cand in unique:
        sim = cand.encoder_sim
        if sim is None:
            if weights.w_enc > 0:
                raise ValueError("encoder similarity required when w_enc > 0")
            sim = 0.0
        cand.hybrid_score = weights.w_dec * cand.decoder_loglik + weights.w_enc * sim
    return min(unique, key=lambda c: (-c.hybrid_score, -c.decoder_loglik, c.caption.text))


def dump_candidates(path: str | Path, per_item: dict[str, list[Candidate]]) -> None:
    """Candidate dump: one JSONL row per item with all candidate fields."""
    lines = [
        json.dumps({"id": item_id, "candidates": [c.to_json() for c in cands]}, sort_keys=True)
        for item_id, cands in per_item.items()
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
