"""The assembled captioner: frozen extractor, trainable encoder stack and
decoder, the frozen caption text embedder, and the tokenizer.

Generation-side helpers expose the audio as an ``EncodedAudio`` (cross-attention
memory plus pooled embedding) and the decoder as a numpy ``step_fn`` for the
decoding engines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import log_softmax
from torch import nn

from .data import CaptionText, TokenSequence, Waveform
from .decoder import CaptionDecoder, DecoderConfig
from .decoding import Candidate, SamplingConfig, beam_search_tokens, sample_token_sequences
from .encoder import AudioEncoder, EncoderConfig
from .features import FeatureSequence, FrozenConvExtractor
from .text_embed import BagOfWordsEmbedder
from .vocab import Tokenizer


@dataclass
class EncodedAudio:
    """Audio after the encoder stack: contextual frames and pooled embedding."""

    memory: torch.Tensor  # (S, model_dim)
    embedding: torch.Tensor  # (embed_dim,)


class Captioner(nn.Module):
    def __init__(
        self,
        extractor: FrozenConvExtractor,
        encoder: AudioEncoder,
        decoder: CaptionDecoder,
        text_embedder: BagOfWordsEmbedder,
        tokenizer: Tokenizer,
    ):
        super().__init__()
        self.extractor = extractor
        self.encoder = encoder
        self.decoder = decoder
        self.text_embedder = text_embedder
        self.tokenizer = tokenizer

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def decoder_config(self) -> DecoderConfig:
        return self.decoder.config

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def extract(self, waveform: Waveform) -> FeatureSequence:
        return self.extractor.extract(waveform)

    def encode_train(self, features: FeatureSequence) -> tuple[torch.Tensor, torch.Tensor]:
        """Gradient-carrying encoder pass: (memory frames, pooled embedding)."""
        contextual = self.encoder(features)
        return contextual.frames, self.encoder.embed(contextual)

    def encode(self, audio: Waveform | FeatureSequence) -> EncodedAudio:
        if isinstance(audio, Waveform):
            audio = self.extract(audio)
        with torch.no_grad():
            memory, embedding = self.encode_train(audio)
        return EncodedAudio(memory=memory, embedding=embedding)

    def step_fn(self, encoded: EncodedAudio):
        memory = encoded.memory

        def step(prefixes: np.ndarray) -> np.ndarray:
            tokens = torch.from_numpy(np.ascontiguousarray(prefixes)).long()
            with torch.no_grad():
                logits = self.decoder(memory, tokens)
            return logits[:, -1, :].numpy()

        return step

    def _candidate(self, ids: list[int], loglik_sum: float) -> Candidate:
        tokens = TokenSequence(ids=tuple(ids))
        text = self.tokenizer.decode(tokens)
        return Candidate(
            caption=CaptionText(text, source="generated"),
            tokens=tokens,
            decoder_loglik=loglik_sum / (len(ids) - 1),
        )


def _resolve(captioner: Captioner, audio: Waveform | FeatureSequence | EncodedAudio) -> EncodedAudio:
    if isinstance(audio, EncodedAudio):
        return audio
    return captioner.encode(audio)


def sample_candidates(
    captioner: Captioner,
    audio: Waveform | FeatureSequence | EncodedAudio,
    config: SamplingConfig,
    rng: np.random.Generator | None = None,
) -> list[Candidate]:
    """Draw ``config.num_candidates`` nucleus samples for one clip."""
    encoded = _resolve(captioner, audio)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    sequences = sample_token_sequences(
        captioner.step_fn(encoded),
        num=config.num_candidates,
        max_tokens=config.max_len,
        rng=rng,
        temperature=config.temperature,
        top_p=config.top_p,
    )
    return [captioner._candidate(ids, loglik) for ids, loglik in sequences]


def sample_caption(
    captioner: Captioner,
    audio: Waveform | FeatureSequence | EncodedAudio,
    config: SamplingConfig,
    rng: np.random.Generator | None = None,
) -> Candidate:
    """One nucleus-sampled caption (a single-candidate draw)."""
    single = SamplingConfig(
        temperature=config.temperature,
        top_p=config.top_p,
        num_candidates=1,
        max_len=config.max_len,
        seed=config.seed,
    )
    return sample_candidates(captioner, audio, single, rng=rng)[0]


def beam_search(
    captioner: Captioner,
    audio: Waveform | FeatureSequence | EncodedAudio,
    beam_size: int,
    max_len: int = 24,
) -> Candidate:
    """Length-normalized beam search over the trained model."""
    encoded = _resolve(captioner, audio)
    ids, _ = beam_search_tokens(
        captioner.step_fn(encoded), beam_size=beam_size, max_tokens=max_len
    )
    total = _sequence_loglik(captioner, encoded, ids)
    return captioner._candidate(ids, total)


def greedy_caption(
    captioner: Captioner, audio: Waveform | FeatureSequence | EncodedAudio, max_len: int = 24
) -> Candidate:
    return beam_search(captioner, audio, beam_size=1, max_len=max_len)


def _sequence_loglik(captioner: Captioner, encoded: EncodedAudio, ids: list[int]) -> float:
    """Sum of log p over everything after BOS, one teacher-forced pass."""
    inputs = torch.tensor(ids[:-1], dtype=torch.long)
    with torch.no_grad():
        logits = captioner.decoder(encoded.memory, inputs)
    logp = log_softmax(logits.numpy(), axis=-1)
    targets = ids[1:]
    return float(sum(logp[n, tok] for n, tok in enumerate(targets)))


def decoder_score(
    captioner: Captioner,
    audio: Waveform | FeatureSequence | EncodedAudio,
    caption: CaptionText | str | TokenSequence,
    normalize: bool = True,
) -> float:
    """Caption log-likelihood under the model, per-token by default.

    Raw mode (``normalize=False``) returns the plain sum, the exact negative of
    the caption's NLL.
    """
    encoded = _resolve(captioner, audio)
    if isinstance(caption, TokenSequence):
        tokens = caption
    else:
        text = caption.text if isinstance(caption, CaptionText) else caption
        if not text.strip():
            raise ValueError("cannot score an empty caption")
        tokens = captioner.tokenizer.encode(text)
    ids = list(tokens.ids)
    if len(ids) < 2:
        raise ValueError("cannot score an empty token sequence")
    total = _sequence_loglik(captioner, encoded, ids)
    return total / (len(ids) - 1) if normalize else total
