"""Training-pair mix-up: RMS-matched waveform sums and LLM-merged captions.

Every draw samples two distinct pairs, a relative gain in [-5, +5] dB, and a
merged caption; all outcomes (accepted and rejected) are appended to a JSONL
log from which the exact audio mixtures can be replayed deterministically.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import AudioCaptionPair, CaptionText, DatasetSplit, Waveform
from .fluency import FluencyDetector, RuleBasedFluencyDetector
from .llm import CaptionMixClient, LlmClientError, OverLengthMixupError, prompt_hash

logger = logging.getLogger(__name__)

GAIN_RANGE_DB = 5.0
MIXUP_LOG_FORMAT = "audiocap-mixup"
MIXUP_LOG_VERSION = 1


@dataclass
class MixupRecord:
    source_id_1: str
    source_id_2: str
    gain_db: float
    mixed_caption: str
    provider: str
    accepted: bool
    prompt_hash: str

    def __post_init__(self):
        if abs(self.gain_db) > GAIN_RANGE_DB:
            raise ValueError(f"|gain_db| must be <= {GAIN_RANGE_DB}, got {self.gain_db}")
        if self.source_id_1 == self.source_id_2:
            raise ValueError(f"mix-up must combine two different clips, got {self.source_id_1!r} twice")


def sample_mix_gain(rng: np.random.Generator) -> float:
    """Relative component gain, uniform over [-5, +5] dB."""
    return float(rng.uniform(-GAIN_RANGE_DB, GAIN_RANGE_DB))


def mix_waveforms(x1: Waveform, x2: Waveform, gain_db: float, offset: int = 0) -> Waveform:
    """Sum two clips with x2 scaled so its RMS sits ``gain_db`` dB relative to x1.

    The shorter clip is zero-padded starting at ``offset`` inside the longer
    one; the sum is peak-rescaled only if it clips.
    """
    if x1.sample_rate != x2.sample_rate:
        raise ValueError(f"sample-rate mismatch: {x1.sample_rate} vs {x2.sample_rate}")
    rms1, rms2 = x1.rms(), x2.rms()
    if rms1 == 0.0 or rms2 == 0.0:
        raise ValueError("cannot mix silent audio (zero RMS)")
    gain = (rms1 / rms2) * 10.0 ** (gain_db / 20.0)
    a, b = x1.samples, gain * x2.samples
    if a.size < b.size:
        a, b = b, a
    max_offset = a.size - b.size
    if not 0 <= offset <= max_offset:
        raise ValueError(f"offset {offset} outside [0, {max_offset}]")
    mixed = a.copy()
    mixed[offset : offset + b.size] += b
    peak = np.max(np.abs(mixed))
    if peak > 1.0:
        mixed /= peak
    return Waveform(samples=mixed, sample_rate=x1.sample_rate)


def mix_offset(seed: int, source_id_1: str, source_id_2: str, gain_db: float, max_offset: int) -> int:
    """Deterministic pad offset for a record, derived from the corpus seed.

    Replaying a JSONL log with the same seed and source audio reproduces the
    exact same mixtures without persisting the offset itself.
    """
    if max_offset <= 0:
        return 0
    key = f"{seed}:{source_id_1}:{source_id_2}:{gain_db!r}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") % (max_offset + 1)


def filter_disfluent(
    captions: list[CaptionText], detector: FluencyDetector | None = None
) -> list[CaptionText]:
    """Keep only captions the detector passes; the rejection count is logged."""
    detector = detector or RuleBasedFluencyDetector()
    kept = [c for c in captions if detector.is_fluent(c)]
    rejected = len(captions) - len(kept)
    if rejected:
        logger.info("disfluency filter rejected %d of %d captions", rejected, len(captions))
    return kept


def _mixed_pair(
    index: int,
    pair_1: AudioCaptionPair,
    pair_2: AudioCaptionPair,
    record: MixupRecord,
    seed: int,
) -> AudioCaptionPair:
    max_offset = abs(pair_1.waveform.samples.size - pair_2.waveform.samples.size)
    offset = mix_offset(seed, record.source_id_1, record.source_id_2, record.gain_db, max_offset)
    waveform = mix_waveforms(pair_1.waveform, pair_2.waveform, record.gain_db, offset=offset)
    caption = CaptionText(record.mixed_caption, source="mixup")
    return AudioCaptionPair(
        id=f"mixup{index:05d}_{record.source_id_1}+{record.source_id_2}",
        waveform=waveform,
        captions=[caption],
    )


def build_mixup_corpus(
    split: DatasetSplit,
    n: int,
    client: CaptionMixClient,
    seed: int,
    detector: FluencyDetector | None = None,
    log_path: str | Path | None = None,
    max_attempts_per_accept: int = 20,
) -> tuple[DatasetSplit, list[MixupRecord]]:
    """Draw mix-up pairs until ``n`` are accepted; returns the augmented split.

    Pairs are sampled uniformly over distinct ids, one caption uniformly per
    source. Rejections (disfluent or over-length captions) are logged too. If
    the client gives out, a partial corpus is returned with a warning.
    """
    if len(split) < 2:
        raise ValueError("mix-up needs a split with at least 2 pairs")
    detector = detector or RuleBasedFluencyDetector()
    rng = np.random.default_rng(seed)
    records: list[MixupRecord] = []
    accepted_pairs: list[AudioCaptionPair] = []
    attempts_budget = max(n * max_attempts_per_accept, 50)
    attempts = 0
    while len(accepted_pairs) < n and attempts < attempts_budget:
        attempts += 1
        i, j = rng.choice(len(split), size=2, replace=False)
        pair_1, pair_2 = split.pairs[int(i)], split.pairs[int(j)]
        caption_1 = pair_1.captions[int(rng.integers(len(pair_1.captions)))]
        caption_2 = pair_2.captions[int(rng.integers(len(pair_2.captions)))]
        gain_db = sample_mix_gain(rng)
        phash = prompt_hash(client.fill_prompt(caption_1, caption_2))
        try:
            mixed = client.mix(caption_1, caption_2)
        except OverLengthMixupError as exc:
            records.append(
                MixupRecord(pair_1.id, pair_2.id, gain_db, str(exc), client.provider, False, phash)
            )
            continue
        except LlmClientError as exc:
            logger.warning(
                "mix-up client exhausted after %d accepted of %d requested: %s",
                len(accepted_pairs), n, exc,
            )
            break
        if not detector.is_fluent(mixed):
            records.append(
                MixupRecord(pair_1.id, pair_2.id, gain_db, mixed.text, client.provider, False, phash)
            )
            continue
        record = MixupRecord(pair_1.id, pair_2.id, gain_db, mixed.text, client.provider, True, phash)
        records.append(record)
        accepted_pairs.append(_mixed_pair(len(accepted_pairs), pair_1, pair_2, record, seed))
    if len(accepted_pairs) < n:
        logger.warning("built partial mix-up corpus: %d of %d accepted", len(accepted_pairs), n)

    if log_path is not None:
        write_mixup_log(log_path, records, seed=seed, provider=client.provider)

    augmented = DatasetSplit(name=split.name, pairs=list(split.pairs) + accepted_pairs)
    return augmented, records


def write_mixup_log(
    path: str | Path, records: list[MixupRecord], seed: int, provider: str
) -> None:
    header = {
        "format": MIXUP_LOG_FORMAT,
        "version": MIXUP_LOG_VERSION,
        "seed": seed,
        "provider": provider,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(asdict(r), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mixup_log(path: str | Path) -> tuple[dict, list[MixupRecord]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty mix-up log")
    header = json.loads(lines[0])
    if header.get("format") != MIXUP_LOG_FORMAT:
        raise ValueError(f"{path}: not a mix-up log (format {header.get('format')!r})")
    records = [MixupRecord(**json.loads(line)) for line in lines[1:] if line.strip()]
    return header, records


def load_mixup_corpus(path: str | Path, base_split: DatasetSplit) -> DatasetSplit:
    """Rebuild the augmented split from a JSONL log and the original audio."""
    header, records = read_mixup_log(path)
    by_id = {pair.id: pair for pair in base_split}
    pairs = list(base_split.pairs)
    index = 0
    for record in records:
        if not record.accepted:
            continue
        try:
            pair_1, pair_2 = by_id[record.source_id_1], by_id[record.source_id_2]
        except KeyError as exc:
            raise ValueError(f"{path}: unknown source id {exc} in mix-up log") from exc
        pairs.append(_mixed_pair(index, pair_1, pair_2, record, seed=header["seed"]))
        index += 1
    return DatasetSplit(name=base_split.name, pairs=pairs)
