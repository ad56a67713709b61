"""Dataset ingestion: caption/waveform types, WAV reading, and manifest loading.

The on-disk corpus layout is a directory of 16-bit PCM WAVE files plus a CSV
manifest with columns ``id, audio_path, caption_1 .. caption_k``. All audio is
resampled to 16 kHz mono at load time.
"""

from __future__ import annotations

import csv
import logging
import math
import re
import wave
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

TARGET_SAMPLE_RATE = 16000

_NORMALIZE_RE = re.compile(r"[^a-z0-9' ]+")
_SPACE_RE = re.compile(r"\s+")


def normalize_caption(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    text = text.lower()
    text = _NORMALIZE_RE.sub(" ", text)
    return _SPACE_RE.sub(" ", text).strip()


class CaptionSource(str, Enum):
    HUMAN = "human"
    MIXUP = "mixup"
    GENERATED = "generated"


MIXUP_WORD_LIMIT = 25


@dataclass(frozen=True)
class CaptionText:
    """A normalized caption. Raises on empty text or over-long mixup captions."""

    text: str
    source: CaptionSource = CaptionSource.HUMAN

    def __post_init__(self):
        normalized = normalize_caption(self.text)
        if not normalized:
            raise ValueError("caption is empty after normalization")
        object.__setattr__(self, "text", normalized)
        if self.source == CaptionSource.MIXUP and self.word_count > MIXUP_WORD_LIMIT:
            raise ValueError(
                f"mixup caption has {self.word_count} words "
                f"(limit {MIXUP_WORD_LIMIT}): {normalized!r}"
            )

    @property
    def words(self) -> list[str]:
        return self.text.split()

    @property
    def word_count(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class TokenSequence:
    """Integer token ids framed by BOS/EOS markers."""

    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = TARGET_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite amplitudes")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.samples))))


@dataclass
class AudioCaptionPair:
    id: str
    waveform: Waveform
    captions: list[CaptionText]

    def __post_init__(self):
        if not self.captions:
            raise ValueError(f"pair {self.id!r} has no captions")


class SplitName(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    EVALUATION = "evaluation"


@dataclass
class DatasetSplit:
    name: SplitName
    pairs: list[AudioCaptionPair] = field(default_factory=list)

    def __post_init__(self):
        self.name = SplitName(self.name)
        ids = [p.id for p in self.pairs]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate pair ids in split {self.name.value}: {dupes}")

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def ids(self) -> set[str]:
        return {p.id for p in self.pairs}


def assert_splits_disjoint(*splits: DatasetSplit) -> None:
    seen: dict[str, str] = {}
    for split in splits:
        for pair_id in split.ids():
            if pair_id in seen:
                raise ValueError(
                    f"pair id {pair_id!r} appears in both "
                    f"{seen[pair_id]!r} and {split.name.value!r}"
                )
            seen[pair_id] = split.name.value


def read_wav(path: str | Path) -> Waveform:
    """Read a RIFF/WAVE PCM 16-bit file, downmix to mono, resample to 16 kHz."""
    path = Path(path)
    with wave.open(str(path), "rb") as wf:
        n_channels = wf.getnchannels()
        sample_width = wf.getsampwidth()
        sample_rate = wf.getframerate()
        n_frames = wf.getnframes()
        raw = wf.readframes(n_frames)
    if sample_width != 2:
        raise ValueError(f"{path}: only 16-bit PCM WAVE is supported, got width {sample_width}")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    if sample_rate != TARGET_SAMPLE_RATE and data.size:
        g = math.gcd(TARGET_SAMPLE_RATE, sample_rate)
        data = resample_poly(data, TARGET_SAMPLE_RATE // g, sample_rate // g)
        data = np.clip(data, -1.0, 1.0)
    return Waveform(samples=data, sample_rate=TARGET_SAMPLE_RATE)


def write_wav(path: str | Path, waveform: Waveform) -> None:
    """Write a mono 16-bit PCM WAVE file."""
    samples = np.clip(waveform.samples, -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(pcm.tobytes())


class ManifestError(ValueError):
    pass


def load_dataset(
    root_path: str | Path,
    manifest: str | Path,
    name: str | SplitName = SplitName.TRAIN,
) -> DatasetSplit:
    """Load a split from a CSV manifest of (id, audio_path, caption_1..caption_k).

    Audio paths are resolved relative to ``root_path``. Rows referencing missing
    files or rows without captions are hard errors; zero-length audio files are
    skipped with a warning. Pairs are returned ordered by id.
    """
    root = Path(root_path)
    manifest = Path(manifest)
    if not manifest.is_file():
        raise ManifestError(f"manifest not found: {manifest}")

    pairs: list[AudioCaptionPair] = []
    with manifest.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{manifest}: empty manifest (header row required)")
        if len(header) < 3 or header[0] != "id" or header[1] != "audio_path":
            raise ManifestError(
                f"{manifest}: header must start with 'id,audio_path,caption_1', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 3:
                raise ManifestError(f"{manifest}:{lineno}: expected >=3 columns, got {len(row)}")
            pair_id, audio_rel = row[0].strip(), row[1].strip()
            if not pair_id or not audio_rel:
                raise ManifestError(f"{manifest}:{lineno}: empty id or audio_path")
            caption_cells = [c.strip() for c in row[2:] if c.strip()]
            if not caption_cells:
                raise ManifestError(f"{manifest}:{lineno}: row has no captions")
            audio_path = root / audio_rel
            if not audio_path.is_file():
                raise ManifestError(
                    f"{manifest}:{lineno}: audio file not found for id {pair_id!r}: {audio_path}"
                )
            try:
                captions = [CaptionText(c) for c in caption_cells]
            except ValueError as exc:
                raise ManifestError(f"{manifest}:{lineno}: {exc}") from exc
            waveform = read_wav(audio_path)
            if waveform.samples.size == 0:
                logger.warning(
                    "%s:%d: skipping zero-length audio for id %r", manifest, lineno, pair_id
                )
                continue
            pairs.append(AudioCaptionPair(id=pair_id, waveform=waveform, captions=captions))

    pairs.sort(key=lambda p: p.id)
    return DatasetSplit(name=SplitName(name), pairs=pairs)
