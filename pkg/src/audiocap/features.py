"""Frame-level audio features: log-mel spectrogram plus a frozen conv stack.

The extractor stands in for a large pretrained audio encoder: it is randomly
(or explicitly) initialized once and then frozen, emitting ~50 frames/s from a
10 ms-hop log-mel front end. Precomputed features can also be read from a
binary tensor file.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import Waveform

HOP_SECONDS = 0.010
WIN_SECONDS = 0.025
N_FFT = 512
LOG_FLOOR = 1e-10

FEATURE_FILE_MAGIC = b"ACFEAT01"


@dataclass
class FeatureSequence:
    """Time-major (T, D) feature matrix with its frame rate in Hz."""

    frames: torch.Tensor
    frame_rate: float

    def __post_init__(self):
        self.frames = torch.as_tensor(self.frames, dtype=torch.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"expected (T>=1, D) frames, got {tuple(self.frames.shape)}")
        if not torch.all(torch.isfinite(self.frames)):
            raise ValueError("feature frames contain non-finite values")
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def dim(self) -> int:
        return int(self.frames.shape[1])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, n_fft: int = N_FFT, sample_rate: int = 16000, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    grid = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, fft_freqs.size), dtype=np.float64)
    for m in range(n_mels):
        lower, center, upper = grid[m], grid[m + 1], grid[m + 2]
        rising = (fft_freqs - lower) / (center - lower)
        falling = (upper - fft_freqs) / (upper - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def log_mel_spectrogram(waveform: Waveform, n_mels: int = 40) -> np.ndarray:
    """Log-mel features with a 10 ms hop, shape (T, n_mels). Power is floored
    so silent audio stays finite."""
    sr = waveform.sample_rate
    hop = int(round(HOP_SECONDS * sr))
    win = int(round(WIN_SECONDS * sr))
    x = waveform.samples
    if x.size < hop:
        raise ValueError(f"waveform of {x.size} samples is shorter than one hop ({hop})")
    pad = N_FFT // 2
    x = np.pad(x, (pad, pad), mode="reflect" if x.size > pad else "constant")
    n_frames = 1 + (waveform.samples.size // hop)
    window = np.hanning(win)
    fb = mel_filterbank(n_mels, N_FFT, sr)
    frames = np.zeros((n_frames, n_mels), dtype=np.float64)
    for t in range(n_frames):
        start = t * hop
        segment = x[start : start + win]
        if segment.size < win:
            segment = np.pad(segment, (0, win - segment.size))
        spectrum = np.fft.rfft(segment * window, n=N_FFT)
        power = np.abs(spectrum) ** 2
        frames[t] = np.log(np.maximum(fb @ power, LOG_FLOOR))
    return frames


class FrozenConvExtractor(nn.Module):
    """Small conv stack over log-mel frames, frozen after initialization.

    Stride 2 halves the 100 Hz mel frame rate to ~50 Hz.
    """

    def __init__(self, n_mels: int = 40, out_dim: int = 64, seed: int = 0):
        super().__init__()
        self.n_mels = n_mels
        self.out_dim = out_dim
        generator = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv1d(n_mels, out_dim, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(out_dim, out_dim, kernel_size=3, stride=1, padding=1)
        for conv in (self.conv1, self.conv2):
            nn.init.kaiming_uniform_(conv.weight, a=5**0.5, generator=generator)
            nn.init.uniform_(conv.bias, -0.1, 0.1, generator=generator)
        self.to(torch.float64)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        # mel: (T, n_mels) -> (ceil(T/2), out_dim)
        x = mel.T.unsqueeze(0)
        x = torch.nn.functional.gelu(self.conv1(x))
        x = torch.nn.functional.gelu(self.conv2(x))
        return x.squeeze(0).T

    def extract(self, waveform: Waveform, n_mels: int | None = None) -> FeatureSequence:
        mel = log_mel_spectrogram(waveform, n_mels or self.n_mels)
        with torch.no_grad():
            frames = self.forward(torch.from_numpy(mel))
        mel_rate = 1.0 / HOP_SECONDS
        return FeatureSequence(frames=frames, frame_rate=mel_rate / 2.0)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, param in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(param.detach().cpu().numpy().tobytes())
        return digest.hexdigest()


def write_feature_file(path: str | Path, features: FeatureSequence) -> None:
    """Binary tensor file: magic, frame_rate, (T, D) header, row-major float64."""
    frames = features.frames.detach().cpu().numpy().astype(np.float64)
    with open(path, "wb") as f:
        f.write(FEATURE_FILE_MAGIC)
        f.write(struct.pack("<dQQ", features.frame_rate, frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes(order="C"))


def read_feature_file(path: str | Path) -> FeatureSequence:
    with open(path, "rb") as f:
        magic = f.read(len(FEATURE_FILE_MAGIC))
        if magic != FEATURE_FILE_MAGIC:
            raise ValueError(f"{path}: not a feature file (bad magic {magic!r})")
        frame_rate, t, d = struct.unpack("<dQQ", f.read(8 * 3))
        data = np.frombuffer(f.read(t * d * 8), dtype=np.float64).reshape(t, d)
    return FeatureSequence(frames=torch.from_numpy(data.copy()), frame_rate=frame_rate)
