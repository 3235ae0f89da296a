"""Log-mel features, SpecAugment masking and channel averaging."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .synth import MultiChannelAudio

MELT_MAGIC = b"MELT"
MELT_VERSION = 1


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    win_samples: int = 1024
    hop_samples: int = 320
    mel_bands: int = 64
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10


@dataclass(frozen=True)
class SpecAugmentConfig:
    time_masks: int = 4
    time_width: int = 64
    freq_masks: int = 2
    freq_width: int = 8


@dataclass
class MelTensor:
    data: np.ndarray  # (C, F, T) float32
    sample_rate_hz: int = 16000
    hop_samples: int = 320

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"mel data must be (C, F, T) with every axis >= 1, got {self.data.shape}")

    @property
    def mel_bands(self) -> int:
        return self.data.shape[1]

    @property
    def frames(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: FrontendConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.mel_bands + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (mel_bands, win_samples // 2 + 1), unit peak."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.mel_bands + 2))
    freqs = np.arange(cfg.win_samples // 2 + 1) * cfg.sample_rate_hz / cfg.win_samples
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, cfg: FrontendConfig) -> int:
    return 1 + (n_samples - cfg.win_samples) // cfg.hop_samples


def mel_spectrogram(audio: MultiChannelAudio | np.ndarray, cfg: FrontendConfig = FrontendConfig()) -> MelTensor:
    """Natural-log mel power spectrogram of every channel (no centering/padding)."""
    if isinstance(audio, MultiChannelAudio):
        if audio.sample_rate_hz != cfg.sample_rate_hz:
            raise ValueError(f"audio at {audio.sample_rate_hz} Hz, frontend expects {cfg.sample_rate_hz} Hz")
        x = audio.channels
    else:
        x = np.atleast_2d(np.asarray(audio, dtype=np.float64))
    n = x.shape[-1]
    if n < cfg.win_samples:
        raise ValueError(f"audio too short: {n} samples < window of {cfg.win_samples}")
    n_frames = frame_count(n, cfg)
    idx = np.arange(cfg.win_samples)[None, :] + cfg.hop_samples * np.arange(n_frames)[:, None]
    window = np.hanning(cfg.win_samples + 1)[:-1]  # periodic Hann
    frames = x[:, idx] * window  # (C, T, win)
    power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
    mel = np.einsum("ctk,fk->cft", power, mel_filterbank(cfg))
    return MelTensor(np.log(mel + cfg.log_floor), cfg.sample_rate_hz, cfg.hop_samples)


def mask_positions(frames: int, bands: int, rng_seed: int, cfg: SpecAugmentConfig = SpecAugmentConfig()):
    """Start/stop index pairs of the time and frequency strips, drawn from ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)

    def strips(length, count, width):
        width = min(width, length)
        starts = rng.integers(0, length - width + 1, size=count)
        return [(int(s), int(s) + width) for s in starts]

    return strips(frames, cfg.time_masks, cfg.time_width), strips(bands, cfg.freq_masks, cfg.freq_width)


def spec_augment(mel: MelTensor, rng_seed: int, cfg: SpecAugmentConfig = SpecAugmentConfig()) -> MelTensor:
    """Fill time and frequency strips with each channel's mean; same strips on every channel."""
    time_strips, freq_strips = mask_positions(mel.frames, mel.mel_bands, rng_seed, cfg)
    out = mel.data.copy()
    fill = mel.data.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)
    for c in range(out.shape[0]):
        for a, b in time_strips:
            out[c, :, a:b] = fill[c]
        for a, b in freq_strips:
            out[c, a:b, :] = fill[c]
    return MelTensor(out, mel.sample_rate_hz, mel.hop_samples)


def average_channels(mel: MelTensor) -> MelTensor:
    """Mean over microphones of the log-mel tensors.

    Accumulates in float64 so that identical channels average back to the
    exact float32 input.
    """
    avg = mel.data.astype(np.float64).mean(axis=0, keepdims=True)
    return MelTensor(avg.astype(np.float32), mel.sample_rate_hz, mel.hop_samples)


def write_melt(path, mel: MelTensor) -> None:
    c, f, t = mel.data.shape
    header = MELT_MAGIC + struct.pack("<IIII", MELT_VERSION, c, f, t)
    Path(path).write_bytes(header + mel.data.astype("<f4").tobytes())


def read_melt(path, sample_rate_hz: int = 16000, hop_samples: int = 320) -> MelTensor:
    data = Path(path).read_bytes()
    if data[:4] != MELT_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}, expected {MELT_MAGIC!r}")
    version, c, f, t = struct.unpack_from("<IIII", data, 4)
    if version != MELT_VERSION:
        raise ValueError(f"{path}: unsupported MELT version {version}")
    if len(data) != 20 + 4 * c * f * t:
        raise ValueError(f"{path}: payload size does not match {c}x{f}x{t}")
    arr = np.frombuffer(data, dtype="<f4", offset=20).reshape(c, f, t).astype(np.float32)
    return MelTensor(arr, sample_rate_hz, hop_samples)
