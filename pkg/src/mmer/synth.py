"""Reverberant multi-channel signal synthesis: RIR convolution, AR(1) noise, SNR mixing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.signal

from .acoustics import RirSet
from .wavio import read_wav, write_wav

DEFAULT_NOISE_COEFF = 0.9


@dataclass
class AudioSignal:
    sample_rate_hz: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")


@dataclass
class MultiChannelAudio:
    sample_rate_hz: int
    channels: np.ndarray  # (C, n)

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        if self.channels.shape[0] < 1:
            raise ValueError("need at least one channel")

    @property
    def channel_count(self) -> int:
        return self.channels.shape[0]


def convolve_rir(clean: AudioSignal, rirs: RirSet) -> MultiChannelAudio:
    """Full linear convolution of the clean source with each microphone's RIR."""
    if clean.sample_rate_hz != rirs.sample_rate_hz:
        raise ValueError(
            f"sample-rate mismatch: audio {clean.sample_rate_hz} Hz vs RIR {rirs.sample_rate_hz} Hz"
        )
    out = scipy.signal.fftconvolve(clean.samples[None, :], rirs.rirs, axes=1)
    return MultiChannelAudio(clean.sample_rate_hz, out)


def ar1_noise(n_samples: int, coeff: float = DEFAULT_NOISE_COEFF, rng_seed: int = 0, sample_rate_hz: int = 16000) -> AudioSignal:
    """White Gaussian noise through the all-pole filter ``y[n] = coeff*y[n-1] + x[n]``."""
    if n_samples <= 0:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if not -1.0 < coeff < 1.0:
        raise ValueError(f"AR(1) coefficient {coeff} is unstable (|coeff| must be < 1)")
    white = np.random.default_rng(rng_seed).standard_normal(n_samples)
    return AudioSignal(sample_rate_hz, scipy.signal.lfilter([1.0], [1.0, -coeff], white))


def noise_gain(signal_power: float, noise_power: float, snr_db: float) -> float:
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(
    reverberant: MultiChannelAudio,
    snr_db: float = 20.0,
    noise_coeff: float = DEFAULT_NOISE_COEFF,
    rng_seed: int = 0,
) -> MultiChannelAudio:
    """Add independent AR(1) noise to every channel at exactly ``snr_db``.

    SNR is measured per channel over the whole utterance.
    """
    seeds = np.random.SeedSequence(rng_seed).spawn(reverberant.channel_count)
    out = np.empty_like(reverberant.channels)
    for i, (x, ss) in enumerate(zip(reverberant.channels, seeds)):
        p_sig = float(np.mean(x**2))
        if p_sig == 0.0:
            raise ValueError(f"channel {i} has zero power")
        seed = int(ss.generate_state(1, np.uint64)[0])
        noise = ar1_noise(x.size, noise_coeff, seed).samples
        out[i] = x + noise_gain(p_sig, float(np.mean(noise**2)), snr_db) * noise
    return MultiChannelAudio(reverberant.sample_rate_hz, out)


def measured_snr_db(clean: np.ndarray, mixed: np.ndarray) -> float:
    noise = mixed - clean
    return 10.0 * math.log10(np.mean(clean**2) / np.mean(noise**2))


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Polyphase windowed-sinc resampling along the last axis."""
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64)
    ratio = Fraction(rate_out, rate_in)
    return scipy.signal.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)


def load_audio(path, sample_rate_hz: int | None = None) -> MultiChannelAudio:
    """Read a WAV file, resampling to ``sample_rate_hz`` when given."""
    x, rate = read_wav(path)
    if sample_rate_hz is not None and rate != sample_rate_hz:
        x = resample(x, rate, sample_rate_hz)
        rate = sample_rate_hz
    return MultiChannelAudio(rate, x)


def save_audio(path, audio: MultiChannelAudio | AudioSignal, subtype: str = "float32") -> None:
    data = audio.channels if isinstance(audio, MultiChannelAudio) else audio.samples
    write_wav(path, data, audio.sample_rate_hz, subtype)
