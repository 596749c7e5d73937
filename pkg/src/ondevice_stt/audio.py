"""Log-mel feature extraction, Gaussian noise augmentation and WAV I/O.

Audio is 16 kHz mono. Frames are 512 samples (32 ms) with a hop of 256
samples (16 ms); each frame is Hann windowed, transformed with a 512-point
real FFT and projected onto 80 triangular mel filters spanning 0-8000 Hz.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import BadAudio, SilentSignal, TooShort

SAMPLE_RATE = 16000
FRAME_LENGTH = 512
HOP_LENGTH = 256
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise BadAudio(f"sample rate {self.sample_rate} Hz is not supported (need {SAMPLE_RATE})")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise BadAudio(f"expected mono samples, got array of shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise BadAudio("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


def num_frames(num_samples: int) -> int:
    if num_samples < FRAME_LENGTH:
        return 0
    return (num_samples - FRAME_LENGTH) // HOP_LENGTH + 1


def frame_signal(audio: AudioBuffer) -> np.ndarray:
    """Split audio into overlapping 512-sample frames, shape ``(T, 512)``.

    Frame ``t`` starts at sample ``256 * t``; a trailing partial window is
    dropped.
    """
    n = len(audio)
    if n < FRAME_LENGTH:
        raise TooShort(f"audio has {n} samples, need at least {FRAME_LENGTH}")
    windows = np.lib.stride_tricks.sliding_window_view(audio.samples, FRAME_LENGTH)
    return windows[::HOP_LENGTH][: num_frames(n)].copy()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Return the ``n_mels + 2`` filter edge frequencies in Hz.

    Filter ``m`` rises from edge ``m`` to its center at edge ``m + 1`` and
    falls back to zero at edge ``m + 2``.
    """
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular HTK-style filterbank of shape ``(n_fft // 2 + 1, n_mels)``."""
    edges = mel_band_edges(n_mels, 0.0, sample_rate / 2)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lo) / (ctr - lo)
    falling = (hi - freqs[:, None]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def log_mel(audio: AudioBuffer) -> np.ndarray:
    """Compute the ``(T, 80)`` natural-log mel spectrogram of ``audio``."""
    frames = frame_signal(audio)
    window = np.hanning(FRAME_LENGTH + 1)[:-1]  # periodic Hann
    spectrum = np.fft.rfft(frames * window, n=N_FFT, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    return np.log(power @ mel_filterbank() + LOG_FLOOR)


def standardize(features: np.ndarray) -> np.ndarray:
    """Shift and scale one utterance's features to zero mean and unit variance."""
    features = np.asarray(features)
    std = features.std()
    return (features - features.mean()) / (std if std > 0 else 1.0)


def augment_noise(audio: AudioBuffer, snr_db: float, seed: int) -> AudioBuffer:
    """Add white Gaussian noise at ``snr_db`` relative to the signal power.

    The drawn noise is rescaled so its realized power hits the target
    exactly. ``snr_db = inf`` returns the input unchanged.
    """
    p_signal = float(np.mean(audio.samples**2))
    if p_signal == 0.0:
        raise SilentSignal("cannot set an SNR on a silent signal")
    if math.isinf(snr_db) and snr_db > 0:
        return audio
    noise = np.random.default_rng(seed).standard_normal(len(audio))
    target = p_signal / 10.0 ** (snr_db / 10.0)
    noise *= math.sqrt(target / np.mean(noise**2))
    return AudioBuffer(audio.samples + noise, audio.sample_rate)


def read_wav(path) -> AudioBuffer:
    """Read a 16 kHz mono PCM16 WAV file into an :class:`AudioBuffer`."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if channels != 1:
                raise BadAudio(f"{path}: {channels} channels, need mono")
            if width != 2:
                raise BadAudio(f"{path}: sample width {8 * width} bits, need PCM16")
            if rate != SAMPLE_RATE:
                raise BadAudio(f"{path}: sample rate {rate} Hz, need {SAMPLE_RATE}")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise BadAudio(f"{path}: not a PCM WAV file ({exc})") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())
