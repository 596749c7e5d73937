"""Synthetic speaker corpus.

Every symbol is rendered as a two-tone chord with a raised-cosine envelope,
so a transcript is recoverable from the audio by construction. Spaces are
short pauses. A "voice" perturbs the rendering deterministically: a global
frequency shift, a speaking rate, a per-symbol frequency offset (its
accent) and a balance between the low and high tone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, write_wav
from .dataset import write_manifest
from .text import SYMBOLS

VOCABULARY = (
    "ladies and gentlemen welcome aboard this flight please fasten your seat belt "
    "the captain has turned on the sign keep your seatbelt fastened while seated "
    "we will be landing shortly return seats to the upright position and stow "
    "tray tables cabin crew prepare for takeoff smoking is not permitted on board "
    "in case of emergency oxygen masks will drop from the panel above you "
    "life vests are located under your seat exits are at the front and rear "
    "thank you for flying with us we hope you enjoy the journey don't leave "
    "personal items behind electronic devices must be switched off now it's time"
).split()

LOW_TONES = (420.0, 560.0, 720.0, 910.0, 1150.0)
HIGH_TONES = (1500.0, 1880.0, 2350.0, 2930.0, 3650.0, 4500.0)
_LETTERS = [c for c in SYMBOLS if c != " "]
TONE_TABLE = {
    c: (LOW_TONES[i % len(LOW_TONES)], HIGH_TONES[i // len(LOW_TONES)]) for i, c in enumerate(_LETTERS)
}


@dataclass(frozen=True)
class Voice:
    index: int
    shift: float
    rate: float
    balance: float
    accent: dict

    @classmethod
    def make(cls, index: int, seed: int, accent_strength: float = 0.10) -> "Voice":
        rng = np.random.default_rng([seed, index])
        accent = {c: tuple(rng.uniform(-accent_strength, accent_strength, 2)) for c in _LETTERS}
        return cls(
            index=index,
            shift=float(rng.uniform(0.92, 1.08)),
            rate=float(rng.uniform(0.9, 1.1)),
            balance=float(rng.uniform(0.35, 0.65)),
            accent=accent,
        )


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = edge
        env[n - ramp:] = edge[::-1]
    return env


def render(text: str, voice: Voice, rng: np.random.Generator, char_ms: float = 52.0,
           noise_floor: float = 1e-3) -> AudioBuffer:
    """Render ``text`` in ``voice``; ``rng`` drives duration, level and dither jitter."""
    sr = SAMPLE_RATE
    pieces = [np.zeros(int(0.1 * sr))]
    level = rng.uniform(0.2, 0.4)
    for ch in text:
        n = max(int(sr * char_ms * voice.rate * rng.uniform(0.85, 1.15) / 1000.0), 64)
        if ch == " ":
            pieces.append(np.zeros(int(0.9 * n)))
            continue
        lo, hi = TONE_TABLE[ch]
        d_lo, d_hi = voice.accent[ch]
        t = np.arange(n) / sr
        f_lo = lo * voice.shift * (1.0 + d_lo)
        f_hi = hi * voice.shift * (1.0 + d_hi)
        phase = rng.uniform(0, 2 * np.pi, 2)
        tone = (1.0 - voice.balance) * np.sin(2 * np.pi * f_lo * t + phase[0])
        tone += voice.balance * np.sin(2 * np.pi * f_hi * t + phase[1])
        pieces.append(level * tone * _envelope(n, int(0.01 * sr)))
    pieces.append(np.zeros(int(0.1 * sr)))
    samples = np.concatenate(pieces)
    samples += noise_floor * rng.standard_normal(len(samples))
    return AudioBuffer(samples)


def random_sentence(rng: np.random.Generator, words: tuple) -> str:
    n = int(rng.integers(words[0], words[1] + 1))
    return " ".join(VOCABULARY[i] for i in rng.integers(0, len(VOCABULARY), n))


def synthesize_corpus(out_dir, voices: int, utterances_per_voice: int, seed: int = 0,
                      words: tuple = (18, 27), char_ms: float = 52.0) -> list:
    """Write WAVs under ``out_dir/audio`` and a ``manifest.jsonl``; return the rows.

    Voices are numbered from 1. Defaults give utterances of about 7 s.
    """
    if voices < 1:
        raise ValueError("voices must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    for v in range(1, voices + 1):
        voice = Voice.make(v, seed)
        rng = np.random.default_rng([seed, v, 1])
        for i in range(utterances_per_voice):
            text = random_sentence(rng, words)
            audio = render(text, voice, rng, char_ms)
            rel = f"audio/v{v:02d}_{i:04d}.wav"
            write_wav(out_dir / rel, audio)
            rows.append({"id": f"v{v:02d}_{i:04d}", "audio": rel, "text": text,
                         "speaker": f"v{v:02d}", "dur_s": round(audio.duration_s, 4)})
    write_manifest(out_dir / "manifest.jsonl", rows)
    return rows
