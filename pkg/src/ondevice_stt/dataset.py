"""Featurized utterances, manifests and batch padding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import log_mel, read_wav, standardize
from .text import encode, normalize_transcript


@dataclass
class Sample:
    id: str
    features: np.ndarray
    text: str
    label: np.ndarray = field(default=None)
    speaker: str = ""

    def __post_init__(self):
        if self.label is None:
            self.label = encode(self.text)


def read_manifest(path) -> list:
    """Read a JSON-lines manifest; relative audio paths resolve against its directory."""
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                audio = Path(row["audio"])
                row["audio"] = str(audio if audio.is_absolute() else path.parent / audio)
                rows.append(row)
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def featurize(audio) -> np.ndarray:
    """Model input for one utterance: standardized log-mel frames, float32."""
    return standardize(log_mel(audio)).astype(np.float32)


def load_samples(rows) -> list:
    out = []
    for i, row in enumerate(rows):
        text = normalize_transcript(row["text"])
        feats = featurize(read_wav(row["audio"]))
        out.append(Sample(str(row.get("id", i)), feats, text, speaker=str(row.get("speaker", ""))))
    return out


def pad_batch(samples) -> tuple:
    """Stack features into a zero-padded ``(B, T, F)`` array plus lengths."""
    lengths = np.array([s.features.shape[0] for s in samples], dtype=np.int64)
    width = samples[0].features.shape[1]
    batch = np.zeros((len(samples), int(lengths.max()), width), dtype=samples[0].features.dtype)
    for i, s in enumerate(samples):
        batch[i, : lengths[i]] = s.features
    return batch, lengths
